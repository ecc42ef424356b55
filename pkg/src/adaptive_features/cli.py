"""Command line runner: ``afl run | selftest | fem-scan | show-config-defaults``.

Configs are flat key=value files with [experiment], [truth], [flow] and
[fem] sections. Every key has a documented default; a run records the fully
resolved config in its manifest.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import json
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .analysis import SCHEMA_AGGREGATE, SCHEMA_ENERGY, aggregate_curves, write_rows_csv
from .diagonal_flows import ConservationDriftError, DivergenceError
from .experiments import DIAGONAL_MODELS, INDEX_MODELS, compare_seq_gd, run_seed
from .fem import DiagonalView, fem_at, fem_optimal
from .index_flows import CapMismatchError, StepSizeError
from .selftest import FAULTS, run_selftest
from .seq_model import InvalidSpecError, MemoryGuardError

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_MEMORY = 0, 2, 3, 4
MODELS = DIAGONAL_MODELS + INDEX_MODELS + ("compare-seq-gd", "fem-scan")
SCHEMA_FEM_SCAN = "fem-scan/v1"

DEFAULTS = {
    "experiment": {
        "model": "diag-sparse",
        "seeds": 4,
        "base_seed": 0,
        "threads": 1,
        "n": 200,
        "n_grid": "256,1024,4096",
    },
    "truth": {
        "d": 200,
        "s_star": 3,
        "floor": 0.5,
        "p": 1.0,
        "q": 2.0,
        "gamma": 2.0,
        "j_max": 1024,
        "allow_truncated_kernel": False,
        "r_max": 4,
        "r0": 1,
        "alpha": 2.0,
        "rank": 2,
        "sigma": 1.0,
    },
    "flow": {
        "alpha_init": 0.0,
        "t_star_sparse_c": 5.0,
        "t_star_diag_c": 1.0,
        "depth": 1,
        "b0_c": 1.0,
        "records": 50,
        "conservation_tol": 1e-6,
        "J": 0,
        "compare_J": 128,
        "window_frac": 0.1,
        "link_gamma": 0.5,
        "K": 0.0,
        "dt": 0.1,
        "t_end": 60.0,
        "record_every": 10,
    },
    "fem": {
        "weights": "0.9,0.5,0.1",
        "coeffs": "1.0,0,0.2",
        "eps2": 0.25,
    },
}

# model-specific overrides of the defaults above, kept small enough to run on a laptop
MODEL_DEFAULTS = {
    "diag-seq": {"n": 1024},
    "diag-deep": {"n": 1024, "gamma": 0.6, "allow_truncated_kernel": True},
    "diag-empirical": {"n": 1024},
    "sim-pop": {"d": 16, "n": 100000, "r_max": 4},
    "sim-seq": {"d": 8, "n": 100000, "r_max": 6},
    "mim-pop": {"d": 32, "n": 1000000, "r_max": 3},
    "mim-seq": {"d": 10, "n": 1000000, "r_max": 3, "t_end": 100.0},
}

SECTION_OF = {key: sec for sec, keys in DEFAULTS.items() for key in keys}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw):
    default = DEFAULTS[SECTION_OF[key]][key]
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
    return raw


def resolve_config(overrides: dict | None = None, model: str | None = None) -> dict:
    """Defaults, then model defaults, then overrides; flat key -> value."""
    overrides = dict(overrides or {})
    for key in overrides:
        if key not in SECTION_OF:
            raise ConfigError(f"unknown config key {key!r}")
    model = overrides.get("model", model or DEFAULTS["experiment"]["model"])
    if model not in MODELS:
        raise ConfigError(f"unknown model {model!r}; choose from {', '.join(MODELS)}")
    cfg = {key: DEFAULTS[sec][key] for key, sec in SECTION_OF.items()}
    cfg.update(MODEL_DEFAULTS.get(model, {}))
    cfg.update({k: _coerce(k, v) for k, v in overrides.items()})
    cfg["model"] = model
    return cfg


def parse_config(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    out = {}
    for sec in parser.sections():
        if sec not in DEFAULTS:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in parser.items(sec):
            if SECTION_OF.get(key) != sec:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            out[key] = _coerce(key, raw)
    return out


def format_config(cfg: dict) -> str:
    buf = io.StringIO()
    for sec, keys in DEFAULTS.items():
        buf.write(f"[{sec}]\n")
        for key in keys:
            v = cfg[key]
            buf.write(f"{key} = {repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else v}\n")
        buf.write("\n")
    return buf.getvalue()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(format_config(cfg).encode()).hexdigest()


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad integer list {text!r}") from None


def _float_list(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in str(text).split(",") if v.strip()])
    except ValueError:
        raise ConfigError(f"bad number list {text!r}") from None


def _versions() -> dict:
    return {"adaptive_features": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def _thread_count(cli_value) -> int:
    if cli_value is not None:
        return max(1, int(cli_value))
    env = os.environ.get("AFL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"AFL_THREADS must be an integer, got {env!r}") from None
    return None


def _seed_job(args):
    model, cfg, seed, path = args
    return run_seed(model, cfg, seed, path)


def fem_scan(cfg: dict, out: Path | None = None) -> tuple:
    weights, coeffs = _float_list(cfg["weights"]), _float_list(cfg["coeffs"])
    if len(weights) != len(coeffs):
        raise ConfigError("fem weights and coeffs must have equal length")
    try:
        view = DiagonalView(weights, coeffs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    eps2 = cfg["eps2"]
    best = fem_optimal(view, eps2)
    if out is not None:
        rows = []
        for delta in sorted(set(weights.tolist()) | {float("inf")}, reverse=True):
            rec = fem_at(view, delta, eps2)
            rows.append((delta, rec.e_proj, rec.e_v, rec.e_b, rec.total))
        write_rows_csv(rows, ("delta", "e_proj", "e_v", "e_b", "total"), SCHEMA_FEM_SCAN, out / "fem_scan.csv")
    return best.delta_star, best.e_star


def _run_compare(cfg: dict, seeds: list, out: Path) -> dict:
    rows, summary = [], {}
    for n in _int_list(cfg["n_grid"]):
        res = compare_seq_gd(n, seeds, J=cfg["compare_J"], p=cfg["p"], q=cfg["q"], gamma=cfg["gamma"],
                             records=cfg["records"], t_frac=cfg["window_frac"])
        for k, t in enumerate(res.times):
            rows.append((n, float(t), int(res.window[k]), res.d_pair[k], res.d_seq0[k], res.d_gd0[k]))
        summary[str(n)] = {"max_pair": res.max_pair, "separated": res.separated}
    write_rows_csv(rows, ("n", "t", "in_window", "d_seq_gd", "d_seq_0", "d_gd_0"), SCHEMA_ENERGY,
                   out / "energy_distance.csv")
    maxima = [v["max_pair"] for v in summary.values()]
    checks = {
        "separated": all(v["separated"] for v in summary.values()),
        "decreasing_in_n": bool(np.all(np.diff(maxima) < 0)),
    }
    return {"per_n": summary, "checks": checks, "hard_ok": True}


def _run_seeds(cfg: dict, seeds: list, out: Path, threads: int) -> dict:
    model = cfg["model"]
    traj_dir = out / "trajectories"
    traj_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(model, cfg, s, str(traj_dir / f"seed_{s}.csv")) for s in seeds]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_seed_job, jobs))
    else:
        results = [_seed_job(j) for j in jobs]
    lengths = {len(r.times) for r in results}
    if len(lengths) == 1:
        rows = aggregate_curves(results[0].times, np.stack([r.e_star for r in results]))
        write_rows_csv(rows, ("t", "median_e_star", "mean_e_star", "band_lo", "band_hi"), SCHEMA_AGGREGATE,
                       out / "fem_curve.csv")
    names = sorted({k for r in results for k in r.checks})
    checks = {k: all(r.checks.get(k, True) for r in results) for k in names}
    hard = [k for k in ("conservation", "feasibility") if k in checks]
    final = [float(r.e_star[-1]) for r in results]
    return {
        "checks": checks,
        "hard_ok": all(checks[k] for k in hard),
        "median_final_e_star": float(np.median(final)),
        "median_initial_e_star": float(np.median([float(r.e_star[0]) for r in results])),
        "per_seed": {str(r.seed): {k: (float(v) if v is not None else None) for k, v in r.extra.items()}
                     for r in results},
    }


def run(cfg: dict, out: Path, threads: int = 1) -> int:
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    seeds = list(range(cfg["base_seed"], cfg["base_seed"] + cfg["seeds"]))
    model = cfg["model"]
    if model == "fem-scan":
        delta, e = fem_scan(cfg, out)
        print(f"delta* = {delta:g}, E* = {e:g}")
        report = {"delta_star": delta, "e_star": e, "checks": {}, "hard_ok": True}
    elif model == "compare-seq-gd":
        report = _run_compare(cfg, seeds, out)
    else:
        report = _run_seeds(cfg, seeds, out, threads)
    manifest = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seeds": seeds,
        "versions": _versions(),
        "wall_time_s": round(time.perf_counter() - start, 3),
        **report,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float))
    for name, ok in report["checks"].items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    if "median_final_e_star" in report:
        print(f"median E*: initial {report['median_initial_e_star']:.6g}, final {report['median_final_e_star']:.6g}")
    return EXIT_OK if report["hard_ok"] else EXIT_INVARIANT


def _error(code: int, exc: Exception, out: Path | None = None) -> int:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(record), file=sys.stderr)
    if out is not None and out.exists():
        (out / "error.json").write_text(json.dumps(record, indent=2))
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="afl", description="Adaptive feature learning flows and diagnostics.")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment")
    r.add_argument("--config", type=Path, help="INI config file with [experiment], [truth], [flow], [fem] sections")
    r.add_argument("--model", choices=MODELS)
    r.add_argument("--seeds", type=int)
    r.add_argument("--out", type=Path, default=Path("afl-out"))
    r.add_argument("--threads", type=int, help="worker processes (fallback: AFL_THREADS)")
    r.add_argument("--n", type=int)
    r.add_argument("--d", type=int)
    r.add_argument("--sstar", type=int, dest="s_star")
    r.add_argument("--n-grid", dest="n_grid")
    r.add_argument("--depth", type=int)
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")

    s = sub.add_parser("selftest", help="run the invariant suite")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--inject-fault", action="append", default=[], choices=FAULTS, help=argparse.SUPPRESS)

    f = sub.add_parser("fem-scan", help="optimal truncation level for a diagonal view")
    f.add_argument("--config", type=Path)
    f.add_argument("--weights")
    f.add_argument("--coeffs")
    f.add_argument("--eps2", type=float)
    f.add_argument("--out", type=Path)

    c = sub.add_parser("show-config-defaults", help="print the resolved default config")
    c.add_argument("--model", choices=MODELS)
    return ap


def _overrides(args) -> dict:
    over = parse_config(args.config.read_text()) if getattr(args, "config", None) else {}
    for key in ("model", "seeds", "n", "d", "s_star", "n_grid", "depth", "weights", "coeffs", "eps2"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip().split(".")[-1]
        if key not in SECTION_OF:
            raise ConfigError(f"unknown config key {key!r}")
        over[key] = value
    return over


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = getattr(args, "out", None)
    try:
        if args.command == "selftest":
            report = run_selftest(args.seed, args.inject_fault)
            for name, ok, detail in report:
                print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
            return EXIT_OK if all(ok for _, ok, _ in report) else EXIT_INVARIANT
        if args.command == "show-config-defaults":
            print(format_config(resolve_config(model=args.model)), end="")
            return EXIT_OK
        over = _overrides(args)
        if args.command == "fem-scan":
            over["model"] = "fem-scan"
            cfg = resolve_config(over)
            if out is not None:
                out.mkdir(parents=True, exist_ok=True)
            delta, e = fem_scan(cfg, out)
            print(f"delta* = {delta:g}, E* = {e:g}")
            return EXIT_OK
        cfg = resolve_config(over)
        threads = _thread_count(args.threads)
        return run(cfg, out, threads if threads is not None else cfg["threads"])
    except (ConfigError, InvalidSpecError, CapMismatchError, OSError) as exc:
        return _error(EXIT_CONFIG, exc, out)
    except MemoryGuardError as exc:
        return _error(EXIT_MEMORY, exc, out)
    except (ConservationDriftError, DivergenceError, StepSizeError) as exc:
        return _error(EXIT_INVARIANT, exc, out)


if __name__ == "__main__":
    sys.exit(main())
