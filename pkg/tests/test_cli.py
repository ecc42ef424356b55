import json
import subprocess
import sys

import pytest

from adaptive_features.cli import (
    DEFAULTS,
    ConfigError,
    config_hash,
    format_config,
    main,
    parse_config,
    resolve_config,
)
from adaptive_features.selftest import run_selftest

SMALL_SPARSE = ["run", "--model", "diag-sparse", "--d", "20", "--n", "50", "--sstar", "2", "--seeds", "3"]


def read_tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


class TestConfig:
    @pytest.mark.parametrize("model", ["diag-sparse", "diag-deep", "mim-seq", "fem-scan"])
    def test_round_trip(self, model):
        cfg = resolve_config(model=model)
        assert parse_config(format_config(cfg)) == cfg
        assert config_hash(parse_config(format_config(cfg))) == config_hash(cfg)

    def test_overrides_are_typed(self):
        cfg = resolve_config({"n": "300", "allow_truncated_kernel": "yes", "dt": "0.05"})
        assert cfg["n"] == 300 and cfg["allow_truncated_kernel"] is True and cfg["dt"] == 0.05

    def test_model_defaults(self):
        assert resolve_config(model="sim-seq")["d"] == 8
        assert resolve_config({"d": 12}, model="sim-seq")["d"] == 12

    @pytest.mark.parametrize("text", ["[flow]\nbogus = 1\n", "[nowhere]\nn = 1\n", "[experiment]\nn = ten\n",
                                      "not a config"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_every_key_documented(self, capsys):
        assert main(["show-config-defaults"]) == 0
        shown = parse_config(capsys.readouterr().out)
        assert set(shown) == {k for sec in DEFAULTS.values() for k in sec}


class TestFemScan:
    def test_fixture(self, capsys, tmp_path):
        assert main(["fem-scan", "--out", str(tmp_path)]) == 0
        assert capsys.readouterr().out.strip() == "delta* = 0.9, E* = 0.29"
        lines = (tmp_path / "fem_scan.csv").read_text().splitlines()
        assert lines[0] == "#schema=fem-scan/v1" and len(lines) == 2 + 4

    def test_run_model(self, capsys, tmp_path):
        assert main(["run", "--model", "fem-scan", "--out", str(tmp_path)]) == 0
        assert "delta* = 0.9, E* = 0.29" in capsys.readouterr().out

    def test_length_mismatch(self, tmp_path):
        assert main(["fem-scan", "--weights", "0.5,0.1", "--coeffs", "1"]) == 2


class TestRun:
    def test_artifacts_and_determinism(self, tmp_path, capsys):
        a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        assert main(SMALL_SPARSE + ["--out", str(a)]) == 0
        assert main(SMALL_SPARSE + ["--out", str(b)]) == 0
        assert main(SMALL_SPARSE + ["--out", str(c), "--threads", "2"]) == 0
        tree = read_tree(a)
        assert {"fem_curve.csv", "trajectories/seed_0.csv", "trajectories/seed_2.csv"} <= set(tree)
        assert tree == read_tree(b) == read_tree(c)
        manifest = json.loads((a / "manifest.json").read_text())
        assert manifest["seeds"] == [0, 1, 2]
        assert manifest["checks"]["conservation"] is True
        assert set(manifest["config"]) == set(resolve_config(model="diag-sparse"))
        assert manifest["config_hash"] == config_hash(resolve_config(
            {"d": 20, "n": 50, "s_star": 2, "seeds": 3}, model="diag-sparse"))
        assert "PASS conservation" in capsys.readouterr().out

    def test_env_threads(self, tmp_path, monkeypatch):
        monkeypatch.setenv("AFL_THREADS", "2")
        assert main(SMALL_SPARSE + ["--out", str(tmp_path / "e")]) == 0
        monkeypatch.setenv("AFL_THREADS", "many")
        assert main(SMALL_SPARSE + ["--out", str(tmp_path / "f")]) == 2

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("[experiment]\nmodel = sim-pop\nseeds = 2\n[truth]\nd = 6\n[flow]\nt_end = 5.0\n")
        out = tmp_path / "o"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["model"] == "sim-pop" and manifest["checks"]["feasibility"] is True
        assert (out / "trajectories" / "seed_1.csv").read_text().startswith("#schema=sim-trajectory/v1")

    def test_compare(self, tmp_path):
        out = tmp_path / "cmp"
        args = ["run", "--model", "compare-seq-gd", "--n-grid", "64,256", "--seeds", "12",
                "--set", "compare_J=16", "--set", "records=10", "--out", str(out)]
        assert main(args) == 0
        lines = (out / "energy_distance.csv").read_text().splitlines()
        assert lines[0] == "#schema=energy-distance/v1"
        assert lines[1] == "n,t,in_window,d_seq_gd,d_seq_0,d_gd_0" and len(lines) == 2 + 2 * 11
        assert set(json.loads((out / "manifest.json").read_text())["per_n"]) == {"64", "256"}


class TestExitCodes:
    def test_unknown_key(self, tmp_path, capsys):
        assert main(SMALL_SPARSE + ["--out", str(tmp_path), "--set", "nonsense=1"]) == 2
        record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert record["exit_code"] == 2 and record["error"] == "ConfigError"

    def test_invalid_truth(self, tmp_path):
        assert main(["run", "--model", "diag-seq", "--set", "q=1.0", "--out", str(tmp_path)]) == 2

    def test_memory_guard(self, tmp_path):
        assert main(["run", "--model", "mim-seq", "--d", "20", "--seeds", "1", "--out", str(tmp_path)]) == 4
        assert json.loads((tmp_path / "error.json").read_text())["error"] == "MemoryGuardError"

    def test_invariant_violation(self, tmp_path):
        args = SMALL_SPARSE + ["--out", str(tmp_path), "--set", "conservation_tol=1e-30"]
        assert main(args) == 3


class TestSelftest:
    def test_passes_and_is_deterministic(self, capsys):
        assert main(["selftest"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert len(out) == 12 and all(line.startswith("PASS") for line in out)
        assert run_selftest(3) == run_selftest(3)

    def test_fault_injection(self, capsys):
        assert main(["selftest", "--inject-fault", "nu"]) == 3
        failed = [line for line in capsys.readouterr().out.splitlines() if line.startswith("FAIL")]
        assert len(failed) == 1 and "nu_normalization" in failed[0]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "adaptive_features.cli", "fem-scan"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and proc.stdout.strip() == "delta* = 0.9, E* = 0.29"
