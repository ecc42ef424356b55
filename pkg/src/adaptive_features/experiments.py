"""Multi-seed experiment drivers shared by the command line and the test suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .analysis import RunEnsemble, energy_curves
from .diagonal_flows import (
    FlowConfig,
    b0_default,
    diag_empirical_system,
    empirical_truncation,
    fem_path,
    flow_diag_empirical,
    flow_diag_seq,
    flow_rate_bound,
    flow_sparse_empirical,
    flow_sparse_seq,
    integrate_diagonal,
    monotone_violations,
    sparse_empirical_system,
    t_star_diag,
    t_star_sparse,
    truth_on,
    write_trajectory_csv,
)
from .index_flows import (
    IndexRunConfig,
    mim_population_run,
    mim_sequence_run,
    noise_field,
    sim_sequence_run,
    write_mim_csv,
    write_sim_csv,
)
from .seq_model import (
    STREAM_TRUTH,
    MisalignedPQ,
    MultiIndex,
    SingleIndex,
    SparseMean,
    decaying_link,
    kernel_weights,
    make_rng,
    make_truth,
    observe_sequence,
    sample_dataset,
)

DIAGONAL_MODELS = ("diag-sparse", "sparse-empirical", "diag-seq", "diag-deep", "diag-empirical")
INDEX_MODELS = ("sim-pop", "sim-seq", "mim-pop", "mim-seq")


@dataclass
class SeedResult:
    """One seed of one experiment: FEM curve, invariant checks and a trajectory writer."""

    seed: int
    times: np.ndarray
    e_star: np.ndarray
    checks: dict
    extra: dict


def truth_frame(d: int, p: int, seed: int) -> np.ndarray:
    """Random orthonormal d x p frame for the teacher, on its own RNG stream."""
    G = make_rng(seed, STREAM_TRUTH).normal(size=(d, p))
    Q, R = np.linalg.qr(G)
    return Q * np.sign(np.diag(R))[None, :]


def _diag_seed(model: str, params: dict, seed: int, path=None) -> SeedResult:
    n = params["n"]
    eps2 = params["sigma"] ** 2 / n
    records = params["records"]
    if model in ("diag-sparse", "sparse-empirical"):
        d = params["d"]
        spec = SparseMean(d, params["s_star"], floor=params["floor"])
        truth = make_truth(spec)
        alpha = params["alpha_init"] or d**-0.5
        lam = np.full(d, alpha**2)
        T = t_star_sparse(n, params["t_star_sparse_c"])
        if model == "diag-sparse":
            obs = observe_sequence(truth, n, params["sigma"], seed=seed)
            cfg = FlowConfig.for_rate(flow_rate_bound(lam, 2 * np.abs(obs.z)), T, records=records,
                                      conservation_tol=params["conservation_tol"])
            traj = flow_sparse_seq(obs, cfg, alpha)
        else:
            data = sample_dataset(spec, n, params["sigma"], seed, truth=truth)
            sysm = sparse_empirical_system(data)
            rate = flow_rate_bound(lam, 2 * np.abs(sysm.target), gram_norm=sysm.gram_norm)
            cfg = FlowConfig.for_rate(rate, T, records=records, conservation_tol=params["conservation_tol"])
            traj = flow_sparse_empirical(data, cfg, alpha)
        f_star = truth.coeffs
    else:
        spec = MisalignedPQ(params["p"], params["q"], params["gamma"], params["j_max"])
        truth = make_truth(spec, allow_truncated_kernel=params["allow_truncated_kernel"])
        D = params["depth"] if model == "diag-deep" else 0
        b0 = params["b0_c"] * b0_default(n, D) if D else None
        T = t_star_diag(n, D, params["t_star_diag_c"])
        if model == "diag-empirical":
            J = params["J"] or empirical_truncation(n, spec.p, spec.q)
            lam = kernel_weights(J, spec.gamma)
            data = sample_dataset(spec, n, params["sigma"], seed, truth=truth)
            sysm = diag_empirical_system(data, J)
            rate = flow_rate_bound(lam, 2 * np.abs(sysm.target), D, b0 or 1.0, gram_norm=sysm.gram_norm)
            cfg = FlowConfig.for_rate(rate, T, records=records, conservation_tol=params["conservation_tol"])
            traj = flow_diag_empirical(data, cfg, lam, D, b0, J=J)
            f_star = truth_on(traj.index_set, truth.indices, truth.coeffs)
        else:
            lam = kernel_weights(spec.j_max, spec.gamma)
            obs = observe_sequence(truth, n, params["sigma"], seed=seed)
            rate = flow_rate_bound(lam, 2 * np.abs(obs.z), D, b0 or 1.0)
            cfg = FlowConfig.for_rate(rate, T, records=records, conservation_tol=params["conservation_tol"])
            traj = flow_diag_seq(obs, cfg, lam, D, b0)
            f_star = truth.coeffs
    e_star = np.array([r.e_star for r in fem_path(traj, f_star, eps2)])
    checks = {
        "conservation": traj.drift <= params["conservation_tol"],
        "fem_monotone": monotone_violations(e_star, 2 * eps2) == 0,
    }
    if path is not None:
        write_trajectory_csv(traj, path)
    return SeedResult(seed, traj.times, e_star, checks,
                      {"drift": traj.drift, "e_init": float(e_star[0]), "e_final": float(e_star[-1])})


def _index_seed(model: str, params: dict, seed: int, path=None) -> SeedResult:
    n, d = params["n"], params["d"]
    cfg = IndexRunConfig(dt=params["dt"], t_end=params["t_end"], gamma=params["link_gamma"],
                         record_every=params["record_every"], K=params["K"] or None)
    link = np.array(decaying_link(params["r_max"], params["r0"], params["alpha"]))
    eps2 = params["sigma"] ** 2 / n
    noisy = model.endswith("seq")
    if model.startswith("sim"):
        truth = make_truth(SingleIndex(d, tuple(link), truth_frame(d, 1, seed)[:, 0]))
        noise = noise_field(d, truth.r_max, n, seed, params["sigma"]) if noisy else None
        traj = sim_sequence_run(noise, truth, cfg, seed=seed, eps2=eps2)
        feasible = bool(np.all(np.abs(np.linalg.norm(traj.w, axis=1) - 1) <= 1e-8))
        writer = write_sim_csv
    else:
        p = params["rank"]
        truth = make_truth(MultiIndex(d, p, tuple(link), truth_frame(d, p, seed)))
        if noisy:
            noise = noise_field(d, 2 * truth.r_max, n, seed, params["sigma"])
            traj = mim_sequence_run(noise, truth, cfg, seed=seed, eps2=eps2, keep_W=True)
            gram = np.einsum("tdi,tdj->tij", traj.W, traj.W)
            feasible = bool(np.max(np.abs(gram - np.eye(p))) <= 1e-8)
        else:
            traj = mim_population_run(truth, cfg, seed=seed, eps2=eps2)
            feasible = bool(np.all((traj.sigma2 >= 0) & (traj.sigma2 <= 1)))
        writer = write_mim_csv
    if path is not None:
        writer(traj, path)
    return SeedResult(seed, traj.times, traj.e_star, {"feasibility": feasible}, dict(traj.phases))


def run_seed(model: str, params: dict, seed: int, path=None) -> SeedResult:
    """Run one seed; the trajectory CSV goes to ``path`` when given."""
    if model in DIAGONAL_MODELS:
        return _diag_seed(model, params, seed, path)
    if model in INDEX_MODELS:
        return _index_seed(model, params, seed, path)
    raise ValueError(f"model {model!r} has no per-seed driver")


@dataclass
class SeqGdComparison:
    n: int
    times: np.ndarray
    window: np.ndarray
    d_pair: np.ndarray
    d_seq0: np.ndarray
    d_gd0: np.ndarray

    @property
    def max_pair(self) -> float:
        return float(np.max(self.d_pair[self.window]))

    @property
    def separated(self) -> bool:
        w = self.window
        return bool(np.all(self.d_pair[w] < np.minimum(self.d_seq0[w], self.d_gd0[w])))


def compare_seq_gd(n: int, seeds, *, J: int = 256, p: float = 1.0, q: float = 2.0, gamma: float = 2.0,
                   records: int = 50, t_frac: float = 0.1, t_end: float | None = None) -> SeqGdComparison:
    """Energy distances between sequence-loss and empirical-loss diagonal flows.

    Both flows start from the kernel weights j^{-gamma} on the first J cosine
    functions; the truth lives on the same J indices. Snapshots share one
    grid on [0, t*] and the comparison window is [t_frac t*, t*].
    """
    spec = MisalignedPQ(p, q, gamma, J)
    truth = make_truth(spec, allow_truncated_kernel=True)
    lam = kernel_weights(J, gamma)
    t_end = t_star_diag(n) if t_end is None else t_end
    seeds = list(seeds)
    systems = [diag_empirical_system(sample_dataset(spec, n, seed=s, truth=truth), J) for s in seeds]
    obs = [observe_sequence(truth, n, seed=s) for s in seeds]
    target = 2 * np.max(np.abs(truth.coeffs)) + 1.0
    rate = max(flow_rate_bound(lam, target, gram_norm=max(sy.gram_norm for sy in systems)), 1.0)
    cfg = FlowConfig.for_rate(rate, t_end, records=records)
    seq_runs, gd_runs = [], []
    for o, sy in zip(obs, systems):
        z = o.z
        seq_runs.append(integrate_diagonal(lambda f, z=z: z - f, lam, cfg).f)
        gd_runs.append(integrate_diagonal(sy.residual, lam, cfg).f)
    times = np.linspace(0.0, t_end, records + 1)
    seq = RunEnsemble.from_runs(times, seq_runs, label="seq", n=n)
    gd = RunEnsemble.from_runs(times, gd_runs, label="gd", n=n)
    rows = np.array(energy_curves(seq, gd))
    window = times >= t_frac * t_end - 1e-12
    return SeqGdComparison(n, times, window, rows[:, 1], rows[:, 2], rows[:, 3])
