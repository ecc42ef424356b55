"""Fast deterministic invariant suite behind ``afl selftest``.

Every check returns (ok, detail). ``faults`` names checks whose inputs are
deliberately corrupted, which lets the suite prove it can fail.
"""

from __future__ import annotations

import numpy as np

from .analysis import energy_distance
from .diagonal_flows import FlowConfig, flow_rate_bound, integrate_diagonal
from .fem import DiagonalView, fem_bruteforce, fem_optimal
from .hermite_core import hermite_table, phi_r, rot_inv_coeffs, softmin_omega
from .index_flows import (
    IndexRunConfig,
    MimContractor,
    mim_noise_fast,
    mim_noise_terms,
    mim_population_run,
    mim_sequence_run,
    noise_field,
    random_sphere,
    random_stiefel,
    sim_sequence_run,
    stiefel_project,
)
from .seq_model import MultiIndexTruth, SingleIndexTruth

FAULTS = ("nu",)


def check_hermite_orthonormality(rng, faults):
    x, w = np.polynomial.hermite_e.hermegauss(30)
    H = hermite_table(12, x)
    G = (H * (w / np.sqrt(2 * np.pi))[:, None]).T @ H
    err = float(np.max(np.abs(G - np.eye(13))))
    return err <= 1e-8, f"max deviation {err:.2e}"


def check_nu_normalization(rng, faults):
    worst = 0.0
    for p in (1, 2, 3):
        coeffs = rot_inv_coeffs(p, 4)
        for r in range(5):
            nu2 = coeffs.values(r) ** 2
            if "nu" in faults:
                nu2 = nu2 * 1.01
            E = coeffs.exponents(r)
            worst = max(worst, abs(nu2.sum() - 1), float(np.max(np.abs(E.T @ nu2 - r / p))))
    return worst <= 1e-10, f"max deviation {worst:.2e}"


def check_phi_dual_path(rng, faults):
    worst = 0.0
    for _ in range(10):
        Psi = random_stiefel(5, 2, int(rng.integers(1 << 30))).T @ random_stiefel(5, 2, int(rng.integers(1 << 30)))
        for r in range(1, 5):
            worst = max(worst, abs(phi_r(Psi, r, "sum") - phi_r(Psi, r, "series")))
    return worst <= 1e-9, f"max deviation {worst:.2e}"


def check_fem_oracle(rng, faults):
    bad = 0
    for _ in range(200):
        m = int(rng.integers(1, 30))
        view = DiagonalView(rng.choice([1.0, 0.5, 0.25, 0.1], m), rng.normal(size=m) * rng.random(m))
        eps2 = float(rng.uniform(0.01, 0.5))
        a, b = fem_optimal(view, eps2), fem_bruteforce(view, eps2)
        bad += (a.delta_star != b.delta_star) or abs(a.e_star - b.e_star) > 1e-12
    return bad == 0, f"{bad} mismatches in 200"


def check_diagonal_conservation(rng, faults):
    worst = 0.0
    for D in (0, 1, 2):
        lam = rng.uniform(0.05, 1.0, 6)
        z = rng.normal(size=6)
        b0 = 0.5 if D else 1.0
        cfg = FlowConfig.for_rate(flow_rate_bound(lam, 2 * np.abs(z), D, b0), 5.0, records=10)
        traj = integrate_diagonal(lambda f: z - f, lam, cfg, D=D, b0=b0 if D else None)
        worst = max(worst, traj.drift)
    return worst <= 1e-6, f"max drift {worst:.2e}"


def check_stiefel_tangency(rng, faults):
    worst = 0.0
    for s in range(5):
        W = random_stiefel(7, 3, s)
        T = stiefel_project(W, rng.normal(size=(7, 3)))
        worst = max(worst, float(np.max(np.abs(W.T @ T + T.T @ W))))
    return worst <= 1e-10, f"max residual {worst:.2e}"


def check_sim_population(rng, faults):
    w_star = random_sphere(6, 101)
    truth = SingleIndexTruth(w_star, np.array([0.0, 1.0, 0.5, 0.3]), None)
    w0 = random_sphere(6, 7)
    if w0 @ w_star < 0:
        w0 = -w0
    traj = sim_sequence_run(None, truth, IndexRunConfig(dt=0.05, t_end=20.0), w0=w0)
    norm_err = float(np.max(np.abs(np.linalg.norm(traj.w, axis=1) - 1)))
    drops = int(np.sum(np.diff(traj.rho) < -1e-12))
    signs = bool(np.all(traj.g * truth.g_star[None, :] >= -1e-12))
    return norm_err <= 1e-8 and drops == 0 and signs, f"norm error {norm_err:.1e}, rho drops {drops}"


def check_rank_one_reduction(rng, faults):
    d = 5
    h_star = np.array([0.0, 1.0, 0.4])
    g_star = np.zeros(5)
    g_star[::2] = h_star
    w_star = np.eye(d)[0]
    w0 = random_sphere(d, 3)
    w0 = w0 if w0 @ w_star >= 0 else -w0
    cfg = IndexRunConfig(dt=0.01, t_end=10.0)
    sim = sim_sequence_run(None, SingleIndexTruth(w_star, g_star, None), cfg, w0=w0)
    mim = mim_population_run(MultiIndexTruth(w_star[:, None], h_star, None), cfg, W0=w0[:, None])
    err = float(np.max(np.abs(sim.rho**2 - mim.sigma2[:, 0])))
    return err <= 1e-8, f"max deviation {err:.2e}"


def check_full_vs_reduced(rng, faults):
    truth = MultiIndexTruth(random_stiefel(6, 2, 11), np.array([0.0, 1.0, 0.4]), None)
    cfg = IndexRunConfig(dt=0.02, t_end=10.0, record_every=5)
    full = mim_sequence_run(None, truth, cfg, seed=4)
    red = mim_population_run(truth, cfg, seed=4)
    err = float(np.max(np.abs(full.sigma2 - red.sigma2)))
    return err <= 1e-6, f"max deviation {err:.2e}"


def check_noise_dual_route(rng, faults):
    d, p = 4, 2
    noise = noise_field(d, 4, 100, 5)
    W, Ws = random_stiefel(d, p, 1), random_stiefel(d, p, 2)
    h = np.array([0.2, 0.8, -0.3])
    exact = mim_noise_terms(W, h, Ws, noise, 2.0)
    fast = mim_noise_fast(W, h, Ws, MimContractor(noise, p, 2), 2.0)
    err = max(float(np.max(np.abs(exact.e - fast.e))), abs(exact.xi - fast.xi), abs(exact.zeta - fast.zeta))
    return err <= 1e-10, f"max deviation {err:.2e}"


def check_softmin(rng, faults):
    bad = 0
    for _ in range(200):
        p = int(rng.integers(1, 5))
        x = rng.random(p)
        K = float(rng.uniform(1, 100))
        om = softmin_omega(x, K)
        bad += not (x.min() - np.log(p) / K - 1e-12 <= om <= x.min() + 1e-12)
        wts = np.exp(-K * (x - x.min()))
        bad += float(wts @ (1 - x) / wts.sum()) < 1 - x.mean() - 1e-12
    return bad == 0, f"{bad} violations"


def check_energy_distance(rng, faults):
    A, B = rng.normal(size=(30, 4)), rng.normal(size=(25, 4)) + 0.3
    asym = abs(energy_distance(A, B) - energy_distance(B, A))
    zero = energy_distance(A, A, unbiased=False)
    return asym <= 1e-12 and zero <= 1e-12, f"asymmetry {asym:.1e}, self distance {zero:.1e}"


CHECKS = (
    ("hermite_orthonormality", check_hermite_orthonormality),
    ("nu_normalization", check_nu_normalization),
    ("phi_dual_path", check_phi_dual_path),
    ("fem_oracle", check_fem_oracle),
    ("diagonal_conservation", check_diagonal_conservation),
    ("stiefel_tangency", check_stiefel_tangency),
    ("sim_population", check_sim_population),
    ("rank_one_reduction", check_rank_one_reduction),
    ("full_vs_reduced", check_full_vs_reduced),
    ("noise_dual_route", check_noise_dual_route),
    ("softmin", check_softmin),
    ("energy_distance", check_energy_distance),
)


def run_selftest(seed: int = 0, faults=()) -> list:
    """[(name, ok, detail)] for every check, each with its own seeded generator."""
    unknown = set(faults) - set(FAULTS)
    if unknown:
        raise ValueError(f"unknown fault {sorted(unknown)}")
    out = []
    for k, (name, fn) in enumerate(CHECKS):
        rng = np.random.default_rng([seed, k])
        try:
            ok, detail = fn(rng, set(faults))
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
