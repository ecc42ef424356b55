"""Single-index and multi-index adaptive feature flows.

Single index: f(x) = sum_r g_r H_r(<w, x>) with w on the sphere and g_r
trained at rate lambda_r = exp(-gamma r). Multi index: f(x) = g(W^T x) with
W on the Stiefel manifold and g = sum_r h_r Hbar_r restricted to the
rotation-invariant span, h_r trained at rate mu_{2r}.

Noise enters through a stored Gaussian coefficient field eps_n. Its
contraction with pulled-back Hermite functions uses the generating-function
identity

    <H_m(W^T x), sum_n eps_n H_n> = sqrt(m!) [alpha^m] P_k(W alpha),
    P_k(v) = sum_{|n| = k} eps_n v^n / sqrt(n!),

so only monomials of the d-dimensional field are ever evaluated. The
``mim_noise_terms`` routine recomputes the same quantities through explicit
Hermite series as an independent check.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._ode import rk4_step
from .diagonal_flows import DivergenceError
from .fem import MultiIndexView, SingleIndexView, fem_optimal
from .hermite_core import (
    HermiteSeries,
    exponent_matrix,
    log_factorial,
    multi_indices,
    phi_r_from_sigma,
    pullback_series,
    rot_inv_coeffs,
    series_derivative,
    series_mul_coordinate,
    softmin_omega,
)
from .seq_model import STREAM_INIT, STREAM_NOISE, MemoryGuardError, MultiIndexTruth, SingleIndexTruth, make_rng

DEFAULT_GAMMA = 0.5
SIM_GUARD = {"d": 16, "r_max": 6}
MIM_GUARD = {"d": 12, "p": 3, "r_max": 3}
NOISE_COUNT_GUARD = 10**7
SCHEMA_SIM = "sim-trajectory/v1"
SCHEMA_MIM = "mim-trajectory/v1"


class CapMismatchError(ValueError):
    """The noise field does not reach the degrees the model needs."""


class StepSizeError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# initialization


def random_sphere(d: int, seed: int) -> np.ndarray:
    v = make_rng(seed, STREAM_INIT).normal(size=d)
    return v / np.linalg.norm(v)


def random_stiefel(d: int, p: int, seed: int) -> np.ndarray:
    """Haar-distributed d x p matrix with orthonormal columns."""
    G = make_rng(seed, STREAM_INIT).normal(size=(d, p))
    Q, R = np.linalg.qr(G)
    return Q * np.sign(np.diag(R))[None, :]


def default_K(d: int, p: int) -> float:
    return float(max(1, math.ceil(2 * d * math.log(p)))) if p > 1 else 1.0


# ---------------------------------------------------------------------------
# noise field


def _keys(E: np.ndarray, base: int) -> np.ndarray:
    weights = base ** np.arange(E.shape[1], dtype=np.int64)
    return E @ weights


@dataclass(frozen=True)
class NoiseField:
    """eps_n ~ N(0, sigma^2 / n) for every n in N^d with |n| <= degree_cap.

    ``shells[k]`` holds the exponent matrix and values of degree k, in the
    order of ``multi_indices(d, k)``.
    """

    d: int
    degree_cap: int
    n: int
    seed: int
    sigma: float
    shells: tuple = field(repr=False)

    @property
    def noise_var(self) -> float:
        return self.sigma**2 / self.n

    @property
    def count(self) -> int:
        return sum(len(v) for _, v in self.shells)

    def get(self, m) -> float:
        m = tuple(int(v) for v in m)
        k = sum(m)
        if len(m) != self.d or k > self.degree_cap:
            return 0.0
        E, vals = self.shells[k]
        key = _keys(np.array([m]), k + 1)[0]
        keys = _keys(E, k + 1)
        hit = np.nonzero(keys == key)[0]
        return float(vals[hit[0]]) if len(hit) else 0.0

    def as_series(self) -> HermiteSeries:
        coeffs = {}
        for E, vals in self.shells:
            for row, v in zip(E, vals):
                coeffs[tuple(int(x) for x in row)] = float(v)
        return HermiteSeries(self.d, coeffs, self.degree_cap)


def noise_field(d: int, degree_cap: int, n: int, seed: int, sigma: float = 1.0) -> NoiseField:
    total = math.comb(d + degree_cap, degree_cap)
    if total > NOISE_COUNT_GUARD:
        raise MemoryGuardError(f"{total} noise coefficients exceed the guard of {NOISE_COUNT_GUARD}")
    rng = make_rng(seed, STREAM_NOISE)
    scale = sigma / math.sqrt(n)
    shells = []
    for k in range(degree_cap + 1):
        E = exponent_matrix(d, k)
        shells.append((E, rng.normal(size=len(E)) * scale))
    return NoiseField(d, degree_cap, n, seed, sigma, tuple(shells))


class _ShellOps:
    """Monomial contractions of a noise field.

    For degree k >= 1 the matrix C_k (rows: |u| = k-1, columns: i) holds
    a_{u + e_i} (u_i + 1) with a_n = eps_n / sqrt(n!), so that
    grad P_k(v) = C_k^T mono_{k-1}(v).
    """

    def __init__(self, noise: NoiseField):
        self.d = noise.d
        self.cap = noise.degree_cap
        self.a0 = float(noise.shells[0][1][0])
        self.exps = [E for E, _ in noise.shells]
        self.C = [None]
        for k in range(1, self.cap + 1):
            Ek, vals = noise.shells[k]
            a = vals * np.exp(-0.5 * np.array([log_factorial(r) for r in Ek]))
            keys = _keys(Ek, k + 1)
            order = np.argsort(keys)
            Eu = self.exps[k - 1]
            C = np.zeros((len(Eu), self.d))
            for i in range(self.d):
                up = Eu.copy()
                up[:, i] += 1
                pos = order[np.searchsorted(keys, _keys(up, k + 1), sorter=order)]
                C[:, i] = a[pos] * (Eu[:, i] + 1)
            self.C.append(C)

    def mono(self, V: np.ndarray, deg: int) -> np.ndarray:
        """Monomials of degree ``deg`` at the rows of V: shape (m, N_deg)."""
        V = np.atleast_2d(V)
        E = self.exps[deg]
        if deg == 0:
            return np.ones((V.shape[0], 1))
        pw = V[:, :, None] ** np.arange(deg + 1)[None, None, :]
        return np.prod(pw[:, np.arange(self.d)[None, :], E], axis=2)

    def grad_P(self, V: np.ndarray, k: int) -> np.ndarray:
        return self.mono(V, k - 1) @ self.C[k]

    def P(self, V: np.ndarray, k: int) -> np.ndarray:
        V = np.atleast_2d(V)
        if k == 0:
            return np.full(V.shape[0], self.a0)
        return np.sum(V * self.grad_P(V, k), axis=1) / k


# ---------------------------------------------------------------------------
# single-index model


def sim_lambdas(r_max: int, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    return np.exp(-gamma * np.arange(r_max + 1))


@dataclass(frozen=True)
class SimState:
    t: float
    w: np.ndarray
    g: np.ndarray
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if abs(np.linalg.norm(self.w) - 1) > 1e-9:
            raise ValueError("w must be a unit vector")

    def rho(self, w_star) -> float:
        return float(self.w @ w_star)

    @property
    def lambdas(self) -> np.ndarray:
        return sim_lambdas(len(self.g) - 1, self.gamma)


class SimNoise(NamedTuple):
    e: np.ndarray
    tau: float
    grad: np.ndarray


def _sphere_project(w, v):
    return v - (v @ w) * w


def _check_sim_noise(noise: NoiseField, d: int, r_max: int):
    if noise.d != d:
        raise CapMismatchError("noise field dimension differs from the model")
    if noise.degree_cap < r_max:
        raise CapMismatchError(f"noise degree cap {noise.degree_cap} < r_max {r_max}")


def _sim_noise_parts(w, g, ops: _ShellOps):
    """e_r(w) = sqrt(r!) P_r(w) and sum_r g_r grad e_r(w)."""
    R = len(g) - 1
    e = np.zeros(R + 1)
    e[0] = ops.a0
    grad = np.zeros(len(w))
    for r in range(1, R + 1):
        c = math.sqrt(math.factorial(r))
        gp = ops.grad_P(w, r)[0]
        e[r] = c * (w @ gp) / r
        grad += g[r] * c * gp
    return e, grad


def sim_noise_terms(w, g, noise: NoiseField, w_star=None) -> SimNoise:
    """Noise couplings e_r, the spherical noise gradient E and tau = <E, w*>."""
    w = np.asarray(w, dtype=float)
    g = np.asarray(g, dtype=float)
    _check_sim_noise(noise, len(w), len(g) - 1)
    e, grad = _sim_noise_parts(w, g, _ShellOps(noise))
    E = _sphere_project(w, grad)
    tau = float(E @ w_star) if w_star is not None else math.nan
    return SimNoise(e, tau, E)


def sim_rho_rate(rho: float, g, g_star) -> float:
    """Population rate of rho implied by the (w, g) system."""
    r = np.arange(len(g))
    pos = r >= 1
    return float(np.sum(r[pos] * g_star[pos] * g[pos] * rho ** (r[pos] - 1)) * (1 - rho**2))


def _sim_field(w_star, g_star, lam, ops: _ShellOps | None):
    d = len(w_star)
    r = np.arange(len(g_star))
    rm1 = np.maximum(r - 1, 0)

    def fld(y):
        w, g = y[:d], y[d:]
        rho = w @ w_star
        gdot = lam * (rho**r * g_star - g)
        coef = np.sum(r * g_star * g * rho**rm1)
        v = coef * w_star
        if ops is not None:
            e, grad = _sim_noise_parts(w, g, ops)
            gdot = gdot + lam * e
            v = v + grad
        return np.concatenate([_sphere_project(w, v), gdot])

    return fld


def sim_population_step(state: SimState, g_star, w_star, dt: float) -> SimState:
    """One RK4 step of the population flow followed by renormalization."""
    g_star = np.asarray(g_star, dtype=float)
    fld = _sim_field(np.asarray(w_star, dtype=float), g_star, state.lambdas, None)
    y = rk4_step(fld, np.concatenate([state.w, state.g]), dt)
    d = len(state.w)
    w = y[:d] / np.linalg.norm(y[:d])
    return SimState(state.t + dt, w, y[d:], state.gamma)


@dataclass(frozen=True)
class IndexRunConfig:
    dt: float
    t_end: float
    gamma: float = DEFAULT_GAMMA
    record_every: int = 1
    K: float | None = None
    stop_alignment: float | None = None

    def converged(self, gap: float) -> bool:
        """True once 1 - alignment is below ``stop_alignment``."""
        return self.stop_alignment is not None and gap <= self.stop_alignment

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.t_end / self.dt - 1e-9))


@dataclass
class SimTrajectory:
    times: np.ndarray
    w: np.ndarray
    g: np.ndarray
    rho: np.ndarray
    e_star: np.ndarray
    excess: np.ndarray
    eps2: float
    phases: dict


def _first_time(times, mask):
    hit = np.nonzero(mask)[0]
    return float(times[hit[0]]) if len(hit) else None


def plateau_level(values) -> float:
    """Median of the last 10% of snapshots."""
    v = np.asarray(values, dtype=float)
    tail = max(1, int(math.ceil(0.1 * len(v))))
    return float(np.median(v[-tail:]))


def phase_report(times, lead_ratio, align, excess) -> dict:
    """T0: learned lead coefficient reaches a quarter of its initial target.
    T1: alignment first reaches 1/2. T2: excess first within 2x its plateau.
    """
    times = np.asarray(times)
    excess = np.asarray(excess)
    plateau = plateau_level(excess)
    return {
        "T0": _first_time(times, np.asarray(lead_ratio) >= 0.25),
        "T1": _first_time(times, np.asarray(align) >= 0.5),
        "T2": _first_time(times, excess <= 2 * plateau + 1e-15),
        "final_excess_fem": float(excess[-1]),
        "plateau": plateau,
    }


def sim_fem_curve(rho, truth: SingleIndexTruth, eps2: float, gamma: float = DEFAULT_GAMMA):
    lam = sim_lambdas(truth.r_max, gamma)
    best = fem_optimal(SingleIndexView(1.0, lam, truth.g_star), eps2).e_star
    e = np.array([fem_optimal(SingleIndexView(min(1.0, abs(r)), lam, truth.g_star), eps2).e_star for r in rho])
    return e, e - best


def sim_sequence_run(noise: NoiseField | None, truth: SingleIndexTruth, cfg: IndexRunConfig, *,
                     w0=None, seed: int = 0, eps2: float | None = None) -> SimTrajectory:
    """Single-index flow; ``noise=None`` (or a zero-variance field) is the population flow."""
    d, R = len(truth.w_star), truth.r_max
    if d > SIM_GUARD["d"] or R > SIM_GUARD["r_max"]:
        raise MemoryGuardError(f"single-index runs are limited to d <= {SIM_GUARD['d']}, r_max <= {SIM_GUARD['r_max']}")
    ops = None
    if noise is not None:
        _check_sim_noise(noise, d, R)
        if noise.sigma > 0:
            ops = _ShellOps(noise)
            r0 = truth.r0
            if noise.n < d ** (2 * r0 + 1):
                warnings.warn(f"n = {noise.n} is below d^(2 r0 + 1) = {d ** (2 * r0 + 1)}", stacklevel=2)
    if eps2 is None:
        eps2 = noise.noise_var if noise is not None and noise.sigma > 0 else 1e-6
    w = random_sphere(d, seed) if w0 is None else np.asarray(w0, dtype=float)
    lam = sim_lambdas(R, cfg.gamma)
    fld = _sim_field(truth.w_star, truth.g_star, lam, ops)
    y = np.concatenate([w, np.zeros(R + 1)])
    gnorm = np.linalg.norm(truth.g_star)
    times, ws, gs = [0.0], [y[:d].copy()], [y[d:].copy()]
    n = cfg.n_steps
    for k in range(1, n + 1):
        y = rk4_step(fld, y, cfg.dt)
        y[:d] /= np.linalg.norm(y[:d])
        if k % cfg.record_every == 0 or k == n:
            if not np.all(np.isfinite(y)) or np.linalg.norm(y[d:]) > 10 * gnorm:
                raise DivergenceError(f"link coefficients diverged at t = {k * cfg.dt:.4g}")
            times.append(k * cfg.dt)
            ws.append(y[:d].copy())
            gs.append(y[d:].copy())
            if cfg.converged(1 - abs(y[:d] @ truth.w_star)):
                break
    W = np.array(ws)
    G = np.array(gs)
    rho = W @ truth.w_star
    e_star, excess = sim_fem_curve(rho, truth, eps2, cfg.gamma)
    r0 = truth.r0
    sgn = math.copysign(1.0, rho[0]) ** r0 * math.copysign(1.0, truth.g_star[r0])
    target = abs(rho[0]) ** r0 * abs(truth.g_star[r0])
    lead = sgn * G[:, r0] / target if target > 0 else np.zeros(len(times))
    phases = phase_report(times, lead, np.abs(rho), excess)
    return SimTrajectory(np.array(times), W, G, rho, e_star, excess, eps2, phases)


# ---------------------------------------------------------------------------
# Stiefel geometry


def stiefel_project(W, Z) -> np.ndarray:
    """Tangent projection Z - W Sym(W^T Z)."""
    W = np.asarray(W, dtype=float)
    Z = np.asarray(Z, dtype=float)
    A = W.T @ Z
    return Z - W @ (0.5 * (A + A.T))


def polar_retract(W) -> np.ndarray:
    """W (W^T W)^{-1/2}."""
    vals, vecs = np.linalg.eigh(W.T @ W)
    return W @ (vecs * (1.0 / np.sqrt(vals))[None, :]) @ vecs.T


def svd_rate_check(times, path, gap_tol: float = 1e-6) -> dict:
    """Compare finite-difference singular value rates with Diag(U^T Xdot V).

    Both derivatives use central differences of the recorded path. Points
    with nearly equal singular values are skipped with a warning.
    """
    times = np.asarray(times, dtype=float)
    X = np.asarray(path, dtype=float)
    devs, skipped = [], 0
    for k in range(1, len(times) - 1):
        h = times[k + 1] - times[k - 1]
        U, s, Vt = np.linalg.svd(X[k], full_matrices=False)
        gaps = np.diff(s[::-1]) if len(s) > 1 else np.array([np.inf])
        if len(s) > 1 and (np.min(np.abs(gaps)) < gap_tol or s[-1] < gap_tol):
            skipped += 1
            continue
        Xdot = (X[k + 1] - X[k - 1]) / h
        formula = np.diag(U.T @ Xdot @ Vt.T)
        fd = (np.linalg.svd(X[k + 1], compute_uv=False) - np.linalg.svd(X[k - 1], compute_uv=False)) / h
        devs.append(float(np.max(np.abs(formula - fd))))
    if skipped:
        warnings.warn(f"{skipped} snapshots skipped: singular values within {gap_tol} of each other", stacklevel=2)
    return {"max_deviation": max(devs) if devs else math.nan, "checked": len(devs), "skipped": skipped}


# ---------------------------------------------------------------------------
# multi-index model: reduced population system


def mim_mu(r_max: int, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """mu_k = exp(-gamma k) for full degrees k = 0..2 r_max."""
    return np.exp(-gamma * np.arange(2 * r_max + 1))


class _ShellTables:
    """Per-r exponents s (|s| = r) and nu_s^2 for p variables."""

    def __init__(self, p: int, r_max: int):
        coeffs = rot_inv_coeffs(p, r_max)
        self.p, self.r_max = p, r_max
        self.E = [coeffs.exponents(r) for r in range(r_max + 1)]
        self.nu = [coeffs.values(r) for r in range(r_max + 1)]
        self.nu2 = [v**2 for v in self.nu]

    def phi(self, s2) -> np.ndarray:
        """phi_r for every r from squared singular values."""
        return np.array([np.sum(self.nu2[r] * np.prod(s2[None, :] ** self.E[r], axis=1)) for r in range(self.r_max + 1)])

    def sigma2_rate(self, s2, h, h_star) -> np.ndarray:
        out = np.zeros(self.p)
        for r in range(1, self.r_max + 1):
            c = h[r] * h_star[r]
            if c == 0:
                continue
            mono = np.prod(s2[None, :] ** self.E[r], axis=1) * self.nu2[r]
            out += c * (self.E[r] * mono[:, None]).sum(axis=0)
        return 4 * (1 - s2) * out

    def btilde(self, sigma, h, h_star) -> np.ndarray:
        """b_i = sum_r h_r h*_r sum_s 2 s_i sigma^{2s - e_i} nu_s^2."""
        out = np.zeros(self.p)
        for r in range(1, self.r_max + 1):
            c = h[r] * h_star[r]
            if c == 0:
                continue
            E = self.E[r]
            full = sigma[None, :] ** (2 * E)
            for i in range(self.p):
                part = np.where(E[:, i] > 0, sigma[i] ** np.maximum(2 * E[:, i] - 1, 0), 0.0)
                others = np.prod(np.delete(full, i, axis=1), axis=1)
                out[i] += c * np.sum(2 * E[:, i] * part * others * self.nu2[r])
        return out


@dataclass(frozen=True)
class MimState:
    t: float
    W: np.ndarray | None
    h: np.ndarray
    sigma2: np.ndarray
    gamma: float = DEFAULT_GAMMA
    K: float = 1.0

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(np.clip(self.sigma2, 0.0, None))

    @property
    def phi(self) -> np.ndarray:
        return _ShellTables(len(self.sigma2), len(self.h) - 1).phi(self.sigma2)

    @property
    def omega(self) -> float:
        return softmin_omega(self.sigma2, self.K)


def _reduced_field(h_star, mu2r, tables: _ShellTables, p: int):
    R = len(h_star) - 1

    def fld(y):
        h, s2 = y[: R + 1], y[R + 1 :]
        hdot = mu2r * (tables.phi(s2) * h_star - h)
        return np.concatenate([hdot, tables.sigma2_rate(s2, h, h_star)])

    return fld


def mim_population_step(state: MimState, h_star, dt: float) -> MimState:
    """RK4 step of the closed (h, sigma^2) system; W is not advanced."""
    h_star = np.asarray(h_star, dtype=float)
    p, R = len(state.sigma2), len(h_star) - 1
    tables = _ShellTables(p, R)
    mu2r = mim_mu(R, state.gamma)[::2]
    y = rk4_step(_reduced_field(h_star, mu2r, tables, p), np.concatenate([state.h, state.sigma2]), dt)
    s2 = y[R + 1 :]
    if np.any(s2 < -1e-8) or np.any(s2 > 1 + 1e-8):
        raise StepSizeError("squared singular values left [0, 1]; reduce dt")
    return MimState(state.t + dt, None, y[: R + 1], np.clip(s2, 0.0, 1.0), state.gamma, state.K)


# ---------------------------------------------------------------------------
# multi-index noise: exact series route and fast generating-function route


class MimNoise(NamedTuple):
    e: np.ndarray
    xi: float
    zeta: float
    Z: np.ndarray | None = None


def _link_series(h, p: int) -> HermiteSeries:
    R = len(h) - 1
    coeffs = rot_inv_coeffs(p, R)
    total = HermiteSeries(p, {}, 2 * R)
    for r in range(R + 1):
        if h[r] != 0:
            total = total + coeffs.hbar(r).scale(h[r])
    return total


def _noise_weights(W, W_star, K):
    """phi(M) matrices for xi (identity) and zeta (normalized e^{-K M})."""
    Psi = W.T @ W_star
    M = Psi.T @ Psi
    vals, vecs = np.linalg.eigh(M)
    ex = np.exp(-K * (vals - vals.min()))
    expKM = (vecs * ex[None, :]) @ vecs.T / ex.sum()
    return Psi, np.eye(M.shape[0]), expKM


def mim_noise_terms(W, h, W_star, noise: NoiseField, K: float) -> MimNoise:
    """Exact e_r, xi and zeta through Hermite series algebra.

    ``h`` is either the vector of h_r or the link itself as a series on R^p.

    Suitable for small d only: every ambient coefficient of P_W g is built
    from contingency-table frame changes.
    """
    W = np.asarray(W, dtype=float)
    W_star = np.asarray(W_star, dtype=float)
    d, p = W.shape
    if isinstance(h, HermiteSeries):
        link, R = h, h.max_degree // 2
    else:
        h = np.asarray(h, dtype=float)
        R = len(h) - 1
        link = _link_series(h, p)
    if noise.d != d or noise.degree_cap < 2 * R:
        raise CapMismatchError("noise field must cover degree 2 r_max in dimension d")
    eps = noise.as_series()
    coeffs = rot_inv_coeffs(p, R)
    e = np.array([pullback_series(coeffs.hbar(r), W).dot(eps) for r in range(R + 1)])
    Pg = pullback_series(link, W)
    P_perp = np.eye(d) - W @ W.T
    _, ident, expKM = _noise_weights(W, W_star, K)
    out = []
    derivs = [series_derivative(Pg, i) for i in range(d)]
    for phi in (ident, expKM):
        A = W_star @ phi @ W_star.T @ P_perp
        total = HermiteSeries(d, {}, Pg.max_degree)
        for j in range(d):
            col = HermiteSeries(d, {}, Pg.max_degree)
            for i in range(d):
                if abs(A[i, j]) > 1e-15:
                    col = col + derivs[i].scale(A[i, j])
            if col.coeffs:
                total = total + series_mul_coordinate(col, j, Pg.max_degree)
        out.append(total.dot(eps))
    return MimNoise(e, out[0], out[1])


class MimContractor:
    """Fast e_r(W) and Z = grad_W sum_r h_r e_r(W) for a fixed noise field.

    Coefficients [alpha^m] of P_k(W alpha) are recovered by least squares
    from values at fixed points alpha on the unit sphere of R^p.
    """

    def __init__(self, noise: NoiseField, p: int, r_max: int, seed: int = 12345):
        if noise.degree_cap < 2 * r_max:
            raise CapMismatchError("noise field must cover degree 2 r_max")
        self.ops = _ShellOps(noise)
        self.p, self.r_max = p, r_max
        coeffs = rot_inv_coeffs(p, r_max)
        rng = np.random.default_rng(seed)
        self.alpha, self.row, self.Q = [None], [None], [None]
        for r in range(1, r_max + 1):
            k = 2 * r
            Ek, Ek1 = exponent_matrix(p, k), exponent_matrix(p, k - 1)
            pts = rng.normal(size=(2 * len(Ek) + 2, p))
            pts /= np.linalg.norm(pts, axis=1, keepdims=True)
            mono_k = np.prod(pts[:, None, :] ** Ek[None, :, :], axis=2)
            mono_k1 = np.prod(pts[:, None, :] ** Ek1[None, :, :], axis=2)
            pinv_k, pinv_k1 = np.linalg.pinv(mono_k), np.linalg.pinv(mono_k1)
            pos_k = {tuple(m): i for i, m in enumerate(Ek.tolist())}
            pos_k1 = {tuple(m): i for i, m in enumerate(Ek1.tolist())}
            wP = np.zeros(len(Ek))
            sel = np.zeros((p, len(Ek1)))
            for s, nu in coeffs.nu[r].items():
                m = tuple(2 * v for v in s)
                c = nu * math.exp(0.5 * log_factorial(m))
                wP[pos_k[m]] += c
                for j in range(p):
                    if m[j] > 0:
                        u = list(m)
                        u[j] -= 1
                        sel[j, pos_k1[tuple(u)]] += c
            self.alpha.append(pts)
            self.row.append(wP @ pinv_k)
            self.Q.append(pinv_k1.T @ sel.T)

    def __call__(self, W, h) -> tuple:
        d = W.shape[0]
        e = np.zeros(self.r_max + 1)
        e[0] = self.ops.a0
        Z = np.zeros((d, self.p))
        for r in range(1, self.r_max + 1):
            k = 2 * r
            V = self.alpha[r] @ W.T
            G = self.ops.grad_P(V, k)
            e[r] = self.row[r] @ (np.sum(V * G, axis=1) / k)
            if h[r] != 0:
                Z += h[r] * (G.T @ self.Q[r])
        return e, Z


def mim_noise_fast(W, h, W_star, contractor: MimContractor, K: float) -> MimNoise:
    """Same quantities as ``mim_noise_terms`` via the generating-function route.

    xi = Tr(Psi W*^T P_W^perp Z) and zeta uses e^{-KM} / Tr e^{-KM} in place
    of the identity, with Z the Euclidean gradient of sum_r h_r e_r(W).
    """
    W = np.asarray(W, dtype=float)
    e, Z = contractor(W, np.asarray(h, dtype=float))
    Psi, ident, expKM = _noise_weights(W, np.asarray(W_star, dtype=float), K)
    base = W_star.T @ (Z - W @ (W.T @ Z))
    return MimNoise(e, float(np.trace(Psi @ ident @ base)), float(np.trace(Psi @ expKM @ base)), Z)


# ---------------------------------------------------------------------------
# multi-index runs


@dataclass
class MimTrajectory:
    times: np.ndarray
    h: np.ndarray
    sigma2: np.ndarray
    phi1: np.ndarray
    omega: np.ndarray
    e_star: np.ndarray
    excess: np.ndarray
    eps2: float
    phases: dict
    W: np.ndarray | None = None


def mim_fem_curve(sigma2, truth: MultiIndexTruth, eps2: float, gamma: float = DEFAULT_GAMMA):
    mu = mim_mu(truth.r_max, gamma)
    p = truth.p
    best = fem_optimal(MultiIndexView(np.ones(p), mu, h_star=truth.h_star), eps2).e_star
    e = np.array([
        fem_optimal(MultiIndexView(np.sqrt(np.clip(s, 0, 1)), mu, h_star=truth.h_star), eps2).e_star
        for s in sigma2
    ])
    return e, e - best


def _finish_mim(times, H, S2, truth, eps2, gamma, K, Ws=None) -> MimTrajectory:
    tables = _ShellTables(truth.p, truth.r_max)
    phi1 = np.array([tables.phi(s)[1] if truth.r_max >= 1 else 1.0 for s in S2])
    omega = np.array([softmin_omega(s, K) for s in S2])
    e_star, excess = mim_fem_curve(S2, truth, eps2, gamma)
    r0 = truth.r0
    target = np.min(S2[0]) ** r0 * abs(truth.h_star[r0])
    lead = np.sign(truth.h_star[r0]) * H[:, r0] / target if target > 0 else np.zeros(len(times))
    phases = phase_report(times, lead, S2.min(axis=1), excess)
    return MimTrajectory(np.asarray(times), H, S2, phi1, omega, e_star, excess, eps2, phases, Ws)


def _check_mim_guard(d, p, R):
    if d > MIM_GUARD["d"] or p > MIM_GUARD["p"] or R > MIM_GUARD["r_max"]:
        raise MemoryGuardError(
            f"multi-index noisy runs are limited to d <= {MIM_GUARD['d']}, p <= {MIM_GUARD['p']}, r_max <= {MIM_GUARD['r_max']}"
        )


def mim_population_run(truth: MultiIndexTruth, cfg: IndexRunConfig, *, W0=None, seed: int = 0,
                       eps2: float = 1e-6) -> MimTrajectory:
    """Integrate the reduced (h, sigma^2) system from a Stiefel initialization."""
    d, p = truth.W_star.shape
    W = random_stiefel(d, p, seed) if W0 is None else np.asarray(W0, dtype=float)
    K = cfg.K if cfg.K is not None else default_K(d, p)
    s2 = np.linalg.svd(W.T @ truth.W_star, compute_uv=False) ** 2
    state = MimState(0.0, None, np.zeros(truth.r_max + 1), s2, cfg.gamma, K)
    times, H, S2 = [0.0], [state.h], [state.sigma2]
    n = cfg.n_steps
    for k in range(1, n + 1):
        state = mim_population_step(state, truth.h_star, cfg.dt)
        if k % cfg.record_every == 0 or k == n:
            times.append(k * cfg.dt)
            H.append(state.h)
            S2.append(state.sigma2)
            if cfg.converged(1 - state.sigma2.min()):
                break
    return _finish_mim(times, np.array(H), np.array(S2), truth, eps2, cfg.gamma, K)


def _full_field(truth, mu2r, tables, contractor, K, d, p):
    R = truth.r_max
    Ws, hs = truth.W_star, truth.h_star

    def fld(y):
        W = y[: d * p].reshape(d, p)
        h = y[d * p :]
        U, s, Vt = np.linalg.svd(W.T @ Ws)
        s = np.clip(s, 0.0, 1.0)
        b = tables.btilde(s, h, hs)
        Z = Ws @ (Vt.T * b[None, :]) @ U.T
        hdot = mu2r * (tables.phi(s**2) * hs - h)
        if contractor is not None:
            e, Zn = contractor(W, h)
            hdot = hdot + mu2r * e
            Z = Z + Zn
        return np.concatenate([stiefel_project(W, Z).ravel(), hdot])

    return fld


def mim_sequence_run(noise: NoiseField | None, truth: MultiIndexTruth, cfg: IndexRunConfig, *, W0=None,
                     seed: int = 0, eps2: float | None = None, keep_W: bool = False) -> MimTrajectory:
    """Full Stiefel integration of (W, h), with the noise coupling when given."""
    d, p = truth.W_star.shape
    R = truth.r_max
    _check_mim_guard(d, p, R)
    contractor = None
    if noise is not None and noise.sigma > 0:
        if noise.d != d:
            raise CapMismatchError("noise field dimension differs from the model")
        contractor = MimContractor(noise, p, R)
    if eps2 is None:
        eps2 = noise.noise_var if contractor is not None else 1e-6
    K = cfg.K if cfg.K is not None else default_K(d, p)
    W = random_stiefel(d, p, seed) if W0 is None else np.asarray(W0, dtype=float)
    tables = _ShellTables(p, R)
    mu2r = mim_mu(R, cfg.gamma)[::2]
    fld = _full_field(truth, mu2r, tables, contractor, K, d, p)
    y = np.concatenate([W.ravel(), np.zeros(R + 1)])
    hnorm = np.linalg.norm(truth.h_star)

    def record(y):
        Wc = y[: d * p].reshape(d, p)
        return Wc.copy(), y[d * p :].copy(), np.linalg.svd(Wc.T @ truth.W_star, compute_uv=False) ** 2

    times = [0.0]
    Wk, hk, sk = record(y)
    Ws, H, S2 = [Wk], [hk], [sk]
    n = cfg.n_steps
    for k in range(1, n + 1):
        y = rk4_step(fld, y, cfg.dt)
        y[: d * p] = polar_retract(y[: d * p].reshape(d, p)).ravel()
        if k % cfg.record_every == 0 or k == n:
            if not np.all(np.isfinite(y)) or np.linalg.norm(y[d * p :]) > 10 * hnorm:
                raise DivergenceError(f"link coefficients diverged at t = {k * cfg.dt:.4g}")
            Wk, hk, sk = record(y)
            times.append(k * cfg.dt)
            Ws.append(Wk)
            H.append(hk)
            S2.append(np.clip(sk, 0.0, 1.0))
            if cfg.converged(1 - sk.min()):
                break
    return _finish_mim(times, np.array(H), np.array(S2), truth, eps2, cfg.gamma, K,
                       np.array(Ws) if keep_W else None)


# ---------------------------------------------------------------------------
# exports


def write_sim_csv(traj: SimTrajectory, path) -> None:
    R = traj.g.shape[1] - 1
    with open(path, "w", newline="") as fh:
        fh.write(f"#schema={SCHEMA_SIM}\n")
        writer = csv.writer(fh)
        writer.writerow(["t", "rho"] + [f"g_{r}" for r in range(R + 1)] + ["e_star", "excess"])
        for k, t in enumerate(traj.times):
            writer.writerow([repr(float(t)), repr(float(traj.rho[k]))] + [repr(float(v)) for v in traj.g[k]]
                            + [repr(float(traj.e_star[k])), repr(float(traj.excess[k]))])


def write_mim_csv(traj: MimTrajectory, path) -> None:
    p = traj.sigma2.shape[1]
    R = traj.h.shape[1] - 1
    with open(path, "w", newline="") as fh:
        fh.write(f"#schema={SCHEMA_MIM}\n")
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"sigma_{i + 1}" for i in range(p)] + ["phi_1", "omega"]
                        + [f"h_{r}" for r in range(R + 1)] + ["e_star", "excess"])
        for k, t in enumerate(traj.times):
            sig = np.sqrt(traj.sigma2[k])
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in sig]
                            + [repr(float(traj.phi1[k])), repr(float(traj.omega[k]))]
                            + [repr(float(v)) for v in traj.h[k]]
                            + [repr(float(traj.e_star[k])), repr(float(traj.excess[k]))])


def write_phase_json(phases: dict, path) -> None:
    keys = ("T0", "T1", "T2", "final_excess_fem")
    with open(path, "w") as fh:
        json.dump({k: phases.get(k) for k in keys}, fh, indent=2, sort_keys=True)
