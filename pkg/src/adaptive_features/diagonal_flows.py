"""Gradient flows of diagonal adaptive feature models.

Each coordinate carries a feature weight theta_j, an output coefficient
beta_j and, for depth D >= 1, D shared layers folded into one scalar b_j, so
that f_j = theta_j b_j^D beta_j. Under the sequence loss the coordinates
decouple; under the empirical loss they interact through a Gram matrix.
Either way every coordinate sees the same residual in all of its equations,
which makes theta^2 - beta^2 and b^2 - D beta^2 exact invariants. The
integrator uses their drift to control accuracy.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from ._ode import STEPPERS
from .fem import DiagonalView, FemRecord, fem_optimal
from .seq_model import SampleDataset, SequenceObservation, SparseMean, cosine_design

SCHEMA_TRAJECTORY = "diag-trajectory/v1"
TRAJECTORY_COLUMNS = ("t", "j", "theta", "beta", "b", "f", "lambda_eff")
RATE_BUDGET = 0.1
MAX_EMPIRICAL_J = 5000


class ConservationDriftError(RuntimeError):
    """A conserved quantity drifted past the configured tolerance."""


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowConfig:
    dt: float
    t_end: float
    integrator: str = "rk4"
    conservation_tol: float = 1e-6
    record_every: int = 1
    max_rate: float | None = None

    def __post_init__(self):
        if self.dt <= 0 or self.t_end < 0:
            raise ValueError("need dt > 0 and t_end >= 0")
        if self.integrator not in STEPPERS:
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.record_every < 1:
            raise ValueError("record_every must be at least 1")
        if self.max_rate is not None and self.dt * self.max_rate > RATE_BUDGET * (1 + 1e-9):
            raise ValueError(
                f"dt * rate = {self.dt * self.max_rate:.3g} exceeds {RATE_BUDGET}; lower dt"
            )

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.t_end / self.dt - 1e-9))

    @classmethod
    def for_rate(cls, rate: float, t_end: float, records: int = 100, **kw) -> "FlowConfig":
        """Largest uniform step with dt * rate <= 0.1 that lands on t_end."""
        n = max(1, int(math.ceil(t_end * rate / RATE_BUDGET)), records)
        n = records * int(math.ceil(n / records))
        return cls(dt=t_end / n, t_end=t_end, record_every=n // records, max_rate=rate, **kw)

    def halved(self) -> "FlowConfig":
        return replace(self, dt=self.dt / 2, record_every=2 * self.record_every)


@dataclass
class DiagTrajectory:
    times: np.ndarray
    theta: np.ndarray
    beta: np.ndarray
    b: np.ndarray | None
    lam: np.ndarray
    D: int
    b0: float
    index_set: np.ndarray
    dt: float
    drift: float

    @property
    def layer(self) -> np.ndarray:
        return np.ones_like(self.theta) if self.b is None else self.b**self.D

    @property
    def f(self) -> np.ndarray:
        return self.theta * self.layer * self.beta

    @property
    def lambda_eff(self) -> np.ndarray:
        return (self.theta * self.layer) ** 2


# ---------------------------------------------------------------------------
# schedules and step-size control


def t_star_sparse(n: int, c: float = 5.0) -> float:
    return c * math.log(n)


def t_star_diag(n: int, D: int = 0, c: float = 1.0) -> float:
    return c * n ** ((D + 1) / (D + 2)) / math.sqrt(math.log(n))


def b0_default(n: int, D: int, c: float = 1.0) -> float:
    return c * n ** (-1.0 / (2 * (D + 2)))


def empirical_truncation(n: int, p: float, q: float) -> int:
    return int(min(MAX_EMPIRICAL_J, 4 * (n * math.log(n)) ** (q / (p + 1))))


def _beta_at_fit(lam, target, D, b0):
    """beta >= 0 on the conserved manifold where theta b^D beta = target."""
    lam = np.asarray(lam, dtype=float)
    target = np.broadcast_to(np.abs(np.asarray(target, dtype=float)), lam.shape)

    def f(beta):
        return np.sqrt((lam + beta**2) * (b0**2 + D * beta**2) ** D) * beta

    hi = np.ones_like(lam)
    while np.any(f(hi) < target):
        hi = np.where(f(hi) < target, 2 * hi, hi)
    lo = np.zeros_like(lam)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        below = f(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return hi


def flow_rate_bound(lam, target, D: int = 0, b0: float = 1.0, gram_norm: float = 1.0) -> float:
    """Upper estimate of the stiffest rate met while each |f_j| climbs to |target_j|.

    Uses the curvature of f in the (theta, beta, b) coordinates on the
    conserved manifold, plus the escape rate of beta away from zero.
    """
    lam = np.asarray(lam, dtype=float)
    target = np.abs(np.broadcast_to(np.asarray(target, dtype=float), lam.shape))
    if D == 0:
        b0 = 1.0
    beta = _beta_at_fit(lam, target, D, b0)
    th2 = lam + beta**2
    b2 = b0**2 + D * beta**2
    curv = b2**D * (th2 + beta**2)
    if D >= 1:
        curv = curv + D**2 * th2 * beta**2 * b2 ** (D - 1)
    escape = np.sqrt(b2**D) * target * (1 + D)
    return float(gram_norm * np.max(curv + escape)) if len(lam) else 1.0


# ---------------------------------------------------------------------------
# core integrator


def _make_field(residual: Callable[[np.ndarray], np.ndarray], D: int):
    if D == 0:

        def field(y):
            th, be = y[0], y[1]
            r = residual(th * be)
            return np.stack([be * r, th * r])

        return field

    def field(y):
        th, be, b = y[0], y[1], y[2]
        bd1 = b ** (D - 1)
        bd = bd1 * b
        r = residual(th * bd * be)
        c = bd * r
        return np.stack([be * c, th * c, D * th * be * bd1 * r])

    return field


def _drift(y, lam, D, b0) -> float:
    out = float(np.max(np.abs(y[0] ** 2 - y[1] ** 2 - lam), initial=0.0))
    if D >= 1:
        out = max(out, float(np.max(np.abs(y[2] ** 2 - D * y[1] ** 2 - b0**2), initial=0.0)))
    return out


def integrate_diagonal(residual, lam, cfg: FlowConfig, *, D: int = 0, b0: float | None = None,
                       index_set=None, retry: bool = True) -> DiagTrajectory:
    """Integrate theta/beta/b driven by ``residual(f)``, the negative f-gradient.

    On a conservation-drift failure the run is repeated once at dt/2.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("initial weights must be positive")
    if D < 0:
        raise ValueError("depth must be nonnegative")
    if D >= 1 and (b0 is None or b0 <= 0):
        raise ValueError("depth D >= 1 needs b0 > 0")
    b0 = 1.0 if D == 0 else float(b0)
    J = len(lam)
    index_set = np.arange(J) if index_set is None else np.asarray(index_set)
    rows = [np.sqrt(lam), np.zeros(J)] + ([np.full(J, b0)] if D >= 1 else [])
    y = np.stack(rows)
    field = _make_field(residual, D)
    step = STEPPERS[cfg.integrator]
    times, snaps = [0.0], [y.copy()]
    worst = 0.0
    n = cfg.n_steps
    for k in range(1, n + 1):
        y = step(field, y, cfg.dt)
        if k % cfg.record_every == 0 or k == n:
            if not np.all(np.isfinite(y)):
                raise DivergenceError(f"non-finite state at t = {k * cfg.dt:.4g}")
            drift = _drift(y, lam, D, b0)
            if drift > cfg.conservation_tol:
                if retry:
                    return integrate_diagonal(residual, lam, cfg.halved(), D=D, b0=b0,
                                              index_set=index_set, retry=False)
                raise ConservationDriftError(
                    f"conservation drift {drift:.3g} > {cfg.conservation_tol:.3g} at dt = {cfg.dt:.3g}"
                )
            worst = max(worst, drift)
            times.append(min(k * cfg.dt, cfg.t_end))
            snaps.append(y.copy())
    arr = np.stack(snaps)
    return DiagTrajectory(
        times=np.asarray(times),
        theta=arr[:, 0],
        beta=arr[:, 1],
        b=arr[:, 2] if D >= 1 else None,
        lam=lam,
        D=D,
        b0=b0,
        index_set=index_set,
        dt=cfg.dt,
        drift=worst,
    )


# ---------------------------------------------------------------------------
# sequence-loss flows


def flow_sparse_seq(obs: SequenceObservation, cfg: FlowConfig, alpha: float) -> DiagTrajectory:
    """Over-parameterized linear model: theta_j(0) = alpha, beta_j(0) = 0."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    z = obs.z
    return integrate_diagonal(lambda f: z - f, np.full(len(z), alpha**2), cfg, index_set=obs.index_set)


def flow_diag_seq(obs: SequenceObservation, cfg: FlowConfig, lam, D: int = 0,
                  b0: float | None = None) -> DiagTrajectory:
    lam = np.asarray(lam, dtype=float)
    if lam.shape != obs.z.shape:
        raise ValueError("weights must match the observed index set")
    z = obs.z
    return integrate_diagonal(lambda f: z - f, lam, cfg, D=D, b0=b0, index_set=obs.index_set)


# ---------------------------------------------------------------------------
# empirical-loss flows


@dataclass(frozen=True)
class EmpiricalSystem:
    """Quadratic loss 1/2 f^T G f - c^T f + const, i.e. residual c - G f."""

    gram: np.ndarray
    target: np.ndarray

    def residual(self, f):
        return self.target - self.gram @ f

    @property
    def gram_norm(self) -> float:
        return float(np.linalg.norm(self.gram, 2))


def sparse_empirical_system(data: SampleDataset, *, sigma_hat=None, h=None) -> EmpiricalSystem:
    """Sigma_hat (w* - w) + h written as c - Sigma_hat w.

    ``sigma_hat`` and ``h`` override the sample versions; passing the
    identity and the sequence noise turns this into the sequence flow.
    """
    if not isinstance(data.truth.spec, SparseMean):
        raise TypeError("sparse empirical flow needs a SparseMean dataset")
    x = data.x
    n = x.shape[0]
    S = x.T @ x / n if sigma_hat is None else np.asarray(sigma_hat, dtype=float)
    hv = x.T @ data.eps / n if h is None else np.asarray(h, dtype=float)
    return EmpiricalSystem(S, S @ data.truth.coeffs + hv)


def diag_empirical_system(data: SampleDataset, J: int) -> EmpiricalSystem:
    if J > MAX_EMPIRICAL_J:
        raise ValueError(f"basis truncation J = {J} exceeds {MAX_EMPIRICAL_J}")
    if data.basis != "cosine":
        raise TypeError("diagonal empirical flow needs the cosine design")
    E = cosine_design(data.x, J)
    n = E.shape[0]
    return EmpiricalSystem(E.T @ E / n, E.T @ data.y / n)


def flow_sparse_empirical(data: SampleDataset, cfg: FlowConfig, alpha: float, *, sigma_hat=None,
                          h=None) -> DiagTrajectory:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    sysm = sparse_empirical_system(data, sigma_hat=sigma_hat, h=h)
    d = len(sysm.target)
    return integrate_diagonal(sysm.residual, np.full(d, alpha**2), cfg, index_set=np.arange(d))


def flow_diag_empirical(data: SampleDataset, cfg: FlowConfig, lam, D: int = 0, b0: float | None = None,
                        J: int | None = None) -> DiagTrajectory:
    spec = data.truth.spec
    if J is None:
        J = empirical_truncation(len(data.y), spec.p, spec.q)
    lam = np.asarray(lam, dtype=float)[:J]
    if len(lam) != J:
        raise ValueError("need at least J initial weights")
    sysm = diag_empirical_system(data, J)
    return integrate_diagonal(sysm.residual, lam, cfg, D=D, b0=b0, index_set=np.arange(1, J + 1))


# ---------------------------------------------------------------------------
# FEM along a trajectory


def truth_on(index_set, truth_indices, truth_coeffs) -> np.ndarray:
    """Truth coefficients aligned to ``index_set`` (zero where absent)."""
    lookup = dict(zip(np.asarray(truth_indices).tolist(), np.asarray(truth_coeffs).tolist()))
    return np.array([lookup.get(j, 0.0) for j in np.asarray(index_set).tolist()])


def fem_path(traj: DiagTrajectory, truth, eps2: float) -> list:
    truth = np.asarray(truth, dtype=float)
    lam_eff = traj.lambda_eff
    return [fem_optimal(DiagonalView(lam_eff[k], truth), eps2) for k in range(len(traj.times))]


def monotone_violations(values, slack: float) -> int:
    """Number of snapshot steps where the sequence rose by more than ``slack``."""
    v = np.asarray(values, dtype=float)
    return int(np.count_nonzero(np.diff(v) > slack))


def write_trajectory_csv(traj: DiagTrajectory, path) -> None:
    f, lam_eff = traj.f, traj.lambda_eff
    with open(path, "w", newline="") as fh:
        fh.write(f"#schema={SCHEMA_TRAJECTORY}\n")
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for k, t in enumerate(traj.times):
            for i, j in enumerate(traj.index_set):
                b = "" if traj.b is None else repr(float(traj.b[k, i]))
                writer.writerow([repr(float(t)), int(j), repr(float(traj.theta[k, i])),
                                 repr(float(traj.beta[k, i])), b, repr(float(f[k, i])),
                                 repr(float(lam_eff[k, i]))])


# ---------------------------------------------------------------------------
# one-dimensional oracles


@dataclass(frozen=True)
class ScalarPaths:
    """Vectorized scalar flows with constant targets, recorded at every step."""

    times: np.ndarray
    theta: np.ndarray
    beta: np.ndarray
    b: np.ndarray | None
    z: np.ndarray
    lam: np.ndarray
    D: int
    b0: float
    drift: float

    @property
    def gain(self) -> np.ndarray:
        """theta b^D, the square root of the effective weight."""
        return self.theta if self.b is None else self.theta * self.b**self.D

    @property
    def w(self) -> np.ndarray:
        return self.gain * self.beta


def scalar_flows(z, lam, t_end: float, *, D: int = 0, b0: float = 1.0, dt: float | None = None,
                 drift_tol: float = 1e-8) -> ScalarPaths:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    lam = np.broadcast_to(np.asarray(lam, dtype=float), z.shape).copy()
    if dt is None:
        rate = flow_rate_bound(lam, z, D, b0)
        dt = min(0.05 / rate, t_end / 100)
    n = int(math.ceil(t_end / dt))
    cfg = FlowConfig(dt=t_end / n, t_end=t_end, conservation_tol=drift_tol)
    traj = integrate_diagonal(lambda f: z - f, lam, cfg, D=D, b0=b0 if D else None, retry=True)
    return ScalarPaths(traj.times, traj.theta, traj.beta, traj.b, z, lam, D, traj.b0, traj.drift)


def lemma_two_layer_comparison(paths: ScalarPaths, i: int, k: int, atol: float = 1e-9):
    """theta_i >= theta_k from t = 0 on, when min|z_i| >= max|z_k| and theta_i(0) >= theta_k(0).

    Returns None when the hypothesis fails.
    """
    if abs(paths.z[i]) < abs(paths.z[k]) or paths.theta[0, i] < paths.theta[0, k]:
        return None
    return bool(np.all(paths.theta[:, i] >= paths.theta[:, k] - atol))


def lemma_two_layer_noise_upper(paths: ScalarPaths, i: int, rtol: float = 1e-9) -> bool:
    M = abs(paths.z[i])
    lam = paths.lam[i]
    t = paths.times
    th = paths.theta[:, i]
    early = t <= 1 / (math.sqrt(2) * M) if M > 0 else np.ones_like(t, dtype=bool)
    ok_early = np.all(th[early] <= math.sqrt(2 * lam) * (1 + rtol)) and np.all(
        np.abs(paths.w[early, i]) <= math.sqrt(2) * lam * (1 + rtol)
    )
    ok_exp = np.all(th <= math.sqrt(lam) * (1 + np.exp(math.sqrt(2) * t * M)) * (1 + rtol))
    return bool(ok_early and ok_exp)


def lemma_two_layer_signal_lower(paths: ScalarPaths, i: int) -> bool | None:
    m = abs(paths.z[i])
    if m == 0:
        return None
    t_sig = (2 + max(0.0, math.log(m / (2 * paths.lam[i])))) / m
    late = paths.times >= t_sig
    if not late.any():
        return None
    return bool(np.all(paths.theta[late, i] ** 2 >= 0.5 * m * (1 - 1e-9)))


def _depth_const(D: int) -> float:
    return 2 ** ((D + 1) / 2)


def lemma_multilayer_noise(paths: ScalarPaths, i: int, rtol: float = 1e-9) -> bool | None:
    D, b0 = paths.D, paths.b0
    lam, z = paths.lam[i], abs(paths.z[i])
    if D < 1 or math.sqrt(lam) > b0 / math.sqrt(D) or z == 0:
        return None
    c = _depth_const(D)
    t1 = 1 / (c * b0**D * z)
    base = c * math.sqrt(lam) * b0**D
    t = paths.times
    gain = paths.gain[:, i]
    lin = t <= t1
    horizon = (1 + math.log(b0 / (math.sqrt(D) * math.sqrt(lam)))) * t1
    window = t <= horizon
    ok_lin = np.all(gain[lin] <= base * (1 + rtol))
    bound = base * np.exp(c * b0**D * z * np.maximum(t - t1, 0.0))
    ok_exp = np.all(gain[window] <= bound[window] * (1 + rtol))
    return bool(ok_lin and ok_exp)


def multilayer_signal_time_bound(lam: float, z: float, D: int, b0: float) -> float:
    z = abs(z)
    if math.sqrt(lam) <= b0 / math.sqrt(D):
        top = (D ** (-D / 2) * z / 2) ** (1 / (D + 2))
        return 2 / (b0**D * z) * (1 + max(0.0, math.log(top / math.sqrt(lam))))
    if D == 1:
        R = max(0.0, math.log((D * z / 2) ** (1 / (D + 2)) / b0))
    else:
        R = 1 / (D - 1)
    return 2 / (math.sqrt(D) * math.sqrt(lam) * b0 ** (D - 1) * z) * (1 + R)


def lemma_multilayer_signal(paths: ScalarPaths, i: int) -> bool | None:
    """theta b^D reaches |z|^{(D+1)/(D+2)} before the case-matched time bound."""
    D = paths.D
    z = abs(paths.z[i])
    if D < 1 or z == 0:
        return None
    bound = multilayer_signal_time_bound(paths.lam[i], z, D, paths.b0)
    if paths.times[-1] < bound:
        return None
    hit = np.nonzero(paths.gain[:, i] >= z ** ((D + 1) / (D + 2)) * (1 - 1e-12))[0]
    return bool(len(hit) and paths.times[hit[0]] <= bound)


def lemma_multilayer_ultimate(paths: ScalarPaths, i: int) -> bool | None:
    D, b0, lam, z = paths.D, paths.b0, paths.lam[i], abs(paths.z[i])
    if D < 1 or not b0 / math.sqrt(D) <= math.sqrt(lam) <= 1:
        return None
    cap = _depth_const(D) * math.sqrt(D) * max(math.sqrt(lam) * b0**D, z ** ((D + 1) / (D + 2)), z / b0)
    return bool(np.all(paths.gain[:, i] <= cap * (1 + 1e-9)))


def onedim_oracles(z, lam, t_end: float, *, D: int = 0, b0: float = 1.0, dt: float | None = None) -> dict:
    """Integrate scalar flows and evaluate every applicable lemma.

    Returns lemma name -> list of per-instance verdicts (True, False, or None
    when the lemma's hypothesis does not hold for that instance), plus the
    observed conservation drift.
    """
    paths = scalar_flows(z, lam, t_end, D=D, b0=b0, dt=dt)
    idx = range(len(paths.z))
    report = {"drift": paths.drift}
    if D == 0:
        report["comparison"] = [
            lemma_two_layer_comparison(paths, i, k) for i in idx for k in idx if i != k
        ]
        report["noise_upper"] = [lemma_two_layer_noise_upper(paths, i) for i in idx]
        report["signal_lower"] = [lemma_two_layer_signal_lower(paths, i) for i in idx]
    else:
        report["noise_case"] = [lemma_multilayer_noise(paths, i) for i in idx]
        report["signal_case"] = [lemma_multilayer_signal(paths, i) for i in idx]
        report["ultimate_bound"] = [lemma_multilayer_ultimate(paths, i) for i in idx]
    return report

