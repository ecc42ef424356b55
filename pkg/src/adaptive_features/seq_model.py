"""Truth functions, Gaussian sequence observations and sampled datasets."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .hermite_core import HermiteSeries, multi_indices, rot_inv_coeffs, monomial, log_factorial

MEMORY_GUARD = 10**7

SCHEMA_OBSERVATION = "observation/v1"


class InvalidSpecError(ValueError):
    pass


class MemoryGuardError(MemoryError):
    pass


class IndexMismatchError(ValueError):
    pass


class UnsupportedVariantError(TypeError):
    pass


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by (seed, stream).

    Distinct streams of one seed are independent, so e.g. the observation
    noise and the initialization of a run never share draws.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


STREAM_NOISE = 0
STREAM_INIT = 1
STREAM_DATA = 2
STREAM_TRUTH = 3


# ---------------------------------------------------------------------------
# truth specifications


@dataclass(frozen=True)
class SparseMean:
    d: int
    s_star: int
    magnitudes: tuple | None = None
    floor: float = 0.5
    support: tuple | None = None


@dataclass(frozen=True)
class MisalignedPQ:
    p: float
    q: float
    gamma: float
    j_max: int
    c: float = 1.0


@dataclass(frozen=True)
class SingleIndex:
    d: int
    g_star: tuple
    w_star: tuple | None = None


@dataclass(frozen=True)
class MultiIndex:
    d: int
    p: int
    h_star: tuple
    W_star: tuple | None = None


TruthSpec = Union[SparseMean, MisalignedPQ, SingleIndex, MultiIndex]


@dataclass(frozen=True)
class DiagonalTruth:
    """Coefficients f*_j on the integer index set ``indices``."""

    indices: np.ndarray
    coeffs: np.ndarray
    spec: TruthSpec

    def norm2(self) -> float:
        return float(np.sum(self.coeffs**2))


@dataclass(frozen=True)
class SingleIndexTruth:
    w_star: np.ndarray
    g_star: np.ndarray
    spec: SingleIndex

    @property
    def r_max(self) -> int:
        return len(self.g_star) - 1

    @property
    def r0(self) -> int:
        return information_exponent(self.g_star)

    def ambient_coeffs(self, degree: int | None = None) -> HermiteSeries:
        """f*_m = binom(r, m)^{1/2} w*^m g*_r for |m| = r."""
        d = len(self.w_star)
        out = {}
        degs = range(self.r_max + 1) if degree is None else [degree]
        for r in degs:
            if self.g_star[r] == 0:
                continue
            lr = math.lgamma(r + 1)
            for m in multi_indices(d, r):
                w = monomial(self.w_star, m)
                if w:
                    out[m] = math.exp(0.5 * (lr - log_factorial(m))) * w * self.g_star[r]
        return HermiteSeries(d, out, self.r_max)


@dataclass(frozen=True)
class MultiIndexTruth:
    W_star: np.ndarray
    h_star: np.ndarray
    spec: MultiIndex

    @property
    def p(self) -> int:
        return self.W_star.shape[1]

    @property
    def r_max(self) -> int:
        return len(self.h_star) - 1

    @property
    def r0(self) -> int:
        return information_exponent(self.h_star)

    def link_series(self) -> HermiteSeries:
        """g* in R^p with g*_{2s} = nu_s h*_r."""
        coeffs = rot_inv_coeffs(self.p, self.r_max)
        out = {}
        for r, h in enumerate(self.h_star):
            for s, nu in coeffs.nu[r].items():
                out[tuple(2 * k for k in s)] = nu * h
        return HermiteSeries(self.p, out, 2 * self.r_max)


def information_exponent(coeffs) -> int:
    for r in range(1, len(coeffs)):
        if coeffs[r] != 0:
            return r
    raise InvalidSpecError("link has no nonzero coefficient of positive degree")


def misaligned_positions(q: float, j_max: int) -> list:
    """j(l) = round(l^q), moving to the next free index on a collision."""
    taken = set()
    positions = []
    ell = 1
    while True:
        j = int(round(ell**q))
        while j in taken:
            j += 1
        if j > j_max:
            break
        taken.add(j)
        positions.append((ell, j))
        ell += 1
    return positions


def kernel_weights(j_max: int, gamma: float) -> np.ndarray:
    """lambda_j = j^{-gamma}, j = 1..j_max."""
    return np.arange(1, j_max + 1, dtype=float) ** (-gamma)


def make_truth(spec: TruthSpec, *, allow_truncated_kernel: bool = False):
    """Realize a truth specification as coefficients.

    ``allow_truncated_kernel`` admits gamma in (0, 1] for MisalignedPQ, which
    is only meaningful because the index set is finite.
    """
    if isinstance(spec, SparseMean):
        if not 0 <= spec.s_star <= spec.d:
            raise InvalidSpecError("need 0 <= s* <= d")
        mags = spec.magnitudes
        if mags is None:
            mags = tuple((-1.0) ** k for k in range(spec.s_star))
        if len(mags) != spec.s_star:
            raise InvalidSpecError("need exactly s* magnitudes")
        if any(abs(a) < spec.floor for a in mags):
            raise InvalidSpecError(f"signal magnitudes must be at least {spec.floor}")
        support = spec.support if spec.support is not None else tuple(range(spec.s_star))
        if len(set(support)) != spec.s_star or any(not 0 <= j < spec.d for j in support):
            raise InvalidSpecError("support must be s* distinct coordinates")
        w = np.zeros(spec.d)
        w[list(support)] = mags
        return DiagonalTruth(np.arange(spec.d), w, spec)

    if isinstance(spec, MisalignedPQ):
        if spec.q <= 1:
            raise InvalidSpecError("misalignment needs q > 1")
        if spec.p <= 0:
            raise InvalidSpecError("smoothness needs p > 0")
        if spec.gamma <= 1 and not (allow_truncated_kernel and spec.gamma > 0):
            raise InvalidSpecError("kernel decay needs gamma > 1")
        f = np.zeros(spec.j_max)
        for ell, j in misaligned_positions(spec.q, spec.j_max):
            f[j - 1] = spec.c * ell ** (-(spec.p + 1) / 2)
        return DiagonalTruth(np.arange(1, spec.j_max + 1), f, spec)

    if isinstance(spec, SingleIndex):
        w = np.zeros(spec.d)
        if spec.w_star is None:
            w[0] = 1.0
        else:
            w = np.asarray(spec.w_star, dtype=float)
        if w.shape != (spec.d,) or abs(np.linalg.norm(w) - 1) > 1e-10:
            raise InvalidSpecError("w* must be a unit vector in R^d")
        g = np.asarray(spec.g_star, dtype=float)
        information_exponent(g)
        return SingleIndexTruth(w, g, spec)

    if isinstance(spec, MultiIndex):
        if spec.W_star is None:
            W = np.eye(spec.d)[:, : spec.p]
        else:
            W = np.asarray(spec.W_star, dtype=float)
        if W.shape != (spec.d, spec.p) or np.abs(W.T @ W - np.eye(spec.p)).max() > 1e-10:
            raise InvalidSpecError("W* must have orthonormal columns")
        h = np.asarray(spec.h_star, dtype=float)
        information_exponent(h)
        return MultiIndexTruth(W, h, spec)

    raise UnsupportedVariantError(f"unknown truth spec {type(spec).__name__}")


def decaying_link(r_max: int, r0: int, alpha: float) -> tuple:
    """Link coefficients (r/r0)^{-(alpha+1)/2} for r0 <= r <= r_max, else 0.

    For a rotation-invariant multi-index link the same h*_r give
    |g*_m| ~ |m|^{-(alpha+p)/2}, since nu_s is of order r^{-(p-1)/2}.
    """
    return tuple(0.0 if r < r0 else (r / r0) ** (-(alpha + 1) / 2) for r in range(r_max + 1))


# ---------------------------------------------------------------------------
# sequence observations


@dataclass(frozen=True)
class SequenceObservation:
    index_set: np.ndarray
    z: np.ndarray
    noise_var: float
    truth_coeffs: np.ndarray
    n: int
    seed: int

    @property
    def eps(self) -> np.ndarray:
        return self.z - self.truth_coeffs


def observe_sequence(truth, n: int, sigma: float = 1.0, index_cap: int | None = None, seed: int = 0) -> SequenceObservation:
    """z_j = f*_j + eps_j with eps_j iid N(0, sigma^2 / n) over a capped index set."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if isinstance(truth, DiagonalTruth):
        indices, coeffs = truth.indices, truth.coeffs
    else:
        coeffs = np.asarray(truth, dtype=float)
        indices = np.arange(len(coeffs))
    size = len(coeffs) if index_cap is None else int(index_cap)
    if size > MEMORY_GUARD:
        raise MemoryGuardError(f"{size} indices exceed the guard of {MEMORY_GUARD}")
    if size <= len(coeffs):
        idx, f = indices[:size], coeffs[:size]
    else:
        start = indices[-1] + 1 if len(indices) else 0
        idx = np.concatenate([indices, np.arange(start, start + size - len(coeffs))])
        f = np.concatenate([coeffs, np.zeros(size - len(coeffs))])
    noise_var = sigma**2 / n
    eps = make_rng(seed, STREAM_NOISE).normal(0.0, 1.0, size) * math.sqrt(noise_var)
    return SequenceObservation(np.asarray(idx), f + eps, noise_var, np.asarray(f, dtype=float), n, seed)


def observation_to_csv(obs: SequenceObservation, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"#schema={SCHEMA_OBSERVATION}\n")
        writer = csv.writer(fh)
        writer.writerow(["index", "z", "truth"])
        for j, z, f in zip(obs.index_set, obs.z, obs.truth_coeffs):
            writer.writerow([int(j), repr(float(z)), repr(float(f))])


def seq_loss_gradient_parts(pop_grad, jacobian=None, eps=None, *, coupling=None, jac_index=None, eps_index=None):
    """Gradient of the noisy sequence loss as population part minus noise coupling.

    With f_j the model coefficients, grad L_hat = grad L - sum_j eps_j grad f_j.
    ``jacobian`` is either a full (indices x params) matrix or a 1-D array
    holding a diagonal Jacobian. Callers that contract the noise themselves
    pass ``coupling`` = sum_j eps_j grad f_j instead.
    """
    pop_grad = np.asarray(pop_grad, dtype=float)
    if coupling is not None:
        return pop_grad - np.asarray(coupling, dtype=float)
    if jacobian is None or eps is None:
        return pop_grad
    if jac_index is not None and eps_index is not None:
        if len(jac_index) != len(eps_index) or np.any(np.asarray(jac_index) != np.asarray(eps_index)):
            raise IndexMismatchError("Jacobian and noise index sets differ")
    jacobian = np.asarray(jacobian, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if jacobian.ndim == 1:
        if jacobian.shape != eps.shape or jacobian.shape != pop_grad.shape:
            raise IndexMismatchError("diagonal Jacobian, noise and gradient lengths differ")
        return pop_grad - eps * jacobian
    if jacobian.shape[0] != eps.shape[0]:
        raise IndexMismatchError("Jacobian rows and noise entries differ")
    return pop_grad - jacobian.T @ eps


# ---------------------------------------------------------------------------
# sampled datasets


@dataclass(frozen=True)
class SampleDataset:
    x: np.ndarray
    y: np.ndarray
    basis: str
    truth: DiagonalTruth
    sigma: float
    seed: int
    eps: np.ndarray = field(repr=False, default=None)


def cosine_basis(x, j) -> np.ndarray:
    """e_0 = 1 and e_j(x) = sqrt(2) cos(pi j x) on [0, 1]."""
    x = np.asarray(x, dtype=float)
    j = np.asarray(j)
    vals = math.sqrt(2.0) * np.cos(np.pi * np.multiply.outer(x, j))
    return np.where(j == 0, 1.0, vals)


def cosine_design(x, J: int) -> np.ndarray:
    """Design matrix with columns e_1..e_J."""
    return cosine_basis(x, np.arange(1, J + 1))


def sample_dataset(spec: TruthSpec, n: int, sigma: float = 1.0, seed: int = 0, *, truth=None) -> SampleDataset:
    if isinstance(spec, (SingleIndex, MultiIndex)):
        raise UnsupportedVariantError("sampled datasets cover the diagonal families only")
    if truth is None:
        truth = make_truth(spec, allow_truncated_kernel=True)
    rng = make_rng(seed, STREAM_DATA)
    if isinstance(spec, SparseMean):
        x = rng.normal(size=(n, spec.d))
        signal = x @ truth.coeffs
        basis = "gaussian-linear"
    elif isinstance(spec, MisalignedPQ):
        x = rng.uniform(0.0, 1.0, size=n)
        support = np.nonzero(truth.coeffs)[0]
        signal = cosine_basis(x, truth.indices[support]) @ truth.coeffs[support]
        basis = "cosine"
    else:
        raise UnsupportedVariantError(f"unknown truth spec {type(spec).__name__}")
    eps = sigma * rng.normal(size=n)
    return SampleDataset(x, signal + eps, basis, truth, sigma, seed, eps)
