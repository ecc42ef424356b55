"""Sparse algebra for normalized (orthonormal) probabilist Hermite polynomials.

A function on R^d is stored as a sparse map from multi-indices to
coefficients in the tensorized basis H_m(x) = prod_j H_{m_j}(x_j), where
H_0 = 1, H_1 = x and sqrt(n+1) H_{n+1} = x H_n - sqrt(n) H_{n-1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations_with_replacement
from typing import Iterator, Mapping, Sequence

import numpy as np

DROP_TOL = 1e-14
TABLE_CAP = 10**6


class DegreeOverflowError(ValueError):
    """Raised when an algebra operation would exceed the series degree budget."""


class TableCapError(RuntimeError):
    """Raised when contingency-table enumeration exceeds the table limit."""


class NormViolationError(ValueError):
    pass


MultiIndex = tuple


def degree(m: Sequence[int]) -> int:
    return int(sum(m))


def multi_indices(dim: int, deg: int) -> Iterator[tuple]:
    """All m in N^dim with |m| = deg, in lexicographically decreasing order."""
    if dim == 0:
        if deg == 0:
            yield ()
        return
    for combo in combinations_with_replacement(range(dim), deg):
        m = [0] * dim
        for j in combo:
            m[j] += 1
        yield tuple(m)


def exponent_matrix(dim: int, deg: int) -> np.ndarray:
    """Rows are the multi-indices of degree ``deg`` in ``dim`` variables."""
    rows = list(multi_indices(dim, deg))
    if not rows:
        return np.zeros((0, dim), dtype=np.int64)
    return np.array(rows, dtype=np.int64).reshape(len(rows), dim)


def log_factorial(m) -> float:
    """log(m!) for a multi-index, using the product convention m! = prod m_j!."""
    return float(sum(math.lgamma(k + 1) for k in m))


def log_rising(a: float, r: int) -> float:
    return math.lgamma(a + r) - math.lgamma(a)


def monomial(x: np.ndarray, m: Sequence[int]) -> float:
    """x^m with the convention 0^0 = 1."""
    out = 1.0
    for xj, mj in zip(x, m):
        if mj:
            out *= float(xj) ** mj
    return out


# ---------------------------------------------------------------------------
# one-dimensional evaluation


def hermite_table(max_deg: int, x) -> np.ndarray:
    """Values H_0..H_max_deg at x; shape x.shape + (max_deg + 1,)."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (max_deg + 1,))
    out[..., 0] = 1.0
    if max_deg >= 1:
        out[..., 1] = x
    for n in range(1, max_deg):
        out[..., n + 1] = (x * out[..., n] - math.sqrt(n) * out[..., n - 1]) / math.sqrt(n + 1)
    return out


def hermite_eval_1d(m: int, x):
    """Normalized H_m at x via the three-term recurrence."""
    if m < 0:
        raise ValueError("degree must be nonnegative")
    vals = hermite_table(m, x)[..., m]
    return float(vals) if np.ndim(vals) == 0 else vals


# ---------------------------------------------------------------------------
# sparse series


@dataclass(frozen=True)
class HermiteSeries:
    dim: int
    coeffs: Mapping[tuple, float] = field(default_factory=dict)
    max_degree: int = 0

    def __post_init__(self):
        clean = {}
        for key, val in self.coeffs.items():
            key = tuple(int(k) for k in key)
            if len(key) != self.dim:
                raise ValueError(f"key {key} has length {len(key)}, expected {self.dim}")
            if sum(key) > self.max_degree:
                raise DegreeOverflowError(f"key {key} exceeds max_degree {self.max_degree}")
            if abs(val) >= DROP_TOL:
                clean[key] = clean.get(key, 0.0) + float(val)
        object.__setattr__(self, "coeffs", clean)

    @classmethod
    def from_dict(cls, coeffs: Mapping, max_degree: int | None = None) -> "HermiteSeries":
        keys = list(coeffs)
        if not keys:
            raise ValueError("cannot infer dim from an empty map")
        dim = len(keys[0])
        if max_degree is None:
            max_degree = max(sum(k) for k in keys)
        return cls(dim, dict(coeffs), max_degree)

    def get(self, m) -> float:
        return self.coeffs.get(tuple(m), 0.0)

    def norm(self) -> float:
        return math.sqrt(sum(v * v for v in self.coeffs.values()))

    def dot(self, other: "HermiteSeries") -> float:
        """L2(gamma) inner product, i.e. the coefficient dot product."""
        small, big = sorted((self.coeffs, other.coeffs), key=len)
        return sum(v * big.get(k, 0.0) for k, v in small.items())

    def scale(self, c: float) -> "HermiteSeries":
        return HermiteSeries(self.dim, {k: c * v for k, v in self.coeffs.items()}, self.max_degree)

    def __add__(self, other: "HermiteSeries") -> "HermiteSeries":
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        out = dict(self.coeffs)
        for k, v in other.coeffs.items():
            out[k] = out.get(k, 0.0) + v
        return HermiteSeries(self.dim, out, max(self.max_degree, other.max_degree))


def series_eval(f: HermiteSeries, x) -> float | np.ndarray:
    """Evaluate sum_m f_m prod_j H_{m_j}(x_j) at one point or a batch (N, dim)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[1] != f.dim:
        raise ValueError("point dimension mismatch")
    table = hermite_table(max(f.max_degree, 0), pts)  # (N, dim, deg+1)
    total = np.zeros(pts.shape[0])
    cols = np.arange(f.dim)
    for m, c in f.coeffs.items():
        total += c * np.prod(table[:, cols, list(m)], axis=1)
    return float(total[0]) if single else total


def series_derivative(f: HermiteSeries, i: int) -> HermiteSeries:
    """Coefficients of d/dx_i f: g_m = sqrt(m_i + 1) f_{m + e_i}."""
    if not 0 <= i < f.dim:
        raise IndexError("coordinate out of range")
    out = {}
    for m, c in f.coeffs.items():
        if m[i] == 0:
            continue
        k = list(m)
        k[i] -= 1
        out[tuple(k)] = math.sqrt(m[i]) * c
    return HermiteSeries(f.dim, out, max(f.max_degree - 1, 0))


def series_mul_coordinate(f: HermiteSeries, i: int, max_degree: int | None = None) -> HermiteSeries:
    """Coefficients of x_i f(x) using x H_n = sqrt(n+1) H_{n+1} + sqrt(n) H_{n-1}.

    ``max_degree`` is the caller's truncation budget (defaults to that of
    ``f``); exceeding it raises DegreeOverflowError.
    """
    if not 0 <= i < f.dim:
        raise IndexError("coordinate out of range")
    budget = f.max_degree if max_degree is None else max_degree
    out: dict = {}
    for m, c in f.coeffs.items():
        up = list(m)
        up[i] += 1
        if sum(up) > budget:
            raise DegreeOverflowError(f"x_{i} * H_{m} exceeds degree budget {budget}")
        key = tuple(up)
        out[key] = out.get(key, 0.0) + math.sqrt(m[i] + 1) * c
        if m[i] > 0:
            down = list(m)
            down[i] -= 1
            key = tuple(down)
            out[key] = out.get(key, 0.0) + math.sqrt(m[i]) * c
    return HermiteSeries(f.dim, out, budget)


# ---------------------------------------------------------------------------
# frame changes


def contingency_tables(rows: Sequence[int], cols: Sequence[int], cap: int = TABLE_CAP) -> list:
    """Nonnegative integer matrices with the given row and column sums."""
    rows, cols = list(rows), list(cols)
    if sum(rows) != sum(cols):
        return []
    p, q = len(rows), len(cols)
    tables: list = []

    def fill_row(i, remaining, acc):
        if i == p - 1:
            tables.append(acc + [tuple(remaining)])
            if len(tables) > cap:
                raise TableCapError(f"more than {cap} contingency tables")
            return
        target = rows[i]
        # tail capacity after column j, to prune infeasible partial rows
        tail = [0] * (q + 1)
        for j in range(q - 1, -1, -1):
            tail[j] = tail[j + 1] + remaining[j]
        row = [0] * q

        def place(j, left):
            if j == q - 1:
                if left <= remaining[j]:
                    row[j] = left
                    new_rem = [remaining[k] - row[k] for k in range(q)]
                    fill_row(i + 1, new_rem, acc + [tuple(row)])
                return
            lo = max(0, left - tail[j + 1])
            for v in range(min(left, remaining[j]), lo - 1, -1):
                row[j] = v
                place(j + 1, left - v)
            row[j] = 0

        if q == 0:
            if target == 0:
                fill_row(i + 1, remaining, acc + [()])
            return
        place(0, target)

    if p == 0:
        return [[]] if sum(cols) == 0 else []
    fill_row(0, cols, [])
    return tables


def frame_change_coeff(m, n, R, cap: int = TABLE_CAP) -> float:
    """E[H_m(P^T x) H_n(Q^T x)] for R = P^T Q with operator norm at most one.

    Equals sum over contingency tables U with row sums m and column sums n
    of sqrt(m! n!) / U! * prod R_ij^U_ij, and zero when |m| != |n|.
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    m, n = tuple(m), tuple(n)
    if R.shape != (len(m), len(n)):
        raise ValueError(f"R has shape {R.shape}, expected {(len(m), len(n))}")
    if sum(m) != sum(n):
        return 0.0
    half = 0.5 * (log_factorial(m) + log_factorial(n))
    total = 0.0
    for table in contingency_tables(m, n, cap):
        term = math.exp(half - sum(log_factorial(row) for row in table))
        for i, row in enumerate(table):
            for j, u in enumerate(row):
                if u:
                    term *= R[i, j] ** u
        total += term
    return total


def pullback_series(f: HermiteSeries, W: np.ndarray, cap: int = TABLE_CAP) -> HermiteSeries:
    """Ambient coefficients of x -> f(W^T x) for W with orthonormal columns."""
    W = np.asarray(W, dtype=float)
    d, p = W.shape
    if p != f.dim:
        raise ValueError("W columns must match the series dimension")
    R = W.T
    out: dict = {}
    by_degree: dict = {}
    for m, c in f.coeffs.items():
        by_degree.setdefault(sum(m), []).append((m, c))
    for k, terms in by_degree.items():
        for n in multi_indices(d, k):
            val = sum(c * frame_change_coeff(m, n, R, cap) for m, c in terms)
            if abs(val) >= DROP_TOL:
                out[n] = val
    return HermiteSeries(d, out, f.max_degree)


# ---------------------------------------------------------------------------
# Gaussian convolution A_Sigma


def gauss_convolve(f: HermiteSeries, sigma: Sequence[float]) -> HermiteSeries:
    """Coefficients of y -> E f(sigma * y + xi), xi ~ N(0, I - diag(sigma)^2)."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (f.dim,):
        raise ValueError("sigma length must equal the series dimension")
    if np.any(sigma < 0) or np.any(sigma > 1):
        raise ValueError("every sigma_j must lie in [0, 1]")
    out = {m: c * monomial(sigma, m) for m, c in f.coeffs.items()}
    return HermiteSeries(f.dim, out, f.max_degree)


# ---------------------------------------------------------------------------
# rotation-invariant expansions


@dataclass(frozen=True)
class RotInvCoeffs:
    """nu[r] maps each r-degree multi-index s to nu_s; C[r] is the normalizer."""

    p: int
    r_max: int
    nu: tuple
    C: tuple

    def exponents(self, r: int) -> np.ndarray:
        return np.array(list(self.nu[r].keys()), dtype=np.int64).reshape(-1, self.p)

    def values(self, r: int) -> np.ndarray:
        return np.array(list(self.nu[r].values()))

    def hbar(self, r: int) -> HermiteSeries:
        """The rotation-invariant basis function sum_s nu_s H_{2s}."""
        coeffs = {tuple(2 * k for k in s): v for s, v in self.nu[r].items()}
        return HermiteSeries(self.p, coeffs, 2 * r)


def log_normalizer(p: int, r: int) -> float:
    """log C_r with C_r = 4^r (p/2)_r / r!."""
    return r * math.log(4.0) + log_rising(p / 2.0, r) - math.lgamma(r + 1)


def log_central_binom(s) -> float:
    """log prod_j binom(2 s_j, s_j)."""
    return sum(math.lgamma(2 * k + 1) - 2 * math.lgamma(k + 1) for k in s)


@lru_cache(maxsize=None)
def rot_inv_coeffs(p: int, r_max: int) -> RotInvCoeffs:
    if p < 1 or r_max < 0:
        raise ValueError("need p >= 1 and r_max >= 0")
    nus, Cs = [], []
    for r in range(r_max + 1):
        logc = log_normalizer(p, r)
        Cs.append(math.exp(logc))
        nus.append({s: math.exp(0.5 * (log_central_binom(s) - logc)) for s in multi_indices(p, r)})
    return RotInvCoeffs(p, r_max, tuple(nus), tuple(Cs))


def _check_norm(Psi: np.ndarray) -> np.ndarray:
    sv = np.linalg.svd(Psi, compute_uv=False)
    if sv.size and sv[0] > 1 + 1e-9:
        raise NormViolationError(f"operator norm {sv[0]:.12g} exceeds one")
    return sv


def phi_r_from_sigma(sigma: Sequence[float], r: int) -> float:
    """sum_{|s| = r} nu_s^2 sigma^{2s} for a vector of p singular values."""
    sigma = np.asarray(sigma, dtype=float)
    if r == 0:
        return 1.0
    coeffs = rot_inv_coeffs(len(sigma), r)
    E = coeffs.exponents(r)
    return float(np.sum(coeffs.values(r) ** 2 * np.prod(sigma[None, :] ** (2 * E), axis=1)))


def phi_r_series(Psi, r: int) -> float:
    """C_r^{-1} [z^r] det(I - 4 Psi Psi^T z)^{-1/2} by convolving scalar series."""
    Psi = np.atleast_2d(np.asarray(Psi, dtype=float))
    _check_norm(Psi)
    if r == 0:
        return 1.0
    p = Psi.shape[0]
    lam = np.clip(np.linalg.eigvalsh(Psi @ Psi.T), 0.0, None)
    k = np.arange(r + 1)
    central = np.exp([math.lgamma(2 * j + 1) - 2 * math.lgamma(j + 1) for j in k])
    series = np.zeros(r + 1)
    series[0] = 1.0
    for li in lam:
        factor = central * li ** k
        series = np.convolve(series, factor)[: r + 1]
    return float(series[r] / math.exp(log_normalizer(p, r)))


def phi_r(Psi, r: int, method: str = "sum") -> float:
    """phi_r of a p x p* matrix; ``method`` is 'sum' (nu-weighted) or 'series'."""
    Psi = np.atleast_2d(np.asarray(Psi, dtype=float))
    if method == "series":
        return phi_r_series(Psi, r)
    sv = _check_norm(Psi)
    p = Psi.shape[0]
    sigma = np.zeros(p)
    sigma[: min(p, sv.size)] = sv[:p]
    return phi_r_from_sigma(sigma, r)


def softmin_omega(x, K: float) -> float:
    """omega = -(1/K) log sum_i exp(-K x_i), computed with a min shift."""
    if K <= 0:
        raise ValueError("K must be positive")
    x = np.asarray(x, dtype=float).ravel()
    lo = float(x.min())
    return lo - math.log(float(np.sum(np.exp(-K * (x - lo))))) / K
