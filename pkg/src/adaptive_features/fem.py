"""Feature error measure (FEM) and its optimal truncation level.

For weights lambda_j, truth coefficients f*_j, noise level eps2 and level
delta, the measure is

    E = E_proj + eps2 * #{lambda_j >= delta} + sum_j f*_j^2 1{lambda_j < delta}.

Every view is reduced to "cells": groups of basis functions sharing one
weight, each with a variance multiplicity and a bias contribution.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .hermite_core import HermiteSeries, monomial, phi_r_from_sigma

SCHEMA_FEM = "fem-curve/v1"
FEM_COLUMNS = ("t", "delta_star", "e_star", "e_proj", "e_v", "e_b")


@dataclass(frozen=True)
class DiagonalView:
    weights: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        f = np.asarray(self.truth, dtype=float)
        if w.shape != f.shape:
            raise ValueError("weights and truth must align")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "truth", f)


@dataclass(frozen=True)
class SingleIndexView:
    """Alignment rho, weights lambda_r (r = 0..r_max) and link coefficients g*_r."""

    rho: float
    lambdas: np.ndarray
    g_star: np.ndarray

    def __post_init__(self):
        if abs(self.rho) > 1 + 1e-9:
            raise ValueError("|rho| must not exceed one")


@dataclass(frozen=True)
class MultiIndexView:
    """Singular values sigma of W^T W*, weights mu_k by degree k, and the truth.

    The truth is either ``h_star`` (rotation-invariant link, coefficient
    g*_{2s} = nu_s h*_r) or an explicit ``g_series`` on R^p.
    """

    sigma: np.ndarray
    mu: np.ndarray
    h_star: np.ndarray | None = None
    g_series: HermiteSeries | None = None

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=float)
        if np.any(s < -1e-12) or np.any(s > 1 + 1e-8):
            raise ValueError("singular values must lie in [0, 1]")
        object.__setattr__(self, "sigma", np.clip(s, 0.0, 1.0))
        if (self.h_star is None) == (self.g_series is None):
            raise ValueError("give exactly one of h_star and g_series")


@dataclass(frozen=True)
class FemRecord:
    delta: float
    e_proj: float
    e_v: float
    e_b: float
    total: float
    delta_star: float | None = None
    e_star: float | None = None


def sim_weights(r_max: int, gamma: float = 0.5) -> np.ndarray:
    """lambda_r = exp(-gamma r), r = 0..r_max."""
    return np.exp(-gamma * np.arange(r_max + 1))


def _cells(view):
    """(weights, multiplicities, bias, e_proj) for any view."""
    if isinstance(view, DiagonalView):
        return view.weights, np.ones_like(view.weights), view.truth**2, 0.0
    if isinstance(view, SingleIndexView):
        g2 = np.asarray(view.g_star, dtype=float) ** 2
        r = np.arange(len(g2))
        keep = np.abs(view.rho) ** (2 * r)
        lam = np.asarray(view.lambdas, dtype=float)[: len(g2)]
        return lam, np.ones_like(lam), keep * g2, float(np.sum((1 - keep) * g2))
    if isinstance(view, MultiIndexView):
        sigma = view.sigma
        p = len(sigma)
        mu = np.asarray(view.mu, dtype=float)
        kept = np.zeros(len(mu))
        full = np.zeros(len(mu))
        if view.h_star is not None:
            # sum_{|m| = 2r} sigma^{2m} g*_m^2 = h*_r^2 sum_s nu_s^2 (sigma^2)^{2s}
            for r, h in enumerate(view.h_star):
                if 2 * r < len(mu):
                    full[2 * r] = h * h
                    kept[2 * r] = h * h * phi_r_from_sigma(sigma**2, r)
                elif h != 0:
                    raise ValueError("weights do not cover the truth degrees")
        else:
            for m, c in view.g_series.coeffs.items():
                k = sum(m)
                if k >= len(mu):
                    raise ValueError("weights do not cover the truth degrees")
                full[k] += c * c
                kept[k] += monomial(sigma, [2 * mi for mi in m]) * c * c
        counts = np.array([math.comb(p + k - 1, k) for k in range(len(mu))], dtype=float)
        return mu, counts, kept, float(np.sum(full - kept))
    raise TypeError(f"unsupported view {type(view).__name__}")


def fem_at(view, delta: float, eps2: float) -> FemRecord:
    if delta < 0 or eps2 <= 0:
        raise ValueError("need delta >= 0 and eps2 > 0")
    lam, counts, bias, e_proj = _cells(view)
    active = lam >= delta
    e_v = float(eps2 * np.sum(counts[active]))
    e_b = float(np.sum(bias[~active]))
    return FemRecord(delta, e_proj, e_v, e_b, e_proj + e_v + e_b)


def fem_optimal(view, eps2: float, rtol: float = 1e-12) -> FemRecord:
    """Minimize over delta in {weights} U {+inf}; ties go to the larger delta."""
    if eps2 <= 0:
        raise ValueError("eps2 must be positive")
    lam, counts, bias, e_proj = _cells(view)
    order = np.argsort(-lam, kind="stable")
    lam_s = lam[order]
    gain = eps2 * counts[order] - bias[order]
    base = e_proj + float(np.sum(bias))
    # cumulative error as delta walks down through the weights
    running = base + np.cumsum(gain)
    # only the last entry of each block of equal weights is a valid level
    last = np.ones(len(lam_s), dtype=bool)
    if len(lam_s) > 1:
        last[:-1] = lam_s[:-1] != lam_s[1:]
    levels = np.concatenate([[np.inf], lam_s[last]])
    totals = np.concatenate([[base], running[last]])
    best = totals.min()
    tol = rtol * max(1.0, abs(best))
    k = int(np.nonzero(totals <= best + tol)[0][0])
    delta_star = float(levels[k])
    rec = fem_at(view, delta_star, eps2)
    return FemRecord(rec.delta, rec.e_proj, rec.e_v, rec.e_b, rec.total, delta_star, rec.total)


def fem_bruteforce(view, eps2: float, rtol: float = 1e-12) -> FemRecord:
    """Evaluate every candidate level independently; reference for fem_optimal."""
    lam = _cells(view)[0]
    levels = sorted(set(float(v) for v in lam) | {math.inf}, reverse=True)
    recs = [fem_at(view, lv, eps2) for lv in levels]
    best = min(r.total for r in recs)
    tol = rtol * max(1.0, abs(best))
    rec = next(r for r in recs if r.total <= best + tol)
    return FemRecord(rec.delta, rec.e_proj, rec.e_v, rec.e_b, rec.total, rec.delta, rec.total)


def local_condition_holds(view: DiagonalView, eps2: float, record: FemRecord) -> bool:
    """Squared truths at the optimal level outweigh their variance cost."""
    if math.isinf(record.delta_star):
        return True
    at = view.weights == record.delta_star
    return float(np.sum(view.truth[at] ** 2)) >= np.count_nonzero(at) * eps2 * (1 - 1e-12)


def up_crossing_detect(before: DiagonalView, after: DiagonalView, eps2: float) -> list:
    """Pairs (j, k) that could raise E* between two weight snapshots.

    j is a signal index (f*_j^2 >= eps2) active at delta*, k a noise index
    (f*_k^2 < eps2) inactive at delta*, and after the step lambda'_j <= lambda'_k.
    """
    if before.weights.shape != after.weights.shape:
        raise ValueError("views must share the index set")
    delta_star = fem_optimal(before, eps2).delta_star
    f2 = before.truth**2
    lam, lam2 = before.weights, after.weights
    sig = np.nonzero((lam >= delta_star) & (f2 >= eps2))[0]
    noise = np.nonzero((lam < delta_star) & (f2 < eps2))[0]
    if len(sig) == 0 or len(noise) == 0:
        return []
    # for each signal j, the noise indices now at or above it
    noise_sorted = np.sort(lam2[noise])
    out = []
    for j in sig:
        if noise_sorted[-1] >= lam2[j]:
            for k in noise[lam2[noise] >= lam2[j]]:
                out.append((int(j), int(k)))
    return out


def proj_bound_constant(alpha: float, amplitude: float) -> float:
    """Constant C in E_proj <= C * envelope(rho) for |g*_r| <= A r^{-(alpha+1)/2}.

    Split the sum at L = 1/(1-rho): 1 - rho^{2r} <= 2r(1-rho) below L and
    <= 1 above, then bound the two power sums by integrals.
    """
    a2 = amplitude**2
    if alpha > 1:
        return a2 * (2 * (1 + 1 / (alpha - 1)) + 1 + 1 / alpha)
    if alpha == 1:
        return a2 * 6.0
    return a2 * (2 / (1 - alpha) + 1 + 1 / alpha)


def proj_envelope(rho: float, alpha: float) -> float:
    gap = 1 - abs(rho)
    if alpha > 1:
        return gap
    if alpha == 1:
        return gap * math.log(1 / gap)
    return gap**alpha


def sim_proj_bound_check(rho: float, alpha: float, g_star) -> tuple:
    """(exact E_proj, C * envelope) for the single-index projection error.

    For a multi-index truth pass rho = min sigma_j^2 and the h*_r, with the
    shell degree 2r playing the role of r in the bound.
    """
    if abs(rho) >= 1:
        raise ValueError("need |rho| < 1")
    g = np.asarray(g_star, dtype=float)
    r = np.arange(len(g))
    lhs = float(np.sum((1 - np.abs(rho) ** (2 * r)) * g**2))
    pos = r >= 1
    amplitude = float(np.max(np.abs(g[pos]) * r[pos] ** ((alpha + 1) / 2))) if pos.any() else 0.0
    return lhs, proj_bound_constant(alpha, amplitude) * proj_envelope(rho, alpha)


def gd_fem_comparison(weights, truth, eps2: float, t: float) -> dict:
    """Compare the gradient-descent filter with the FEM at delta = 1/t.

    The linear estimator (1 - exp(-lambda_j t)) z_j has variance
    eps2 sum (1 - e^{-lambda_j t})^2 and bias sum e^{-2 lambda_j t} f*_j^2.
    """
    lam = np.asarray(weights, dtype=float)
    f = np.asarray(truth, dtype=float)
    shrink = 1 - np.exp(-lam * t)
    gd_v = float(eps2 * np.sum(shrink**2))
    gd_b = float(np.sum((1 - shrink) ** 2 * f**2))
    rec = fem_at(DiagonalView(lam, f), 1.0 / t, eps2)
    return {
        "t": t,
        "gd_v": gd_v,
        "gd_b": gd_b,
        "fem_v": rec.e_v,
        "fem_b": rec.e_b,
        "ratio_v": gd_v / rec.e_v if rec.e_v else math.nan,
        "ratio_b": gd_b / rec.e_b if rec.e_b else math.nan,
    }


def fem_curve_rows(times, views, eps2: float) -> list:
    rows = []
    for t, view in zip(times, views):
        rec = fem_optimal(view, eps2)
        rows.append((float(t), rec.delta_star, rec.e_star, rec.e_proj, rec.e_v, rec.e_b))
    return rows


def write_fem_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"#schema={SCHEMA_FEM}\n")
        writer = csv.writer(fh)
        writer.writerow(FEM_COLUMNS)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])
