import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import hermite_e

from adaptive_features.hermite_core import (
    DegreeOverflowError,
    HermiteSeries,
    NormViolationError,
    frame_change_coeff,
    gauss_convolve,
    hermite_eval_1d,
    hermite_table,
    multi_indices,
    phi_r,
    phi_r_from_sigma,
    pullback_series,
    rot_inv_coeffs,
    series_derivative,
    series_eval,
    series_mul_coordinate,
    softmin_omega,
)


def he_normalized(m, x):
    """Independent oracle: numpy's probabilist Hermite He_m divided by sqrt(m!)."""
    c = np.zeros(m + 1)
    c[m] = 1.0
    return hermite_e.hermeval(x, c) / math.sqrt(math.factorial(m))


def random_series(rng, dim, deg, density=0.6):
    coeffs = {}
    for k in range(deg + 1):
        for m in multi_indices(dim, k):
            if rng.random() < density:
                coeffs[m] = rng.normal()
    return HermiteSeries(dim, coeffs, deg)


class TestOneDimensional:
    def test_constant(self):
        assert hermite_eval_1d(0, 3.7) == 1.0

    def test_degree_two_at_zero(self):
        assert hermite_eval_1d(2, 0.0) == pytest.approx(-0.70710678, abs=1e-8)

    def test_degree_three_at_one(self):
        assert hermite_eval_1d(3, 1.0) == pytest.approx(-0.81649658, abs=1e-8)

    @given(st.integers(0, 15), st.floats(-4, 4))
    def test_matches_numpy_hermite_e(self, m, x):
        assert hermite_eval_1d(m, x) == pytest.approx(he_normalized(m, x), rel=1e-10, abs=1e-10)

    def test_negative_degree_rejected(self):
        with pytest.raises(ValueError):
            hermite_eval_1d(-1, 0.0)


class TestSeriesEval:
    def test_constant_series(self):
        assert series_eval(HermiteSeries(2, {(0, 0): 2.5}, 0), np.array([0.3, -1.2])) == 2.5

    def test_linear_cancels(self):
        f = HermiteSeries(2, {(1, 0): 1.0, (0, 1): 1.0}, 1)
        assert series_eval(f, np.array([0.5, -0.5])) == pytest.approx(0.0, abs=1e-15)

    def test_second_degree_root(self):
        f = HermiteSeries(2, {(2, 0): 1.0}, 2)
        assert series_eval(f, np.array([1.0, 1.0])) == pytest.approx(0.0, abs=1e-15)

    def test_norm_is_coefficient_norm(self):
        f = HermiteSeries(2, {(1, 0): 3.0, (0, 2): 4.0}, 2)
        assert f.norm() == pytest.approx(5.0)


class TestDerivative:
    def test_linear(self):
        g = series_derivative(HermiteSeries(1, {(1,): 1.0}, 1), 0)
        assert g.get((0,)) == pytest.approx(1.0)

    def test_square_root_factor(self):
        g = series_derivative(HermiteSeries(2, {(2, 0): 1.0}, 2), 0)
        assert g.get((1, 0)) == pytest.approx(math.sqrt(2))
        assert g.max_degree == 1

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        f = random_series(rng, 2, 4)
        g = series_derivative(f, 0)
        h = 1e-5
        for x in rng.normal(size=(20, 2)):
            e = np.array([h, 0.0])
            fd = (series_eval(f, x + e) - series_eval(f, x - e)) / (2 * h)
            assert series_eval(g, x) == pytest.approx(fd, abs=1e-6)


class TestMulCoordinate:
    def test_constant(self):
        g = series_mul_coordinate(HermiteSeries(1, {(0,): 1.0}, 1), 0)
        assert g.get((1,)) == pytest.approx(1.0)

    def test_linear(self):
        g = series_mul_coordinate(HermiteSeries(1, {(1,): 1.0}, 2), 0)
        assert g.get((2,)) == pytest.approx(math.sqrt(2))
        assert g.get((0,)) == pytest.approx(1.0)

    def test_overflow(self):
        with pytest.raises(DegreeOverflowError):
            series_mul_coordinate(HermiteSeries(1, {(3,): 1.0}, 3), 0, max_degree=3)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 2))
    def test_pointwise(self, seed, i):
        rng = np.random.default_rng(seed)
        f = random_series(rng, 3, 3)
        g = series_mul_coordinate(f, i, 4)
        for x in rng.normal(size=(20, 3)):
            assert series_eval(g, x) == pytest.approx(x[i] * series_eval(f, x), abs=1e-10)


class TestFrameChange:
    def test_axis_projection(self):
        R = np.array([[0.0, 1.0]])
        assert frame_change_coeff((2,), (0, 2), R) == pytest.approx(1.0)

    def test_distinct_indices_orthogonal(self):
        assert frame_change_coeff((1, 0), (0, 1), np.eye(2)) == pytest.approx(0.0)

    @given(st.floats(-1, 1))
    def test_scalar_power(self, rho):
        assert frame_change_coeff((3,), (3,), np.array([[rho]])) == pytest.approx(rho**3, abs=1e-14)

    def test_degree_mismatch_is_zero(self):
        assert frame_change_coeff((2, 0), (1,), np.array([[0.5], [0.5]])) == 0.0

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4))
    def test_one_dimensional_projections(self, seed, m):
        rng = np.random.default_rng(seed)
        u, v = rng.normal(size=3), rng.normal(size=3)
        u, v = u / np.linalg.norm(u), v / np.linalg.norm(v)
        val = frame_change_coeff((m,), (m,), np.array([[u @ v]]))
        assert val == pytest.approx((u @ v) ** m, abs=1e-12)

    def test_monte_carlo(self):
        rng = np.random.default_rng(3)
        P = np.linalg.qr(rng.normal(size=(3, 2)))[0]
        Q = np.linalg.qr(rng.normal(size=(3, 2)))[0]
        m, n = (2, 1), (1, 2)
        exact = frame_change_coeff(m, n, P.T @ Q)
        x = rng.normal(size=(200_000, 3))
        a, b = x @ P, x @ Q
        vals = (hermite_table(2, a[:, 0])[:, m[0]] * hermite_table(2, a[:, 1])[:, m[1]]
                * hermite_table(2, b[:, 0])[:, n[0]] * hermite_table(2, b[:, 1])[:, n[1]])
        se = vals.std() / math.sqrt(len(vals))
        assert abs(vals.mean() - exact) <= 5 * se


class TestGaussConvolve:
    def test_identity(self):
        f = HermiteSeries(2, {(1, 1): 0.3, (2, 0): -1.0}, 2)
        g = gauss_convolve(f, [1.0, 1.0])
        assert g.get((1, 1)) == pytest.approx(0.3) and g.get((2, 0)) == pytest.approx(-1.0)

    def test_coordinate_powers(self):
        g = gauss_convolve(HermiteSeries(2, {(2, 0): 1.0, (0, 2): 1.0}, 2), [0.5, 0.0])
        assert g.get((2, 0)) == pytest.approx(0.25)
        assert g.get((0, 2)) == pytest.approx(0.0)

    def test_domain(self):
        with pytest.raises(ValueError):
            gauss_convolve(HermiteSeries(1, {(1,): 1.0}, 1), [1.2])

    @given(st.lists(st.floats(0, 1), min_size=2, max_size=2), st.lists(st.floats(0, 1), min_size=2, max_size=2))
    def test_composition(self, s1, s2):
        f = HermiteSeries(2, {(1, 2): 0.7, (3, 0): -0.2, (0, 0): 1.0}, 3)
        a = gauss_convolve(gauss_convolve(f, s1), s2)
        b = gauss_convolve(f, np.multiply(s1, s2))
        for m in f.coeffs:
            assert a.get(m) == pytest.approx(b.get(m), abs=1e-14)

    def test_monte_carlo(self):
        rng = np.random.default_rng(5)
        f = HermiteSeries(1, {(1,): 0.5, (2,): -0.4, (3,): 1.0}, 3)
        s = 0.7
        y = 0.8
        exact = series_eval(gauss_convolve(f, [s]), np.array([y]))
        xi = rng.normal(size=400_000) * math.sqrt(1 - s * s)
        vals = series_eval(f, (s * y + xi)[:, None])
        assert abs(vals.mean() - exact) <= 5 * vals.std() / math.sqrt(len(vals))


class TestRotationInvariant:
    def test_two_dims_degree_one(self):
        c = rot_inv_coeffs(2, 1)
        assert c.nu[1][(1, 0)] == pytest.approx(1 / math.sqrt(2))
        assert c.nu[1][(0, 1)] == pytest.approx(1 / math.sqrt(2))
        assert c.C[1] == pytest.approx(4.0)

    @pytest.mark.parametrize("r", range(6))
    def test_one_dim(self, r):
        c = rot_inv_coeffs(1, r)
        assert c.nu[r][(r,)] == pytest.approx(1.0)
        assert c.C[r] == pytest.approx(math.comb(2 * r, r))

    @pytest.mark.parametrize("p,r", [(p, r) for p in (1, 2, 3, 4) for r in range(6)])
    def test_normalization(self, p, r):
        c = rot_inv_coeffs(p, r)
        nu2 = c.values(r) ** 2
        assert nu2.sum() == pytest.approx(1.0, abs=1e-10)
        np.testing.assert_allclose(c.exponents(r).T @ nu2, r / p, atol=1e-10)

    @pytest.mark.parametrize("p,r", [(2, 1), (2, 2), (3, 2), (2, 3)])
    def test_gradient_gram(self, p, r):
        hbar = rot_inv_coeffs(p, r).hbar(r)
        grads = [series_derivative(hbar, i) for i in range(p)]
        G = np.array([[grads[i].dot(grads[j]) for j in range(p)] for i in range(p)])
        np.testing.assert_allclose(G, (2 * r / p) * np.eye(p), atol=1e-9)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(0)
        hbar = rot_inv_coeffs(2, 2).hbar(2)
        Q = np.linalg.qr(rng.normal(size=(2, 2)))[0]
        for x in rng.normal(size=(10, 2)):
            assert series_eval(hbar, Q @ x) == pytest.approx(series_eval(hbar, x), abs=1e-12)


class TestPhi:
    @pytest.mark.parametrize("r", range(5))
    def test_identity(self, r):
        assert phi_r(np.eye(3), r) == pytest.approx(1.0)

    @given(st.floats(0, 1), st.integers(0, 4))
    def test_scalar_multiple(self, s, r):
        assert phi_r(s * np.eye(2), r) == pytest.approx(s ** (2 * r), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 4))
    def test_dual_path(self, seed, r):
        rng = np.random.default_rng(seed)
        Psi = rng.normal(size=(3, 3))
        Psi *= 0.8 / np.linalg.norm(Psi, 2)
        assert phi_r(Psi, r, "sum") == pytest.approx(phi_r(Psi, r, "series"), abs=1e-9)

    def test_norm_violation(self):
        with pytest.raises(NormViolationError):
            phi_r(1.1 * np.eye(2), 1)

    def test_pullback_inner_product(self):
        rng = np.random.default_rng(1)
        W = np.linalg.qr(rng.normal(size=(3, 2)))[0]
        Ws = np.linalg.qr(rng.normal(size=(3, 2)))[0]
        hbar = rot_inv_coeffs(2, 2).hbar(2)
        inner = pullback_series(hbar, W).dot(pullback_series(hbar, Ws))
        sigma = np.linalg.svd(W.T @ Ws, compute_uv=False)
        assert inner == pytest.approx(phi_r_from_sigma(sigma, 2), abs=1e-10)


class TestSoftmin:
    def test_tied(self):
        assert softmin_omega([0.3, 0.3], 10) == pytest.approx(0.3 - math.log(2) / 10, abs=1e-9)

    def test_single(self):
        assert softmin_omega([0.42], 7.0) == 0.42

    def test_large_K(self):
        assert abs(softmin_omega([0.1, 0.9], 1000) - 0.1) <= 1e-6

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=6), st.floats(0.1, 1e4))
    def test_sandwich(self, x, K):
        om = softmin_omega(x, K)
        assert min(x) - math.log(len(x)) / K - 1e-12 <= om <= min(x) + 1e-12

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=6), st.floats(0.1, 1e3))
    def test_weighted_gap(self, x, K):
        x = np.array(x)
        w = np.exp(-K * (x - x.min()))
        assert w @ (1 - x) / w.sum() >= 1 - x.mean() - 1e-12


def test_orthonormality_quadrature():
    x, w = hermite_e.hermegauss(20)
    w = w / math.sqrt(2 * math.pi)
    H = hermite_table(6, x)
    idx = [m for k in range(7) for m in multi_indices(2, k)]
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    W2 = np.outer(w, w)
    vals = {m: hermite_table(6, X1)[..., m[0]] * hermite_table(6, X2)[..., m[1]] for m in idx}
    for a in idx:
        for b in idx:
            assert np.sum(W2 * vals[a] * vals[b]) == pytest.approx(float(a == b), abs=1e-8)
    assert H.shape == (20, 7)


@pytest.mark.parametrize("t", [0.3, 0.7])
def test_generating_function(t):
    x = np.linspace(-2, 2, 41)
    H = hermite_table(20, x)
    partial = sum(H[:, r] * t**r / math.sqrt(math.factorial(r)) for r in range(21))
    np.testing.assert_allclose(partial, np.exp(x * t - t * t / 2), atol=1e-8)
