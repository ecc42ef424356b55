import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_features.seq_model import (
    IndexMismatchError,
    InvalidSpecError,
    MemoryGuardError,
    MisalignedPQ,
    MultiIndex,
    SingleIndex,
    SparseMean,
    UnsupportedVariantError,
    cosine_basis,
    make_rng,
    make_truth,
    observation_to_csv,
    observe_sequence,
    sample_dataset,
    seq_loss_gradient_parts,
)


class TestTruths:
    def test_sparse_mean(self):
        t = make_truth(SparseMean(100, 3, magnitudes=(1.0, -1.0, 0.5)))
        assert t.coeffs.shape == (100,)
        assert np.count_nonzero(t.coeffs) == 3

    def test_sparse_floor(self):
        with pytest.raises(InvalidSpecError):
            make_truth(SparseMean(10, 2, magnitudes=(1.0, 0.1)))

    def test_misaligned_positions(self):
        t = make_truth(MisalignedPQ(2.0, 2.0, 2.0, 100))
        nz = t.indices[t.coeffs != 0]
        assert nz.tolist() == [1, 4, 9, 16, 25, 36, 49, 64, 81, 100]
        ell = np.arange(1, 11)
        np.testing.assert_allclose(t.coeffs[t.coeffs != 0], ell**-1.5)

    @pytest.mark.parametrize("spec", [MisalignedPQ(1.0, 1.0, 2.0, 50), MisalignedPQ(1.0, 2.0, 0.8, 50)])
    def test_invalid_kernel(self, spec):
        with pytest.raises(InvalidSpecError):
            make_truth(spec)

    def test_truncated_kernel_opt_in(self):
        assert make_truth(MisalignedPQ(1.0, 2.0, 0.6, 50), allow_truncated_kernel=True).coeffs[0] == 1.0

    def test_single_index_ambient(self):
        t = make_truth(SingleIndex(4, (0.0, 0.0, 1.0)))
        amb = t.ambient_coeffs(2)
        assert amb.get((2, 0, 0, 0)) == pytest.approx(1.0)
        assert sum(abs(v) for m, v in amb.coeffs.items() if m != (2, 0, 0, 0)) == 0.0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4))
    def test_single_index_shell_norm(self, seed, r):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=3)
        g = np.zeros(r + 1)
        g[r] = rng.normal()
        t = make_truth(SingleIndex(3, tuple(g), w / np.linalg.norm(w)))
        assert t.ambient_coeffs(r).norm() ** 2 == pytest.approx(g[r] ** 2, abs=1e-10)

    def test_multi_index_orthonormal(self):
        with pytest.raises(InvalidSpecError):
            make_truth(MultiIndex(3, 2, (0.0, 1.0), np.ones((3, 2))))

    def test_multi_index_exponent(self):
        t = make_truth(MultiIndex(4, 2, (0.0, 0.0, 1.0)))
        assert t.r0 == 2
        assert all(sum(m) == 4 for m in t.link_series().coeffs if t.link_series().get(m))

    def test_no_signal(self):
        with pytest.raises(InvalidSpecError):
            make_truth(SingleIndex(3, (1.0, 0.0)))


class TestObservations:
    def test_noiseless(self):
        t = make_truth(SparseMean(20, 2))
        obs = observe_sequence(t, 10, sigma=0.0, seed=1)
        np.testing.assert_array_equal(obs.z, t.coeffs)

    def test_variance(self):
        obs = observe_sequence(np.zeros(100_000), 100, seed=7)
        assert 0.0095 <= obs.z.var() <= 0.0105
        assert obs.noise_var == 0.01

    def test_deterministic(self):
        t = make_truth(SparseMean(50, 3))
        a, b = observe_sequence(t, 30, seed=3), observe_sequence(t, 30, seed=3)
        np.testing.assert_array_equal(a.z, b.z)
        assert not np.array_equal(a.z, observe_sequence(t, 30, seed=4).z)

    def test_reconstructible_noise(self):
        t = make_truth(SparseMean(50, 3))
        obs = observe_sequence(t, 30, seed=3)
        np.testing.assert_allclose(obs.eps, obs.z - obs.truth_coeffs)

    def test_index_cap_pads(self):
        obs = observe_sequence(make_truth(SparseMean(5, 1)), 10, index_cap=8, seed=0)
        assert len(obs.z) == 8 and obs.index_set.tolist() == list(range(8))

    def test_guard(self):
        with pytest.raises(MemoryGuardError):
            observe_sequence(np.zeros(3), 10, index_cap=10**7 + 1)

    def test_csv(self, tmp_path):
        obs = observe_sequence(make_truth(SparseMean(5, 1)), 10, seed=0)
        path = tmp_path / "obs.csv"
        observation_to_csv(obs, path)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("#schema=") and lines[1] == "index,z,truth" and len(lines) == 7

    def test_streams_independent(self):
        a = make_rng(5, 0).normal(size=4)
        b = make_rng(5, 1).normal(size=4)
        assert not np.allclose(a, b)


class TestGradientParts:
    def test_zero_noise(self):
        g = np.array([1.0, -2.0])
        np.testing.assert_array_equal(seq_loss_gradient_parts(g, np.ones(2), np.zeros(2)), g)

    def test_diagonal_coupling(self):
        theta, eps = np.array([0.5, 2.0]), np.array([0.1, -0.3])
        out = seq_loss_gradient_parts(np.zeros(2), theta, eps)
        np.testing.assert_allclose(out, -eps * theta)

    def test_mismatch(self):
        with pytest.raises(IndexMismatchError):
            seq_loss_gradient_parts(np.zeros(2), np.ones((3, 2)), np.zeros(2))
        with pytest.raises(IndexMismatchError):
            seq_loss_gradient_parts(np.zeros(2), np.ones(2), np.zeros(2), jac_index=[0, 1], eps_index=[0, 2])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        theta, beta = rng.normal(size=5), rng.normal(size=5)
        fstar, eps = rng.normal(size=5), 0.1 * rng.normal(size=5)
        z = fstar + eps

        def loss(th, be, target):
            return 0.5 * np.sum((th * be - target) ** 2)

        pop = theta * (theta * beta - fstar)
        got = seq_loss_gradient_parts(pop, theta, eps)
        h = 1e-6
        fd = np.array([(loss(theta, beta + h * e, z) - loss(theta, beta - h * e, z)) / (2 * h) for e in np.eye(5)])
        np.testing.assert_allclose(got, fd, atol=1e-6)


class TestDatasets:
    def test_sparse_noiseless(self):
        spec = SparseMean(6, 2)
        data = sample_dataset(spec, 50, sigma=0.0, seed=2)
        np.testing.assert_allclose(data.y, data.x @ data.truth.coeffs)

    def test_cosine_bound(self):
        x = np.linspace(0, 1, 2001)
        vals = cosine_basis(x, np.arange(0, 50))
        assert np.max(np.abs(vals)) == pytest.approx(math.sqrt(2))

    def test_second_moment(self):
        spec = MisalignedPQ(1.0, 2.0, 2.0, 64)
        data = sample_dataset(spec, 100_000, sigma=1.0, seed=4)
        sq = data.y**2 - 1.0
        se = sq.std() / math.sqrt(len(sq))
        assert abs(sq.mean() - data.truth.norm2()) <= 3 * se

    def test_parseval(self):
        spec = MisalignedPQ(1.0, 2.0, 2.0, 400)
        t = make_truth(spec)
        nz = t.coeffs != 0
        x, w = np.polynomial.legendre.leggauss(2000)
        x, w = (x + 1) / 2, w / 2
        f = cosine_basis(x, t.indices[nz]) @ t.coeffs[nz]
        assert np.sum(w * f * f) == pytest.approx(np.sum(t.coeffs**2), abs=1e-6)

    def test_index_models_unsupported(self):
        with pytest.raises(UnsupportedVariantError):
            sample_dataset(SingleIndex(3, (0.0, 1.0)), 10)
