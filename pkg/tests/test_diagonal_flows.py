import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_features.diagonal_flows import (
    ConservationDriftError,
    FlowConfig,
    empirical_truncation,
    fem_path,
    flow_diag_empirical,
    flow_diag_seq,
    flow_rate_bound,
    flow_sparse_empirical,
    flow_sparse_seq,
    integrate_diagonal,
    monotone_violations,
    onedim_oracles,
    scalar_flows,
    t_star_diag,
    t_star_sparse,
    truth_on,
    write_trajectory_csv,
)
from adaptive_features.seq_model import (
    MisalignedPQ,
    SparseMean,
    kernel_weights,
    make_truth,
    observe_sequence,
    sample_dataset,
)


def seq_run(z, lam, t_end, D=0, b0=None, records=20, **kw):
    z = np.asarray(z, dtype=float)
    lam = np.asarray(lam, dtype=float)
    obs = observe_sequence(z, 100, sigma=0.0)
    cfg = FlowConfig.for_rate(flow_rate_bound(lam, 2 * np.abs(z), D, b0 or 1.0), t_end, records=records, **kw)
    return flow_diag_seq(obs, cfg, lam, D, b0)


class TestConfig:
    def test_rate_budget(self):
        with pytest.raises(ValueError):
            FlowConfig(dt=0.2, t_end=1.0, max_rate=1.0)
        cfg = FlowConfig.for_rate(3.0, 10.0, records=7)
        assert cfg.dt * 3.0 <= 0.1 + 1e-12
        assert cfg.n_steps % 7 == 0 and cfg.n_steps // cfg.record_every == 7

    def test_halved(self):
        cfg = FlowConfig(dt=0.1, t_end=1.0, record_every=2)
        h = cfg.halved()
        assert (h.dt, h.record_every, h.n_steps) == (0.05, 4, 20)

    def test_schedules(self):
        assert t_star_sparse(200) == pytest.approx(5 * math.log(200))
        assert t_star_diag(4096) == pytest.approx(math.sqrt(4096 / math.log(4096)))
        assert t_star_diag(4096, 1) == pytest.approx(4096 ** (2 / 3) / math.sqrt(math.log(4096)))
        assert empirical_truncation(10**6, 1, 2) == 5000

    def test_bad_inputs(self):
        cfg = FlowConfig(dt=0.01, t_end=0.1)
        with pytest.raises(ValueError):
            integrate_diagonal(lambda f: -f, np.array([0.0, 1.0]), cfg)
        with pytest.raises(ValueError):
            integrate_diagonal(lambda f: -f, np.ones(2), cfg, D=1)


class TestSequenceFlows:
    def test_zero_target_frozen(self):
        traj = seq_run(np.zeros(5), np.full(5, 0.3), 10.0)
        assert np.all(traj.theta == traj.theta[0]) and np.all(traj.beta == 0)

    def test_single_coordinate_fixed_point(self):
        traj = seq_run([1.0], [1.0], 30.0)
        assert traj.f[-1, 0] == pytest.approx(1.0, abs=1e-8)
        np.testing.assert_allclose(traj.theta**2 - traj.beta**2, 1.0, atol=1e-8)

    @pytest.mark.parametrize("D", [0, 1, 2])
    def test_noiseless_convergence(self, D):
        lam = 0.04
        traj = seq_run([0.8], [lam], 20 / lam, D=D, b0=1.0 if D else None, records=200)
        f = traj.f[:, 0]
        assert abs(f[-1] - 0.8) <= 1e-3
        assert np.all(np.diff(f) >= -1e-12)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([0, 1, 2]))
    def test_invariants(self, seed, D):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=6)
        lam = rng.uniform(0.01, 1.0, 6)
        b0 = 0.6 if D else None
        traj = seq_run(z, lam, 15.0, D=D, b0=b0)
        assert traj.drift <= 1e-6
        assert np.all(traj.theta >= 0)
        signs = np.sign(traj.beta[1:])
        assert np.all((signs == 0) | (signs == np.sign(z)))
        assert np.all(np.diff(traj.theta, axis=0) >= -1e-12)
        assert np.all(np.diff(np.abs(traj.beta), axis=0) >= -1e-12)
        if D:
            np.testing.assert_allclose(traj.b**2 - D * traj.beta**2, b0**2, atol=1e-6)

    def test_deterministic(self):
        z = np.random.default_rng(1).normal(size=10)
        a, b = seq_run(z, np.full(10, 0.1), 10.0), seq_run(z, np.full(10, 0.1), 10.0)
        np.testing.assert_array_equal(a.f, b.f)

    def test_halving_dt(self):
        z = np.random.default_rng(2).normal(size=8)
        lam = kernel_weights(8, 1.0)
        obs = observe_sequence(z, 100, sigma=0.0)
        cfg = FlowConfig.for_rate(flow_rate_bound(lam, 2 * np.abs(z)), 10.0, records=10)
        a = flow_diag_seq(obs, cfg, lam)
        b = flow_diag_seq(obs, cfg.halved(), lam)
        assert np.max(np.abs(a.f - b.f)) <= 1e-7

    def test_drift_error(self):
        cfg = FlowConfig(dt=0.5, t_end=5.0, integrator="euler", conservation_tol=1e-12)
        with pytest.raises(ConservationDriftError):
            integrate_diagonal(lambda f: 1.0 - f, np.array([0.5]), cfg, retry=False)

    def test_sparse_seq_endpoint(self):
        d = n = 200
        truth = make_truth(SparseMean(d, 3, magnitudes=(1.0, -1.0, 1.0)))
        obs = observe_sequence(truth, n, seed=5)
        alpha = d**-0.5
        cfg = FlowConfig.for_rate(flow_rate_bound(np.full(d, alpha**2), 2 * np.abs(obs.z)),
                                  t_star_sparse(n), records=30)
        traj = flow_sparse_seq(obs, cfg, alpha)
        e = [r.e_star for r in fem_path(traj, truth.coeffs, 1 / n)]
        assert e[0] == pytest.approx(min(d / n, 3.0))
        assert e[-1] == pytest.approx(3 / n)
        assert monotone_violations(e, 2 / n) == 0

    def test_weights_must_match(self):
        obs = observe_sequence(np.ones(3), 10, sigma=0.0)
        with pytest.raises(ValueError):
            flow_diag_seq(obs, FlowConfig(dt=0.01, t_end=0.1), np.ones(4))


class TestEmpiricalFlows:
    def test_identity_gram_reduces_to_sequence(self):
        d, n = 12, 80
        spec = SparseMean(d, 2)
        truth = make_truth(spec)
        data = sample_dataset(spec, n, seed=3, truth=truth)
        obs = observe_sequence(truth, n, seed=3)
        alpha = 0.3
        cfg = FlowConfig.for_rate(flow_rate_bound(np.full(d, alpha**2), 2 * np.abs(obs.z)), 10.0, records=10)
        seq = flow_sparse_seq(obs, cfg, alpha)
        emp = flow_sparse_empirical(data, cfg, alpha, sigma_hat=np.eye(d), h=obs.eps)
        assert np.max(np.abs(seq.f - emp.f)) <= 1e-8

    def test_empirical_conservation(self):
        spec = SparseMean(10, 2)
        data = sample_dataset(spec, 50, seed=1)
        cfg = FlowConfig.for_rate(flow_rate_bound(np.full(10, 0.1), 6.0, gram_norm=4.0), 10.0, records=10)
        traj = flow_sparse_empirical(data, cfg, math.sqrt(0.1))
        assert traj.drift <= 1e-6

    def test_noiseless_least_squares_limit(self):
        spec = MisalignedPQ(1.0, 2.0, 2.0, 9)
        truth = make_truth(spec)
        data = sample_dataset(spec, 20000, sigma=0.0, seed=0, truth=truth)
        J = 100
        lam = kernel_weights(J, 2.0)
        cfg = FlowConfig.for_rate(flow_rate_bound(lam, 2.5, gram_norm=1.1), 300.0, records=10)
        traj = flow_diag_empirical(data, cfg, lam, J=J)
        assert traj.index_set[0] == 1
        np.testing.assert_allclose(traj.f[-1], truth_on(traj.index_set, truth.indices, truth.coeffs), atol=1e-2)

    def test_wrong_dataset(self):
        data = sample_dataset(MisalignedPQ(1.0, 2.0, 2.0, 9), 10)
        with pytest.raises(TypeError):
            flow_sparse_empirical(data, FlowConfig(dt=0.01, t_end=0.1), 0.5)


class TestScalarLemmas:
    def test_signal_lower_example(self):
        paths = scalar_flows([1.0], 0.01, 10.0)
        late = paths.times >= 1 * (2 + math.log(1 / (2 * 0.01)))
        assert np.all(paths.theta[late, 0] ** 2 >= 0.5)

    def test_two_layer_report(self):
        rep = onedim_oracles([1.0, 0.5, -0.2], [0.01, 0.01, 0.02], 30.0)
        assert rep["drift"] <= 1e-8
        assert all(v is not False for key in ("comparison", "noise_upper", "signal_lower") for v in rep[key])
        assert rep["signal_lower"][0] is True

    def test_comparison_hypothesis(self):
        rep = onedim_oracles([1.0, 0.3], [0.05, 0.01], 20.0)
        assert rep["comparison"] == [True, None]

    @pytest.mark.parametrize("D", [1, 2])
    def test_multilayer_report(self, D):
        rep = onedim_oracles([1.0, 0.05, 0.4], [1e-4, 1e-4, 0.5], 400.0, D=D, b0=0.5)
        assert rep["drift"] <= 1e-8
        assert all(v is not False for key in ("noise_case", "signal_case", "ultimate_bound") for v in rep[key])
        assert any(v is True for v in rep["signal_case"])


def test_trajectory_csv(tmp_path):
    traj = seq_run([1.0, -0.5], [0.5, 0.5], 2.0, D=1, b0=0.5, records=4)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(traj, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "#schema=diag-trajectory/v1"
    assert lines[1] == "t,j,theta,beta,b,f,lambda_eff"
    assert len(lines) == 2 + 5 * 2


def test_monotone_violations():
    assert monotone_violations([3.0, 2.0, 2.05, 1.0], 0.1) == 0
    assert monotone_violations([3.0, 2.0, 2.5, 1.0], 0.1) == 1
