import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparseft.errors import NonFiniteEvaluation, NotSymmetric, TooLarge, ZeroBudget
from sparseft.models import Checkpoint, ModelSpec, build_model
from sparseft.selection import StrategyConfig
from sparseft.theory import (FLIP_PAIR, BoundInputs, StabilityReport, expected_regularizer_mc,
                             flip_pair_check, gen_bound, hessian_diag_fd, hessian_fd, lambda_min_fd,
                             phs_bound, phs_estimate, projection_discontinuity_demo,
                             rayleigh_upperbound_check, sample_removal_indices)
from sparseft.training import Dataset, Splits, TrainConfig, prepare_model

SWEEP = (0.0002, 0.0005, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2)


class TestBounds:
    @pytest.mark.parametrize("p,expected", [(0.5, 0.02), (0.9, 0.1)])
    def test_phs_plug_in(self, p, expected):
        assert phs_bound(BoundInputs(rho=1.0, lambda_min=0.0, p=p, n=100)) == pytest.approx(expected, abs=1e-9)

    def test_phs_full_tuning_is_vacuous(self):
        assert phs_bound(BoundInputs(rho=1.0, p=1.0, n=100)) == float("inf")

    def test_phs_monotone_over_sweep(self):
        vals = [phs_bound(BoundInputs(rho=1.0, p=p, n=100)) for p in sorted(SWEEP, reverse=True)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_gen_plug_in(self):
        assert gen_bound(0.0, BoundInputs(rho=1.0, n=100, delta=0.5), 0.0) == pytest.approx(0.1, abs=1e-9)
        assert gen_bound(0.0, BoundInputs(rho=1.0, n=100, delta=0.1), 0.02) == pytest.approx(np.sqrt(25 / 20), abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 10), st.floats(1e-6, 10), st.integers(1, 10_000))
    def test_gen_strictly_increasing_in_beta(self, r, beta, dbeta, n):
        inputs = BoundInputs(rho=1.0, n=n)
        assert gen_bound(r, inputs, beta + dbeta) > gen_bound(r, inputs, beta)

    @pytest.mark.parametrize("bad", [dict(rho=-1.0), dict(rho=1.0, p=0.0), dict(rho=1.0, delta=1.0)])
    def test_invalid_inputs(self, bad):
        with pytest.raises(ValueError):
            BoundInputs(**bad)


class TestRegularizer:
    def test_full_mask_is_zero(self, rng):
        assert expected_regularizer_mc(rng.standard_normal(6), np.zeros(6), 1.0, 100) == 0.0

    def test_no_displacement(self):
        assert expected_regularizer_mc(np.ones(5), np.ones(5), 0.4, 100) == 0.0

    def test_exhaustive_c42(self):
        d = np.ones(4)
        exact = np.mean([np.sum(np.delete(d, list(c)) ** 2) for c in itertools.combinations(range(4), 2)])
        assert exact == 2.0
        assert expected_regularizer_mc(d, np.zeros(4), 0.5, 100_000, seed=0) == pytest.approx(2.0, rel=0.01)

    def test_weighted_displacement(self, rng):
        theta = rng.standard_normal(30)
        mc = expected_regularizer_mc(theta, np.zeros(30), 0.2, 100_000, seed=3)
        assert mc == pytest.approx((1 - 6 / 30) * theta @ theta, rel=0.01)

    def test_zero_budget(self):
        with pytest.raises(ZeroBudget):
            expected_regularizer_mc(np.ones(10), np.zeros(10), 0.05, 10)


class TestCurvature:
    def test_diag_quadratic(self):
        d = hessian_diag_fd(lambda t: t[0] ** 2 + 3 * t[1] ** 2, np.array([0.3, -0.7]), h=1e-3)
        np.testing.assert_allclose(d, [2.0, 6.0], atol=1e-4)

    def test_lambda_min_quadratic(self):
        A = np.diag([1.0, 4.0])
        assert lambda_min_fd(lambda x: x @ A @ x, np.array([0.2, 0.1])) == pytest.approx(2.0, abs=1e-3)

    def test_diag_matches_fd_of_gradients(self, rng):
        model = build_model(ModelSpec(2, (3,), "tanh", "classification", 2), 1)
        X, y = rng.standard_normal((6, 2)), rng.integers(0, 2, 6)
        theta, h = model.theta, 1e-4
        f = lambda t: model.loss(t, X, y)
        diag = hessian_diag_fd(f, theta, h=1e-3)
        other = np.empty_like(diag)
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = h
            other[i] = (model.loss_and_grad(theta + e, X, y)[1][i] - model.loss_and_grad(theta - e, X, y)[1][i]) / (2 * h)
        np.testing.assert_allclose(diag, other, rtol=1e-3, atol=1e-5)

    def test_too_large(self):
        with pytest.raises(TooLarge):
            hessian_diag_fd(lambda t: 0.0, np.zeros(501))
        with pytest.raises(TooLarge):
            hessian_fd(lambda t: 0.0, np.zeros(61))

    def test_non_finite(self):
        with pytest.raises(NonFiniteEvaluation), np.errstate(all="ignore"):
            hessian_diag_fd(lambda t: np.log(t[0]), np.array([0.0]))


class TestRayleigh:
    def test_identity(self):
        ok, viol = rayleigh_upperbound_check(np.eye(4), trials=200)
        assert ok and viol == pytest.approx(0.0, abs=1e-12)

    def test_indefinite(self):
        ok, viol = rayleigh_upperbound_check(np.diag([1.0, -3.0]), trials=500)
        assert ok and viol <= 0.0

    def test_random_psd(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            B = rng.standard_normal((20, 20))
            assert rayleigh_upperbound_check(B @ B.T, trials=50, seed=int(rng.integers(1 << 20)), tol=1e-8)[0]

    def test_not_symmetric(self):
        with pytest.raises(NotSymmetric):
            rayleigh_upperbound_check(np.array([[1.0, 2.0], [0.0, 1.0]]))


def realizable_regression(n, dup=None):
    rng = np.random.default_rng(4)
    X = rng.standard_normal((n, 2))
    y = X @ np.array([0.7, -1.2]) + 0.3
    if dup is not None:
        X, y = np.vstack([X, X[dup]]), np.append(y, y[dup])
    data = Dataset(X, y)
    return Splits(data, data, data, "regression", 1)


class TestPhsEstimate:
    def test_duplicate_point_is_stable(self):
        # head-only least squares on realizable targets: the minimizer ignores weights
        model = build_model(ModelSpec(2, (), "tanh", "regression", 1), 0)
        ckpt = Checkpoint(model.spec, model.theta.copy())
        splits = realizable_regression(12, dup=3)
        cfg = TrainConfig(lr=0.3, batch_size=13, seed=0)
        rep = phs_estimate(ckpt, StrategyConfig("full"), splits, cfg, [12], fixed_steps=2000)
        assert rep.phs_empirical < 1e-6

    def test_single_sample(self):
        model = build_model(ModelSpec(2, (), "tanh", "regression", 1), 0)
        ckpt = Checkpoint(model.spec, model.theta.copy())
        splits = realizable_regression(1)
        cfg = TrainConfig(lr=0.1, batch_size=1, seed=0)
        rep = phs_estimate(ckpt, StrategyConfig("full"), splits, cfg, [0], fixed_steps=20)
        from sparseft.training import train
        trained = train(ckpt, StrategyConfig("full"), splits, cfg, fixed_steps=20)
        init = prepare_model(ckpt, StrategyConfig("full"), splits, cfg.init_seed)
        z = splits.train
        expected = abs(init.per_sample_loss(init.theta, z.X, z.y)[0] - init.per_sample_loss(trained.theta, z.X, z.y)[0])
        assert rep.phs_empirical == pytest.approx(expected, abs=1e-15)

    def test_report_roundtrip(self, small_checkpoint, small_task):
        cfg = TrainConfig(lr=0.3, batch_size=8, seed=1)
        rep = phs_estimate(small_checkpoint, StrategyConfig("sam", p=0.05), small_task.downstream, cfg,
                           [0, 5], fixed_steps=20)
        back = StabilityReport.from_dict(rep.to_dict())
        assert back.to_json() == rep.to_json()
        assert len(rep.per_index_delta) == 2 and rep.sampled_indices == [0, 5]

    def test_full_tuning_bound_is_inf(self, small_checkpoint, small_task):
        cfg = TrainConfig(lr=0.3, batch_size=8, seed=1)
        rep = phs_estimate(small_checkpoint, StrategyConfig("full"), small_task.downstream, cfg, [1],
                           fixed_steps=5)
        assert rep.phs_bound_value == float("inf")
        assert '"inf"' in rep.to_json()

    def test_sample_indices(self):
        assert sample_removal_indices(5, 20) == [0, 1, 2, 3, 4]
        idx = sample_removal_indices(100, 20, seed=3)
        assert len(idx) == 20 == len(set(idx)) and idx == sorted(idx)


class TestProjectionDemo:
    def test_flip_pair(self):
        res = flip_pair_check(FLIP_PAIR, 1)
        assert res["masks"] == [[1], [0]] and res["hamming"] == 2

    def test_no_reprojection(self, small_checkpoint, small_task):
        strat = StrategyConfig("diffprune", p=0.05, reproject_every=500)
        demo = projection_discontinuity_demo(small_checkpoint, small_task.downstream, strat,
                                             TrainConfig(lr=0.3, batch_size=8), steps=50)
        assert demo["spikes"] == [] and demo["spike_stats"] == {}
        assert demo["training_curve"]
