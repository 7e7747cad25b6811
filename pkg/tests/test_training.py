import numpy as np
import pytest
from scipy.optimize import minimize

from sparseft.errors import DimMismatch, Diverged, EmptyData, ZeroBudget
from sparseft.models import Checkpoint, ModelSpec, build_model
from sparseft.selection import STATIC, SparseMask, StrategyConfig
from sparseft.training import (Dataset, OptimizerState, RunReport, Splits, TrainConfig, evaluate,
                               masked_step, regularized_loss, train)


def separable_splits(seed=0, n=40):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = rng.standard_normal((n, 2)) * 0.3 + np.where(y[:, None] == 1, 2.0, -2.0)
    data = Dataset(X, y)
    return Splits(data, data.subset(np.arange(6)), data, "classification", 2)


@pytest.fixture
def sep_checkpoint():
    model = build_model(ModelSpec(2, (4,), "tanh", "classification", 2), 0)
    return Checkpoint(model.spec, model.theta.copy())


class TestMaskedStep:
    def test_empty_mask_is_noop(self, rng):
        theta = rng.standard_normal(5)
        out = masked_step(theta, rng.standard_normal(5), np.zeros(5, dtype=bool), lr=0.1)
        np.testing.assert_array_equal(out, theta)

    def test_full_mask_is_sgd(self, rng):
        theta, g = rng.standard_normal(5), rng.standard_normal(5)
        out = masked_step(theta, g, np.ones(5, dtype=bool), lr=0.1)
        np.testing.assert_array_equal(out, theta - 0.1 * g)

    def test_off_mask_bits_unchanged_with_momentum(self, rng):
        theta0 = rng.standard_normal(20)
        mask = SparseMask(np.array([1, 5, 7]), 20, 3)
        state, theta = OptimizerState(), theta0.copy()
        for _ in range(30):
            theta = masked_step(theta, rng.standard_normal(20), mask, state, lr=0.05, momentum=0.9)
            off = ~mask.as_bool()
            assert np.array_equal(theta[off].view(np.uint64), theta0[off].view(np.uint64))
            assert np.all(state.velocity[off] == 0.0)

    def test_index_mask(self):
        out = masked_step(np.zeros(3), np.ones(3), np.array([2]), lr=1.0)
        np.testing.assert_array_equal(out, [0.0, 0.0, -1.0])

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            masked_step(np.zeros(3), np.zeros(4), np.ones(3, dtype=bool))


class TestRegularizedLoss:
    f = staticmethod(lambda th: float(np.sum(th ** 2)))

    def test_at_theta0(self, rng):
        th = rng.standard_normal(4)
        assert regularized_loss(self.f, th, th, [], 3.0) == self.f(th)

    def test_full_mask_has_no_penalty(self, rng):
        th, th0 = rng.standard_normal(4), rng.standard_normal(4)
        assert regularized_loss(self.f, th, th0, range(4), 5.0) == self.f(th)

    def test_plug_in(self):
        th0 = np.zeros(2)
        th = np.array([1.0, 2.0])
        assert regularized_loss(self.f, th, th0, [], 1.0) == pytest.approx(self.f(th) + 5.0)


class TestEvaluate:
    def test_perfect_predictor(self, tiny_model):
        X = np.random.default_rng(0).standard_normal((10, 2))
        y = tiny_model.predict(X).argmax(1)
        res = evaluate(tiny_model, Dataset(X, y))
        assert res["metric"] == 1.0 and res["zero_one"] == 0.0

    def test_constant_predictor(self):
        model = build_model(ModelSpec(2, (), "tanh", "classification", 2), 0)
        theta = np.zeros(model.n_params)
        theta[-2] = 1.0  # bias favours class 0 everywhere
        data = Dataset(np.random.default_rng(1).standard_normal((10, 2)), np.arange(10) % 2)
        assert evaluate(model, data, theta)["metric"] == 0.5

    def test_loss_is_mean_of_per_sample(self, tiny_model, rng):
        X, y = rng.standard_normal((9, 2)), rng.integers(0, 2, 9)
        one_by_one = [tiny_model.loss(tiny_model.theta, X[i:i + 1], y[i:i + 1]) for i in range(9)]
        assert evaluate(tiny_model, Dataset(X, y))["loss"] == pytest.approx(np.mean(one_by_one), abs=1e-14)

    def test_regression_metric(self):
        model = build_model(ModelSpec(1, (), "tanh", "regression", 1), 0)
        theta = np.zeros(model.n_params)
        data = Dataset(np.zeros((4, 1)), np.array([1.0, -1.0, 1.0, -1.0]))
        assert evaluate(model, data, theta)["metric"] == pytest.approx(1.0)

    def test_empty(self, tiny_model):
        with pytest.raises(EmptyData):
            evaluate(tiny_model, Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int)))


class TestTrain:
    cfg = TrainConfig(lr=0.2, batch_size=8, max_epochs=40, early_stop_tolerance=20, seed=0)

    def test_random_full_budget_is_full_tuning(self, sep_checkpoint):
        rep = train(sep_checkpoint, StrategyConfig("random", p=1.0), separable_splits(), self.cfg)
        assert rep.mask.k == rep.mask.pool
        assert np.linalg.norm(rep.theta - rep.theta0) > 0

    def test_magprune_hard_mask(self, sep_checkpoint):
        rep = train(sep_checkpoint, StrategyConfig("magprune", p=0.25), separable_splits(), self.cfg)
        off = np.ones(rep.theta.size, dtype=bool)
        off[rep.mask.indices] = False
        off[rep.head_indices] = False
        assert np.linalg.norm((rep.theta - rep.theta0)[off]) == 0.0
        assert rep.off_mask_changes() == []

    def test_separable_reaches_full_accuracy(self, sep_checkpoint):
        splits = separable_splits()
        X, y = splits.train.X, splits.train.y
        # independent check: plain logistic regression separates the data
        Xb = np.c_[X, np.ones(len(X))]
        nll = lambda w: np.sum(np.logaddexp(0.0, -(2 * y - 1) * (Xb @ w))) + 1e-3 * w @ w
        w = minimize(nll, np.zeros(3)).x
        assert np.all((Xb @ w > 0) == (y == 1))
        rep = train(sep_checkpoint, StrategyConfig("full"), splits, self.cfg)
        assert rep.final["train"]["metric"] == 1.0

    def test_zero_budget_propagates(self, sep_checkpoint):
        with pytest.raises(ZeroBudget):
            train(sep_checkpoint, StrategyConfig("random", p=0.01), separable_splits(), self.cfg)

    def test_deterministic(self, sep_checkpoint):
        a = train(sep_checkpoint, StrategyConfig("sam", p=0.5), separable_splits(), self.cfg)
        b = train(sep_checkpoint, StrategyConfig("sam", p=0.5), separable_splits(), self.cfg)
        assert a.to_json() == b.to_json()

    def test_report_roundtrip(self, sep_checkpoint):
        rep = train(sep_checkpoint, StrategyConfig("bitfit"), separable_splits(), self.cfg)
        back = RunReport.from_dict(rep.to_dict())
        assert back.to_json() == rep.to_json()

    def test_fixed_steps(self, sep_checkpoint):
        rep = train(sep_checkpoint, StrategyConfig("full"), separable_splits(), self.cfg, fixed_steps=7)
        assert rep.stop_step == 7

    @pytest.mark.parametrize("variant", ["mixout", "diffprune", "childprune"])
    def test_dynamic_end_in_budget(self, sep_checkpoint, variant):
        strat = StrategyConfig(variant, p=0.25, reproject_every=5, full_steps=5)
        rep = train(sep_checkpoint, strat, separable_splits(), self.cfg)
        assert rep.mask.k == int(np.floor(rep.mask.pool * 0.25))
        assert rep.off_mask_changes() == []

    def test_diverged(self):
        model = build_model(ModelSpec(2, (), "tanh", "regression", 1), 0)
        ckpt = Checkpoint(model.spec, model.theta.copy())
        X = np.random.default_rng(0).standard_normal((20, 2))
        data = Dataset(X, X[:, 0].copy())
        splits = Splits(data, data, data, "regression", 1)
        cfg = TrainConfig(lr=100.0, batch_size=20, seed=0)
        with pytest.raises(Diverged), np.errstate(all="ignore"):
            train(ckpt, StrategyConfig("full"), splits, cfg, fixed_steps=1000)

    def test_static_set(self):
        assert set(STATIC) == {"full", "random", "bitfit", "magprune", "adapter", "lora", "sam"}
