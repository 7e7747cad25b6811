import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparseft.autodiff import Tape, apply_primitive, backward, finite_diff_grad, log_softmax
from sparseft.errors import InvalidTarget, NonFiniteEvaluation, NotScalar, ShapeMismatch
from sparseft.models import ModelSpec, build_model


class TestPrimitives:
    def test_matmul_hand_values(self):
        t = Tape()
        out = t.matmul(t.leaf([[1.0, 2.0], [3.0, 4.0]]), t.leaf([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_relu(self):
        t = Tape()
        np.testing.assert_array_equal(t.relu(t.leaf([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_softmax_xent_uniform_logits(self):
        t = Tape()
        loss = t.softmax_xent(t.leaf([[0.0, 0.0]]), [0])
        assert loss.data.item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_matmul_shape_mismatch(self):
        t = Tape()
        with pytest.raises(ShapeMismatch):
            t.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 3))))

    def test_add_shape_mismatch(self):
        t = Tape()
        with pytest.raises(ShapeMismatch):
            t.add(t.leaf(np.ones((2, 3))), t.leaf(np.ones(4)))

    @pytest.mark.parametrize("target", [-1, 2, 7])
    def test_invalid_target(self, target):
        t = Tape()
        with pytest.raises(InvalidTarget):
            t.softmax_xent(t.leaf(np.zeros((1, 2))), [target])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            apply_primitive("conv", [np.ones(2)], tape=Tape())

    def test_outputs_are_read_only(self):
        t = Tape()
        out = t.tanh(t.leaf([0.5, -0.5]))
        with pytest.raises(ValueError):
            out.data[0] = 1.0

    def test_log_softmax_stable_for_large_logits(self):
        ls = log_softmax(np.array([[1000.0, 0.0]]))
        assert np.all(np.isfinite(ls))
        assert ls[0, 0] == pytest.approx(0.0, abs=1e-12)


class TestBackward:
    def test_quadratic(self):
        t = Tape()
        w = t.leaf([3.0])
        loss = t.mse(t.scale(w, 1.0), np.zeros(1))
        assert backward(t, loss)[w.node_id][0] == pytest.approx(6.0)

    def test_unused_leaf_gets_zeros(self):
        t = Tape()
        w, unused = t.leaf([2.0]), t.leaf(np.ones((2, 2)))
        grads = backward(t, t.mse(w, np.zeros(1)))
        np.testing.assert_array_equal(grads[unused.node_id], np.zeros((2, 2)))

    def test_non_scalar_loss(self):
        t = Tape()
        with pytest.raises(NotScalar):
            backward(t, t.tanh(t.leaf([1.0, 2.0])))

    def test_replay_is_identical(self):
        t = Tape()
        W = t.leaf(np.random.default_rng(0).standard_normal((3, 2)))
        loss = t.softmax_xent(t.tanh(t.matmul(t.leaf(np.ones((4, 3))), W)), [0, 1, 1, 0])
        a, b = backward(t, loss), backward(t, loss)
        np.testing.assert_array_equal(a[W.node_id], b[W.node_id])

    def test_row_broadcast_add_gradient_sums(self):
        t = Tape()
        b = t.leaf([0.0, 0.0])
        loss = t.mse(t.add(t.leaf(np.zeros((3, 2))), b), np.ones((3, 2)))
        # d/db mean((b-1)^2) over 6 cells = 2(b-1)*3/6
        np.testing.assert_allclose(backward(t, loss)[b.node_id], [-1.0, -1.0])

    def test_topological_order(self):
        t = Tape()
        x = t.leaf(np.ones((2, 2)))
        t.relu(t.tanh(t.matmul(x, x)))
        for i, node in enumerate(t.nodes):
            assert all(j < i for j in node.inputs)


class TestFiniteDiff:
    def test_quadratic(self):
        g = finite_diff_grad(lambda th: th[0] ** 2, np.array([3.0]), h=1e-4)
        assert g[0] == pytest.approx(6.0, abs=1e-6)

    def test_bilinear(self):
        g = finite_diff_grad(lambda th: th[0] * th[1], np.array([2.0, 5.0]), h=1e-4)
        np.testing.assert_allclose(g, [5.0, 2.0], atol=1e-8)

    def test_non_finite_probe(self):
        with pytest.raises(NonFiniteEvaluation), np.errstate(invalid="ignore", divide="ignore"):
            finite_diff_grad(lambda th: np.log(th[0]), np.array([0.0]), h=1e-4)

    @pytest.mark.parametrize("act", ["tanh", "relu"])
    @pytest.mark.parametrize("head", ["classification", "regression"])
    def test_mlp_agrees_with_backward(self, act, head):
        rng = np.random.default_rng(5)
        model = build_model(ModelSpec(3, (5, 4), act, head, 2), 11)
        X = rng.standard_normal((6, 3))
        y = rng.integers(0, 2, 6) if head == "classification" else rng.standard_normal((6, 2))
        theta = model.theta + 0.05 * rng.standard_normal(model.n_params)
        _, g = model.loss_and_grad(theta, X, y)
        fd = finite_diff_grad(lambda th: model.loss(th, X, y), theta)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_linear_gradient_matches_closed_form(n, d, seed):
    # L = mean((XW)^2) has dL/dW = 2 X'XW / (n * c)
    rng = np.random.default_rng(seed)
    X, W = rng.standard_normal((n, d)), rng.standard_normal((d, 2))
    t = Tape()
    w = t.leaf(W)
    loss = t.mse(t.matmul(t.leaf(X), w), np.zeros((n, 2)))
    expected = 2.0 * X.T @ (X @ W) / (n * 2)
    np.testing.assert_allclose(backward(t, loss)[w.node_id], expected, rtol=1e-10, atol=1e-12)
