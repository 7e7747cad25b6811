"""Dense reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Tape` records every primitive applied to its tensors in execution
order. :func:`backward` walks the tape in reverse and returns the gradient of
a scalar loss with respect to every leaf that was registered on it.

The tape is rebuilt for every forward pass; there is no graph reuse.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidTarget, NonFiniteEvaluation, NotScalar, ShapeMismatch

PRIMITIVES = ("matmul", "add", "scale", "tanh", "relu", "softmax_xent", "mse")


class Tensor:
    """Immutable float64 array bound to a node on a tape."""

    __slots__ = ("data", "node_id", "tape")

    def __init__(self, data, node_id: int | None = None, tape: "Tape | None" = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node_id})"


@dataclass
class _Node:
    kind: str
    inputs: tuple
    saved: dict = field(default_factory=dict)


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self, seed: int | None = None):
        self.nodes: list[_Node] = []
        self.rng = np.random.default_rng(seed)

    def _push(self, node: _Node, value) -> Tensor:
        self.nodes.append(node)
        return Tensor(value, node_id=len(self.nodes) - 1, tape=self)

    def leaf(self, data) -> Tensor:
        """Register a differentiable input (parameter or data)."""
        t = self._push(_Node("leaf", ()), data)
        self.nodes[-1].saved["shape"] = t.shape
        return t

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == "leaf"]

    # convenience wrappers
    def matmul(self, a, b):
        return apply_primitive("matmul", (a, b), tape=self)

    def add(self, a, b):
        return apply_primitive("add", (a, b), tape=self)

    def scale(self, a, c: float):
        return apply_primitive("scale", (a,), tape=self, factor=c)

    def tanh(self, a):
        return apply_primitive("tanh", (a,), tape=self)

    def relu(self, a):
        return apply_primitive("relu", (a,), tape=self)

    def softmax_xent(self, logits, targets):
        return apply_primitive("softmax_xent", (logits,), tape=self, targets=targets)

    def mse(self, pred, target):
        return apply_primitive("mse", (pred, target), tape=self)


def _as_tensor(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("tensor belongs to a different tape")
        return x
    return tape.leaf(x)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_targets(targets, n: int, c: int) -> np.ndarray:
    t = np.asarray(targets)
    if t.shape != (n,) or not np.issubdtype(t.dtype, np.integer):
        raise InvalidTarget(f"targets must be {n} integer class indices")
    if n and (t.min() < 0 or t.max() >= c):
        raise InvalidTarget(f"class index out of range [0, {c})")
    return t


def apply_primitive(kind: str, inputs: Sequence, tape: Tape | None = None, **attrs) -> Tensor:
    """Apply one primitive, record it on ``tape`` and return its output.

    Raw arrays among ``inputs`` are registered as leaves first. ``scale`` takes
    ``factor``; ``softmax_xent`` takes integer ``targets`` and returns the mean
    cross-entropy; ``mse`` returns the mean squared difference.
    """
    if tape is None:
        tape = next((x.tape for x in inputs if isinstance(x, Tensor) and x.tape), None)
        if tape is None:
            tape = Tape()
    ts = [_as_tensor(x, tape) for x in inputs]
    ids = tuple(t.node_id for t in ts)
    saved: dict = {}

    if kind == "matmul":
        a, b = ts[0].data, ts[1].data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
        out = a @ b
        saved["a"], saved["b"] = a, b
    elif kind == "add":
        a, b = ts[0].data, ts[1].data
        if not (a.shape == b.shape or b.ndim == 0 or (a.ndim == 2 and b.shape == a.shape[1:])):
            raise ShapeMismatch(f"add {a.shape} + {b.shape}")
        out = a + b
        saved["sa"], saved["sb"] = a.shape, b.shape
    elif kind == "scale":
        saved["factor"] = float(attrs["factor"])
        out = ts[0].data * saved["factor"]
    elif kind == "tanh":
        out = np.tanh(ts[0].data)
        saved["out"] = out
    elif kind == "relu":
        out = np.maximum(ts[0].data, 0.0)
        saved["x"] = ts[0].data
    elif kind == "softmax_xent":
        z = ts[0].data
        if z.ndim != 2:
            raise ShapeMismatch(f"softmax_xent expects (n, c) logits, got {z.shape}")
        t = _check_targets(attrs["targets"], z.shape[0], z.shape[1])
        logp = log_softmax(z)
        out = -logp[np.arange(len(t)), t].mean()
        saved["targets"] = t
        saved["logp"] = logp
    elif kind == "mse":
        a, b = ts[0].data, ts[1].data
        if a.shape != b.shape and b.ndim != 0:
            raise ShapeMismatch(f"mse {a.shape} vs {b.shape}")
        out = np.mean((a - b) ** 2)
        saved["a"], saved["b"] = a, b
    else:
        raise ValueError(f"unknown primitive {kind!r}")

    return tape._push(_Node(kind, ids, saved), out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.sum(axis=0).reshape(shape)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to every leaf on ``tape``.

    Returns a map ``node_id -> ndarray``. Leaves that do not influence the
    loss get exact zeros of their own shape.
    """
    if loss.tape is not tape:
        raise ValueError("loss is not on this tape")
    if loss.data.size != 1:
        raise NotScalar(f"loss has shape {loss.shape}")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(loss.node_id, -1, -1):
        node = tape.nodes[nid]
        g = grads.get(nid)
        if g is None or node.kind == "leaf":
            continue
        contribs = _vjp(node, g)
        for inp, c in zip(node.inputs, contribs):
            if inp in grads:
                grads[inp] = grads[inp] + c
            else:
                grads[inp] = c

    out = {}
    for lid in tape.leaves():
        g = grads.get(lid)
        out[lid] = g if g is not None else np.zeros(tape.nodes[lid].saved["shape"])
    return out


def _vjp(node: _Node, g: np.ndarray) -> list:
    s = node.saved
    k = node.kind
    if k == "matmul":
        a, b = s["a"], s["b"]
        return [g @ b.T, a.T @ g]
    if k == "add":
        return [_unbroadcast(g, s["sa"]), _unbroadcast(g, s["sb"])]
    if k == "scale":
        return [g * s["factor"]]
    if k == "tanh":
        return [g * (1.0 - s["out"] ** 2)]
    if k == "relu":
        return [g * (s["x"] > 0.0)]
    if k == "softmax_xent":
        t, logp = s["targets"], s["logp"]
        p = np.exp(logp)
        p[np.arange(len(t)), t] -= 1.0
        return [g * p / len(t)]
    if k == "mse":
        diff = s["a"] - s["b"]
        ga = g * 2.0 * diff / diff.size
        return [ga, _unbroadcast(-ga, s["b"].shape)]
    raise ValueError(k)


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta``."""
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    flat = theta.ravel()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] = flat[i] + h
        fp = float(f(probe.reshape(theta.shape)))
        probe[i] = flat[i] - h
        fm = float(f(probe.reshape(theta.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteEvaluation(f"f is not finite at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(theta.shape)
