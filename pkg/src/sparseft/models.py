"""Small MLP-family models over a flat float64 parameter vector.

Every model is a stack of dense hidden layers followed by a linear head.
Optional augmentations turn a pretrained checkpoint into a structurally
larger model that computes exactly the same function at initialization:

* ``adapter``: after each hidden layer ``h <- h + act(h @ down) @ up`` with
  ``up`` initialized to zero.
* ``lora``: each hidden weight ``W`` becomes ``W + A @ B`` with ``B`` zero.

Parameters are laid out body first and head last, so indices
``[0, n_body)`` are the body and the head occupies the tail.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tape, backward, log_softmax
from .errors import DimMismatch, InvalidSpec

CKPT_FORMAT = "sparseft-ckpt-v1"
ACTIVATIONS = ("tanh", "relu")
HEADS = ("classification", "regression")
AUGMENTATIONS = ("none", "adapter", "lora")
GROUP_KINDS = ("weight", "bias", "adapter", "lora_A", "lora_B")


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple = ()
    activation: str = "tanh"
    head: str = "classification"
    n_outputs: int = 2
    augmentation: str = "none"
    aug_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))

    def validate(self) -> "ModelSpec":
        dims = (self.input_dim, *self.hidden_dims, self.n_outputs)
        if any(int(d) < 1 for d in dims):
            raise InvalidSpec(f"all dimensions must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise InvalidSpec(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise InvalidSpec(f"unknown head {self.head!r}")
        if self.augmentation not in AUGMENTATIONS:
            raise InvalidSpec(f"unknown augmentation {self.augmentation!r}")
        if self.augmentation != "none":
            if not self.hidden_dims:
                raise InvalidSpec("augmentation needs at least one hidden layer")
            if self.aug_dim < 1:
                raise InvalidSpec("adapter bottleneck / lora rank must be >= 1")
        if self.augmentation == "lora":
            fan = (self.input_dim, *self.hidden_dims)
            smallest = min(min(a, b) for a, b in zip(fan[:-1], fan[1:]))
            if self.aug_dim > smallest:
                raise InvalidSpec(f"lora rank {self.aug_dim} exceeds layer dim {smallest}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass(frozen=True)
class _Slot:
    name: str
    shape: tuple
    layer: str
    kind: str
    start: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _layout(spec: ModelSpec) -> list[_Slot]:
    slots: list[_Slot] = []
    pos = 0

    def add(name, shape, layer, kind):
        nonlocal pos
        slots.append(_Slot(name, tuple(shape), layer, kind, pos))
        pos += int(np.prod(shape))

    fan_in = spec.input_dim
    for i, width in enumerate(spec.hidden_dims):
        layer = f"layer{i}"
        add(f"{layer}.W", (fan_in, width), layer, "weight")
        add(f"{layer}.b", (width,), layer, "bias")
        if spec.augmentation == "lora":
            add(f"{layer}.lora_A", (fan_in, spec.aug_dim), layer, "lora_A")
            add(f"{layer}.lora_B", (spec.aug_dim, width), layer, "lora_B")
        if spec.augmentation == "adapter":
            add(f"{layer}.adapter_down", (width, spec.aug_dim), layer, "adapter")
            add(f"{layer}.adapter_up", (spec.aug_dim, width), layer, "adapter")
        fan_in = width
    add("head.W", (fan_in, spec.n_outputs), "head", "weight")
    add("head.b", (spec.n_outputs,), "head", "bias")
    return slots


def param_count(spec: ModelSpec) -> int:
    return sum(s.size for s in _layout(spec.validate()))


class Model:
    """A model is a spec plus one flat parameter vector ``theta``."""

    def __init__(self, spec: ModelSpec, theta: np.ndarray | None = None):
        self.spec = spec.validate()
        self.slots = _layout(self.spec)
        self.n_params = sum(s.size for s in self.slots)
        self.n_body = self.slots[-2].start
        self.theta = np.zeros(self.n_params) if theta is None else np.array(theta, dtype=np.float64)
        if self.theta.shape != (self.n_params,):
            raise DimMismatch(f"expected {self.n_params} parameters, got {self.theta.shape}")

    # -- parameter views -------------------------------------------------
    def views(self, theta: np.ndarray | None = None) -> dict[str, np.ndarray]:
        theta = self.theta if theta is None else theta
        return {s.name: theta[s.start:s.start + s.size].reshape(s.shape) for s in self.slots}

    def flatten(self) -> np.ndarray:
        return flatten_params(self)

    def unflatten(self, v) -> None:
        unflatten_params(self, v)

    @property
    def head_indices(self) -> np.ndarray:
        return np.arange(self.n_body, self.n_params)

    # -- computation -----------------------------------------------------
    def _forward(self, tape: Tape, theta: np.ndarray, X: np.ndarray):
        spec = self.spec
        act = tape.tanh if spec.activation == "tanh" else tape.relu
        p = self.views(theta)
        leaves = {name: tape.leaf(v) for name, v in p.items()}
        h = tape.leaf(X)
        for i, _ in enumerate(spec.hidden_dims):
            L = f"layer{i}"
            z = tape.matmul(h, leaves[f"{L}.W"])
            if spec.augmentation == "lora":
                z = tape.add(z, tape.matmul(tape.matmul(h, leaves[f"{L}.lora_A"]), leaves[f"{L}.lora_B"]))
            h = act(tape.add(z, leaves[f"{L}.b"]))
            if spec.augmentation == "adapter":
                a = act(tape.matmul(h, leaves[f"{L}.adapter_down"]))
                h = tape.add(h, tape.matmul(a, leaves[f"{L}.adapter_up"]))
        out = tape.add(tape.matmul(h, leaves["head.W"]), leaves["head.b"])
        return out, leaves

    def predict(self, X, theta: np.ndarray | None = None) -> np.ndarray:
        """Raw outputs (logits or regression values) for inputs ``X``."""
        theta = self.theta if theta is None else theta
        out, _ = self._forward(Tape(), theta, np.atleast_2d(np.asarray(X, dtype=np.float64)))
        return np.array(out.data)

    def _loss_node(self, tape, out, y):
        if self.spec.head == "classification":
            return tape.softmax_xent(out, np.asarray(y, dtype=np.int64))
        return tape.mse(out, np.asarray(y, dtype=np.float64).reshape(out.shape))

    def loss(self, theta: np.ndarray, X, y) -> float:
        tape = Tape()
        out, _ = self._forward(tape, theta, np.asarray(X, dtype=np.float64))
        return float(self._loss_node(tape, out, y).data)

    def loss_and_grad(self, theta: np.ndarray, X, y) -> tuple[float, np.ndarray]:
        """Mean loss over ``(X, y)`` and its gradient with respect to ``theta``."""
        tape = Tape()
        out, leaves = self._forward(tape, theta, np.asarray(X, dtype=np.float64))
        loss = self._loss_node(tape, out, y)
        grads = backward(tape, loss)
        g = np.empty(self.n_params)
        for s in self.slots:
            g[s.start:s.start + s.size] = grads[leaves[s.name].node_id].ravel()
        return float(loss.data), g

    def per_sample_loss(self, theta: np.ndarray, X, y) -> np.ndarray:
        out = self.predict(X, theta)
        if self.spec.head == "classification":
            y = np.asarray(y, dtype=np.int64)
            return -log_softmax(out)[np.arange(len(y)), y]
        y = np.asarray(y, dtype=np.float64).reshape(out.shape)
        return ((out - y) ** 2).mean(axis=1)

    def copy(self) -> "Model":
        return Model(self.spec, self.theta.copy())


def _init_theta(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    slots = _layout(spec)
    theta = np.zeros(sum(s.size for s in slots))
    for s in slots:
        if s.kind == "bias" or s.name.endswith(("lora_B", "adapter_up")):
            continue
        bound = 1.0 / np.sqrt(s.shape[0])
        theta[s.start:s.start + s.size] = rng.uniform(-bound, bound, s.size)
    return theta


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Fresh model: fan-in scaled uniform weights, zero biases.

    LoRA ``B`` and adapter up-projections start at zero.
    """
    spec.validate()
    return Model(spec, _init_theta(spec, np.random.default_rng(seed)))


def flatten_params(model: Model) -> np.ndarray:
    return model.theta.copy()


def unflatten_params(model: Model, v) -> None:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (model.n_params,):
        raise DimMismatch(f"expected {model.n_params} values, got shape {v.shape}")
    model.theta = v.copy()


def param_groups(model: Model) -> dict[str, np.ndarray]:
    """Index sets for parameter groups.

    Keys ``"<layer>.<kind>"`` (e.g. ``"layer0.bias"``, ``"head.weight"``)
    partition ``0..m-1``. Aggregate keys overlap them: ``weight``, ``bias``,
    ``adapter``, ``lora_A``, ``lora_B`` collect a kind across layers (the head
    included), ``head`` and ``body`` split the vector in two.
    """
    groups: dict[str, list] = {}
    for s in model.slots:
        idx = np.arange(s.start, s.start + s.size)
        groups.setdefault(f"{s.layer}.{s.kind}", []).append(idx)
        groups.setdefault(s.kind, []).append(idx)
    out = {k: np.concatenate(v) for k, v in groups.items()}
    for kind in GROUP_KINDS:
        out.setdefault(kind, np.array([], dtype=np.int64))
    out["head"] = model.head_indices
    out["body"] = np.arange(model.n_body)
    return out


@dataclass(frozen=True)
class Checkpoint:
    """Frozen pretrained parameters plus the ModelSpec that interprets them."""

    spec: ModelSpec
    theta0: np.ndarray
    seed: int = 0
    config_digest: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.array(self.theta0, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "theta0", arr)
        if arr.shape != (param_count(self.spec),):
            raise DimMismatch("theta0 does not match spec")

    def model(self) -> Model:
        return Model(self.spec, self.theta0.copy())

    @property
    def digest(self) -> str:
        h = hashlib.sha256(self.theta0.astype("<f8").tobytes())
        h.update(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        return h.hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        header = {
            "format": CKPT_FORMAT,
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "config_digest": self.config_digest,
            "digest": self.digest,
            "n_params": int(self.theta0.size),
            "meta": self.meta,
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(self.theta0.astype("<f8").tobytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
            payload = fh.read()
        if header.get("format") != CKPT_FORMAT:
            raise InvalidSpec(f"not a {CKPT_FORMAT} file")
        theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        if theta.size != header["n_params"]:
            raise DimMismatch("checkpoint payload truncated")
        ckpt = cls(ModelSpec.from_dict(header["spec"]), theta, header["seed"],
                   header["config_digest"], header.get("meta", {}))
        if ckpt.digest != header["digest"]:
            raise InvalidSpec("checkpoint digest mismatch")
        return ckpt


def _transplant(src: Model, dst: Model, skip_head: bool = False) -> None:
    """Copy every parameter of ``src`` that exists under the same name in ``dst``."""
    dviews = dst.views()
    for name, v in src.views().items():
        if skip_head and name.startswith("head."):
            continue
        if name in dviews and dviews[name].shape == v.shape:
            dviews[name][...] = v


def augment_equivalent(checkpoint: Checkpoint, kind: str, dim: int, seed: int = 0) -> Model:
    """Adapter or LoRA model computing exactly the checkpoint's function.

    ``dim`` is the adapter bottleneck or LoRA rank. New parameters are seeded
    (down-projection / ``A``) or zero (up-projection / ``B``).
    """
    if kind not in ("adapter", "lora"):
        raise InvalidSpec(f"unknown augmentation {kind!r}")
    spec = replace(checkpoint.spec, augmentation=kind, aug_dim=int(dim)).validate()
    model = build_model(spec, seed)
    _transplant(checkpoint.model(), model)
    return model


def finetune_model(checkpoint: Checkpoint, n_outputs: int, head: str = "classification",
                   augmentation: str = "none", aug_dim: int = 0, seed: int = 0) -> Model:
    """Pretrained body (optionally augmented) with a freshly initialized task head."""
    spec = replace(checkpoint.spec, n_outputs=int(n_outputs), head=head,
                   augmentation=augmentation, aug_dim=int(aug_dim)).validate()
    model = build_model(spec, seed)
    _transplant(checkpoint.model(), model, skip_head=True)
    return model
