"""Synthetic Gaussian-mixture tasks and pretraining."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import expm

from .errors import InvalidFraction, InvalidSpec
from .models import Checkpoint, ModelSpec, build_model
from .training import Dataset, Splits, masked_step, OptimizerState


@dataclass(frozen=True)
class TaskSpec:
    input_dim: int = 16
    classes: int = 3
    modes: int = 2
    n_pretrain: int = 2000
    n_train: int = 100
    n_test: int = 1000
    shift: float = 0.0
    label_noise: float = 0.0
    separation: float = 2.0
    seed: int = 0
    name: str = "task"

    def validate(self) -> "TaskSpec":
        if min(self.input_dim, self.classes, self.modes, self.n_pretrain, self.n_train, self.n_test) < 1:
            raise InvalidSpec("counts must be >= 1")
        if self.n_train < 2:
            raise InvalidSpec("n_train must be >= 2 to carve a dev split")
        if self.shift < 0:
            raise InvalidSpec("shift must be >= 0")
        if not 0.0 <= self.label_noise < 1.0:
            raise InvalidSpec("label_noise must lie in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SynthTask:
    spec: TaskSpec
    pretrain: Dataset
    downstream: Splits
    means: np.ndarray
    downstream_means: np.ndarray


def _sample(rng, means: np.ndarray, n: int, noise: float, classes: int):
    n_modes = means.shape[0] // classes
    y = rng.integers(0, classes, n)
    mode = rng.integers(0, n_modes, n)
    X = means[y * n_modes + mode] + rng.standard_normal((n, means.shape[1]))
    if noise > 0:
        flip = rng.random(n) < noise
        other = (y + rng.integers(1, classes, n)) % classes if classes > 1 else y
        y = np.where(flip, other, y)
    return X, y


def downstream_transform(spec: TaskSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    """Rotation by angle ``shift`` about a seeded generator plus a ``shift`` translation."""
    A = rng.standard_normal((spec.input_dim, spec.input_dim))
    A = A - A.T
    norm = np.linalg.norm(A, 2)
    R = expm(spec.shift * A / norm) if norm > 0 else np.eye(spec.input_dim)
    t = rng.standard_normal(spec.input_dim)
    t = spec.shift * t / np.linalg.norm(t)
    return R, t


def synth_task(spec: TaskSpec) -> SynthTask:
    """Pretraining data and a shifted downstream task from one mixture source.

    Each class is a mixture of ``modes`` unit-variance Gaussians whose means
    have scale ``separation``. The downstream means are the pretraining means
    rotated and translated by ``shift``; downstream labels flip to a random
    other class with probability ``label_noise``. Ten percent of the
    downstream training pool becomes the dev set.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means = spec.separation * rng.standard_normal((spec.classes * spec.modes, spec.input_dim))
    R, t = downstream_transform(spec, rng)
    down = means @ R.T + t
    Xp, yp = _sample(np.random.default_rng([spec.seed, 1]), means, spec.n_pretrain, 0.0, spec.classes)
    drng = np.random.default_rng([spec.seed, 2])
    Xd, yd = _sample(drng, down, spec.n_train, spec.label_noise, spec.classes)
    Xt, yt = _sample(np.random.default_rng([spec.seed, 3]), down, spec.n_test, spec.label_noise, spec.classes)
    n_dev = max(1, int(round(0.1 * spec.n_train)))
    perm = drng.permutation(spec.n_train)
    dev_idx, tr_idx = np.sort(perm[:n_dev]), np.sort(perm[n_dev:])
    full = Dataset(Xd, yd)
    splits = Splits(full.subset(tr_idx), full.subset(dev_idx), Dataset(Xt, yt),
                    "classification", spec.classes)
    return SynthTask(spec, Dataset(Xp, yp), splits, means, down)


def perturbed_datasets(train: Dataset, count: int, drop_fraction: float, seed: int) -> list[Dataset]:
    """``count`` seeded subsamples keeping ``ceil((1 - drop_fraction) * n)`` points each."""
    if not 0.0 < drop_fraction < 1.0:
        raise InvalidFraction(f"drop_fraction must lie in (0, 1), got {drop_fraction}")
    if count < 1:
        raise InvalidSpec("count must be >= 1")
    n = len(train)
    keep = int(np.ceil((1.0 - drop_fraction) * n - 1e-9))
    rng = np.random.default_rng(seed)
    return [train.subset(np.sort(rng.choice(n, size=keep, replace=False))) for _ in range(count)]


@dataclass(frozen=True)
class PretrainConfig:
    hidden_dims: tuple = (64, 64)
    activation: str = "tanh"
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


def pretrain(data: Dataset, n_classes: int, cfg: PretrainConfig = PretrainConfig()) -> Checkpoint:
    """Train every parameter of a fresh MLP on ``data`` and freeze it."""
    spec = ModelSpec(data.X.shape[1], tuple(cfg.hidden_dims), cfg.activation, "classification", n_classes)
    model = build_model(spec, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 11])
    theta = model.theta
    every = np.ones(model.n_params, dtype=bool)
    opt = OptimizerState()
    n = len(data)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            _, g = model.loss_and_grad(theta, data.X[idx], data.y[idx])
            theta = masked_step(theta, g, every, opt, cfg.lr, cfg.momentum)
    digest = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
    acc = float((model.predict(data.X, theta).argmax(1) == data.y).mean())
    return Checkpoint(spec, theta, cfg.seed, digest, {"pretrain_accuracy": acc})
