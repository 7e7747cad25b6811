"""Masked fine-tuning with dev-set early stopping."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from .errors import DimMismatch, Diverged, EmptyData, InvalidSpec
from .models import Checkpoint, Model, finetune_model
from .selection import (SparseMask, StrategyConfig, init_state, strategy_on_end,
                        strategy_on_step)

RUN_FORMAT = "sparseft-run-v1"


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "X", np.asarray(self.X, dtype=np.float64))
        object.__setattr__(self, "y", np.asarray(self.y))
        if len(self.X) != len(self.y):
            raise DimMismatch("X and y lengths differ")

    def __len__(self):
        return len(self.X)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx])


@dataclass(frozen=True)
class Splits:
    train: Dataset
    dev: Dataset
    test: Dataset
    head: str = "classification"
    n_outputs: int = 2


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.0
    batch_size: int = 16
    max_epochs: int = 100
    early_stop_tolerance: int = 40
    eval_every: int | None = None
    seed: int = 0
    lambda_reg: float = 0.0
    head_seed: int | None = None

    @property
    def init_seed(self) -> int:
        """Seed for the fresh head; the run seed unless ``head_seed`` pins it."""
        return self.seed if self.head_seed is None else self.head_seed

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.early_stop_tolerance < 1:
            raise InvalidSpec("need lr > 0, batch_size >= 1, tolerance >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidSpec("momentum must lie in [0, 1)")
        if self.lambda_reg < 0:
            raise InvalidSpec("lambda_reg must be >= 0")


@dataclass
class RunReport:
    strategy: str
    seed: int
    p: float
    mask: SparseMask
    curves: list
    final: dict
    stop_step: int
    mask_change_events: list
    delta_support: list
    head_indices: list
    task: str = ""
    mode: str = "main"
    meta: dict = field(default_factory=dict)
    theta: np.ndarray | None = field(default=None, repr=False, compare=False)
    theta0: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "format": RUN_FORMAT,
            "task": self.task, "mode": self.mode,
            "strategy": self.strategy, "seed": self.seed, "p": self.p,
            "mask": self.mask.to_dict(),
            "curves": self.curves, "final": self.final, "stop_step": self.stop_step,
            "mask_change_events": self.mask_change_events,
            "delta_support": self.delta_support,
            "head_indices": self.head_indices,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        if d.get("format") != RUN_FORMAT:
            raise InvalidSpec(f"not a {RUN_FORMAT} record")
        return cls(d["strategy"], d["seed"], d["p"], SparseMask.from_dict(d["mask"]),
                   d["curves"], d["final"], d["stop_step"], d["mask_change_events"],
                   d["delta_support"], d["head_indices"], d.get("task", ""),
                   d.get("mode", "main"), d.get("meta", {}))

    def off_mask_changes(self) -> list:
        """Changed coordinates that are neither in the mask nor in the free head."""
        allowed = set(self.mask.indices.tolist()) | set(self.head_indices)
        return [i for i in self.delta_support if i not in allowed]


@dataclass
class OptimizerState:
    velocity: np.ndarray | None = None


def masked_step(theta, grads, mask, opt_state: OptimizerState | None = None,
                lr: float = 0.1, momentum: float = 0.0) -> np.ndarray:
    """One SGD (optionally heavy-ball) step restricted to ``mask``.

    Coordinates outside the mask are returned bit-identical, and their
    velocity is cleared so a later change of mask cannot move them.
    """
    theta = np.asarray(theta, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != theta.shape:
        raise DimMismatch(f"grad shape {grads.shape} vs theta {theta.shape}")
    if isinstance(mask, SparseMask):
        on = mask.as_bool()
    else:
        on = np.asarray(mask)
        if on.dtype != bool:
            b = np.zeros(theta.size, dtype=bool)
            b[on.astype(np.int64)] = True
            on = b
    if on.shape != theta.shape:
        raise DimMismatch("mask does not match parameter dimension")
    g = np.where(on, grads, 0.0)
    if momentum > 0.0:
        if opt_state is None:
            opt_state = OptimizerState()
        v = opt_state.velocity if opt_state.velocity is not None else np.zeros_like(theta)
        v = momentum * v + g
        v[~on] = 0.0
        opt_state.velocity = v
        step = v
    else:
        step = g
    out = theta.copy()
    out[on] = theta[on] - lr * step[on]
    return out


def regularized_loss(loss_fn: Callable[[np.ndarray], float], theta, theta0, mask, lam: float) -> float:
    """``L(theta) + lam * ||(I - M)(theta - theta0)||^2``."""
    theta = np.asarray(theta, dtype=np.float64)
    off = ~_mask_bool(mask, theta.size)
    d = (theta - np.asarray(theta0, dtype=np.float64))[off]
    return float(loss_fn(theta)) + lam * float(d @ d)


def _mask_bool(mask, m: int) -> np.ndarray:
    if isinstance(mask, SparseMask):
        return mask.as_bool()
    b = np.zeros(m, dtype=bool)
    b[np.asarray(list(mask), dtype=np.int64)] = True
    return b


def evaluate(model: Model, data: Dataset, theta=None) -> dict:
    """Mean loss, task metric (accuracy or RMSE) and bounded 0-1 loss."""
    if len(data) == 0:
        raise EmptyData("cannot evaluate on an empty dataset")
    theta = model.theta if theta is None else theta
    losses = model.per_sample_loss(theta, data.X, data.y)
    out = model.predict(data.X, theta)
    if model.spec.head == "classification":
        correct = out.argmax(axis=1) == np.asarray(data.y)
        metric = float(correct.mean())
        zero_one = 1.0 - metric
    else:
        err = out - np.asarray(data.y, dtype=np.float64).reshape(out.shape)
        metric = float(np.sqrt(np.mean(err ** 2)))
        zero_one = float(np.mean(np.any(np.abs(err) > 0.5, axis=1)))
    return {"loss": float(losses.mean()), "metric": metric, "zero_one": zero_one}


def prepare_model(checkpoint: Checkpoint, strategy: StrategyConfig, splits: Splits, seed: int) -> Model:
    aug = strategy.variant if strategy.variant in ("adapter", "lora") else "none"
    return finetune_model(checkpoint, splits.n_outputs, splits.head, aug,
                          strategy.aug_dim if aug != "none" else 0, seed=seed)


def train(checkpoint: Checkpoint, strategy: StrategyConfig, splits: Splits, cfg: TrainConfig,
          task: str = "", mode: str = "main", model: Model | None = None,
          fixed_steps: int | None = None) -> RunReport:
    """Fine-tune ``checkpoint`` under ``strategy`` and report the run.

    Dev loss is checked every ``cfg.eval_every`` steps (default once per
    epoch). Training stops after ``early_stop_tolerance`` evaluations without
    improvement or after ``max_epochs``; the best-dev parameters are restored
    before the final evaluation. ``fixed_steps`` disables early stopping and
    runs exactly that many updates.
    """
    if min(len(splits.train), len(splits.dev), len(splits.test)) == 0:
        raise EmptyData("train, dev and test splits must be non-empty")
    if model is None:
        model = prepare_model(checkpoint, strategy, splits, cfg.init_seed)
    theta0 = model.theta.copy()
    theta = theta0.copy()
    m = model.n_params
    train_set, dev = splits.train, splits.dev

    state = init_state(strategy, model, (train_set.X, train_set.y), cfg.batch_size)
    head_free = np.zeros(m, dtype=bool)
    if not strategy.head_in_budget:
        head_free[model.head_indices] = True

    def free_set():
        f = head_free.copy()
        f[state.free] = True
        return f

    free = free_set()
    if cfg.lambda_reg > 0:
        free = np.ones(m, dtype=bool)
    rng = np.random.default_rng(cfg.seed)
    n = len(train_set)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = int(np.ceil(n / bs))
    eval_every = cfg.eval_every or steps_per_epoch
    total_steps = fixed_steps if fixed_steps is not None else cfg.max_epochs * steps_per_epoch

    opt = OptimizerState()
    curves, events, spikes = [], [], []
    # childprune trains densely until its first projection; those states are not sparse
    tracking = strategy.variant != "childprune"
    best = (np.inf, theta.copy(), state.mask)
    since_best = 0
    step = 0
    order = np.array([], dtype=np.int64)
    pos = 0
    stopped = False

    while step < total_steps and not stopped:
        if pos >= order.size:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + bs]
        pos += bs
        loss, g = model.loss_and_grad(theta, train_set.X[idx], train_set.y[idx])
        if not np.isfinite(loss):
            raise Diverged(f"train loss is {loss} at step {step}")
        if cfg.lambda_reg > 0:
            off = ~free_set()
            g = g + 2.0 * cfg.lambda_reg * np.where(off, theta - theta0, 0.0)
        theta = masked_step(theta, g, free, opt, cfg.lr, cfg.momentum)
        step += 1

        action = strategy_on_step(state, step, theta, theta0, g, lr=cfg.lr)
        if action is not None:
            if action.mask is not None:
                before = model.loss(theta, train_set.X, train_set.y)
            if action.reset is not None and action.reset.size:
                theta[action.reset] = theta0[action.reset]
            if action.mask is not None:
                # only reprojections that actually move the support count as events
                if action.reset is not None and action.reset.size:
                    events.append(step)
                    spikes.append([step, before, model.loss(theta, train_set.X, train_set.y)])
                if cfg.lambda_reg == 0:
                    free = free_set()
                if strategy.variant == "childprune":
                    tracking = True
                    best, since_best = (np.inf, theta.copy(), state.mask), 0

        if step % eval_every == 0 or step == total_steps:
            tr = model.loss(theta, train_set.X, train_set.y)
            dv = model.loss(theta, dev.X, dev.y)
            if not np.isfinite(tr):
                raise Diverged(f"train loss is {tr} at step {step}")
            curves.append([step, tr, dv])
            if fixed_steps is None and tracking:
                if dv < best[0]:
                    best, since_best = (dv, theta.copy(), state.mask), 0
                else:
                    since_best += 1
                    if since_best >= cfg.early_stop_tolerance:
                        stopped = True

    if fixed_steps is None and tracking and np.isfinite(best[0]):
        theta = best[1].copy()
        state.mask = best[2]
        state.free = best[2].indices
    action = strategy_on_end(state)
    if action is not None:
        if action.reset is not None:
            theta[action.reset] = theta0[action.reset]
        events.append(step)

    model.theta = theta
    final = {name: evaluate(model, ds) for name, ds in
             (("train", train_set), ("dev", dev), ("test", splits.test))}
    support = np.flatnonzero(theta != theta0).tolist()
    return RunReport(
        strategy=strategy.variant, seed=cfg.seed, p=strategy.p, mask=state.mask,
        curves=curves, final=final, stop_step=step, mask_change_events=events,
        delta_support=support, head_indices=np.flatnonzero(head_free).tolist(),
        task=task, mode=mode, meta={"spikes": spikes}, theta=theta, theta0=theta0,
    )
