"""Mask selection strategies for sparse fine-tuning.

A mask is the set of parameter indices allowed to move away from the
pretrained values. Selection happens over a *pool* of eligible indices
(by default the model body; the task head is always trainable and does not
count against the budget).

Static strategies fix the mask before training: ``random``, ``bitfit``,
``magprune``, ``adapter``, ``lora``, ``sam`` and ``full``. Dynamic ones
(``mixout``, ``diffprune``, ``childprune``) change the trainable set or
reset coordinates while training through :func:`strategy_on_step`.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import (BudgetExceedsDim, EmptyData, InvalidSpec, NonPositiveCurvature,
                     StateCorrupt, TooLarge, ZeroBudget)
from .models import Model, param_groups

MASK_FORMAT = "sparseft-mask-v1"
VARIANTS = ("full", "random", "mixout", "bitfit", "magprune", "adapter", "lora",
            "diffprune", "childprune", "sam")
STATIC = ("full", "random", "bitfit", "magprune", "adapter", "lora", "sam")


@dataclass(frozen=True)
class SparseMask:
    """Sorted tunable indices into a length-``m`` parameter vector.

    ``pool`` is the number of budget-eligible parameters, so ``k`` equals
    ``floor(pool * p)`` for budgeted strategies.
    """

    indices: np.ndarray
    m: int
    k: int
    p: float = 1.0
    strategy: str = ""
    seed: int = 0
    pool: int | None = None

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64))
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        if idx.size != self.k:
            raise ValueError(f"mask has {idx.size} indices but k={self.k}")
        if idx.size and (idx[0] < 0 or idx[-1] >= self.m):
            raise ValueError("mask index out of range")
        if self.pool is None:
            object.__setattr__(self, "pool", self.m)

    def as_bool(self) -> np.ndarray:
        b = np.zeros(self.m, dtype=bool)
        b[self.indices] = True
        return b

    def __len__(self):
        return int(self.indices.size)

    def __eq__(self, other):
        return (isinstance(other, SparseMask) and self.m == other.m
                and np.array_equal(self.indices, other.indices))

    def __hash__(self):
        return hash((self.m, self.indices.tobytes()))

    def to_dict(self) -> dict:
        return {"format": MASK_FORMAT, "m": self.m, "k": self.k, "p": self.p,
                "pool": self.pool, "strategy": self.strategy, "seed": self.seed,
                "indices": self.indices.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SparseMask":
        return cls(np.asarray(d["indices"], dtype=np.int64), d["m"], d["k"], d["p"],
                   d["strategy"], d["seed"], d.get("pool", d["m"]))

    @classmethod
    def from_json(cls, s: str) -> "SparseMask":
        return cls.from_dict(json.loads(s))


@dataclass(frozen=True)
class ScoreVector:
    scores: np.ndarray
    provenance: str = "magnitude"

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(s)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "scores", s)


@dataclass(frozen=True)
class StrategyConfig:
    variant: str
    p: float = 0.005
    seed: int = 0
    burn_in: int = 8
    reproject_every: int = 200
    full_steps: int = 100
    rounds: int = 1
    aug_dim: int = 2
    mixout_per_step: bool = False
    head_in_budget: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidSpec(f"unknown strategy {self.variant!r}")
        if not 0.0 < self.p <= 1.0:
            raise InvalidSpec(f"sparsity must lie in (0, 1], got {self.p}")
        if min(self.burn_in, self.reproject_every, self.full_steps, self.rounds, self.aug_dim) < 1:
            raise InvalidSpec("step counts and dimensions must be >= 1")

    @property
    def static(self) -> bool:
        return self.variant in STATIC


def budget(m: int, p: float) -> int:
    """Number of tunable parameters ``floor(m * p)``."""
    if m < 1 or not 0.0 < p <= 1.0:
        raise ValueError(f"need m >= 1 and p in (0, 1], got m={m}, p={p}")
    k = int(np.floor(m * p))
    if k == 0:
        raise ZeroBudget(f"floor({m} * {p}) == 0")
    return k


def _order(scores: np.ndarray) -> np.ndarray:
    # stable sort on -score keeps lower indices first among ties
    return np.argsort(-scores, kind="stable")


def top_k_select(scores, k: int, candidates=None, **meta) -> SparseMask:
    """Indices of the ``k`` largest scores; ties go to the lower index.

    If ``candidates`` is given only those indices compete.
    """
    s = scores.scores if isinstance(scores, ScoreVector) else np.asarray(scores, dtype=np.float64)
    m = s.size
    cand = np.arange(m) if candidates is None else np.asarray(candidates, dtype=np.int64)
    if k > cand.size:
        raise BudgetExceedsDim(f"k={k} exceeds {cand.size} candidates")
    chosen = cand[_order(s[cand])[:k]]
    meta.setdefault("pool", cand.size)
    return SparseMask(chosen, m, k, **meta)


def project_l0(diag_values, k: int) -> SparseMask:
    """Euclidean projection of a relaxed diagonal mask onto exact-k binary masks.

    The nearest 0/1 diagonal with ``k`` ones keeps the ``k`` largest entries.
    """
    d = np.asarray(diag_values, dtype=np.float64)
    if k > d.size:
        raise BudgetExceedsDim(f"k={k} exceeds dimension {d.size}")
    return top_k_select(d, k, strategy="projection")


def surrogate_objective(L0: float, g, h, mask) -> float:
    """Inner minimum of the diagonal second-order model for a fixed mask.

    ``L0 - sum_{i in mask} g_i^2 / (2 h_i)``.
    """
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if np.any(h <= 0):
        raise NonPositiveCurvature("diagonal curvature must be positive")
    idx = mask.indices if isinstance(mask, SparseMask) else np.asarray(sorted(mask), dtype=np.int64)
    # summation in ascending index order so every caller gets the same rounding
    return float(L0 - np.sum(g[idx] ** 2 / (2.0 * h[idx])))


def surrogate_scores(g, h) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    return g ** 2 / (2.0 * h)


def brute_force_mask(L0: float, g, h, k: int) -> tuple[float, SparseMask]:
    """Exhaustive minimum of :func:`surrogate_objective` over all k-subsets."""
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    m = g.size
    if m > 20:
        raise TooLarge(f"m={m} > 20 for exhaustive search")
    if np.any(h <= 0):
        raise NonPositiveCurvature("diagonal curvature must be positive")
    if k > m:
        raise BudgetExceedsDim(f"k={k} > m={m}")
    best_val, best = np.inf, None
    for combo in itertools.combinations(range(m), k):
        val = surrogate_objective(L0, g, h, combo)
        if val < best_val:
            best_val, best = val, combo
    return best_val, SparseMask(np.array(best, dtype=np.int64), m, k, strategy="brute_force")


def sam_scores(grad_fn: Callable[[np.ndarray, object], np.ndarray], theta0, batches: Iterable) -> ScoreVector:
    """Squared sum of burn-in gradients taken at the frozen ``theta0``.

    ``grad_fn(theta, batch)`` returns the loss gradient on one batch. No
    parameter update happens between batches.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    total = None
    for batch in batches:
        g = np.asarray(grad_fn(theta0, batch), dtype=np.float64)
        total = g.copy() if total is None else total + g
    if total is None:
        raise EmptyData("no burn-in batches")
    return ScoreVector(total ** 2, "sam_grad_sq")


def burn_in_batches(X, y, n_batches: int, batch_size: int) -> list:
    """Consecutive minibatches of the training set, wrapping around."""
    n = len(X)
    if n == 0:
        raise EmptyData("empty training set")
    out = []
    for b in range(n_batches):
        idx = np.arange(b * batch_size, (b + 1) * batch_size) % n
        out.append((X[idx], y[idx]))
    return out


def model_sam_scores(model: Model, X, y, burn_in: int, batch_size: int = 32) -> ScoreVector:
    batches = burn_in_batches(X, y, burn_in, min(batch_size, len(X)) if len(X) else batch_size)
    return sam_scores(lambda th, b: model.loss_and_grad(th, *b)[1], model.theta, batches)


# ---------------------------------------------------------------------------
# strategy state

@dataclass
class StepAction:
    """Result of a strategy hook: a new mask and/or coordinates to reset."""

    mask: SparseMask | None = None
    reset: np.ndarray | None = None


@dataclass
class StrategyState:
    config: StrategyConfig
    mask: SparseMask
    pool: np.ndarray
    k: int
    free: np.ndarray = None
    rng: np.random.Generator = None
    gates: np.ndarray | None = None
    grad_sq: np.ndarray | None = None
    emitted: int = 0
    initialized: bool = True
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.free is None:
            self.free = self.mask.indices
        if self.rng is None:
            self.rng = np.random.default_rng(self.config.seed + 7919)


def budget_pool(model: Model, cfg: StrategyConfig) -> np.ndarray:
    return np.arange(model.n_params) if cfg.head_in_budget else np.arange(model.n_body)


def init_mask(cfg: StrategyConfig, model: Model, data=None) -> SparseMask:
    """Initial mask for ``cfg`` on a model sitting at its pretrained values.

    ``data`` is an ``(X, y)`` pair; only ``sam`` needs it.
    """
    return init_state(cfg, model, data).mask


def init_state(cfg: StrategyConfig, model: Model, data=None, batch_size: int = 32) -> StrategyState:
    pool = budget_pool(model, cfg)
    m = model.n_params
    groups = param_groups(model)
    meta = dict(p=cfg.p, strategy=cfg.variant, seed=cfg.seed, pool=pool.size)
    v = cfg.variant

    if v in ("bitfit", "adapter", "lora"):
        if v == "bitfit":
            idx = groups["bias"]
        elif v == "adapter":
            idx = groups["adapter"]
        else:
            idx = np.concatenate([groups["lora_A"], groups["lora_B"]])
        if idx.size == 0:
            raise InvalidSpec(f"model has no {v} parameters")
        mask = SparseMask(idx, m, idx.size, **meta)
        return StrategyState(cfg, mask, pool, mask.k)

    if v == "full":
        mask = SparseMask(pool, m, pool.size, **meta)
        return StrategyState(cfg, mask, pool, pool.size)

    k = budget(pool.size, cfg.p)
    if v == "random":
        rng = np.random.default_rng(cfg.seed)
        mask = SparseMask(rng.choice(pool, size=k, replace=False), m, k, **meta)
        return StrategyState(cfg, mask, pool, k)
    if v == "magprune":
        mask = top_k_select(np.abs(model.theta), k, candidates=pool, **meta)
        return StrategyState(cfg, mask, pool, k)
    if v == "sam":
        if data is None or len(data[0]) == 0:
            raise EmptyData("sam needs burn-in data")
        scores = model_sam_scores(model, data[0], data[1], cfg.burn_in, batch_size)
        mask = top_k_select(scores, k, candidates=pool, **meta)
        return StrategyState(cfg, mask, pool, k)
    if v == "mixout":
        # trains every pool coordinate, then resets all but k at the end
        mask = SparseMask(pool, m, pool.size, **meta)
        return StrategyState(cfg, mask, pool, k)
    if v == "diffprune":
        gates = np.zeros(m)
        mask = top_k_select(gates, k, candidates=pool, **meta)
        return StrategyState(cfg, mask, pool, k, gates=gates)
    if v == "childprune":
        mask = SparseMask(pool, m, pool.size, **meta)
        return StrategyState(cfg, mask, pool, k, grad_sq=np.zeros(m))
    raise InvalidSpec(v)


def strategy_on_step(state: StrategyState | None, step: int, theta, theta0, grads,
                     lr: float = 0.0) -> StepAction | None:
    """Dynamic-strategy hook, called after the update of ``step`` (1-based).

    ``grads`` is the full gradient used for that update and ``lr`` the step
    size. Returns ``None`` when nothing changes.
    """
    if state is None or not getattr(state, "initialized", False):
        raise StateCorrupt("strategy hook called before init")
    cfg = state.config
    v = cfg.variant
    meta = dict(p=cfg.p, strategy=v, seed=cfg.seed, pool=state.pool.size)

    if v == "mixout":
        if cfg.mixout_per_step and cfg.p < 1.0:
            hit = state.pool[state.rng.random(state.pool.size) < (1.0 - cfg.p)]
            return StepAction(reset=hit) if hit.size else None
        return None

    if v == "diffprune":
        theta = np.asarray(theta)
        delta = theta - theta0
        off = np.ones(theta.size, dtype=bool)
        off[state.mask.indices] = False
        # straight-through: d loss / d gate_i ~ g_i * delta_i, with the
        # one-step lookahead delta -lr * g_i for coordinates that are off
        delta = np.where(off, -lr * grads, delta)
        state.gates = state.gates - grads * delta
        if step % cfg.reproject_every == 0:
            new = top_k_select(state.gates, state.k, candidates=state.pool, **meta)
            dropped = np.setdiff1d(state.mask.indices, new.indices)
            state.mask = new
            state.free = new.indices
            state.emitted += 1
            return StepAction(mask=new, reset=dropped)
        return None

    if v == "childprune":
        state.grad_sq = state.grad_sq + np.asarray(grads) ** 2
        if state.emitted < cfg.rounds and step % cfg.full_steps == 0:
            new = top_k_select(state.grad_sq, state.k, candidates=state.pool, **meta)
            dropped = np.setdiff1d(state.pool, new.indices)
            state.mask = new
            state.free = new.indices
            state.emitted += 1
            state.grad_sq = np.zeros_like(state.grad_sq)
            return StepAction(mask=new, reset=dropped)
        return None

    return None


def strategy_on_end(state: StrategyState) -> StepAction | None:
    """Final hook: Mixout resets a seeded (pool - k)-subset to pretrained values."""
    if state is None or not state.initialized:
        raise StateCorrupt("strategy hook called before init")
    cfg = state.config
    if cfg.variant == "mixout":
        rng = np.random.default_rng(cfg.seed)
        keep = rng.choice(state.pool, size=state.k, replace=False)
        reset = np.setdiff1d(state.pool, keep)
        state.mask = SparseMask(keep, state.mask.m, state.k, p=cfg.p, strategy="mixout",
                                seed=cfg.seed, pool=state.pool.size)
        state.free = state.mask.indices
        return StepAction(mask=state.mask, reset=reset)
    if cfg.variant == "childprune" and state.emitted == 0:
        new = top_k_select(state.grad_sq, state.k, candidates=state.pool, p=cfg.p,
                           strategy="childprune", seed=cfg.seed, pool=state.pool.size)
        state.mask, state.free = new, new.indices
        state.emitted += 1
        return StepAction(mask=new, reset=np.setdiff1d(state.pool, new.indices))
    return None
