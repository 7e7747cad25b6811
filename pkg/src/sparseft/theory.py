"""Stability and generalization estimators, curvature probes, and the
projection-discontinuity demonstration."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import NonFiniteEvaluation, NotSymmetric, TooLarge, ZeroBudget
from .models import Checkpoint
from .selection import StrategyConfig, budget, project_l0
from .training import Dataset, Splits, TrainConfig, prepare_model, train

STAB_FORMAT = "sparseft-stab-v1"


@dataclass(frozen=True)
class BoundInputs:
    rho: float
    lambda_min: float = 0.0
    C: float = 1.0
    n: int = 1
    p: float = 1.0
    delta: float = 0.1

    def __post_init__(self):
        if self.rho < 0 or self.C <= 0 or self.n < 1:
            raise ValueError("need rho >= 0, C > 0, n >= 1")
        if not 0.0 < self.p <= 1.0 or not 0.0 < self.delta < 1.0:
            raise ValueError("need p in (0, 1] and delta in (0, 1)")


def phs_bound(inputs: BoundInputs) -> float:
    """Pointwise-hypothesis-stability rate ``2 rho^2 / ((lambda_min + 2(1-p)) n)``.

    Returns ``inf`` when the denominator vanishes (full tuning on a flat
    optimum).
    """
    denom = (inputs.lambda_min + 2.0 * (1.0 - inputs.p)) * inputs.n
    if denom <= 0.0:
        return float("inf")
    return 2.0 * inputs.rho ** 2 / denom


def gen_bound(R_hat: float, inputs: BoundInputs, beta: float) -> float:
    """Risk bound ``R_hat + sqrt((C^2 + 12 C n beta) / (2 n delta))``."""
    if R_hat < 0 or beta < 0:
        raise ValueError("R_hat and beta must be >= 0")
    C, n = inputs.C, inputs.n
    return R_hat + float(np.sqrt((C * C + 12.0 * C * n * beta) / (2.0 * n * inputs.delta)))


def expected_regularizer_mc(theta, theta0, p: float, trials: int, seed: int = 0,
                            chunk: int = 20000) -> float:
    """Monte Carlo mean of ``||(I - M)(theta - theta0)||^2`` over uniform exact-k masks.

    Converges to ``(1 - k/m) ||theta - theta0||^2`` with ``k = floor(m p)``.
    """
    d2 = (np.asarray(theta, dtype=np.float64) - np.asarray(theta0, dtype=np.float64)) ** 2
    m = d2.size
    k = budget(m, p)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if k == m:
        return 0.0
    rng = np.random.default_rng(seed)
    total = 0.0
    done = 0
    while done < trials:
        t = min(chunk, trials - done)
        # the first k columns of a random permutation form a uniform k-subset
        keys = rng.random((t, m))
        kept = np.argpartition(keys, k - 1, axis=1)[:, :k]
        total += float(d2.sum() * t - d2[kept].sum())
        done += t
    return total / trials


def _guard(f, x):
    v = float(f(x))
    if not np.isfinite(v):
        raise NonFiniteEvaluation("f is not finite at a probe point")
    return v


def hessian_diag_fd(f: Callable[[np.ndarray], float], theta, h: float = 1e-3) -> np.ndarray:
    """Central second differences ``(f(x+h e_i) - 2 f(x) + f(x-h e_i)) / h^2``."""
    theta = np.asarray(theta, dtype=np.float64)
    m = theta.size
    if m > 500:
        raise TooLarge(f"m={m} > 500 for diagonal finite differences")
    f0 = _guard(f, theta)
    out = np.empty(m)
    for i in range(m):
        e = np.zeros(m)
        e[i] = h
        out[i] = (_guard(f, theta + e) - 2.0 * f0 + _guard(f, theta - e)) / (h * h)
    return out


def hessian_fd(f: Callable[[np.ndarray], float], theta, h: float = 1e-3) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    m = theta.size
    if m > 60:
        raise TooLarge(f"m={m} > 60 for a full finite-difference Hessian")
    H = np.empty((m, m))
    E = np.eye(m) * h
    for i in range(m):
        for j in range(i, m):
            v = (_guard(f, theta + E[i] + E[j]) - _guard(f, theta + E[i] - E[j])
                 - _guard(f, theta - E[i] + E[j]) + _guard(f, theta - E[i] - E[j])) / (4.0 * h * h)
            H[i, j] = H[j, i] = v
    return H


def lambda_min_fd(f: Callable[[np.ndarray], float], theta, h: float = 1e-3) -> float:
    """Smallest eigenvalue of the symmetrized finite-difference Hessian."""
    H = hessian_fd(f, theta, h)
    return float(np.linalg.eigvalsh(0.5 * (H + H.T))[0])


def rayleigh_upperbound_check(H, trials: int = 1000, seed: int = 0, tol: float = 1e-9):
    """Check ``x'Hx <= |lambda_max| x'x`` on random nonzero ``x``.

    Returns ``(ok, max_violation)`` where violation is
    ``x'Hx - |lambda_max| x'x`` (negative when the bound holds with room).
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1] or not np.allclose(H, H.T, atol=1e-12):
        raise NotSymmetric("H must be a symmetric square matrix")
    if H.shape[0] > 60:
        raise TooLarge("dimension > 60")
    lam = abs(float(np.linalg.eigvalsh(H)[-1]))
    X = np.random.default_rng(seed).standard_normal((trials, H.shape[0]))
    quad = np.einsum("ti,ij,tj->t", X, H, X)
    viol = float(np.max(quad - lam * np.einsum("ti,ti->t", X, X)))
    return viol <= tol, viol


# ---------------------------------------------------------------------------
# empirical stability

@dataclass
class StabilityReport:
    phs_empirical: float
    sampled_indices: list
    per_index_delta: list
    bound_inputs: dict
    phs_bound_value: float
    gen_bound_value: float
    delta: float
    strategy: str = ""
    seed: int = 0
    p: float = 1.0
    train_zero_one: float = 0.0
    test_zero_one: float = 0.0
    test_metric: float = 0.0
    per_index_delta_01: list = field(default_factory=list)
    phs_empirical_01: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format"] = STAB_FORMAT
        for key in ("phs_bound_value", "gen_bound_value"):
            if not np.isfinite(d[key]):
                d[key] = "inf"
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "StabilityReport":
        d = dict(d)
        d.pop("format", None)
        for key in ("phs_bound_value", "gen_bound_value"):
            if d[key] == "inf":
                d[key] = float("inf")
        return cls(**d)


def max_sample_grad_norm(model, theta, data: Dataset, free: np.ndarray | None = None) -> float:
    """Largest per-sample gradient norm, restricted to ``free`` coordinates."""
    best = 0.0
    for i in range(len(data)):
        _, g = model.loss_and_grad(theta, data.X[i:i + 1], data.y[i:i + 1])
        if free is not None:
            g = g[free]
        best = max(best, float(np.linalg.norm(g)))
    return best


def phs_estimate(checkpoint: Checkpoint, strategy: StrategyConfig, splits: Splits,
                 cfg: TrainConfig, indices, fixed_steps: int | None = None,
                 delta: float = 0.1, lambda_min: float = 0.0) -> StabilityReport:
    """Leave-one-out estimate of pointwise hypothesis stability.

    Trains once on the full training set ``S`` and once on each ``S \\ z_i``
    for the sampled ``i``, all with the same strategy, config and seed, and
    averages ``|loss(A(S^i), z_i) - loss(A(S), z_i)|`` (per-sample training
    loss). Removing the only sample leaves the untrained initialization.

    The same deltas under 0-1 loss give ``phs_empirical_01``, which is the
    ``beta`` fed to :func:`gen_bound` since that bound needs a loss bounded
    by ``C = 1``. ``R_hat`` is the train 0-1 risk.
    """
    idx = sorted(int(i) for i in indices)
    if not idx:
        raise ValueError("need at least one removal index")
    S = splits.train
    n = len(S)
    full = train(checkpoint, strategy, splits, cfg, fixed_steps=fixed_steps)
    model = prepare_model(checkpoint, strategy, splits, cfg.init_seed)
    theta_init = model.theta.copy()
    zi_loss = model.per_sample_loss(full.theta, S.X, S.y)
    zi_wrong = model.predict(S.X, full.theta).argmax(1) != S.y

    deltas, deltas01 = [], []
    for i in idx:
        keep = np.delete(np.arange(n), i)
        if keep.size == 0:
            theta_i = theta_init
        else:
            sub = replace(splits, train=S.subset(keep))
            theta_i = train(checkpoint, strategy, sub, cfg, fixed_steps=fixed_steps).theta
        li = model.per_sample_loss(theta_i, S.X[i:i + 1], S.y[i:i + 1])[0]
        deltas.append(abs(float(li) - float(zi_loss[i])))
        wrong_i = model.predict(S.X[i:i + 1], theta_i).argmax(1)[0] != S.y[i]
        deltas01.append(abs(float(wrong_i) - float(zi_wrong[i])))
    eps = float(np.sum(deltas) / len(deltas))
    eps01 = float(np.sum(deltas01) / len(deltas01))

    free = np.zeros(model.n_params, dtype=bool)
    free[full.mask.indices] = True
    free[full.head_indices] = True
    rho = max(max_sample_grad_norm(model, theta_init, S, free),
              max_sample_grad_norm(model, full.theta, S, free))
    # an empty pool means only the head trains, i.e. everything eligible is free
    p_eff = min(1.0, full.mask.k / full.mask.pool) if full.mask.pool else 1.0
    inputs = BoundInputs(rho=rho, lambda_min=lambda_min, C=1.0, n=n, p=p_eff, delta=delta)
    r_hat = full.final["train"]["zero_one"]
    return StabilityReport(
        phs_empirical=eps, sampled_indices=idx, per_index_delta=deltas,
        bound_inputs=asdict(inputs), phs_bound_value=phs_bound(inputs),
        gen_bound_value=gen_bound(r_hat, inputs, eps01), delta=delta,
        strategy=strategy.variant, seed=cfg.seed, p=strategy.p,
        train_zero_one=r_hat, test_zero_one=full.final["test"]["zero_one"],
        test_metric=full.final["test"]["metric"], per_index_delta_01=deltas01,
        phs_empirical_01=eps01,
    )


def sample_removal_indices(n: int, count: int = 20, seed: int = 0, full: bool = False) -> list:
    if full or count >= n:
        return list(range(n))
    return sorted(np.random.default_rng(seed).choice(n, size=count, replace=False).tolist())


# ---------------------------------------------------------------------------
# projection discontinuity

FLIP_PAIR = (np.array([0.99, 1.0]), np.array([1.0, 0.99]))


def flip_pair_check(pair=FLIP_PAIR, k: int = 1) -> dict:
    a, b = project_l0(pair[0], k), project_l0(pair[1], k)
    hamming = int(np.sum(a.as_bool() != b.as_bool()))
    return {"inputs": [pair[0].tolist(), pair[1].tolist()], "k": k,
            "masks": [a.indices.tolist(), b.indices.tolist()],
            "input_distance": float(np.linalg.norm(pair[0] - pair[1])),
            "hamming": hamming}


def projection_discontinuity_demo(checkpoint: Checkpoint, splits: Splits, strategy: StrategyConfig,
                                  cfg: TrainConfig, steps: int) -> dict:
    """Flip-pair check plus a diffprune run with loss jumps at every reprojection.

    ``spike_stats`` holds the fraction of reprojection events at which the
    full training loss strictly increased and the mean jump.
    """
    if strategy.variant != "diffprune":
        strategy = replace(strategy, variant="diffprune")
    report = train(checkpoint, strategy, splits, cfg, fixed_steps=steps)
    spikes = report.meta["spikes"]
    stats = {}
    if spikes:
        jumps = np.array([after - before for _, before, after in spikes])
        stats = {"events": len(spikes),
                 "fraction_increased": float(np.mean(jumps > 0)),
                 "mean_jump": float(jumps.mean())}
    return {
        "flip_pairs": [flip_pair_check()],
        "training_curve": [[int(s), float(tr)] for s, tr, _ in report.curves],
        "spikes": spikes,
        "spike_stats": stats,
        "mask_change_events": report.mask_change_events,
    }
