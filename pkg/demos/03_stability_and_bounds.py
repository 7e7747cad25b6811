"""Stability bound, generalization bound and the expected sparse regularizer."""
import numpy as np

from sparseft.experiment import (SWEEP_SPARSITIES, checkpoint_path, default_experiment, ensure_checkpoints,
                                 load_checkpoint, reference_train)
from sparseft.selection import StrategyConfig
from sparseft.tasks import synth_task
from sparseft.theory import (BoundInputs, expected_regularizer_mc, gen_bound, phs_bound, phs_estimate,
                             sample_removal_indices)

# --- the PHS rate shrinks with the tunable fraction ---
for p in (1.0, *sorted(SWEEP_SPARSITIES, reverse=True)):
    print(f"p={p:<7g} phs_bound={phs_bound(BoundInputs(rho=1.0, p=p, n=90)):.5f}")
print("gen_bound(R=0.1, beta=0.02, n=90):", gen_bound(0.1, BoundInputs(rho=1.0, n=90), 0.02))

# --- random exact-k masks turn sparsity into an l2 pull towards theta0 ---
rng = np.random.default_rng(0)
theta0 = rng.standard_normal(200)
theta = theta0 + 0.1 * rng.standard_normal(200)
for p in (0.5, 0.1, 0.01):
    mc = expected_regularizer_mc(theta, theta0, p, 20_000, seed=1)
    k = int(200 * p)
    print(f"p={p}: MC {mc:.5f}  closed form {(1 - k / 200) * np.sum((theta - theta0) ** 2):.5f}")

# --- leave-one-out stability on the reference task (five removals) ---
cfg = default_experiment("stability", "demo_out")
ensure_checkpoints(cfg)
spec = cfg.task_specs()[0]
ckpt = load_checkpoint(checkpoint_path(cfg, spec))
splits = synth_task(spec).downstream
idx = sample_removal_indices(len(splits.train), 5, seed=0)
for p in (0.05, 1.0):
    rep = phs_estimate(ckpt, StrategyConfig("sam", p=p), splits, reference_train(), idx, fixed_steps=300)
    print(f"p={p}: eps_hat={rep.phs_empirical:.4f} bound={rep.phs_bound_value:.4g} "
          f"gen_bound={rep.gen_bound_value:.3f} test 0-1={rep.test_zero_one:.3f}")
