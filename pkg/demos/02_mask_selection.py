"""Mask selection: the second-order surrogate, its exhaustive check, SAM
scores on the reference task, and the projection flip pair.
"""
import numpy as np

from sparseft.experiment import default_experiment, ensure_checkpoints, load_checkpoint, checkpoint_path
from sparseft.selection import (StrategyConfig, brute_force_mask, init_mask, surrogate_objective,
                                surrogate_scores, top_k_select)
from sparseft.tasks import synth_task
from sparseft.theory import flip_pair_check
from sparseft.training import prepare_model

rng = np.random.default_rng(0)

# --- greedy top-k of g^2 / 2h is the exact minimizer of the surrogate ---
g, h = rng.standard_normal(10), rng.uniform(0.2, 2.0, 10)
for k in (1, 3, 6):
    greedy = top_k_select(surrogate_scores(g, h), k)
    best, oracle = brute_force_mask(0.0, g, h, k)
    print(f"k={k}: greedy {greedy.indices.tolist()} -> {surrogate_objective(0.0, g, h, greedy.indices):.6f}, "
          f"exhaustive {oracle.indices.tolist()} -> {best:.6f}")

# --- the hard projection is discontinuous ---
print("flip pair:", flip_pair_check())

# --- masks on the reference task ---
cfg = default_experiment("main", "demo_out")
ensure_checkpoints(cfg)
spec = cfg.task_specs()[0]
ckpt = load_checkpoint(checkpoint_path(cfg, spec))
task = synth_task(spec)
model = prepare_model(ckpt, StrategyConfig("sam"), task.downstream, seed=0)
data = (task.downstream.train.X, task.downstream.train.y)
masks = {v: init_mask(StrategyConfig(v, p=0.005, seed=0), model, data) for v in ("sam", "magprune", "random")}
for v, m in masks.items():
    print(f"{v:9s} k={m.k} of pool {m.pool}: {m.indices[:8].tolist()} ...")
overlap = np.intersect1d(masks["sam"].indices, masks["magprune"].indices).size
print("sam / magprune overlap:", overlap)
