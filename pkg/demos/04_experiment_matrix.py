"""A reduced version of the main comparison, persisted and reported like
``sparseft finetune`` does it. Outputs land in ``demo_out/matrix``.
"""
from pathlib import Path

from sparseft.experiment import default_experiment, emit_report, ensure_checkpoints, load_records, run_matrix

cfg = default_experiment("main", "demo_out/matrix", seeds=range(4))
cfg.checkpoint = "demo_out/checkpoints"
cfg.strategies = ["full", "random", "bitfit", "magprune", "sam"]
ensure_checkpoints(cfg)

new = run_matrix(cfg)
print(f"ran {len(new)} new cells; rerunning skips finished ones")
stats = emit_report(load_records(cfg.out), cfg.mode, cfg.out)

print(Path(cfg.out, "summary.csv").read_text())
print("stability rank vs performance rank:", stats["spearman_stability_vs_performance"])
for key, res in stats["welch_vs_sam"].items():
    print(f"  SAM vs {key.split('|')[-1]:9s} t={res['t']:+.3f} p={res['p_value']:.3g}")
