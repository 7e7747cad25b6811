"""Command-line entry point: ``sparseft <command> [--config cfg.json] [--out dir]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .autodiff import finite_diff_grad
from .models import ModelSpec, build_model
from .selection import brute_force_mask, surrogate_objective, surrogate_scores, top_k_select
from .theory import projection_discontinuity_demo
from .training import TrainConfig

COMMAND_MODES = {"finetune": "main", "sweep": "sparsity_sweep", "stability": "stability",
                 "perturb": "data_perturbation"}


def _config(args, mode: str) -> ex.ExperimentConfig:
    if args.config:
        d = json.loads(Path(args.config).read_text())
        d.setdefault("mode", mode)
        if args.out:
            d["out"] = args.out
        cfg = ex.ExperimentConfig.from_dict(d)
    else:
        cfg = ex.default_experiment(mode, args.out or "out")
    if args.seed is not None:
        cfg.seeds = [args.seed + i for i in range(len(cfg.seeds))]
    if args.workers is not None:
        cfg.workers = args.workers
    return cfg


def cmd_pretrain(args) -> int:
    cfg = _config(args, "main")
    for path in ex.ensure_checkpoints(cfg):
        print(path)
    return 0


def cmd_matrix(args) -> int:
    cfg = _config(args, COMMAND_MODES[args.command])
    ex.ensure_checkpoints(cfg)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out) / "config.json").write_text(cfg.to_json() + "\n")
    new = ex.run_matrix(cfg)
    failed = sum(r["status"] != "ok" for r in new)
    print(f"{len(new)} new cells ({failed} failed)")
    stats = ex.emit_report(ex.load_records(cfg.out), cfg.mode, cfg.out)
    print(json.dumps(stats["spearman_stability_vs_performance"]))
    return 0


def cmd_report(args) -> int:
    out = Path(args.out or "out")
    records = ex.load_records(out)
    modes = sorted({r["mode"] for r in records})
    ex.emit_report(records, modes[0] if len(modes) == 1 else "mixed", out)
    print(f"report written to {out}")
    return 0


def oracle_checks(instances: int = 200, grad_models: int = 20, seed: int = 0) -> dict:
    """Greedy surrogate vs exhaustive search, and backward vs finite differences."""
    rng = np.random.default_rng(seed)
    worst_gap = 0.0
    for _ in range(instances):
        m = int(rng.integers(1, 13))
        k = int(rng.integers(1, m + 1))
        g, h = rng.standard_normal(m), rng.uniform(0.1, 3.0, m)
        L0 = float(rng.standard_normal())
        greedy = surrogate_objective(L0, g, h, top_k_select(surrogate_scores(g, h), k).indices)
        brute, _ = brute_force_mask(L0, g, h, k)
        worst_gap = max(worst_gap, abs(greedy - brute))
    worst_rel = 0.0
    for _ in range(grad_models):
        spec = ModelSpec(int(rng.integers(2, 5)), (int(rng.integers(2, 5)),), "tanh",
                         "classification", int(rng.integers(2, 4)))
        model = build_model(spec, int(rng.integers(1 << 30)))
        X = rng.standard_normal((5, spec.input_dim))
        y = rng.integers(0, spec.n_outputs, 5)
        theta = model.theta + 0.1 * rng.standard_normal(model.n_params)
        _, g = model.loss_and_grad(theta, X, y)
        fd = finite_diff_grad(lambda t: model.loss(t, X, y), theta)
        rel = np.abs(g - fd) / np.maximum(1.0, np.abs(fd))
        worst_rel = max(worst_rel, float(rel.max()))
    return {"surrogate_instances": instances, "max_objective_gap": worst_gap,
            "gradient_models": grad_models, "max_relative_error": worst_rel,
            "ok": worst_gap <= 1e-12 and worst_rel < 1e-5}


def cmd_oracle(args) -> int:
    res = oracle_checks(seed=args.seed or 0)
    print(json.dumps(res, indent=2))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "oracle.json").write_text(json.dumps(res, indent=2) + "\n")
    return 0 if res["ok"] else 1


def run_projection_demo(cfg: ex.ExperimentConfig) -> dict:
    """Flip-pair check plus a diffprune run on the first task; writes the demo files."""
    ex.ensure_checkpoints(cfg)
    spec = cfg.task_specs()[0]
    ckpt = ex.load_checkpoint(ex.checkpoint_path(cfg, spec))
    seed = cfg.demo.get("seed", 0)
    tcfg = TrainConfig(**{**cfg.train, "seed": seed})
    demo = projection_discontinuity_demo(ckpt, ex._task(spec).downstream, ex.demo_strategy(cfg.demo),
                                         tcfg, cfg.demo["steps"])
    out = Path(cfg.out)
    (out / "series").mkdir(parents=True, exist_ok=True)
    (out / "demo_projection.json").write_text(json.dumps(demo, indent=2) + "\n")
    rows = "\n".join(f"{s}\t{ex._fmt(v)}" for s, v in demo["training_curve"])
    (out / "series" / "demo_projection.tsv").write_text("step\ttrain_loss\n" + rows + "\n")
    return demo


def cmd_demo(args) -> int:
    cfg = _config(args, "main")
    if args.seed is not None:
        cfg.demo["seed"] = args.seed
    demo = run_projection_demo(cfg)
    print(json.dumps({"flip_pairs": demo["flip_pairs"], "spike_stats": demo["spike_stats"]}, indent=2))
    return 0


def _common(suppress: bool) -> argparse.ArgumentParser:
    # flags are accepted before or after the subcommand
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file mirroring ExperimentConfig fields", **kw)
    common.add_argument("--out", help="output directory", **kw)
    common.add_argument("--seed", type=int, help="first seed; later seeds count up from it", **kw)
    common.add_argument("--workers", type=int, help="parallel matrix cells", **kw)
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparseft", description=__doc__, parents=[_common(False)])
    common = _common(True)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="pretrain missing task checkpoints")
    for name, mode in COMMAND_MODES.items():
        sub.add_parser(name, parents=[common], help=f"run the {mode} matrix and report")
    sub.add_parser("oracle", parents=[common], help="surrogate and gradient oracle checks")
    sub.add_parser("demo-projection", parents=[common], help="L0 projection discontinuity demo")
    sub.add_parser("report", parents=[common], help="re-render reports from runs/")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    handlers = {"pretrain": cmd_pretrain, "oracle": cmd_oracle, "demo-projection": cmd_demo,
                "report": cmd_report}
    return handlers.get(args.command, cmd_matrix)(args)


if __name__ == "__main__":
    sys.exit(main())
