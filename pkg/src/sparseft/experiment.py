"""Experiment matrices over tasks x strategies x sparsities x seeds.

Every cell is persisted as one JSON file under ``<out>/runs/`` as soon as it
finishes, so an interrupted matrix resumes where it stopped. Reports are
rendered from the persisted files only, in sorted cell order.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import NoData, SparseFTError
from .models import Checkpoint
from .selection import StrategyConfig
from .stats import average_ranks, spearman, welch_ttest
from .tasks import PretrainConfig, TaskSpec, perturbed_datasets, pretrain, synth_task
from .theory import phs_estimate, sample_removal_indices
from .training import RunReport, TrainConfig, train

log = logging.getLogger(__name__)

MODES = ("main", "data_perturbation", "sparsity_sweep", "stability")
SWEEP_SPARSITIES = (0.0002, 0.0005, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2)
ALL_STRATEGIES = ("full", "random", "mixout", "bitfit", "magprune", "adapter", "lora",
                  "diffprune", "childprune", "sam")


def reference_task() -> TaskSpec:
    return TaskSpec(input_dim=32, classes=3, modes=2, n_pretrain=2000, n_train=100,
                    n_test=1000, shift=2.0, label_noise=0.1, separation=1.0, seed=0,
                    name="ref")


def reference_pretrain() -> PretrainConfig:
    return PretrainConfig(hidden_dims=(128, 8), activation="tanh", lr=0.1, momentum=0.9,
                          batch_size=64, epochs=30, seed=0)


def reference_train() -> TrainConfig:
    return TrainConfig(lr=0.6, momentum=0.0, batch_size=16, max_epochs=300,
                       early_stop_tolerance=40, head_seed=0)


DEMO = {"p": 0.005, "reproject_every": 200, "steps": 2000, "seed": 0}


def demo_strategy(demo: dict = DEMO) -> StrategyConfig:
    """Diffprune setting used by the projection-discontinuity demo."""
    return StrategyConfig("diffprune", p=demo["p"], seed=demo.get("seed", 0),
                          reproject_every=demo["reproject_every"])


@dataclass
class ExperimentConfig:
    checkpoint: str
    tasks: list
    strategies: list
    seeds: list
    sparsities: list
    train: dict = field(default_factory=lambda: asdict(reference_train()))
    out: str = "out"
    mode: str = "main"
    workers: int = 1
    strategy_options: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=lambda: reference_pretrain().to_dict())
    perturb: dict = field(default_factory=lambda: {"drop_fraction": 0.1, "seed": 0})
    stability: dict = field(default_factory=lambda: {
        "n_indices": 20, "full": False, "fixed_steps": 300, "full_batch": False, "delta": 0.1})
    demo: dict = field(default_factory=lambda: dict(DEMO))

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not (self.tasks and self.strategies and self.seeds and self.sparsities):
            raise ValueError("tasks, strategies, seeds and sparsities must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        self.tasks = [t if isinstance(t, dict) else asdict(t) for t in self.tasks]

    def task_specs(self) -> list[TaskSpec]:
        return [TaskSpec(**t) for t in self.tasks]

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_experiment(mode: str = "main", out: str = "out", seeds=range(10)) -> ExperimentConfig:
    """The shipped reference matrix for each mode."""
    strategies = list(ALL_STRATEGIES)
    sparsities = [0.005]
    if mode == "sparsity_sweep":
        strategies, sparsities = ["sam"], list(SWEEP_SPARSITIES)
    elif mode == "stability":
        strategies, sparsities = ["sam"], [0.05, 1.0]
    return ExperimentConfig(checkpoint=str(Path(out) / "checkpoints"), tasks=[asdict(reference_task())],
                            strategies=strategies, seeds=list(seeds), sparsities=sparsities,
                            out=str(out), mode=mode)


# ---------------------------------------------------------------------------
# checkpoints and data

def checkpoint_path(cfg: ExperimentConfig, task: TaskSpec) -> Path:
    p = Path(cfg.checkpoint)
    if p.suffix == ".ckpt":
        return p
    return p / f"{task.name}.ckpt"


def ensure_checkpoints(cfg: ExperimentConfig) -> list[Path]:
    """Pretrain and save every missing task checkpoint."""
    paths = []
    pc = PretrainConfig(**{**cfg.pretrain, "hidden_dims": tuple(cfg.pretrain["hidden_dims"])})
    for spec in cfg.task_specs():
        path = checkpoint_path(cfg, spec)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            task = synth_task(spec)
            pretrain(task.pretrain, spec.classes, pc).save(path)
            log.info("pretrained %s -> %s", spec.name, path)
        paths.append(path)
    return paths


@lru_cache(maxsize=16)
def _task(spec: TaskSpec):
    return synth_task(spec)


@lru_cache(maxsize=16)
def _checkpoint(path: str, mtime: float) -> Checkpoint:
    return Checkpoint.load(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return _checkpoint(str(path), path.stat().st_mtime)


# ---------------------------------------------------------------------------
# cells

@dataclass(frozen=True, order=True)
class Cell:
    task: str
    strategy: str
    p: float
    seed: int
    mode: str

    @property
    def filename(self) -> str:
        return f"{self.task}_{self.strategy}_{self.p:g}_{self.seed}.json"


def cells(cfg: ExperimentConfig) -> list[Cell]:
    out = []
    for spec in cfg.task_specs():
        for s in cfg.strategies:
            for p in cfg.sparsities:
                for seed in cfg.seeds:
                    out.append(Cell(spec.name, s, float(p), int(seed), cfg.mode))
    return sorted(out)


def _run_cell(cfg: ExperimentConfig, cell: Cell) -> dict:
    spec = next(t for t in cfg.task_specs() if t.name == cell.task)
    task = _task(spec)
    ckpt = load_checkpoint(checkpoint_path(cfg, spec))
    splits = task.downstream
    tcfg = replace(cfg.train_config(), seed=cell.seed)
    opts = dict(cfg.strategy_options.get(cell.strategy, {}))
    strategy = StrategyConfig(cell.strategy, p=cell.p, seed=cell.seed, **opts)
    key = {"task": cell.task, "strategy": cell.strategy, "p": cell.p, "seed": cell.seed,
           "mode": cell.mode}

    if cell.mode == "data_perturbation":
        pert = cfg.perturb
        sets = perturbed_datasets(splits.train, len(cfg.seeds), pert["drop_fraction"], pert["seed"])
        splits = replace(splits, train=sets[sorted(cfg.seeds).index(cell.seed)])

    if cell.mode == "stability":
        st = cfg.stability
        n = len(splits.train)
        if st.get("full_batch", False):
            tcfg = replace(tcfg, batch_size=n)
        idx = sample_removal_indices(n, st["n_indices"], seed=cell.seed, full=st.get("full", False))
        rep = phs_estimate(ckpt, strategy, splits, tcfg, idx, fixed_steps=st.get("fixed_steps"),
                           delta=st.get("delta", 0.1))
        return {**rep.to_dict(), **key, "status": "ok"}

    rep = train(ckpt, strategy, splits, tcfg, task=cell.task, mode=cell.mode)
    return {**rep.to_dict(), **key, "status": "ok"}


def _execute(cfg_dict: dict, cell: Cell) -> tuple[Cell, dict]:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        record = _run_cell(cfg, cell)
    except SparseFTError as exc:
        record = {"task": cell.task, "strategy": cell.strategy, "p": cell.p, "seed": cell.seed,
                  "mode": cell.mode, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    return cell, record


def _write(path: Path, record: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(record, sort_keys=True))
    os.replace(tmp, path)


def run_matrix(cfg: ExperimentConfig, limit: int | None = None) -> list[dict]:
    """Run every missing cell; return the records produced by this call.

    Cells already persisted under ``<out>/runs`` are skipped. A cell that
    raises a package error is persisted as ``status: failed`` and the matrix
    carries on. ``limit`` caps the number of new cells (for staged runs).
    """
    for spec in cfg.task_specs():
        if not checkpoint_path(cfg, spec).exists():
            raise FileNotFoundError(f"missing checkpoint for task {spec.name}")
    runs = Path(cfg.out) / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    todo = [c for c in cells(cfg) if not (runs / c.filename).exists()]
    if limit is not None:
        todo = todo[:limit]
    done = []
    cfg_dict = cfg.to_dict()
    if cfg.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_execute, cfg_dict, c) for c in todo]
            for fut in futures:
                cell, record = fut.result()
                _write(runs / cell.filename, record)
                done.append(record)
    else:
        for c in todo:
            cell, record = _execute(cfg_dict, c)
            _write(runs / cell.filename, record)
            done.append(record)
    return done


def load_records(out) -> list[dict]:
    runs = Path(out) / "runs"
    if not runs.exists():
        return []
    return [json.loads(p.read_text()) for p in sorted(runs.glob("*.json"))]


# ---------------------------------------------------------------------------
# reporting

def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if x is None or not np.isfinite(x):
        return "inf" if x is not None and x > 0 else "nan"
    return f"{x:.6g}"


def _score(rec: dict, split: str = "test", key: str = "metric") -> float:
    if "final" in rec:
        return float(rec["final"][split][key])
    if key == "metric" and split == "test":
        return float(rec["test_metric"])
    raise KeyError(key)


def _groups(records: list[dict]) -> dict:
    g: dict = {}
    for r in records:
        if r.get("status") != "ok":
            continue
        g.setdefault((r["task"], r["p"], r["strategy"]), []).append(r)
    for v in g.values():
        v.sort(key=lambda r: r["seed"])
    return g


def summary_rows(records: list[dict]) -> list[dict]:
    """One row per (task, p, strategy) with seed mean/std and in-column ranks.

    ``mean_rank`` ranks the test mean descending, ``std_rank`` the seed std
    ascending; ties share the average rank.
    """
    groups = _groups(records)
    rows = []
    for (task, p, strat), recs in sorted(groups.items()):
        test = np.array([_score(r) for r in recs])
        row = {"task": task, "p": p, "strategy": strat, "n": len(recs),
               "test_mean": float(test.mean()), "test_std": float(test.std())}
        if "final" in recs[0]:
            tr = np.array([_score(r, "train", "loss") for r in recs])
            row.update(train_mean=float(tr.mean()), train_std=float(tr.std()))
        else:
            eps = np.array([r["phs_empirical"] for r in recs])
            row.update(train_mean=float(np.mean([r["train_zero_one"] for r in recs])),
                       train_std=float(np.std([r["train_zero_one"] for r in recs])),
                       phs_mean=float(eps.mean()), phs_std=float(eps.std()),
                       phs01_mean=float(np.mean([r["phs_empirical_01"] for r in recs])))
        rows.append(row)
    for task, p in sorted({(r["task"], r["p"]) for r in rows}):
        block = [r for r in rows if r["task"] == task and r["p"] == p]
        mr = average_ranks([-r["test_mean"] for r in block])
        sr = average_ranks([r["test_std"] for r in block])
        for r, a, b in zip(block, mr, sr):
            r["mean_rank"], r["std_rank"] = float(a), float(b)
    return rows


SUMMARY_COLUMNS = ("task", "p", "strategy", "n", "test_mean", "test_std", "train_mean",
                   "train_std", "mean_rank", "std_rank")
SWEEP_COLUMNS = ("task", "strategy", "p", "test_mean", "test_std", "train_mean", "train_std")


def _csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def rank_correlation(rows: list[dict], scope: str = "per_task") -> dict:
    """Spearman correlation of stability rank against performance rank.

    ``scope="per_task"`` uses the ranks computed within each (task, p) block and
    pools them; ``scope="global"`` ranks all rows together instead.
    """
    if scope == "per_task":
        s = [r["std_rank"] for r in rows]
        v = [r["mean_rank"] for r in rows]
    elif scope == "global":
        s = average_ranks([r["test_std"] for r in rows])
        v = average_ranks([-r["test_mean"] for r in rows])
    else:
        raise ValueError(f"unknown rank scope {scope!r}")
    if len(s) < 3:
        return {"rho": None, "p_value": None, "n": len(s)}
    rho, pv = spearman(s, v)
    return {"rho": rho, "p_value": pv, "n": len(s)}


def welch_vs(records: list[dict], reference: str = "sam") -> dict:
    out = {}
    groups = _groups(records)
    for (task, p, strat), recs in sorted(groups.items()):
        ref = groups.get((task, p, reference))
        if strat == reference or ref is None or len(ref) < 2 or len(recs) < 2:
            continue
        t, pv = welch_ttest([_score(r) for r in ref], [_score(r) for r in recs])
        out[f"{task}|{p:g}|{strat}"] = {"t": t, "p_value": pv}
    return out


def emit_report(records: list[dict], mode: str, out) -> dict:
    """Write ``summary.csv``, ``sweep.csv``, ``stats.json`` and ``series/*.tsv``."""
    ok = [r for r in records if r.get("status") == "ok"]
    if not ok:
        raise NoData("no successful runs to report")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = summary_rows(ok)
    (out / "summary.csv").write_text(_csv(rows, SUMMARY_COLUMNS))
    sweep = sorted(rows, key=lambda r: (r["task"], r["strategy"], r["p"]))
    (out / "sweep.csv").write_text(_csv(sweep, SWEEP_COLUMNS))

    series = out / "series"
    series.mkdir(exist_ok=True)
    for r in sorted(ok, key=lambda r: (r["task"], r["strategy"], r["p"], r["seed"])):
        if "curves" not in r:
            continue
        lines = [f"{int(s)}\t{_fmt(float(tr))}" for s, tr, _ in r["curves"]]
        name = f"{r['task']}_{r['strategy']}_{r['p']:g}_{r['seed']}.tsv"
        (series / name).write_text("step\ttrain_loss\n" + "\n".join(lines) + "\n")

    stats = {"mode": mode, "n_runs": len(ok), "n_failed": len(records) - len(ok),
             "spearman_stability_vs_performance": rank_correlation(rows),
             "spearman_global_ranks": rank_correlation(rows, "global"),
             "welch_vs_sam": welch_vs(ok)}
    if mode == "stability" or "phs_empirical" in ok[0]:
        stats["phs"] = {f"{r['task']}|{r['p']:g}|{r['strategy']}": r.get("phs_mean") for r in rows}
        stats["phs_01"] = {f"{r['task']}|{r['p']:g}|{r['strategy']}": r.get("phs01_mean") for r in rows}
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return stats
