"""Run orchestration: n_skip sweeps, BO / random search, single evaluations.

Every run writes into its own directory:

``config.snapshot``   resolved configuration (re-running it reproduces the run)
``history.txt``       one trial per line (search runs), appended as trials finish
``best.txt``          serialized best assignment
``summary.txt``       key=value totals, checked against the history by reports
``curve.csv``         per-trial objective and best-so-far
``*.ckpt``            weight checkpoints
``timings.csv``       wall-clock seconds per trial (not reproducible by nature)
"""

from __future__ import annotations

import csv
import logging
import math
import statistics
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..bosearch import (
    ObjectiveResult,
    TrialRecord,
    append_history,
    best_record,
    best_so_far,
    bo_loop,
    random_search,
    read_history,
    run_trial,
)
from ..netbuild import (
    EvalReport,
    TrainableNetwork,
    WeightStore,
    accuracy_drop,
    build,
    evaluate,
    fine_tune,
    load_checkpoint,
    save_checkpoint,
    store_from_checkpoint,
    train,
)
from ..topology import (
    ASC,
    DSC,
    BlockAdjacency,
    NetworkPlan,
    SearchSpace,
    clamp_n_skip,
    parse_assignment,
    serialize_assignment,
)
from .config import ConfigError, ExperimentConfig, config_to_text
from .data import Dataset, generate_synthetic, load_idx, stratified_split

log = logging.getLogger(__name__)


@dataclass
class RunArtifact:
    directory: Path
    files: dict[str, Path] = field(default_factory=dict)
    summary: dict[str, str] = field(default_factory=dict)


@dataclass
class Prepared:
    plan: NetworkPlan
    train: Dataset
    val: Dataset
    test: Dataset


def prepare(cfg: ExperimentConfig) -> Prepared:
    d = cfg.data
    if d.kind == "idx":
        paths = [d.train_images, d.train_labels, d.test_images, d.test_labels]
        if any(p is None for p in paths):
            raise ConfigError("data.kind = idx needs train_images, train_labels, test_images, test_labels")
        train_full, test = load_idx(d.train_images, d.train_labels), load_idx(d.test_images, d.test_labels)
    else:
        train_full, test = generate_synthetic(d.kind, d.n_train, d.n_test, d.channels, cfg.data_seed,
                                              T=cfg.train.timesteps, spatial=d.spatial)
    train_set, val = stratified_split(train_full, d.val_fraction, cfg.data_seed)
    n_classes = max(train_full.n_classes, test.n_classes)
    plan = cfg.build_plan(train_full.sample_shape, n_classes)
    return Prepared(plan, train_set, val, test)


def _open_run(cfg: ExperimentConfig) -> RunArtifact:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        snap = out / "config.snapshot"
        snap.write_text(config_to_text(cfg), encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    return RunArtifact(out, {"config": snap})


def write_summary(path: Path, summary: dict) -> None:
    lines = [f"{k}={_fmt(v)}" for k, v in summary.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_summary(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k] = v
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _train_cfg(cfg: ExperimentConfig, seed: int, epochs: int | None = None):
    t = replace(cfg.train, seed=seed)
    return t if epochs is None else replace(t, epochs=epochs)


# --- n_skip sweep -----------------------------------------------------------


def sweep_assignment(depth: int, n_skip: int, code: int, mode: str = "uniform") -> BlockAdjacency:
    """Adjacency with ``n_skip`` skips of one type per layer, nearest sources first.

    ``uniform`` applies the (clamped) count to every layer; ``last_layer``
    applies it to the deepest layer only.
    """
    edges = {}
    layers = range(2, depth + 1) if mode == "uniform" else [depth]
    for v in layers:
        for i in range(clamp_n_skip(n_skip, v)):
            edges[(v - 2 - i, v)] = code
    return BlockAdjacency.from_edges(depth, edges)


def run_sweep_nskip(cfg: ExperimentConfig) -> RunArtifact:
    """Train a single-block network from scratch for each n_skip level and skip type."""
    art = _open_run(cfg)
    data = prepare(cfg)
    plan = data.plan
    if len(plan.blocks) != 1:
        raise ConfigError("the n_skip sweep uses a single-block plan (plan.blocks = 1)")
    depth = plan.blocks[0].depth
    epochs = cfg.sweep.epochs if cfg.sweep.epochs is not None else cfg.train.epochs
    cache: dict[tuple[str, int], EvalReport] = {}
    per_seed_rows, rows = [], []
    for n_skip in range(depth):
        for tag, code in (("DSC", DSC), ("ASC", ASC)):
            adj = sweep_assignment(depth, n_skip, code, cfg.sweep.mode)
            key = adj.serialize()
            reports = []
            for r in range(cfg.sweep.seeds):
                seed = cfg.seed + r
                if (key, seed) not in cache:
                    net = build(plan, (adj,), seed, surrogate=cfg.surrogate)
                    train(net, data.train, _train_cfg(cfg, seed, epochs))
                    cache[(key, seed)] = evaluate(net, data.test, cfg.train.timesteps)
                    log.info("sweep n_skip=%d %s seed=%d acc=%.4f", n_skip, tag, seed, cache[(key, seed)].accuracy)
                rep = cache[(key, seed)]
                reports.append(rep)
                per_seed_rows.append([n_skip, tag, seed, key, f"{rep.accuracy:.6f}", f"{rep.firing_rate:.6f}", rep.macs])
            accs = [rep.accuracy for rep in reports]
            rows.append([
                n_skip, tag, f"{statistics.fmean(accs):.6f}",
                f"{statistics.stdev(accs) if len(accs) > 1 else 0.0:.6f}",
                f"{statistics.fmean(rep.firing_rate for rep in reports):.6f}",
            ])
    sweep_csv = art.directory / "sweep.csv"
    _write_csv(sweep_csv, ["n_skip", "type", "acc_mean", "acc_std", "rate_mean"], rows)
    runs_csv = art.directory / "sweep_runs.csv"
    _write_csv(runs_csv, ["n_skip", "type", "seed", "assignment", "accuracy", "firing_rate", "macs"], per_seed_rows)
    summary = {"kind": "sweep_nskip", "seed": cfg.seed, "seeds": cfg.sweep.seeds, "epochs": epochs,
               "mode": cfg.sweep.mode, "rows": len(rows)}
    write_summary(art.directory / "summary.txt", summary)
    art.files.update(sweep=sweep_csv, runs=runs_csv, summary=art.directory / "summary.txt")
    art.summary = read_summary(art.files["summary"])
    return art


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# --- search objectives ------------------------------------------------------


class _BestKeeper:
    """Weights of the best trial so far; earliest trial wins ties."""

    def __init__(self):
        self.f = math.inf
        self.trial = -1
        self.store: WeightStore | None = None
        self._lock = threading.Lock()

    def offer(self, f: float, trial: int, net: TrainableNetwork) -> None:
        with self._lock:
            if f < self.f or (f == self.f and trial < self.trial):
                self.f, self.trial, self.store = f, trial, net.state_store()


class SharedStoreObjective:
    """Fine-tune from the shared supernet store, score on the validation split.

    All trials of one batch start from the same snapshot of the store; their
    updated slices are committed back in trial order, so results do not depend
    on how many workers ran the batch.
    """

    def __init__(self, cfg: ExperimentConfig, data: Prepared, store: WeightStore, reference: float,
                 workers: int = 1):
        self.cfg, self.data, self.store, self.reference = cfg, data, store, reference
        self.workers = workers
        self.best = _BestKeeper()

    def _trial(self, snapshot: WeightStore, assignment, trial: int):
        net = build(self.data.plan, assignment, self.cfg.seed, store=snapshot, surrogate=self.cfg.surrogate)
        fine_tune(net, snapshot.clone(), self.cfg.search.n, self.data.train, _train_cfg(self.cfg, self.cfg.seed + trial))
        rep = evaluate(net, self.data.val, self.cfg.train.timesteps)
        return net, ObjectiveResult(accuracy_drop(self.reference, rep.accuracy), rep.accuracy, rep.firing_rate, rep.macs)

    def evaluate_batch(self, batch, iteration: int) -> list[TrialRecord]:
        snapshot = self.store.clone()
        nets: dict[int, TrainableNetwork] = {}

        def one(pair):
            trial, assignment = pair

            def objective(a, t):
                nets[t], res = self._trial(snapshot, a, t)
                return res

            return run_trial(objective, assignment, trial, iteration)

        if self.workers > 1 and len(batch) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                records = list(pool.map(one, batch))
        else:
            records = [one(p) for p in batch]
        records.sort(key=lambda r: r.trial)
        for r in records:
            if r.trial in nets:
                nets[r.trial].commit(self.store)
                if r.ok:
                    self.best.offer(r.f, r.trial, nets[r.trial])
        return records


class ScratchObjective:
    """Train every candidate from a fresh initialization (random-search baseline)."""

    def __init__(self, cfg: ExperimentConfig, data: Prepared, reference: float):
        self.cfg, self.data, self.reference = cfg, data, reference
        self.best = _BestKeeper()

    def __call__(self, assignment, trial: int) -> ObjectiveResult:
        net = build(self.data.plan, assignment, self.cfg.seed, surrogate=self.cfg.surrogate)
        train(net, self.data.train, _train_cfg(self.cfg, self.cfg.seed + trial))
        rep = evaluate(net, self.data.val, self.cfg.train.timesteps)
        f = accuracy_drop(self.reference, rep.accuracy)
        self.best.offer(f, trial, net)
        return ObjectiveResult(f, rep.accuracy, rep.firing_rate, rep.macs)


# --- search runs ------------------------------------------------------------


def train_baseline(cfg: ExperimentConfig, data: Prepared) -> tuple[TrainableNetwork, EvalReport, EvalReport]:
    """Train the plan's initial assignment from scratch; returns (net, val report, test report)."""
    net = build(data.plan, data.plan.initial_assignment(), cfg.seed, surrogate=cfg.surrogate)
    train(net, data.train, _train_cfg(cfg, cfg.seed))
    return net, evaluate(net, data.val, cfg.train.timesteps), evaluate(net, data.test, cfg.train.timesteps)


def verify_summary(summary: dict[str, str], history: list[TrialRecord]) -> None:
    """Raise if the summary's totals disagree with a recomputation from the history."""
    best = best_record(history)
    expected = {
        "n_trials": str(len(history)),
        "n_failed": str(sum(not r.ok for r in history)),
        "best_trial": str(best.trial) if best else "none",
        "best_assignment": best.assignment if best else "none",
        "best_f": repr(best.f) if best else "nan",
    }
    for key, value in expected.items():
        if summary.get(key) != value:
            raise ValueError(f"summary {key}={summary.get(key)!r} but history gives {value!r}")


def run_search(cfg: ExperimentConfig) -> RunArtifact:
    """BO with weight sharing (``bo_search``) or from-scratch random search (``random_search``)."""
    if cfg.experiment not in ("bo_search", "random_search"):
        raise ConfigError(f"run_search handles bo_search/random_search, not {cfg.experiment!r}")
    art = _open_run(cfg)
    data = prepare(cfg)
    workers = cfg.effective_workers()
    history_path = art.directory / "history.txt"
    history_path.write_text("", encoding="utf-8")
    timing_rows: list[list] = []

    def flush(records):
        append_history(history_path, records, include_seconds=cfg.record_wall_time)
        timing_rows.extend([r.trial, f"{r.seconds:.6f}"] for r in records)

    base_net, base_val, base_test = train_baseline(cfg, data)
    save_checkpoint(art.directory / "baseline.ckpt", base_net.state_store(), cfg.seed)
    reference = data.plan.reference_accuracy if data.plan.reference_accuracy is not None else base_val.accuracy
    space = SearchSpace.from_plan(data.plan)

    try:
        if cfg.experiment == "bo_search":
            store = base_net.state_store()
            objective = SharedStoreObjective(cfg, data, store, reference, workers)
            best, history = bo_loop(space, objective, cfg.search, cfg.acq, cfg.gp, workers, on_batch=flush)
            save_checkpoint(art.directory / "store.ckpt", store, cfg.seed)
        else:
            objective = ScratchObjective(cfg, data, reference)
            budget = min(cfg.search.budget, space.size)
            best, history = random_search(space, objective, budget, cfg.seed, workers, on_batch=flush)
    finally:
        _write_csv(art.directory / "timings.csv", ["trial", "seconds"], timing_rows)

    history = read_history(history_path)
    summary = {
        "kind": cfg.experiment, "seed": cfg.seed, "n_trials": len(history),
        "n_failed": sum(not r.ok for r in history), "reference_accuracy": float(reference),
        "baseline_assignment": serialize_assignment(data.plan.initial_assignment()),
        "baseline_accuracy": base_val.accuracy, "baseline_test_accuracy": base_test.accuracy,
        "baseline_firing_rate": base_test.firing_rate, "baseline_macs": base_test.macs,
    }
    best = best_record(history)
    if best is None:
        summary.update(best_trial="none", best_assignment="none", best_f=math.nan)
    else:
        summary.update(best_trial=best.trial, best_assignment=best.assignment, best_f=best.f,
                       best_accuracy=best.accuracy, best_firing_rate=best.firing_rate, best_macs=best.macs)
        (art.directory / "best.txt").write_text(best.assignment + "\n", encoding="utf-8")
    if best is not None and objective.best.store is not None:
        best_net = build(data.plan, parse_assignment(best.assignment), cfg.seed, store=objective.best.store,
                         surrogate=cfg.surrogate)
        best_test = evaluate(best_net, data.test, cfg.train.timesteps)
        save_checkpoint(art.directory / "best.ckpt", objective.best.store, cfg.seed)
        summary.update(optimized_test_accuracy=best_test.accuracy,
                       optimized_test_firing_rate=best_test.firing_rate)
    write_summary(art.directory / "summary.txt", summary)

    curve = [[r.trial, repr(r.f), repr(b)] for r, b in zip(history, best_so_far(history))]
    _write_csv(art.directory / "curve.csv", ["trial", "f", "best_so_far"], curve)
    art.summary = read_summary(art.directory / "summary.txt")
    verify_summary(art.summary, history)
    art.files.update({name: art.directory / name for name in
                      ("history.txt", "summary.txt", "curve.csv", "timings.csv", "baseline.ckpt")})
    return art


def run_eval(cfg: ExperimentConfig) -> RunArtifact:
    """Evaluate one assignment, from a checkpoint or after training from scratch."""
    art = _open_run(cfg)
    data = prepare(cfg)
    plan = data.plan
    assignment = parse_assignment(cfg.eval.assignment) if cfg.eval.assignment else plan.initial_assignment()
    if cfg.eval.checkpoint:
        store = store_from_checkpoint(plan, load_checkpoint(cfg.eval.checkpoint))
        net = build(plan, assignment, cfg.seed, store=store, surrogate=cfg.surrogate)
    else:
        net = build(plan, assignment, cfg.seed, surrogate=cfg.surrogate)
        train(net, data.train, _train_cfg(cfg, cfg.seed))
    rep = evaluate(net, data.test, cfg.train.timesteps)
    save_checkpoint(art.directory / "eval.ckpt", net.state_store(), cfg.seed)
    summary = {"kind": "eval", "seed": cfg.seed, "assignment": serialize_assignment(assignment),
               "test_accuracy": rep.accuracy, "firing_rate": rep.firing_rate, "macs": rep.macs,
               "block_rates": ",".join(f"{r!r}" for r in rep.block_rates)}
    write_summary(art.directory / "summary.txt", summary)
    art.files.update(summary=art.directory / "summary.txt", checkpoint=art.directory / "eval.ckpt")
    art.summary = read_summary(art.files["summary"])
    return art


def run_experiment(cfg: ExperimentConfig) -> RunArtifact:
    if cfg.experiment == "sweep_nskip":
        return run_sweep_nskip(cfg)
    if cfg.experiment == "eval":
        return run_eval(cfg)
    return run_search(cfg)
