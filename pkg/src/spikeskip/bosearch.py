"""Gaussian-process Bayesian optimization over skip-connection assignments.

Assignments are one-hot encoded slot by slot (three coordinates per slot), so
the Hamming distance between two assignments is recovered exactly as
``n_slots - x.y``.  The surrogate is a GP with kernel
``signal_var * exp(-gamma * hamming)`` fit on standardized objective values,
and proposals minimize the lower confidence bound ``mean - kappa * std``.
Batches of ``k`` proposals are built greedily with a constant liar.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import linalg

from .topology import (
    Assignment,
    BlockAdjacency,
    SearchSpace,
    SpaceExhausted,
    draw_index,
    parse_assignment,
    serialize_assignment,
)

log = logging.getLogger(__name__)

FULL_POOL_LIMIT = 4096
N_CODES = 3


class GpError(ValueError):
    pass


class HistoryError(ValueError):
    pass


@dataclass(frozen=True)
class GpHyper:
    signal_var: float = 1.0
    gamma: float = 0.2
    noise_var: float = 1e-4

    def __post_init__(self):
        if self.signal_var <= 0 or self.gamma < 0 or self.noise_var < 0:
            raise ValueError(f"invalid GP hyperparameters {self}")


@dataclass(frozen=True)
class AcquisitionSpec:
    kind: str = "ucb"
    kappa: float = 2.0
    decay: float = 1.0  # kappa multiplier per iteration

    def __post_init__(self):
        if self.kind != "ucb":
            raise ValueError(f"only the confidence-bound acquisition is supported, got {self.kind!r}")
        if self.kappa < 0 or self.decay < 0:
            raise ValueError("kappa and decay must be non-negative")

    def kappa_at(self, iteration: int) -> float:
        return self.kappa * self.decay**iteration


@dataclass(frozen=True)
class SearchParams:
    budget: int = 40
    k: int = 4
    n: int = 5
    seed: int = 0
    pool_size: int = 2048
    initial: int | None = None  # defaults to 2k

    def __post_init__(self):
        if not self.budget >= self.k >= 1:
            raise ValueError(f"need budget >= k >= 1, got budget={self.budget}, k={self.k}")
        if self.n < 0:
            raise ValueError("fine-tune epochs n must be >= 0")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")

    @property
    def n_initial(self) -> int:
        return min(self.budget, 2 * self.k if self.initial is None else self.initial)


@dataclass
class TrialRecord:
    trial: int
    iteration: int
    assignment: str
    f: float
    accuracy: float = math.nan
    firing_rate: float = math.nan
    macs: int = 0
    seconds: float | None = None
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok" and math.isfinite(self.f)


@dataclass
class ObjectiveResult:
    f: float
    accuracy: float = math.nan
    firing_rate: float = math.nan
    macs: int = 0


# --- encoding and kernel ----------------------------------------------------


def encode_point(assignment: Sequence[BlockAdjacency]) -> np.ndarray:
    """One-hot of every slot's code in canonical order, length ``3 * slots``."""
    codes = [c for adj in assignment for c in adj.codes]
    x = np.zeros(N_CODES * len(codes))
    x[np.arange(len(codes)) * N_CODES + np.asarray(codes, dtype=np.int64)] = 1.0
    return x


def encode_many(assignments: Iterable[Sequence[BlockAdjacency]]) -> np.ndarray:
    return np.array([encode_point(a) for a in assignments])


def hamming_matrix(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    X, Y = np.atleast_2d(X), np.atleast_2d(Y)
    if X.shape[1] != Y.shape[1]:
        raise GpError(f"encoding lengths differ: {X.shape[1]} vs {Y.shape[1]}")
    slots = X.shape[1] / N_CODES
    return slots - X @ Y.T


def kernel_matrix(X: np.ndarray, Y: np.ndarray, hyper: GpHyper = GpHyper()) -> np.ndarray:
    return hyper.signal_var * np.exp(-hyper.gamma * hamming_matrix(X, Y))


def kernel(x: np.ndarray, y: np.ndarray, hyper: GpHyper = GpHyper()) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise GpError(f"encoding lengths differ: {x.shape} vs {y.shape}")
    return float(kernel_matrix(x[None], y[None], hyper)[0, 0])


# --- GP ---------------------------------------------------------------------


@dataclass
class GpModel:
    hyper: GpHyper
    X: np.ndarray
    y: np.ndarray
    y_mean: float = 0.0
    y_scale: float = 1.0
    chol: np.ndarray | None = None
    alpha: np.ndarray | None = None

    def predict(self, Xs, standardized: bool = False) -> tuple[np.ndarray, np.ndarray]:
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        if len(self.X) == 0:
            mean = np.zeros(len(Xs))
            var = np.full(len(Xs), self.hyper.signal_var)
        else:
            ks = kernel_matrix(Xs, self.X, self.hyper)
            mean = ks @ self.alpha
            v = linalg.solve_triangular(self.chol, ks.T, lower=True)
            var = self.hyper.signal_var - np.sum(v * v, axis=0)
        if np.any(var < -1e-12):
            log.warning("posterior variance %.3g below tolerance; clamping", var.min())
        var = np.maximum(var, 0.0)
        if standardized:
            return mean, var
        return self.y_mean + self.y_scale * mean, self.y_scale**2 * var


def gp_fit(X, y, hyper: GpHyper = GpHyper()) -> GpModel:
    """Exact GP regression on standardized targets via a Cholesky factorization."""
    X = np.asarray(X, dtype=float).reshape(len(y), -1) if len(y) else np.zeros((0, 0))
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise GpError("observations must be finite")
    if len(y) == 0:
        return GpModel(hyper, X, y)
    y_mean = float(y.mean())
    y_scale = float(y.std()) if len(y) > 1 else 1.0
    if y_scale <= 0:
        y_scale = 1.0
    z = (y - y_mean) / y_scale
    K = kernel_matrix(X, X, hyper) + hyper.noise_var * np.eye(len(y))
    try:
        L = linalg.cholesky(K, lower=True)
    except linalg.LinAlgError as exc:
        raise GpError("kernel matrix is not positive definite (duplicate points with zero noise?)") from exc
    alpha = linalg.cho_solve((L, True), z)
    return GpModel(hyper, X, y, y_mean, y_scale, L, alpha)


def gp_predict(model: GpModel, x, standardized: bool = False) -> tuple[float, float]:
    mean, var = model.predict(np.atleast_2d(x), standardized=standardized)
    return float(mean[0]), float(var[0])


def acquisition_score(mean, std, spec: AcquisitionSpec = AcquisitionSpec(), iteration: int = 0):
    """Lower confidence bound; smaller is more promising."""
    return mean - spec.kappa_at(iteration) * std


# --- proposals ---------------------------------------------------------------


def _candidate_indices(space: SearchSpace, evaluated: set[int], pool_size: int, rng) -> list[int]:
    """Full enumeration for small spaces, otherwise a sorted random pool."""
    if space.size <= FULL_POOL_LIMIT:
        return [i for i in range(space.size) if i not in evaluated]
    want = min(pool_size, space.size - len(evaluated))
    pool: set[int] = set()
    while len(pool) < want:
        i = draw_index(rng, space.size)
        if i not in evaluated:
            pool.add(i)
    return sorted(pool)


def propose_batch(
    X_obs,
    y_obs,
    space: SearchSpace,
    evaluated: Iterable[Sequence[BlockAdjacency]],
    k: int,
    spec: AcquisitionSpec = AcquisitionSpec(),
    seed: int = 0,
    hyper: GpHyper = GpHyper(),
    pool_size: int = 2048,
    iteration: int = 0,
) -> list[Assignment]:
    """Pick ``k`` distinct unevaluated assignments by greedy constant-liar LCB.

    After each pick the GP is refit with the pick fantasized at the best
    observed value.  Ties go to the canonically smallest assignment.
    """
    evaluated_idx = {space.index_of(a) for a in evaluated}
    if space.size - len(evaluated_idx) < k:
        raise SpaceExhausted(f"only {space.size - len(evaluated_idx)} unevaluated assignments remain, k={k}")
    rng = np.random.default_rng(seed)
    cand = _candidate_indices(space, evaluated_idx, pool_size, rng)
    if len(cand) < k:
        raise SpaceExhausted(f"candidate pool of {len(cand)} is smaller than k={k}")
    assignments = [space.from_index(i) for i in cand]
    Xc = encode_many(assignments)
    X = [np.asarray(x, dtype=float) for x in X_obs]
    y = [float(v) for v in y_obs]
    alive = np.ones(len(cand), dtype=bool)
    picks = []
    for _ in range(k):
        model = gp_fit(np.array(X) if X else np.zeros((0, Xc.shape[1])), y, hyper)
        mean, var = model.predict(Xc)
        score = acquisition_score(mean, np.sqrt(var), spec, iteration)
        score = np.where(alive, score, np.inf)
        j = int(np.argmin(score))
        alive[j] = False
        picks.append(assignments[j])
        lie = min(y) if y else 0.0
        X.append(Xc[j])
        y.append(lie)
    return picks


# --- loops -----------------------------------------------------------------


Objective = Callable[[Assignment, int], "ObjectiveResult | float"]


def _as_result(value) -> ObjectiveResult:
    if isinstance(value, ObjectiveResult):
        return value
    if isinstance(value, dict):
        return ObjectiveResult(**value)
    return ObjectiveResult(float(value))


def run_trial(objective: Objective, assignment: Assignment, trial: int, iteration: int) -> TrialRecord:
    started = time.perf_counter()
    try:
        res = _as_result(objective(assignment, trial))
        status = "ok" if math.isfinite(res.f) else "failed"
    except Exception as exc:  # a failed trial must not stop the search
        log.warning("trial %d (%s) failed: %s", trial, serialize_assignment(assignment), exc)
        res, status = ObjectiveResult(math.inf), "failed"
    return TrialRecord(trial, iteration, serialize_assignment(assignment), res.f if status == "ok" else math.inf,
                       res.accuracy, res.firing_rate, int(res.macs), time.perf_counter() - started, status)


def evaluate_batch(objective, batch: Sequence[tuple[int, Assignment]], iteration: int,
                   workers: int = 1) -> list[TrialRecord]:
    """Evaluate ``(trial, assignment)`` pairs; records come back in trial order.

    Objects with an ``evaluate_batch`` method take over batch scheduling
    themselves (the shared-weight objective uses this to commit in order).
    """
    if hasattr(objective, "evaluate_batch"):
        records = objective.evaluate_batch(batch, iteration)
    elif workers > 1 and len(batch) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(lambda p: run_trial(objective, p[1], p[0], iteration), batch))
    else:
        records = [run_trial(objective, a, t, iteration) for t, a in batch]
    return sorted(records, key=lambda r: r.trial)


def best_record(history: Sequence[TrialRecord]) -> TrialRecord | None:
    best = None
    for r in history:
        if best is None or r.f < best.f:
            best = r
    return best


def best_so_far(history: Sequence[TrialRecord]) -> list[float]:
    out, cur = [], math.inf
    for r in history:
        cur = min(cur, r.f)
        out.append(cur)
    return out


def trials_to_value(history: Sequence[TrialRecord], target: float, tol: float = 1e-12) -> int | None:
    """1-based trial count at which ``target`` was first reached, if ever."""
    for i, r in enumerate(history, start=1):
        if r.f <= target + tol:
            return i
    return None


def bo_loop(
    space: SearchSpace,
    objective,
    params: SearchParams = SearchParams(),
    spec: AcquisitionSpec = AcquisitionSpec(),
    hyper: GpHyper = GpHyper(),
    workers: int = 1,
    on_batch: Callable[[list[TrialRecord]], None] | None = None,
) -> tuple[TrialRecord | None, list[TrialRecord]]:
    """Random initial design, then batches of GP-LCB proposals until the budget is spent.

    Returns ``(best, history)``; ``best`` has the minimal observed objective,
    ties resolved to the earliest trial.  Failed trials carry ``f = inf`` and
    are left out of the GP.  ``on_batch`` is called after each batch so
    callers can flush history incrementally.
    """
    budget = min(params.budget, space.size)
    history: list[TrialRecord] = []
    seen: list[Assignment] = []

    def run(batch_assignments, iteration):
        batch = [(len(history) + i, a) for i, a in enumerate(batch_assignments)]
        records = evaluate_batch(objective, batch, iteration, workers)
        history.extend(records)
        seen.extend(batch_assignments)
        if on_batch is not None:
            on_batch(records)

    run(space.permutation(params.seed, min(params.n_initial, budget)), 0)
    iteration = 0
    while len(history) < budget:
        iteration += 1
        m = min(params.k, budget - len(history))
        ok = [(r, a) for r, a in zip(history, seen) if r.ok]
        X = [encode_point(a) for _, a in ok]
        y = [r.f for r, _ in ok]
        step_seed = int(np.random.SeedSequence([params.seed, iteration]).generate_state(1)[0])
        picks = propose_batch(X, y, space, seen, m, spec, step_seed, hyper, params.pool_size, iteration)
        run(picks, iteration)
    return best_record(history), history


def random_search(space: SearchSpace, objective, budget: int, seed: int = 0, workers: int = 1,
                  on_batch: Callable[[list[TrialRecord]], None] | None = None,
                  ) -> tuple[TrialRecord | None, list[TrialRecord]]:
    """Uniform sampling without replacement; each trial is its own iteration."""
    if budget > space.size:
        raise SpaceExhausted(f"budget {budget} exceeds search space size {space.size}")
    history: list[TrialRecord] = []
    for trial, a in enumerate(space.permutation(seed, budget)):
        records = evaluate_batch(objective, [(trial, a)], trial, workers)
        history.extend(records)
        if on_batch is not None:
            on_batch(records)
    return best_record(history), history


# --- history file -----------------------------------------------------------

HISTORY_KEYS = ("trial", "iteration", "assignment", "f", "accuracy", "firing_rate", "macs", "seconds", "status")


def format_record(record: TrialRecord, include_seconds: bool = True) -> str:
    parts = [
        f"trial={record.trial}",
        f"iteration={record.iteration}",
        f"assignment={record.assignment}",
        f"f={record.f!r}",
        f"accuracy={record.accuracy!r}",
        f"firing_rate={record.firing_rate!r}",
        f"macs={record.macs}",
    ]
    if include_seconds and record.seconds is not None:
        parts.append(f"seconds={record.seconds:.6f}")
    parts.append(f"status={record.status}")
    return " ".join(parts)


def parse_record(line: str, lineno: int = 0) -> TrialRecord:
    fields = {}
    for tok in line.split():
        key, sep, value = tok.partition("=")
        if not sep or key not in HISTORY_KEYS:
            raise HistoryError(f"line {lineno}: malformed field {tok!r}")
        fields[key] = value
    missing = {"trial", "iteration", "assignment", "f"} - set(fields)
    if missing:
        raise HistoryError(f"line {lineno}: missing fields {sorted(missing)}")
    try:
        parse_assignment(fields["assignment"])
        return TrialRecord(
            trial=int(fields["trial"]),
            iteration=int(fields["iteration"]),
            assignment=fields["assignment"],
            f=float(fields["f"]),
            accuracy=float(fields.get("accuracy", "nan")),
            firing_rate=float(fields.get("firing_rate", "nan")),
            macs=int(fields.get("macs", "0")),
            seconds=float(fields["seconds"]) if "seconds" in fields else None,
            status=fields.get("status", "ok"),
        )
    except ValueError as exc:
        raise HistoryError(f"line {lineno}: {exc}") from exc


def append_history(path, records: Iterable[TrialRecord], include_seconds: bool = True) -> None:
    with open(path, "a", encoding="utf-8") as f:
        for r in records:
            f.write(format_record(r, include_seconds) + "\n")


def write_history(path, records: Iterable[TrialRecord], include_seconds: bool = True) -> None:
    Path(path).write_text("", encoding="utf-8")
    append_history(path, records, include_seconds)


def read_history(path) -> list[TrialRecord]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if line.strip():
            out.append(parse_record(line, lineno))
    return out
