"""Flat dotted-key configuration files.

One ``key = value`` per line, ``#`` starts a comment.  Values are JSON
literals (numbers, ``true``/``false``, ``null``, quoted strings, lists);
anything that is not valid JSON is taken as a bare string::

    experiment = bo_search
    seed = 3
    search.k = 4
    plan.channels = [16, 16, 16, 16]
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from ..bosearch import AcquisitionSpec, GpHyper, SearchParams
from ..engine import LifParams, SurrogateSpec
from ..netbuild import TrainConfig
from ..topology import NetworkPlan, TopologyError, parse_assignment, uniform_plan

EXPERIMENTS = ("sweep_nskip", "bo_search", "random_search", "eval")
WORKERS_ENV = "SPIKESKIP_WORKERS"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PlanConfig:
    blocks: int = 1
    depth: int = 4
    channels: Any = 16
    kind: str = "conv"
    kernel: int = 3
    dsc_ratio: float = 0.5
    beta: float = 0.9
    threshold: float = 1.0
    reset_mode: str = "subtract"
    surrogate_slope: float = 25.0
    reference_accuracy: float | None = None


@dataclass(frozen=True)
class DataConfig:
    kind: str = "two_pattern_poisson"  # two_pattern_poisson | rate_bars | idx
    n_train: int = 512
    n_test: int = 128
    channels: int = 16
    spatial: int = 4
    val_fraction: float = 0.25
    seed: int | None = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass(frozen=True)
class SweepConfig:
    seeds: int = 5
    mode: str = "uniform"  # uniform | last_layer
    epochs: int | None = None


@dataclass(frozen=True)
class EvalConfig:
    assignment: str | None = None
    checkpoint: str | None = None


SECTIONS = {
    "plan": PlanConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "search": SearchParams,
    "acq": AcquisitionSpec,
    "gp": GpHyper,
    "sweep": SweepConfig,
    "eval": EvalConfig,
}
TOP_LEVEL = ("experiment", "seed", "output_dir", "workers", "record_wall_time")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "bo_search"
    seed: int = 0
    output_dir: str = "runs/default"
    workers: int = 1
    record_wall_time: bool = False
    plan: PlanConfig = field(default_factory=PlanConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    search: SearchParams = field(default_factory=SearchParams)
    acq: AcquisitionSpec = field(default_factory=AcquisitionSpec)
    gp: GpHyper = field(default_factory=GpHyper)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.sweep.mode not in ("uniform", "last_layer"):
            raise ConfigError(f"sweep.mode must be 'uniform' or 'last_layer', got {self.sweep.mode!r}")
        if self.sweep.seeds < 1:
            raise ConfigError("sweep.seeds must be >= 1")
        if self.data.kind not in ("two_pattern_poisson", "rate_bars", "idx"):
            raise ConfigError(f"unknown data.kind {self.data.kind!r}")
        if not 0.0 < self.data.val_fraction < 1.0:
            raise ConfigError("data.val_fraction must lie in (0, 1)")
        if self.eval.assignment is not None:
            try:
                parse_assignment(self.eval.assignment)
            except TopologyError as exc:
                raise ConfigError(f"eval.assignment: {exc}") from exc

    # seeds for the nested parts follow the run seed unless set explicitly
    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed

    def effective_workers(self) -> int:
        raw = os.environ.get(WORKERS_ENV)
        if raw:
            try:
                n = int(raw)
            except ValueError:
                raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
            if n < 1:
                raise ConfigError(f"{WORKERS_ENV} must be >= 1")
            return n
        return self.workers

    def with_overrides(self, seed: int | None = None, output_dir: str | None = None,
                       experiment: str | None = None) -> "ExperimentConfig":
        changes = {}
        if seed is not None:
            changes["seed"] = seed
        if output_dir is not None:
            changes["output_dir"] = output_dir
        if experiment is not None:
            changes["experiment"] = experiment
        cfg = replace(self, **changes)
        return cfg.synced()

    def synced(self) -> "ExperimentConfig":
        """Propagate the run seed into the train and search sections."""
        return replace(self, train=replace(self.train, seed=self.seed), search=replace(self.search, seed=self.seed))

    def build_plan(self, input_shape: tuple[int, ...], n_classes: int) -> NetworkPlan:
        p = self.plan
        try:
            return uniform_plan(
                n_blocks=p.blocks, depth=p.depth, channels=p.channels, input_shape=input_shape,
                n_classes=n_classes, kind=p.kind, kernel=p.kernel,
                neuron=LifParams(p.beta, p.threshold, p.reset_mode), dsc_ratio=p.dsc_ratio,
                reference_accuracy=p.reference_accuracy,
            )
        except (TopologyError, ValueError) as exc:
            raise ConfigError(f"plan: {exc}") from exc

    @property
    def surrogate(self) -> SurrogateSpec:
        return SurrogateSpec(slope=self.plan.surrogate_slope)


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _coerce(cls, name: str, value, key: str):
    types = {f.name: str(f.type).replace(" ", "") for f in fields(cls)}
    if name not in types:
        raise ConfigError(f"unknown config key {key!r}")
    base = types[name]
    optional = base.endswith("|None")
    base = base.removesuffix("|None")
    if value is None:
        if optional or base == "Any":
            return None
        raise ConfigError(f"{key} may not be null")
    if base == "int" and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        value = float(value)
    if base == "bool" and not isinstance(value, bool):
        raise ConfigError(f"{key} must be true or false, got {value!r}")
    if base == "str" and not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


def _strip_comment(line: str) -> str:
    in_str = False
    for i, ch in enumerate(line):
        if ch == '"' and (i == 0 or line[i - 1] != "\\"):
            in_str = not in_str
        elif ch == "#" and not in_str:
            return line[:i]
    return line


def parse_config_text(text: str) -> ExperimentConfig:
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        value = _parse_value(value)
        section, dot, name = key.partition(".")
        if dot:
            if section not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section {section!r}")
            sections[section][name] = _coerce(SECTIONS[section], name, value, key)
        else:
            top[key] = _coerce(ExperimentConfig, key, value, key) if key in TOP_LEVEL else _unknown(key, lineno)
    try:
        nested = {name: SECTIONS[name](**vals) for name, vals in sections.items()}
        cfg = ExperimentConfig(**top, **nested)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.synced()


def _unknown(key: str, lineno: int):
    raise ConfigError(f"line {lineno}: unknown config key {key!r}")


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def config_to_text(cfg: ExperimentConfig) -> str:
    """Resolved snapshot; parsing it back yields an equal config."""
    lines = [f"{name} = {json.dumps(getattr(cfg, name))}" for name in TOP_LEVEL]
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {json.dumps(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
