"""Run configuration shared by every CLI subcommand.

A run is fully determined by one JSON document.  Unknown keys are rejected
and every error names the offending field path.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError, InputError, SchemaError
from .model import ModelConfig
from .scheduler import BudgetSpec, CostModel, ScalerConfig, ScalerMode
from .scoring import DEFAULT_BACKWARD_METRIC, DEFAULT_FORWARD_METRIC, Metric
from .trainer import Policy, SynthDatasetSpec, TrainConfig


@dataclass(frozen=True)
class HeteroSpec:
    mode: str | None = None  # None, "memory" or "compute"
    count: int = 0
    fast_speed_factor: float = 1.0


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 20
    micro_batch_size: int = 4
    refresh_interval: int = 16
    random_per_cell: bool = False


@dataclass(frozen=True)
class RunConfig:
    seed: int
    seeds: tuple = ()
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: SynthDatasetSpec = field(default_factory=SynthDatasetSpec)
    fwd_metric: Metric = DEFAULT_FORWARD_METRIC
    bwd_metric: Metric = DEFAULT_BACKWARD_METRIC
    budget: BudgetSpec = field(default_factory=BudgetSpec)
    cost_model: CostModel = field(default_factory=CostModel)
    policies: tuple = (Policy.D2FT.value, Policy.RANDOM.value)
    scaler: ScalerConfig = field(default_factory=ScalerConfig)
    lora_rank: int | None = None
    hetero: HeteroSpec = field(default_factory=HeteroSpec)
    train: TrainSettings = field(default_factory=TrainSettings)
    out_dir: str = "runs/default"

    @property
    def run_seeds(self) -> tuple:
        return tuple(self.seeds) or (self.seed,)

    def train_config(self, policy: str, seed: int, threads: int = 1, budget: BudgetSpec | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            epochs=t.epochs, learning_rate=t.learning_rate, momentum=t.momentum,
            batch_size=t.batch_size, micro_batch_size=t.micro_batch_size, seed=seed,
            policy=Policy(policy), budget=budget or self.budget, cost_model=self.cost_model,
            fwd_metric=self.fwd_metric, bwd_metric=self.bwd_metric, scaler=self.scaler,
            refresh_interval=t.refresh_interval, random_per_cell=t.random_per_cell, threads=threads)

    def for_seed(self, seed: int) -> "RunConfig":
        """Same run with model and dataset seeds derived from ``seed``."""
        return replace(self, seed=seed, model=replace(self.model, seed=seed),
                       dataset=replace(self.dataset, seed=seed))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "seeds": list(self.seeds),
            "model": asdict(self.model),
            "dataset": asdict(self.dataset),
            "metrics": {"fwd": Metric(self.fwd_metric).value, "bwd": Metric(self.bwd_metric).value},
            "budget": {"n_full": self.budget.n_full, "n_fwd": self.budget.n_fwd,
                       "overrides": {str(k): list(v) for k, v in sorted(self.budget.overrides.items())}},
            "cost_model": {k: (list(v) if isinstance(v, tuple) else v)
                           for k, v in asdict(self.cost_model).items()},
            "policies": list(self.policies),
            "scaler": {"mode": self.scaler.mode.value, "value": self.scaler.value},
            "lora_rank": self.lora_rank,
            "hetero": asdict(self.hetero),
            "train": asdict(self.train),
            "out_dir": self.out_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _section(d: dict, key: str, cls, path: str):
    raw = d.get(key, {})
    if not isinstance(raw, dict):
        raise SchemaError(path, "expected an object")
    names = {f.name for f in fields(cls)}
    for k in raw:
        if k not in names:
            raise SchemaError(f"{path}.{k}", "unknown field")
    try:
        return cls(**raw)
    except (ConfigError, InputError, TypeError, ValueError) as exc:
        raise SchemaError(path, str(exc)) from None


_TOP = {"seed", "seeds", "model", "dataset", "metrics", "budget", "cost_model", "policies",
        "scaler", "lora_rank", "hetero", "train", "out_dir"}


def run_config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise SchemaError("", "config must be a JSON object")
    for k in d:
        if k not in _TOP:
            raise SchemaError(k, "unknown field")
    if "seed" not in d:
        raise SchemaError("seed", "missing field; seeds are mandatory")
    if not isinstance(d["seed"], int) or isinstance(d["seed"], bool):
        raise SchemaError("seed", "expected an integer")
    seeds = d.get("seeds", [])
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise SchemaError("seeds", "expected a list of integers")

    model = _section(d, "model", ModelConfig, "model")
    dataset = _section(d, "dataset", SynthDatasetSpec, "dataset")
    if (dataset.seq_len, dataset.token_dim) != (model.seq_len, model.input_dim):
        raise SchemaError("dataset", f"seq_len/token_dim ({dataset.seq_len}, {dataset.token_dim}) must match "
                          f"model seq_len/input_dim ({model.seq_len}, {model.input_dim})")
    if dataset.num_classes != model.num_classes:
        raise SchemaError("dataset.num_classes", "must match model.num_classes")

    metrics = d.get("metrics", {})
    try:
        fm = Metric(metrics.get("fwd", DEFAULT_FORWARD_METRIC.value))
        bm = Metric(metrics.get("bwd", DEFAULT_BACKWARD_METRIC.value))
    except ValueError as exc:
        raise SchemaError("metrics", str(exc)) from None

    b = d.get("budget", {})
    try:
        overrides = {int(k): tuple(int(x) for x in v) for k, v in b.get("overrides", {}).items()}
        budget = BudgetSpec(int(b.get("n_full", 3)), int(b.get("n_fwd", 0)), overrides)
    except (TypeError, ValueError) as exc:
        raise SchemaError("budget", str(exc)) from None

    cm = d.get("cost_model", {})
    try:
        cost_model = CostModel(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in cm.items()})
    except (ConfigError, InputError, TypeError, ValueError) as exc:
        raise SchemaError("cost_model", str(exc)) from None

    policies = d.get("policies", [Policy.D2FT.value, Policy.RANDOM.value])
    for i, p in enumerate(policies):
        try:
            Policy(p)
        except ValueError:
            raise SchemaError(f"policies[{i}]", f"unknown policy {p!r}") from None

    sc = d.get("scaler", {})
    try:
        scaler = ScalerConfig(ScalerMode(sc.get("mode", "max")), sc.get("value"))
    except (ConfigError, ValueError) as exc:
        raise SchemaError("scaler", str(exc)) from None

    lora_rank = d.get("lora_rank")
    if lora_rank is not None and (not isinstance(lora_rank, int) or lora_rank < 1):
        raise SchemaError("lora_rank", "expected a positive integer or null")

    hetero = _section(d, "hetero", HeteroSpec, "hetero")
    if hetero.mode not in (None, "memory", "compute"):
        raise SchemaError("hetero.mode", f"unknown mode {hetero.mode!r}")
    train = _section(d, "train", TrainSettings, "train")
    if train.micro_batch_size < 1 or train.batch_size % train.micro_batch_size:
        raise SchemaError("train.batch_size", "must be a multiple of train.micro_batch_size")
    if dataset.num_samples % train.batch_size:
        raise SchemaError("dataset.num_samples", "must be a multiple of train.batch_size")

    out_dir = d.get("out_dir", "runs/default")
    if not isinstance(out_dir, str):
        raise SchemaError("out_dir", "expected a string")

    return RunConfig(seed=d["seed"], seeds=tuple(seeds), model=model, dataset=dataset,
                     fwd_metric=fm, bwd_metric=bm, budget=budget, cost_model=cost_model,
                     policies=tuple(policies), scaler=scaler, lora_rank=lora_rank,
                     hetero=hetero, train=train, out_dir=out_dir)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError("", f"invalid JSON: {exc}") from None
    return run_config_from_dict(d)
