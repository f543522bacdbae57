"""Fine-tuning loop driven by a per-batch schedule policy.

Micro-batches are fixed groups of consecutive dataset indices; every epoch
shuffles which micro-batches form each batch.  Scores from the one-time
pre-pass are looked up by micro-batch id.
"""
from __future__ import annotations

import csv
import enum
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import reference
from .baselines import DynamicPruner, PruningKind, random_schedule
from .cost_sim import comm_cost_fraction
from .errors import ConfigError, DimensionError, InputError, NumericError
from .model import SubnetModel, assemble_parameters, cross_entropy, model_forward, model_forward_backward
from .scheduler import (BudgetSpec, CostModel, ScalerConfig, ScheduleTable, capacities_from_budget,
                        knapsack_schedule, scaler_schedule)
from .scoring import DEFAULT_BACKWARD_METRIC, DEFAULT_FORWARD_METRIC, Metric, ScoreTable, prepass_scores

HISTORY_FIELDS = ("epoch", "loss", "top1", "compute_fraction", "comm_fraction")


class Policy(str, enum.Enum):
    STANDARD = "standard"
    D2FT = "d2ft"
    RANDOM = "random"
    DPRUNING_M = "dpruning_m"
    DPRUNING_MG = "dpruning_mg"
    SCALER = "scaler"


@dataclass(frozen=True)
class SynthDatasetSpec:
    num_samples: int = 400
    num_classes: int = 4
    token_dim: int = 8
    seq_len: int = 8
    noise_level: float = 2.0
    seed: int = 0


@dataclass
class Dataset:
    tokens: np.ndarray
    labels: np.ndarray
    means: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def micro_batches(self, size: int) -> list[tuple[np.ndarray, np.ndarray]]:
        if size < 1 or len(self) % size:
            raise ConfigError(f"{len(self)} samples do not split into micro-batches of {size}")
        return [(self.tokens[i:i + size], self.labels[i:i + size]) for i in range(0, len(self), size)]


def make_synthetic_dataset(spec: SynthDatasetSpec) -> Dataset:
    """Class-conditional token sequences: a fixed per-class mean pattern plus Gaussian noise.

    Labels cycle through the classes before being shuffled, so class counts
    differ by at most one.
    """
    if min(spec.num_samples, spec.token_dim, spec.seq_len) < 1 or spec.num_classes < 2:
        raise InputError(f"degenerate dataset dimensions: {spec}")
    if spec.noise_level < 0:
        raise InputError("noise_level must be nonnegative")
    rng = np.random.default_rng(spec.seed)
    means = rng.normal(size=(spec.num_classes, spec.seq_len, spec.token_dim))
    labels = rng.permutation(np.arange(spec.num_samples) % spec.num_classes)
    noise = rng.normal(size=(spec.num_samples, spec.seq_len, spec.token_dim))
    tokens = means[labels] + spec.noise_level * noise
    return Dataset(tokens, labels, means)


def sgd_momentum_step(params: dict, grads: dict, state: dict, lr: float, momentum: float) -> None:
    """In place: ``v <- momentum * v + g``; ``p <- p - lr * v``.

    Only keys present in ``grads`` are touched.
    """
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise DimensionError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        v = state.get(name)
        v = g.copy() if v is None else momentum * v + g
        state[name] = v
        p -= lr * v


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 20
    micro_batch_size: int = 4
    seed: int = 0
    policy: Policy = Policy.D2FT
    budget: BudgetSpec = field(default_factory=lambda: BudgetSpec(3, 0))
    cost_model: CostModel = field(default_factory=CostModel)
    fwd_metric: Metric = DEFAULT_FORWARD_METRIC
    bwd_metric: Metric = DEFAULT_BACKWARD_METRIC
    scaler: ScalerConfig = field(default_factory=ScalerConfig)
    refresh_interval: int = 16
    random_per_cell: bool = False
    threads: int = 1

    def __post_init__(self):
        self.policy = Policy(self.policy)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.micro_batch_size < 1 or self.batch_size % self.micro_batch_size:
            raise ConfigError(
                f"batch_size {self.batch_size} not divisible by micro_batch_size {self.micro_batch_size}")

    @property
    def micro_batches_per_batch(self) -> int:
        return self.batch_size // self.micro_batch_size


@dataclass
class History:
    rows: list = field(default_factory=list)
    tables: list = field(default_factory=list)

    def final(self, key: str = "loss") -> float:
        return self.rows[-1][key]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in HISTORY_FIELDS[1:]])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows}, indent=1)


def evaluate_full(model: SubnetModel, dataset: Dataset, chunk: int = 256) -> tuple[float, float]:
    """Mean loss and top-1 accuracy with every subnet active."""
    total, correct = 0.0, 0
    for i in range(0, len(dataset), chunk):
        logits = model_forward(model, dataset.tokens[i:i + chunk])
        labels = dataset.labels[i:i + chunk]
        loss, _ = cross_entropy(logits, labels)
        total += loss * len(labels)
        correct += int((logits.argmax(axis=1) == labels).sum())
    return total / len(dataset), correct / len(dataset)


def evaluate(model: SubnetModel, dataset: Dataset) -> float:
    """Top-1 accuracy; inference never consults a schedule."""
    return evaluate_full(model, dataset)[1]


def _check_fit(model: SubnetModel, dataset: Dataset, config: TrainConfig) -> None:
    cfg = model.config
    if dataset.tokens.shape[1:] != (cfg.seq_len, cfg.input_dim):
        raise ConfigError(f"dataset tokens {dataset.tokens.shape[1:]} do not match model "
                          f"({cfg.seq_len}, {cfg.input_dim})")
    if len(dataset) % config.batch_size:
        raise ConfigError(f"{len(dataset)} samples not divisible by batch_size {config.batch_size}")
    try:
        config.budget.validate(cfg.num_block_subnets, config.micro_batches_per_batch)
    except InputError as exc:
        raise ConfigError(f"infeasible budget: {exc}") from None


def epoch_order(config: TrainConfig, n_micro: int, epoch: int) -> list[list[int]]:
    """Micro-batch ids grouped into batches for one epoch."""
    order = np.random.default_rng([config.seed, epoch]).permutation(n_micro)
    n = config.micro_batches_per_batch
    return [order[i:i + n].tolist() for i in range(0, n_micro, n)]


class PolicyScheduler:
    """Produces the schedule table of each batch for one policy."""

    def __init__(self, config: TrainConfig, K: int, scores: ScoreTable | None = None):
        self.config, self.K, self.scores = config, K, scores
        n = config.micro_batches_per_batch
        self.capacities = capacities_from_budget(config.budget, config.cost_model, n, K)
        self.pruner = None
        if config.policy in (Policy.DPRUNING_M, Policy.DPRUNING_MG):
            kind = PruningKind.MAGNITUDE if config.policy is Policy.DPRUNING_M else PruningKind.MAGNITUDE_GRADIENT
            self.pruner = DynamicPruner(kind, config.budget, config.cost_model, config.refresh_interval)
        if config.policy in (Policy.D2FT, Policy.SCALER) and scores is None:
            raise InputError(f"policy {config.policy.value} needs pre-pass scores")

    def table(self, model: SubnetModel, epoch: int, batch: int, ids: Sequence[int],
              iteration: int = 0, grads=None) -> ScheduleTable:
        c, K, n = self.config, self.K, len(ids)
        if c.policy is Policy.STANDARD:
            return ScheduleTable(np.ones((K, n), dtype=np.int8))
        if c.policy is Policy.D2FT:
            return knapsack_schedule(self.scores.columns(ids), c.cost_model, self.capacities)
        if c.policy is Policy.SCALER:
            return scaler_schedule(self.scores.columns(ids), c.cost_model, self.capacities.total, c.scaler)
        if c.policy is Policy.RANDOM:
            return random_schedule(c.budget, K, n, [c.seed, epoch, batch], per_cell=c.random_per_cell)
        return self.pruner.schedule(model, n, iteration, grads)


def train(model: SubnetModel, dataset: Dataset, config: TrainConfig,
          scores: ScoreTable | None = None) -> History:
    """Fine-tune ``model`` in place under ``config.policy``.

    Each micro-batch runs :func:`model_forward_backward` with its schedule
    column; FULL gradients are summed in micro-batch order, divided by the
    number of micro-batches in the batch, and applied with momentum SGD to the
    subnets that have them.
    """
    _check_fit(model, dataset, config)
    cfg = model.config
    K, n = cfg.num_block_subnets, config.micro_batches_per_batch
    mbs = dataset.micro_batches(config.micro_batch_size)
    if config.policy in (Policy.D2FT, Policy.SCALER) and scores is None:
        scores = prepass_scores(model, mbs, config.fwd_metric, config.bwd_metric, threads=config.threads)
    if scores is not None and scores.shape != (K, len(mbs)):
        raise InputError(f"score table shape {scores.shape} != ({K}, {len(mbs)})")
    scheduler = PolicyScheduler(config, K, scores)

    state: dict[int, dict] = {}
    history = History()
    last_grads = None
    iteration = 0
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for epoch in range(config.epochs):
            used = full = 0
            comm = []
            for b, ids in enumerate(epoch_order(config, len(mbs), epoch)):
                table = scheduler.table(model, epoch, b, ids, iteration, last_grads)
                history.tables.append(table)

                def run(j, table=table, ids=ids):
                    return model_forward_backward(model, mbs[ids[j]], table.column(j))

                results = list(pool.map(run, range(n))) if pool else [run(j) for j in range(n)]
                acc: dict[int, dict[str, np.ndarray]] = {}
                for _, g in results:
                    for idx, sg in g.items():
                        dst = acc.setdefault(idx, {})
                        for name, arr in sg.items():
                            dst[name] = dst[name] + arr if name in dst else arr.copy()
                for idx in sorted(acc):
                    grads = {k: v / n for k, v in acc[idx].items()}
                    acc[idx] = grads
                    sgd_momentum_step(model.subnets[idx].trainable(), grads,
                                      state.setdefault(idx, {}),
                                      config.learning_rate, config.momentum)
                last_grads = acc
                iteration += 1
                used += int(table.cost(config.cost_model).sum())
                full += int(n * config.cost_model.full_cost(K).sum())
                comm.append(comm_cost_fraction(table, config.cost_model))
            loss, top1 = evaluate_full(model, dataset)
            history.rows.append({
                "epoch": epoch, "loss": loss, "top1": top1,
                "compute_fraction": used / full if full else 0.0,
                "comm_fraction": float(np.mean(comm)),
            })
    finally:
        if pool:
            pool.shutdown()
    return history


def train_reference(model: SubnetModel, dataset: Dataset, config: TrainConfig) -> tuple[dict, list[float]]:
    """Standard fine-tuning on the unpartitioned reference model.

    Uses the same batch order as :func:`train`; each step takes the gradient
    of the whole batch at once.  Returns the final monolithic parameters and
    the per-epoch full-dataset losses.
    """
    _check_fit(model, dataset, config)
    cfg = model.config
    params = assemble_parameters(model)
    velocity: dict = {}
    m = config.micro_batch_size
    n_micro = len(dataset) // m
    losses = []
    for epoch in range(config.epochs):
        for ids in epoch_order(config, n_micro, epoch):
            idx = np.concatenate([np.arange(i * m, (i + 1) * m) for i in ids])
            _, grads = reference.forward_backward(cfg, params, dataset.tokens[idx], dataset.labels[idx])
            reference.sgd_update(params, grads, velocity, config.learning_rate, config.momentum)
        loss, _ = reference.forward_backward(cfg, params, dataset.tokens, dataset.labels, backward=False)
        losses.append(loss)
    return params, losses


def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["policy"] = config.policy.value
    d["fwd_metric"] = Metric(config.fwd_metric).value
    d["bwd_metric"] = Metric(config.bwd_metric).value
    d["scaler"] = {"mode": config.scaler.mode.value, "value": config.scaler.value}
    d["budget"]["overrides"] = {str(k): list(v) for k, v in config.budget.overrides.items()}
    return d
