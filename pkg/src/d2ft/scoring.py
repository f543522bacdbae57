"""Per-subnet, per-micro-batch contribution scores.

A pre-pass runs a FULL forward/backward on every micro-batch without touching
the weights and reduces each block subnet's weights and gradients to two
scalars: a backward score (value of running FULL) and a forward score (value
of running FORWARD_ONLY).
"""
from __future__ import annotations

import csv
import enum
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError, NumericError, SchemaError
from .model import SubnetModel, model_forward_backward


class Metric(str, enum.Enum):
    FISHER = "fisher_information"
    WEIGHT_MAGNITUDE = "weight_magnitude"
    GRADIENT_MAGNITUDE = "gradient_magnitude"
    TAYLOR = "taylor_importance"


DEFAULT_FORWARD_METRIC = Metric.FISHER
DEFAULT_BACKWARD_METRIC = Metric.WEIGHT_MAGNITUDE

METRIC_FORMULAS = {
    Metric.FISHER: "sum(grad**2)",
    Metric.WEIGHT_MAGNITUDE: "sum(|w|)",
    Metric.GRADIENT_MAGNITUDE: "sum(|grad|)",
    Metric.TAYLOR: "sum(|w*grad|)",
}


def _finite(arrays: Iterable[np.ndarray]) -> list[np.ndarray]:
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite gradient entry")
    return arrays


def _values(x) -> list:
    return list(x.values()) if isinstance(x, Mapping) else list(x)


def fisher_score(grads) -> float:
    """Empirical Fisher information: sum of squared gradient entries."""
    return float(sum(np.sum(g * g) for g in _finite(_values(grads))))


def weight_magnitude(weights) -> float:
    """Sum of absolute parameter values."""
    return float(sum(np.sum(np.abs(w)) for w in _values(weights)))


def gradient_magnitude(grads) -> float:
    return float(sum(np.sum(np.abs(g)) for g in _finite(_values(grads))))


def taylor_importance(weights, grads) -> float:
    """First-order Taylor saliency ``sum |w * grad|``; arguments pair up by key or position."""
    if isinstance(weights, Mapping):
        grads = [grads[k] for k in weights]
    ws = _values(weights)
    gs = _finite(_values(grads))
    if len(ws) != len(gs):
        raise InputError("weights and gradients do not pair up")
    return float(sum(np.sum(np.abs(w * g)) for w, g in zip(ws, gs)))


def metric_value(metric: Metric, weights: Mapping, grads: Mapping) -> float:
    metric = Metric(metric)
    if metric is Metric.FISHER:
        return fisher_score(grads)
    if metric is Metric.WEIGHT_MAGNITUDE:
        return weight_magnitude(weights)
    if metric is Metric.GRADIENT_MAGNITUDE:
        return gradient_magnitude(grads)
    return taylor_importance(weights, grads)


@dataclass
class ScoreTable:
    """``forward``/``backward`` are ``K x N`` (block subnets x micro-batches)."""

    forward: np.ndarray
    backward: np.ndarray
    fwd_metric: Metric = DEFAULT_FORWARD_METRIC
    bwd_metric: Metric = DEFAULT_BACKWARD_METRIC

    def __post_init__(self):
        self.forward = np.asarray(self.forward, dtype=np.float64)
        self.backward = np.asarray(self.backward, dtype=np.float64)
        self.fwd_metric, self.bwd_metric = Metric(self.fwd_metric), Metric(self.bwd_metric)
        if self.forward.ndim != 2 or self.forward.shape != self.backward.shape:
            raise InputError(
                f"score tables must be equal-shaped 2-D, got {self.forward.shape} and {self.backward.shape}")
        for name, t in (("forward", self.forward), ("backward", self.backward)):
            if not np.all(np.isfinite(t)) or np.any(t < 0):
                raise NumericError(f"{name} scores must be finite and nonnegative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.forward.shape

    def columns(self, idx: Sequence[int]) -> "ScoreTable":
        idx = list(idx)
        return ScoreTable(self.forward[:, idx], self.backward[:, idx], self.fwd_metric, self.bwd_metric)

    def to_dict(self) -> dict:
        K, N = self.shape
        return {
            "subnets": K, "micro_batches": N,
            "fwd_metric": self.fwd_metric.value, "bwd_metric": self.bwd_metric.value,
            "fwd_formula": METRIC_FORMULAS[self.fwd_metric],
            "bwd_formula": METRIC_FORMULAS[self.bwd_metric],
            "forward": self.forward.tolist(), "backward": self.backward.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScoreTable":
        for key in ("subnets", "micro_batches", "fwd_metric", "bwd_metric", "forward", "backward"):
            if key not in d:
                raise SchemaError(key, "missing field")
        try:
            fm, bm = Metric(d["fwd_metric"]), Metric(d["bwd_metric"])
        except ValueError as exc:
            raise SchemaError("fwd_metric/bwd_metric", str(exc)) from None
        table = cls(np.array(d["forward"], dtype=float), np.array(d["backward"], dtype=float), fm, bm)
        if table.shape != (d["subnets"], d["micro_batches"]):
            raise SchemaError("forward", f"shape {table.shape} disagrees with declared "
                              f"({d['subnets']}, {d['micro_batches']})")
        return table

    @classmethod
    def from_json(cls, text: str) -> "ScoreTable":
        return cls.from_dict(json.loads(text))

    def to_csv(self, labels: Sequence[str] | None = None) -> str:
        K, N = self.shape
        labels = labels or [str(k) for k in range(K)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subnet_id", "micro_batch", "fwd", "bwd"])
        for k in range(K):
            for i in range(N):
                w.writerow([labels[k], i, repr(float(self.forward[k, i])), repr(float(self.backward[k, i]))])
        return buf.getvalue()


def subnet_scores(model: SubnetModel, grads: Mapping[int, Mapping[str, np.ndarray]],
                  fwd_metric: Metric, bwd_metric: Metric) -> tuple[np.ndarray, np.ndarray]:
    """Forward and backward scores for every block subnet from one micro-batch's gradients."""
    K = model.config.num_block_subnets
    fwd, bwd = np.zeros(K), np.zeros(K)
    for k, s in enumerate(model.block_subnets()):
        w = s.trainable()
        g = grads.get(k + 1, {name: np.zeros_like(a) for name, a in w.items()})
        fwd[k] = metric_value(fwd_metric, w, g)
        bwd[k] = metric_value(bwd_metric, w, g)
    return fwd, bwd


def prepass_scores(model: SubnetModel, micro_batches: Sequence, fwd_metric: Metric = DEFAULT_FORWARD_METRIC,
                   bwd_metric: Metric = DEFAULT_BACKWARD_METRIC, threads: int = 1) -> ScoreTable:
    """Score every micro-batch with a FULL forward/backward and no weight update.

    ``micro_batches`` is a sequence of ``(tokens, labels)`` pairs; column ``i``
    of the result belongs to ``micro_batches[i]``.
    """
    if len(micro_batches) == 0:
        raise InputError("pre-pass needs at least one micro-batch")
    fwd_metric, bwd_metric = Metric(fwd_metric), Metric(bwd_metric)

    def one(mb):
        _, grads = model_forward_backward(model, mb)
        return subnet_scores(model, grads, fwd_metric, bwd_metric)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            cols = list(ex.map(one, micro_batches))
    else:
        cols = [one(mb) for mb in micro_batches]
    fwd = np.stack([c[0] for c in cols], axis=1)
    bwd = np.stack([c[1] for c in cols], axis=1)
    return ScoreTable(fwd, bwd, fwd_metric, bwd_metric)
