"""Operation scheduling as per-device knapsack problems.

Each block subnet lives on its own device.  For one batch of ``N``
micro-batches the device picks FULL (code 1), FORWARD_ONLY (code 2) or
SHORTCUT (code 3) for every micro-batch.  The decoupled scheduler solves two
independent 0/1 knapsacks per device -- backward scores under the FULL
capacity and forward scores under the FORWARD_ONLY capacity -- and merges the
two selections into one code table.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, InputError, SchemaError, SizeError
from .scoring import ScoreTable

FULL, FORWARD_ONLY, SHORTCUT = 1, 2, 3
BRUTE_FORCE_MAX_N = 14


def _per_device(value, K: int, name: str) -> np.ndarray:
    arr = np.asarray(value)
    if arr.ndim == 0:
        arr = np.full(K, int(arr))
    if arr.shape != (K,):
        raise InputError(f"{name}: expected a scalar or {K} per-device values, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.round(arr)):
            raise InputError(f"{name} must be integer cost units")
        arr = arr.astype(np.int64)
    return arr.astype(np.int64)


@dataclass(frozen=True)
class CostModel:
    """Integer cost units per micro-batch: forward ``cf`` and backward ``cb``.

    ``cf``/``cb`` may be scalars or per-device sequences.  The default 2/3
    split makes a forward pass 40% of a full step.
    """

    cf: int | tuple = 2
    cb: int | tuple = 3
    comm_f: int = 1
    comm_b: int = 1

    def __post_init__(self):
        for name in ("cf", "cb"):
            v = getattr(self, name)
            if isinstance(v, (list, np.ndarray)):
                object.__setattr__(self, name, tuple(int(x) for x in v))
            vals = np.atleast_1d(np.asarray(getattr(self, name)))
            if np.any(vals < 0) or not np.all(vals == np.round(vals)):
                raise ConfigError(f"{name} must be nonnegative integer cost units, got {v!r}")
        if self.comm_f < 0 or self.comm_b < 0:
            raise ConfigError("communication units must be nonnegative")

    @classmethod
    def from_forward_fraction(cls, fraction: float, max_denominator: int = 100) -> "CostModel":
        """Integer costs whose forward share of a full step is ``fraction``.

        The fraction is rationalized with denominator at most ``max_denominator``;
        ``cf + cb`` equals that denominator.
        """
        if not 0.0 <= fraction <= 1.0:
            raise ConfigError(f"forward fraction must lie in [0, 1], got {fraction}")
        fr = Fraction(fraction).limit_denominator(max_denominator)
        return cls(cf=fr.numerator, cb=fr.denominator - fr.numerator)

    def forward_cost(self, K: int) -> np.ndarray:
        return _per_device(self.cf, K, "cf")

    def backward_cost(self, K: int) -> np.ndarray:
        return _per_device(self.cb, K, "cb")

    def full_cost(self, K: int) -> np.ndarray:
        return self.forward_cost(K) + self.backward_cost(K)


DEFAULT_COST_MODEL = CostModel()
LORA_COST_MODEL = CostModel(cf=7, cb=1)
"""LoRA step split: adapter backward is cheap, forward is 7/8 of a step."""


@dataclass(frozen=True)
class BudgetSpec:
    """Micro-batches per batch each device may run FULL and FORWARD_ONLY.

    ``overrides`` maps a device index to its own ``(n_full, n_fwd)``.
    """

    n_full: int = 3
    n_fwd: int = 0
    overrides: Mapping[int, tuple[int, int]] = field(default_factory=dict)

    def counts(self, K: int) -> tuple[np.ndarray, np.ndarray]:
        nf = np.full(K, self.n_full, dtype=np.int64)
        no = np.full(K, self.n_fwd, dtype=np.int64)
        for k, (a, b) in self.overrides.items():
            if not 0 <= int(k) < K:
                raise InputError(f"budget override for device {k} outside 0..{K - 1}")
            nf[int(k)], no[int(k)] = a, b
        return nf, no

    def validate(self, K: int, N: int) -> None:
        nf, no = self.counts(K)
        if np.any(nf < 0) or np.any(no < 0):
            raise InputError("budget counts must be nonnegative")
        if np.any(nf + no > N):
            bad = int(np.argmax(nf + no > N))
            raise InputError(
                f"device {bad}: n_full + n_fwd = {nf[bad] + no[bad]} exceeds {N} micro-batches")


@dataclass
class Capacities:
    cap_full: np.ndarray
    cap_fwd: np.ndarray

    def __post_init__(self):
        self.cap_full = np.asarray(self.cap_full, dtype=np.int64)
        self.cap_fwd = np.asarray(self.cap_fwd, dtype=np.int64)
        if self.cap_full.shape != self.cap_fwd.shape or self.cap_full.ndim != 1:
            raise InputError("capacity vectors must be 1-D and equal length")
        if np.any(self.cap_full < 0) or np.any(self.cap_fwd < 0):
            raise InputError("capacities must be nonnegative")

    @property
    def total(self) -> np.ndarray:
        return self.cap_full + self.cap_fwd


def capacities_from_budget(budget: BudgetSpec, cost_model: CostModel, N: int, K: int) -> Capacities:
    """``cap_full = n_full * (cf + cb)`` and ``cap_fwd = n_fwd * cf`` per device."""
    budget.validate(K, N)
    nf, no = budget.counts(K)
    return Capacities(nf * cost_model.full_cost(K), no * cost_model.forward_cost(K))


@dataclass
class ScheduleTable:
    """``K x N`` operation codes (1 = FULL, 2 = FORWARD_ONLY, 3 = SHORTCUT)."""

    codes: np.ndarray

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int8)
        if self.codes.ndim != 2:
            raise InputError(f"schedule must be 2-D, got shape {self.codes.shape}")
        if not np.all(np.isin(self.codes, (FULL, FORWARD_ONLY, SHORTCUT))):
            raise InputError("schedule codes must be 1, 2 or 3")

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def column(self, i: int) -> np.ndarray:
        return self.codes[:, i]

    def counts(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-device numbers of FULL, FORWARD_ONLY and SHORTCUT cells."""
        return tuple((self.codes == c).sum(axis=1) for c in (FULL, FORWARD_ONLY, SHORTCUT))

    def cost(self, cost_model: CostModel) -> np.ndarray:
        """Per-device compute units consumed."""
        K = self.shape[0]
        nf, no, _ = self.counts()
        return nf * cost_model.full_cost(K) + no * cost_model.forward_cost(K)

    def to_dict(self) -> dict:
        return {"codes": self.codes.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScheduleTable":
        if "codes" not in d:
            raise SchemaError("codes", "missing field")
        rows = d["codes"]
        if not isinstance(rows, list) or any(not isinstance(r, list) for r in rows):
            raise SchemaError("codes", "expected a list of lists")
        if rows and len({len(r) for r in rows}) != 1:
            raise SchemaError("codes", "rows have unequal lengths")
        try:
            return cls(np.array(rows, dtype=np.int64))
        except InputError as exc:
            raise SchemaError("codes", str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "ScheduleTable":
        return cls.from_dict(json.loads(text))

    def to_csv(self, labels: Sequence[str] | None = None, offset: int = 0) -> str:
        K, N = self.shape
        labels = labels or [str(k) for k in range(K)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subnet_id", "micro_batch", "code"])
        for k in range(K):
            for i in range(N):
                w.writerow([labels[k], offset + i, int(self.codes[k, i])])
        return buf.getvalue()


def build_cost_tables(cost_model: CostModel, K: int, N: int) -> tuple[np.ndarray, np.ndarray]:
    """``(W_b, W_f)``: FULL cost ``cf+cb`` and FORWARD_ONLY cost ``cf`` for every cell."""
    if K < 1 or N < 1:
        raise InputError("K and N must be at least 1")
    W_f = np.repeat(cost_model.forward_cost(K)[:, None], N, axis=1)
    W_b = np.repeat(cost_model.full_cost(K)[:, None], N, axis=1)
    return W_b, W_f


# --------------------------------------------------------------------------
# 0/1 knapsack

def knapsack_table(values: np.ndarray, weights: np.ndarray, capacity: int) -> np.ndarray:
    """DP table ``T[i, w]``: best value of items ``< i`` within capacity ``w``.

    An item is taken only when that strictly improves the value, so equal
    values leave ``T[i, w] == T[i-1, w]`` bit for bit.
    """
    n = len(values)
    T = np.zeros((n + 1, capacity + 1))
    for i in range(n):
        prev, cur = T[i], T[i + 1]
        cur[:] = prev
        wi = int(weights[i])
        if wi > capacity:
            continue
        take = prev[:capacity + 1 - wi] + values[i]
        seg = cur[wi:]
        better = take > seg
        seg[better] = take[better]
    return T


def knapsack_backtrack(T: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Recover one optimal subset from a :func:`knapsack_table`."""
    n = T.shape[0] - 1
    w = T.shape[1] - 1
    chosen = np.zeros(n, dtype=bool)
    # zero-weight items can still be taken at w == 0, so scan every item
    for i in range(n, 0, -1):
        if T[i, w] != T[i - 1, w]:
            chosen[i - 1] = True
            w -= int(weights[i - 1])
    return chosen


def dp_search(scores: np.ndarray, weights: np.ndarray, capacities) -> np.ndarray:
    """Independent 0/1 knapsack per device (row); returns a ``K x N`` boolean selection."""
    scores = np.asarray(scores, dtype=np.float64)
    weights = np.asarray(weights)
    if scores.ndim != 2 or scores.shape != weights.shape:
        raise InputError(f"scores {scores.shape} and weights {weights.shape} must be equal 2-D shapes")
    K, N = scores.shape
    caps = _per_device(capacities, K, "capacities")
    if np.any(caps < 0):
        raise InputError("capacities must be nonnegative")
    if np.any(weights < 0) or not np.all(weights == np.round(weights)):
        raise InputError("weights must be nonnegative integers")
    sel = np.zeros((K, N), dtype=bool)
    for k in range(K):
        T = knapsack_table(scores[k], weights[k], int(caps[k]))
        sel[k] = knapsack_backtrack(T, weights[k])
    return sel


def merge_selections(full_sel: np.ndarray, fwd_sel: np.ndarray) -> np.ndarray:
    """Codes from the two selections: FULL wins overlaps, neither gives SHORTCUT."""
    full_sel, fwd_sel = np.asarray(full_sel, bool), np.asarray(fwd_sel, bool)
    codes = np.full(full_sel.shape, SHORTCUT, dtype=np.int8)
    codes[fwd_sel] = FORWARD_ONLY
    codes[full_sel] = FULL
    return codes


def knapsack_schedule(scores: ScoreTable, cost_model: CostModel, capacities: Capacities) -> ScheduleTable:
    """Decoupled schedule: FULL knapsack on backward scores, FORWARD_ONLY knapsack on forward scores."""
    K, N = scores.shape
    if capacities.cap_full.shape != (K,):
        raise InputError(f"capacities cover {capacities.cap_full.shape[0]} devices, scores have {K}")
    W_b, W_f = build_cost_tables(cost_model, K, N)
    full_sel = dp_search(scores.backward, W_b, capacities.cap_full)
    fwd_sel = dp_search(scores.forward, W_f, capacities.cap_fwd)
    return ScheduleTable(merge_selections(full_sel, fwd_sel))


def schedule_objective(table: ScheduleTable, scores: ScoreTable, fwd_scale: float = 1.0) -> np.ndarray:
    """Per-device ``sum A_f`` over FULL cells plus ``fwd_scale * sum A_o`` over FORWARD_ONLY cells."""
    c = table.codes
    return ((c == FULL) * scores.backward).sum(axis=1) + fwd_scale * ((c == FORWARD_ONLY) * scores.forward).sum(axis=1)


def pool_usage(table: ScheduleTable, cost_model: CostModel, capacities: Capacities) -> dict:
    """Per-device cost drawn from each pool and any violations.

    Cells merged from both selections are charged to the FULL pool, which can
    leave FORWARD_ONLY capacity unused.
    """
    K = table.shape[0]
    nf, no, _ = table.counts()
    used_full = nf * cost_model.full_cost(K)
    used_fwd = no * cost_model.forward_cost(K)
    return {
        "used_full": used_full, "used_fwd": used_fwd,
        "unused_fwd": capacities.cap_fwd - used_fwd,
        "violations": [int(k) for k in np.flatnonzero(
            (used_full > capacities.cap_full) | (used_fwd > capacities.cap_fwd))],
    }


def validate_schedule(table: ScheduleTable, cost_model: CostModel, limit) -> list[str]:
    """Feasibility against a per-device total budget; returns human-readable violations."""
    K = table.shape[0]
    limit = _per_device(limit, K, "limit")
    cost = table.cost(cost_model)
    return [f"device {k}: cost {int(cost[k])} > budget {int(limit[k])}"
            for k in np.flatnonzero(cost > limit)]


# --------------------------------------------------------------------------
# exhaustive oracle

def _enumerate_half(af, ao, wfull, wfwd, n_digits):
    """Value/weight of every assignment of ``n_digits`` cells; digit 0/1/2 = SHORTCUT/FWD/FULL."""
    m = 3 ** n_digits
    idx = np.arange(m)
    val = np.zeros(m)
    wt = np.zeros(m, dtype=np.int64)
    digits = np.zeros((m, n_digits), dtype=np.int8)
    for j in range(n_digits):
        d = (idx // 3 ** j) % 3
        digits[:, j] = d
        val += np.where(d == 2, af[j], np.where(d == 1, ao[j], 0.0))
        wt += np.where(d == 2, wfull, np.where(d == 1, wfwd, 0))
    return val, wt, digits


def brute_force_device(af, ao, wfull: int, wfwd: int, capacity: int) -> tuple[float, np.ndarray]:
    """Best single-device assignment over all ``3^N`` options; returns ``(value, codes)``."""
    N = len(af)
    if N > BRUTE_FORCE_MAX_N:
        raise SizeError(f"exhaustive search limited to N <= {BRUTE_FORCE_MAX_N}, got {N}")
    a = N // 2
    va, wa, da = _enumerate_half(af[:a], ao[:a], wfull, wfwd, a)
    vb, wb, db = _enumerate_half(af[a:], ao[a:], wfull, wfwd, N - a)
    best, best_pair = -np.inf, (0, 0)
    for i in range(len(va)):
        ok = wb <= capacity - wa[i]
        if not ok.any():
            continue
        tot = np.where(ok, va[i] + vb, -np.inf)
        j = int(np.argmax(tot))
        if tot[j] > best:
            best, best_pair = float(tot[j]), (i, j)
    digits = np.concatenate([da[best_pair[0]], db[best_pair[1]]])
    codes = np.array([SHORTCUT, FORWARD_ONLY, FULL], dtype=np.int8)[digits]
    return best, codes


def brute_force_schedule(scores: ScoreTable, cost_model: CostModel, capacities) -> ScheduleTable:
    """Exact per-device optimum of the joint problem by enumeration.

    ``capacities`` is either :class:`Capacities` (the two pools are pooled
    into one device budget) or a per-device total.
    """
    K, N = scores.shape
    if N > BRUTE_FORCE_MAX_N:
        raise SizeError(f"exhaustive search limited to N <= {BRUTE_FORCE_MAX_N}, got {N}")
    total = capacities.total if isinstance(capacities, Capacities) else _per_device(capacities, K, "capacities")
    cf, full = cost_model.forward_cost(K), cost_model.full_cost(K)
    codes = np.empty((K, N), dtype=np.int8)
    for k in range(K):
        _, codes[k] = brute_force_device(scores.backward[k], scores.forward[k],
                                         int(full[k]), int(cf[k]), int(total[k]))
    return ScheduleTable(codes)


# --------------------------------------------------------------------------
# single-knapsack baseline with a forward-score scale

class ScalerMode(str, enum.Enum):
    MAX = "max"
    MIN = "min"
    CONSTANT = "constant"


@dataclass(frozen=True)
class ScalerConfig:
    mode: ScalerMode = ScalerMode.MAX
    value: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", ScalerMode(self.mode))
        if self.mode is ScalerMode.CONSTANT and (self.value is None or not self.value > 0):
            raise ConfigError("constant scaler needs a positive value")


def resolve_lambda(scores: ScoreTable, scaler: ScalerConfig) -> float:
    """Scale applied to forward scores.

    MAX puts every scaled forward score strictly below the smallest positive
    backward score; MIN puts every backward score strictly below the smallest
    positive scaled forward score.
    """
    if scaler.mode is ScalerMode.CONSTANT:
        return float(scaler.value)
    f, b = scores.forward, scores.backward
    if scaler.mode is ScalerMode.MAX:
        if not np.any(b > 0) or not np.any(f > 0):
            warnings.warn("MAX scaler undefined for all-zero scores; using lambda=1", RuntimeWarning)
            return 1.0
        return 0.5 * float(b[b > 0].min()) / float(f.max())
    if not np.any(f > 0) or not np.any(b > 0):
        warnings.warn("MIN scaler undefined for all-zero scores; using lambda=1", RuntimeWarning)
        return 1.0
    return 2.0 * float(b.max()) / float(f[f > 0].min())


def mckp_device(af, ao, wfull: int, wfwd: int, capacity: int) -> tuple[float, np.ndarray]:
    """Multiple-choice knapsack: each cell takes exactly one of SHORTCUT/FWD/FULL.

    Ties prefer SHORTCUT, then FORWARD_ONLY.
    """
    N = len(af)
    C = int(capacity)
    T = np.zeros(C + 1)
    choice = np.full((N, C + 1), SHORTCUT, dtype=np.int8)
    for i in range(N):
        new = T.copy()
        for code, wi, val in ((FORWARD_ONLY, wfwd, ao[i]), (FULL, wfull, af[i])):
            if wi > C:
                continue
            cand = T[:C + 1 - wi] + val
            seg = new[wi:]
            better = cand > seg
            seg[better] = cand[better]
            choice[i, wi:][better] = code
        T = new
    codes = np.full(N, SHORTCUT, dtype=np.int8)
    w = C
    for i in range(N - 1, -1, -1):
        codes[i] = choice[i, w]
        w -= {FULL: wfull, FORWARD_ONLY: wfwd, SHORTCUT: 0}[int(codes[i])]
    return float(T[C]), codes


def scaler_schedule(scores: ScoreTable, cost_model: CostModel, total_capacity,
                    scaler: ScalerConfig = ScalerConfig()) -> ScheduleTable:
    """One knapsack per device over FULL and scaled FORWARD_ONLY values sharing one budget."""
    K, N = scores.shape
    if isinstance(total_capacity, Capacities):
        total_capacity = total_capacity.total
    caps = _per_device(total_capacity, K, "total_capacity")
    lam = resolve_lambda(scores, scaler)
    cf, full = cost_model.forward_cost(K), cost_model.full_cost(K)
    codes = np.empty((K, N), dtype=np.int8)
    for k in range(K):
        _, codes[k] = mckp_device(scores.backward[k], lam * scores.forward[k],
                                  int(full[k]), int(cf[k]), int(caps[k]))
    return ScheduleTable(codes)
