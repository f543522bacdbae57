"""Cost accounting, workload balance and a per-batch device timing simulator.

Times are simulated from a per-device lookup table (micro-batch count ->
milliseconds); they are never wall-clock measurements.
"""
from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError
from .scheduler import (FORWARD_ONLY, FULL, LORA_COST_MODEL, SHORTCUT, BudgetSpec,
                        Capacities, CostModel, ScheduleTable)

# micro-batch count -> (FULL ms, FORWARD_ONLY ms) for one subnet
DEFAULT_TIMING_TABLE: dict[int, tuple[float, float]] = {
    1: (2.01, 0.86),
    2: (2.20, 1.01),
    3: (2.27, 1.05),
    4: (2.74, 1.20),
    5: (3.16, 1.48),
}

METRIC_FIELDS = ("run_id", "method", "compute_fraction", "comm_fraction",
                 "workload_variance", "makespan_ms", "imbalance_residual")


def compute_cost_fraction(schedule: ScheduleTable, cost_model: CostModel = CostModel()) -> float:
    """Consumed compute units over the all-FULL units of the same table."""
    K, N = schedule.shape
    full = cost_model.full_cost(K)
    denom = float(N * full.sum())
    return float(schedule.cost(cost_model).sum()) / denom if denom else 0.0


def comm_cost_fraction(schedule: ScheduleTable, cost_model: CostModel = CostModel()) -> float:
    """FULL moves activations and gradients, FORWARD_ONLY activations only, SHORTCUT nothing."""
    K, N = schedule.shape
    nf, no, _ = schedule.counts()
    per_full = cost_model.comm_f + cost_model.comm_b
    if per_full == 0:
        return 0.0
    used = nf.sum() * per_full + no.sum() * cost_model.comm_f
    return float(used) / float(K * N * per_full)


def device_loads(schedule: ScheduleTable, cost_model: CostModel,
                 device_rows: Sequence[Sequence[int]] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-device ``(consumed units, all-FULL units)``; rows map to devices via ``device_rows``."""
    K, N = schedule.shape
    row_cost = schedule.cost(cost_model)
    row_full = N * cost_model.full_cost(K)
    if device_rows is None:
        return row_cost.astype(float), row_full.astype(float)
    used = np.array([row_cost[list(r)].sum() for r in device_rows], dtype=float)
    full = np.array([row_full[list(r)].sum() for r in device_rows], dtype=float)
    return used, full


def workload_variance(schedule: ScheduleTable, cost_model: CostModel = CostModel(),
                      device_rows: Sequence[Sequence[int]] | None = None) -> float:
    """Population variance over devices of load divided by the device's full load."""
    used, full = device_loads(schedule, cost_model, device_rows)
    norm = np.divide(used, full, out=np.zeros_like(used), where=full > 0)
    if np.all(norm == norm[0]):
        return 0.0
    return float(np.var(norm))


class SpeedClass(str, enum.Enum):
    SLOW = "slow"
    FAST = "fast"


@dataclass
class DeviceProfile:
    device_id: int
    memory_units: int = 1
    speed_class: SpeedClass = SpeedClass.SLOW
    timing_table: Mapping[int, tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_TIMING_TABLE))
    speed_factor: float = 1.0

    def __post_init__(self):
        self.speed_class = SpeedClass(self.speed_class)
        if self.memory_units < 1:
            raise InputError("memory_units must be >= 1")
        if not self.timing_table:
            raise InputError("timing table is empty")
        counts = sorted(self.timing_table)
        for col in (0, 1):
            vals = [self.timing_table[c][col] for c in counts]
            if any(b < a for a, b in zip(vals, vals[1:])):
                raise InputError("timing table must be nondecreasing in micro-batch count")
        if self.speed_factor <= 0:
            raise InputError("speed_factor must be positive")

    def time(self, count: float, column: int) -> float:
        """Milliseconds to process ``count`` micro-batches (column 0 = FULL, 1 = FORWARD_ONLY).

        Zero micro-batches take no time.  Missing counts interpolate linearly;
        counts past the table extrapolate with the last segment's slope.
        """
        if count <= 0:
            return 0.0
        xs = np.array(sorted(self.timing_table), dtype=float)
        ys = np.array([self.timing_table[int(c)][column] for c in xs])
        if len(xs) == 1:
            t = ys[0] * count / xs[0]
        elif count > xs[-1]:
            slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
            t = ys[-1] + slope * (count - xs[-1])
        elif count < xs[0]:
            t = float(np.interp(count, [0.0, xs[0]], [0.0, ys[0]]))
        else:
            t = float(np.interp(count, xs, ys))
        return float(t) / self.speed_factor

    def busy(self, n_full: int, n_fwd: int) -> float:
        return self.time(n_full, 0) + self.time(n_fwd, 1)


@dataclass
class BatchMetrics:
    compute_fraction: float
    comm_fraction: float
    workload_variance: float
    makespan_ms: float
    per_device_busy_ms: list
    imbalance_residual: float
    per_device_counts: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _device_rows(profiles: Sequence[DeviceProfile], K: int) -> list[list[int]]:
    rows, start = [], 0
    for p in profiles:
        rows.append(list(range(start, start + p.memory_units)))
        start += p.memory_units
    if start != K:
        raise InputError(f"profiles host {start} subnet rows, schedule has {K}")
    return rows


def simulate_batch(schedule: ScheduleTable, profiles: Sequence[DeviceProfile],
                   cost_model: CostModel = CostModel(), capacities: Capacities | None = None) -> BatchMetrics:
    """Per-device busy time, makespan and balance metrics for one batch.

    Profiles take consecutive schedule rows, ``memory_units`` rows each.  A
    device's busy time sums the table times of every hosted row.  The
    imbalance residual is the Euclidean norm of each device's consumed units
    minus its capacity (``capacities.total`` summed over hosted rows), or
    minus the mean device load when no capacities are given.
    """
    K, _ = schedule.shape
    rows = _device_rows(profiles, K)
    nf, no, _ = schedule.counts()
    busy, counts = [], []
    for p, r in zip(profiles, rows):
        busy.append(sum(p.busy(int(nf[i]), int(no[i])) for i in r))
        counts.append([int(nf[r].sum()), int(no[r].sum())])
    used, _ = device_loads(schedule, cost_model, rows)
    if capacities is not None:
        cap = np.array([capacities.total[r].sum() for r in rows], dtype=float)
    else:
        cap = np.full(len(rows), used.mean())
    return BatchMetrics(
        compute_fraction=compute_cost_fraction(schedule, cost_model),
        comm_fraction=comm_cost_fraction(schedule, cost_model),
        workload_variance=workload_variance(schedule, cost_model, rows),
        makespan_ms=float(max(busy)),
        per_device_busy_ms=[float(b) for b in busy],
        imbalance_residual=float(np.linalg.norm(used - cap)),
        per_device_counts=counts,
    )


def homogeneous_profiles(K: int) -> list[DeviceProfile]:
    return [DeviceProfile(k) for k in range(K)]


def build_hetero_profiles(mode: str, count: int, K: int, fast_speed_factor: float = 1.0):
    """Device profiles and a per-row budget for a heterogeneity experiment.

    ``mode="memory"``: the first ``count`` devices host two consecutive
    subnet rows each, the rest one; every row runs 2 FULL + 2 FORWARD_ONLY.
    ``mode="compute"``: one row per device; the first ``count`` devices are
    fast with 3 FULL + 1 FORWARD_ONLY, the rest 2 + 2.
    """
    if count < 0:
        raise InputError("device count must be nonnegative")
    if mode == "memory":
        if 2 * count > K:
            raise InputError(f"{count} two-unit devices need {2 * count} subnet rows, only {K}")
        units = [2] * count + [1] * (K - 2 * count)
        profiles = [DeviceProfile(i, memory_units=u) for i, u in enumerate(units)]
        return profiles, BudgetSpec(2, 2)
    if mode == "compute":
        if count > K:
            raise InputError(f"{count} fast devices requested, only {K}")
        profiles = [DeviceProfile(i, speed_class=SpeedClass.FAST if i < count else SpeedClass.SLOW,
                                  speed_factor=fast_speed_factor if i < count else 1.0)
                    for i in range(K)]
        return profiles, BudgetSpec(2, 2, {i: (3, 1) for i in range(count)})
    raise InputError(f"unknown heterogeneity mode {mode!r}")


def uniform_counts_table(K: int, n_full: int, n_fwd: int, N: int) -> ScheduleTable:
    """Every row: ``n_full`` FULL, then ``n_fwd`` FORWARD_ONLY, rest SHORTCUT."""
    if n_full + n_fwd > N:
        raise InputError("counts exceed the number of micro-batches")
    row = [FULL] * n_full + [FORWARD_ONLY] * n_fwd + [SHORTCUT] * (N - n_full - n_fwd)
    return ScheduleTable(np.tile(np.array(row, dtype=np.int8), (K, 1)))


@dataclass(frozen=True)
class StatedSetting:
    """A per-subnet operation mix paired with a reference percentage to audit against."""

    name: str
    kind: str  # "compute" or "comm"
    n_full: int
    n_fwd: int
    N: int
    stated: float
    lora: bool = False


STATED_SETTINGS = (
    StatedSetting("full 1pf+0po", "compute", 1, 0, 5, 0.20),
    StatedSetting("full 1pf+1po", "compute", 1, 1, 5, 0.28),
    StatedSetting("full 1pf+2po", "compute", 1, 2, 5, 0.36),
    StatedSetting("full 1pf+3po", "compute", 1, 3, 5, 0.44),
    StatedSetting("full 1pf+4po", "compute", 1, 4, 5, 0.52),
    StatedSetting("lora 3pf+2po", "compute", 3, 2, 5, 0.95, lora=True),
    StatedSetting("lora 3pf+1po+1ps", "compute", 3, 1, 5, 0.75, lora=True),
    StatedSetting("lora 3pf+2ps", "compute", 3, 0, 5, 0.60, lora=True),
    StatedSetting("lora 3pf+2po", "comm", 3, 2, 5, 0.90, lora=True),
    StatedSetting("lora 3pf+1po+1ps", "comm", 3, 1, 5, 0.70, lora=True),
    StatedSetting("lora 2pf+1po+2ps", "comm", 2, 1, 5, 0.50, lora=True),
)


def audit_settings(settings=STATED_SETTINGS, cost_model: CostModel = CostModel(),
                   lora_cost_model: CostModel | None = None, tolerance: float = 0.03) -> list[dict]:
    """Recompute each stated setting and flag any deviating by more than ``tolerance``."""
    lora_cost_model = lora_cost_model or LORA_COST_MODEL
    out = []
    for s in settings:
        table = uniform_counts_table(1, s.n_full, s.n_fwd, s.N)
        cm = lora_cost_model if s.lora else cost_model
        value = compute_cost_fraction(table, cm) if s.kind == "compute" else comm_cost_fraction(table, cm)
        out.append({"setting": s.name, "kind": s.kind, "computed": value, "stated": s.stated,
                    "discrepancy": abs(value - s.stated) > tolerance + 1e-12})
    return out


def metrics_row(run_id: str, method: str, m: BatchMetrics) -> dict:
    return {"run_id": run_id, "method": method, "compute_fraction": m.compute_fraction,
            "comm_fraction": m.comm_fraction, "workload_variance": m.workload_variance,
            "makespan_ms": m.makespan_ms, "imbalance_residual": m.imbalance_residual}


def metrics_csv(rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    return buf.getvalue()


def metrics_json(rows: Sequence[Mapping]) -> str:
    return json.dumps([dict(r) for r in rows], indent=1)
