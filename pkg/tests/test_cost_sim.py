import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from d2ft.cost_sim import (DEFAULT_TIMING_TABLE, METRIC_FIELDS, DeviceProfile, audit_settings,
                           build_hetero_profiles, comm_cost_fraction, compute_cost_fraction, device_loads,
                           homogeneous_profiles, metrics_csv, metrics_json, metrics_row, simulate_batch,
                           uniform_counts_table, workload_variance)
from d2ft.errors import InputError
from d2ft.scheduler import (FORWARD_ONLY, FULL, LORA_COST_MODEL, SHORTCUT, BudgetSpec, CostModel,
                            ScheduleTable, capacities_from_budget)


@pytest.mark.parametrize("n_fwd,expected", [(0, 0.20), (1, 0.28), (2, 0.36), (3, 0.44), (4, 0.52)])
def test_one_full_plus_forward_only_compute_fractions(n_fwd, expected):
    assert compute_cost_fraction(uniform_counts_table(4, 1, n_fwd, 5)) == expected


def test_all_full_and_all_shortcut():
    assert compute_cost_fraction(uniform_counts_table(3, 5, 0, 5)) == 1.0
    assert compute_cost_fraction(uniform_counts_table(3, 0, 0, 5)) == 0.0
    assert comm_cost_fraction(uniform_counts_table(3, 0, 0, 5)) == 0.0


@pytest.mark.parametrize("nf,no,expected", [(3, 1, 0.70), (2, 1, 0.50), (3, 2, 0.80)])
def test_comm_fractions(nf, no, expected):
    assert comm_cost_fraction(uniform_counts_table(2, nf, no, 5), LORA_COST_MODEL) == expected


def test_lora_compute_fractions():
    cm = LORA_COST_MODEL
    assert compute_cost_fraction(uniform_counts_table(1, 3, 2, 5), cm) == 0.95
    assert compute_cost_fraction(uniform_counts_table(1, 3, 0, 5), cm) == 0.6
    assert compute_cost_fraction(uniform_counts_table(1, 3, 1, 5), cm) == 0.775


def test_audit_flags_only_the_inconsistent_setting():
    rows = audit_settings()
    flagged = [(r["setting"], r["kind"]) for r in rows if r["discrepancy"]]
    assert flagged == [("lora 3pf+2po", "comm")]
    row = next(r for r in rows if r["discrepancy"])
    assert row["computed"] == 0.8 and row["stated"] == 0.9


@given(st.integers(1, 8), st.integers(0, 5), st.integers(0, 5))
def test_uniform_budget_has_zero_variance(K, nf, no):
    N = 5
    if nf + no > N:
        nf, no = N - no, no
    assert workload_variance(uniform_counts_table(K, nf, no, N)) == 0.0


def test_variance_hand_example():
    t = ScheduleTable(np.array([[FULL, FULL], [SHORTCUT, SHORTCUT]]))
    # normalized loads 1 and 0
    assert workload_variance(t) == 0.25


def test_device_loads_grouping():
    t = ScheduleTable(np.array([[FULL, FORWARD_ONLY], [FULL, SHORTCUT], [SHORTCUT, SHORTCUT]]))
    used, full = device_loads(t, CostModel(), [[0, 1], [2]])
    assert used.tolist() == [12, 0] and full.tolist() == [20, 10]


@pytest.mark.parametrize("count", [1, 2, 3, 4, 5])
def test_timing_table_reproduced_exactly(count):
    full_ms, fwd_ms = DEFAULT_TIMING_TABLE[count]
    table = uniform_counts_table(1, count, 0, 5)
    assert simulate_batch(table, homogeneous_profiles(1)).makespan_ms == full_ms
    table = uniform_counts_table(1, 0, count, 5)
    assert simulate_batch(table, homogeneous_profiles(1)).makespan_ms == fwd_ms


def test_timing_interpolation_and_extrapolation():
    p = DeviceProfile(0)
    assert p.time(0, 0) == 0.0
    assert p.time(2.5, 0) == pytest.approx((2.20 + 2.27) / 2)
    assert p.time(6, 0) == pytest.approx(3.16 + (3.16 - 2.74))
    assert p.time(0.5, 1) == pytest.approx(0.43)


def test_speed_factor_scales_time():
    assert DeviceProfile(0, speed_factor=2.0).time(1, 0) == pytest.approx(1.005)


def test_timing_table_validation():
    with pytest.raises(InputError):
        DeviceProfile(0, timing_table={1: (2.0, 1.0), 2: (1.0, 1.0)})
    with pytest.raises(InputError):
        DeviceProfile(0, timing_table={})


def test_makespan_is_max_busy_time():
    t = ScheduleTable(np.array([[FULL, FULL, FORWARD_ONLY], [FULL, SHORTCUT, SHORTCUT]]))
    m = simulate_batch(t, homogeneous_profiles(2))
    assert m.per_device_busy_ms == [2.20 + 0.86, 2.01]
    assert m.makespan_ms == 2.20 + 0.86
    assert m.per_device_counts == [[2, 1], [1, 0]]


def test_memory_heterogeneity_hosts_two_rows():
    profiles, budget = build_hetero_profiles("memory", 1, 4)
    assert [p.memory_units for p in profiles] == [2, 1, 1]
    assert (budget.n_full, budget.n_fwd) == (2, 2)
    t = uniform_counts_table(4, 2, 2, 5)
    m = simulate_batch(t, profiles, CostModel(), capacities_from_budget(budget, CostModel(), 5, 4))
    one = 2.20 + 1.01
    assert m.per_device_busy_ms == pytest.approx([2 * one, one, one])
    assert m.workload_variance == 0.0 and m.imbalance_residual == 0.0


def test_compute_heterogeneity_budgets():
    profiles, budget = build_hetero_profiles("compute", 2, 4)
    assert [p.speed_class.value for p in profiles] == ["fast", "fast", "slow", "slow"]
    nf, no = budget.counts(4)
    assert nf.tolist() == [3, 3, 2, 2] and no.tolist() == [1, 1, 2, 2]


def test_hetero_errors():
    with pytest.raises(InputError):
        build_hetero_profiles("memory", 3, 4)
    with pytest.raises(InputError):
        build_hetero_profiles("network", 1, 4)
    with pytest.raises(InputError):
        simulate_batch(uniform_counts_table(3, 1, 0, 5), homogeneous_profiles(2))


def test_imbalance_residual_against_capacity():
    t = uniform_counts_table(2, 2, 0, 5)
    caps = capacities_from_budget(BudgetSpec(3, 0), CostModel(), 5, 2)
    m = simulate_batch(t, homogeneous_profiles(2), CostModel(), caps)
    assert m.imbalance_residual == pytest.approx(np.sqrt(2) * 5)


def test_metrics_outputs_deterministic():
    m = simulate_batch(uniform_counts_table(2, 3, 0, 5), homogeneous_profiles(2))
    rows = [metrics_row("r0", "d2ft", m)]
    text = metrics_csv(rows)
    assert text.splitlines()[0] == ",".join(METRIC_FIELDS)
    assert text == metrics_csv(rows)
    assert json.loads(metrics_json(rows))[0]["makespan_ms"] == 2.27
