import itertools
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2ft.errors import ConfigError, InputError, SchemaError, SizeError
from d2ft.scheduler import (FORWARD_ONLY, FULL, SHORTCUT, BudgetSpec, Capacities, CostModel, ScalerConfig,
                            ScalerMode, ScheduleTable, brute_force_device, brute_force_schedule,
                            build_cost_tables, capacities_from_budget, dp_search, knapsack_schedule,
                            mckp_device, merge_selections, pool_usage, resolve_lambda, scaler_schedule,
                            schedule_objective, validate_schedule)
from d2ft.scoring import ScoreTable


def subset_oracle(values, weights, capacity):
    best = 0.0
    for mask in itertools.product((0, 1), repeat=len(values)):
        m = np.array(mask, bool)
        if weights[m].sum() <= capacity:
            best = max(best, float(values[m].sum()))
    return best


def assignment_oracle(af, ao, wfull, wfwd, capacity):
    best = -np.inf
    for codes in itertools.product((FULL, FORWARD_ONLY, SHORTCUT), repeat=len(af)):
        c = np.array(codes)
        w = wfull * (c == FULL).sum() + wfwd * (c == FORWARD_ONLY).sum()
        if w <= capacity:
            best = max(best, float(af[c == FULL].sum() + ao[c == FORWARD_ONLY].sum()))
    return best


def random_scores(rng, K, N, dyadic=True):
    if dyadic:  # multiples of 1/8 add up exactly in floating point
        f, b = rng.integers(0, 80, (K, N)) / 8, rng.integers(0, 80, (K, N)) / 8
    else:
        f, b = rng.random((K, N)), rng.random((K, N))
    return ScoreTable(f, b)


# ---------------------------------------------------------------- cost tables and budgets

def test_cost_tables_default():
    W_b, W_f = build_cost_tables(CostModel(), 3, 4)
    assert np.all(W_b == 5) and np.all(W_f == 2) and W_b.shape == (3, 4)


def test_cost_tables_zero_forward_cost():
    _, W_f = build_cost_tables(CostModel(cf=0, cb=3), 2, 2)
    assert np.all(W_f == 0)


def test_cost_tables_per_device_rows():
    W_b, W_f = build_cost_tables(CostModel(cf=(1, 2, 3), cb=(4, 4, 4)), 3, 2)
    assert W_f[:, 0].tolist() == [1, 2, 3] and W_b[:, 1].tolist() == [5, 6, 7]


def test_cost_model_validation_and_fraction():
    with pytest.raises(ConfigError):
        CostModel(cf=-1)
    with pytest.raises(ConfigError):
        CostModel(cf=1.5)
    cm = CostModel.from_forward_fraction(0.4, max_denominator=5)
    assert (cm.cf, cm.cb) == (2, 3)
    cm = CostModel.from_forward_fraction(7 / 8, max_denominator=8)
    assert (cm.cf, cm.cb) == (7, 1)


def test_capacities_from_budget_examples():
    caps = capacities_from_budget(BudgetSpec(3, 0), CostModel(), 5, 4)
    assert caps.cap_full.tolist() == [15] * 4 and caps.cap_fwd.tolist() == [0] * 4
    caps = capacities_from_budget(BudgetSpec(2, 2), CostModel(), 5, 2)
    assert caps.cap_full.tolist() == [10, 10] and caps.cap_fwd.tolist() == [4, 4]
    caps = capacities_from_budget(BudgetSpec(2, 2, {0: (3, 1)}), CostModel(), 5, 2)
    assert caps.cap_full.tolist() == [15, 10] and caps.cap_fwd.tolist() == [2, 4]


def test_budget_exceeding_micro_batches_rejected():
    with pytest.raises(InputError):
        capacities_from_budget(BudgetSpec(4, 2), CostModel(), 5, 2)
    with pytest.raises(InputError):
        BudgetSpec(1, 0, {7: (1, 0)}).counts(4)


# ---------------------------------------------------------------- 0/1 knapsack

def test_dp_zero_capacity():
    sel = dp_search(np.array([[1.0, 2.0]]), np.array([[1, 1]]), [0])
    assert not sel.any()


def test_dp_forced_by_capacity():
    sel = dp_search(np.array([[5.0, 4.0, 3.0]]), np.array([[2, 2, 2]]), [4])
    assert sel.tolist() == [[True, True, False]]


def test_dp_negative_capacity_rejected():
    with pytest.raises(InputError):
        dp_search(np.ones((1, 2)), np.ones((1, 2), int), [-1])
    with pytest.raises(InputError):
        dp_search(np.ones((1, 2)), np.array([[1.5, 1]]), [3])


def test_dp_zero_weight_items_always_taken():
    sel = dp_search(np.array([[1.0, 2.0, 3.0]]), np.array([[0, 0, 5]]), [0])
    assert sel.tolist() == [[True, True, False]]


def test_dp_matches_exhaustive_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        K, N = int(rng.integers(1, 7)), int(rng.integers(1, 13))
        v = rng.integers(0, 50, (K, N)) / 4
        w = rng.integers(0, 8, (K, N))
        caps = rng.integers(0, 30, K)
        sel = dp_search(v, w, caps)
        for k in range(K):
            assert (w[k][sel[k]]).sum() <= caps[k]
            assert v[k][sel[k]].sum() == subset_oracle(v[k], w[k], caps[k])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 9).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 40), min_size=n, max_size=n),
    st.lists(st.integers(0, 7), min_size=n, max_size=n),
    st.integers(0, 40))))
def test_dp_optimal_property(inst):
    v, w, cap = np.array(inst[0]) / 2, np.array(inst[1]), inst[2]
    sel = dp_search(v[None], w[None], [cap])[0]
    assert w[sel].sum() <= cap
    assert v[sel].sum() == subset_oracle(v, w, cap)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 40), min_size=n, max_size=n),
    st.lists(st.integers(0, 7), min_size=n, max_size=n),
    st.integers(0, 40), st.integers(0, 10))))
def test_dp_objective_monotone_in_capacity(inst):
    v, w, cap, extra = np.array(inst[0]) / 2, np.array(inst[1]), inst[2], inst[3]
    lo = v[dp_search(v[None], w[None], [cap])[0]].sum()
    hi = v[dp_search(v[None], w[None], [cap + extra])[0]].sum()
    assert hi >= lo


def test_constant_scores_fill_lowest_indices():
    sel = dp_search(np.full((2, 5), 3.0), np.full((2, 5), 5), [15, 10])
    assert sel.tolist() == [[True] * 3 + [False] * 2, [True] * 2 + [False] * 3]


def test_dp_deterministic():
    rng = np.random.default_rng(4)
    v, w = rng.random((3, 10)), rng.integers(1, 6, (3, 10))
    assert np.array_equal(dp_search(v, w, [12, 7, 20]), dp_search(v.copy(), w.copy(), [12, 7, 20]))


# ---------------------------------------------------------------- merge

@pytest.mark.parametrize("N", range(1, 7))
def test_merge_rule_exhaustive(N):
    for fm in itertools.product((0, 1), repeat=N):
        for om in itertools.product((0, 1), repeat=N):
            codes = merge_selections(np.array([fm], bool), np.array([om], bool))[0]
            for i in range(N):
                expected = FULL if fm[i] else (FORWARD_ONLY if om[i] else SHORTCUT)
                assert codes[i] == expected


def test_knapsack_schedule_zero_capacity_all_shortcut():
    t = knapsack_schedule(random_scores(np.random.default_rng(0), 3, 5), CostModel(), Capacities([0] * 3, [0] * 3))
    assert np.all(t.codes == SHORTCUT)


def test_knapsack_schedule_merges_both_selected_to_full():
    s = ScoreTable(np.array([[5.0, 1.0, 1.0]]), np.array([[5.0, 1.0, 1.0]]))
    t = knapsack_schedule(s, CostModel(), Capacities([5], [2]))
    assert t.codes.tolist() == [[FULL, SHORTCUT, SHORTCUT]]
    usage = pool_usage(t, CostModel(), Capacities([5], [2]))
    assert usage["unused_fwd"].tolist() == [2] and usage["violations"] == []


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5), st.integers(1, 8))
def test_knapsack_schedule_feasible(seed, K, N):
    rng = np.random.default_rng(seed)
    scores = random_scores(rng, K, N)
    cm = CostModel(cf=tuple(rng.integers(0, 4, K)), cb=tuple(rng.integers(0, 4, K)))
    caps = Capacities(rng.integers(0, 25, K), rng.integers(0, 10, K))
    t = knapsack_schedule(scores, cm, caps)
    assert t.shape == (K, N)
    assert pool_usage(t, cm, caps)["violations"] == []
    assert validate_schedule(t, cm, caps.total) == []


def test_knapsack_schedule_dimension_mismatch():
    with pytest.raises(InputError):
        knapsack_schedule(random_scores(np.random.default_rng(0), 3, 4), CostModel(), Capacities([1, 1], [1, 1]))


def test_validate_schedule_reports_violation():
    t = ScheduleTable(np.array([[FULL, FULL], [SHORTCUT, FORWARD_ONLY]]))
    msgs = validate_schedule(t, CostModel(), 6)
    assert msgs == ["device 0: cost 10 > budget 6"]


# ---------------------------------------------------------------- brute force

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 7))
def test_brute_force_device_matches_itertools(seed, N):
    rng = np.random.default_rng(seed)
    af, ao = rng.integers(0, 40, N) / 4, rng.integers(0, 40, N) / 4
    wfull, wfwd = int(rng.integers(1, 6)), int(rng.integers(0, 4))
    cap = int(rng.integers(0, 25))
    value, codes = brute_force_device(af, ao, wfull, wfwd, cap)
    assert value == assignment_oracle(af, ao, wfull, wfwd, cap)
    c = np.array(codes)
    assert wfull * (c == FULL).sum() + wfwd * (c == FORWARD_ONLY).sum() <= cap
    assert af[c == FULL].sum() + ao[c == FORWARD_ONLY].sum() == value


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4), st.integers(1, 7))
def test_brute_force_dominates_decoupled(seed, K, N):
    rng = np.random.default_rng(seed)
    scores = random_scores(rng, K, N)
    caps = Capacities(rng.integers(0, 5 * N + 1, K), rng.integers(0, 2 * N + 1, K))
    bf = brute_force_schedule(scores, CostModel(), caps)
    kn = knapsack_schedule(scores, CostModel(), caps)
    assert np.all(schedule_objective(bf, scores) >= schedule_objective(kn, scores))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 7))
def test_objectives_equal_without_competition(seed, N):
    rng = np.random.default_rng(seed)
    # forward-only pool too small to afford a FULL step, no FULL pool
    scores = random_scores(rng, 1, N)
    caps = Capacities([0], [int(rng.integers(0, 5))])
    bf = brute_force_schedule(scores, CostModel(), caps)
    kn = knapsack_schedule(scores, CostModel(), caps)
    assert schedule_objective(bf, scores)[0] == schedule_objective(kn, scores)[0]
    # FULL pool only and worthless forward items
    scores = ScoreTable(np.zeros((1, N)), rng.integers(0, 40, (1, N)) / 4)
    caps = Capacities([int(rng.integers(0, 5 * N + 1))], [0])
    bf = brute_force_schedule(scores, CostModel(), caps)
    kn = knapsack_schedule(scores, CostModel(), caps)
    assert schedule_objective(bf, scores)[0] == schedule_objective(kn, scores)[0]


def test_brute_force_unconstrained_all_full_when_backward_dominates():
    rng = np.random.default_rng(1)
    f = rng.random((2, 6))
    scores = ScoreTable(f, f + 0.01 + rng.random((2, 6)))
    t = brute_force_schedule(scores, CostModel(), [30, 31])
    assert np.all(t.codes == FULL)


def test_brute_force_prefers_forward_only_when_it_scores_higher():
    scores = ScoreTable(np.array([[2.0, 0.0]]), np.array([[1.0, 1.0]]))
    t = brute_force_schedule(scores, CostModel(), [10])
    assert t.codes.tolist() == [[FORWARD_ONLY, FULL]]


def test_brute_force_size_limit():
    scores = random_scores(np.random.default_rng(1), 1, 15)
    with pytest.raises(SizeError):
        brute_force_schedule(scores, CostModel(), [10])


# ---------------------------------------------------------------- scaler

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 7))
def test_mckp_matches_enumeration(seed, N):
    rng = np.random.default_rng(seed)
    af, ao = rng.integers(0, 40, N) / 4, rng.integers(0, 40, N) / 4
    cap = int(rng.integers(0, 30))
    value, codes = mckp_device(af, ao, 5, 2, cap)
    assert value == assignment_oracle(af, ao, 5, 2, cap)
    c = np.array(codes)
    assert af[c == FULL].sum() + ao[c == FORWARD_ONLY].sum() == value
    assert 5 * (c == FULL).sum() + 2 * (c == FORWARD_ONLY).sum() <= cap


def test_mckp_matches_brute_force_at_n10():
    rng = np.random.default_rng(7)
    for _ in range(5):
        af, ao = rng.integers(0, 40, 10) / 4, rng.integers(0, 40, 10) / 4
        assert mckp_device(af, ao, 5, 2, 23)[0] == brute_force_device(af, ao, 5, 2, 23)[0]


def test_lambda_max_and_min_separate_scales():
    rng = np.random.default_rng(2)
    s = ScoreTable(rng.random((3, 5)) * 100, rng.random((3, 5)))
    lam = resolve_lambda(s, ScalerConfig(ScalerMode.MAX))
    assert np.all(lam * s.forward < s.backward[s.backward > 0].min())
    lam = resolve_lambda(s, ScalerConfig(ScalerMode.MIN))
    scaled = lam * s.forward
    assert np.all(s.backward < scaled[scaled > 0].min())


def test_tiny_lambda_spends_capacity_on_full_first():
    rng = np.random.default_rng(3)
    s = ScoreTable(rng.random((2, 5)) + 0.1, rng.random((2, 5)) + 0.1)
    t = scaler_schedule(s, CostModel(), [17, 9], ScalerConfig(ScalerMode.CONSTANT, 1e-9))
    nf, no, _ = t.counts()
    assert nf.tolist() == [3, 1] and no.tolist() == [1, 2]


@pytest.mark.parametrize("value", [0.1, 0.2])
def test_constant_lambda_configuration_points(value):
    s = random_scores(np.random.default_rng(0), 2, 5)
    t = scaler_schedule(s, CostModel(), [15, 15], ScalerConfig("constant", value))
    assert validate_schedule(t, CostModel(), 15) == []


def test_constant_lambda_must_be_positive():
    with pytest.raises(ConfigError):
        ScalerConfig("constant", 0.0)
    with pytest.raises(ConfigError):
        ScalerConfig("constant")


def test_all_zero_scores_fall_back_to_unit_lambda():
    s = ScoreTable(np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.warns(RuntimeWarning):
        assert resolve_lambda(s, ScalerConfig("max")) == 1.0
    with pytest.warns(RuntimeWarning):
        assert resolve_lambda(s, ScalerConfig("min")) == 1.0


# ---------------------------------------------------------------- table I/O

def test_schedule_json_roundtrip_and_schema_error():
    t = ScheduleTable(np.array([[1, 2, 3], [3, 3, 1]]))
    assert json.loads(t.to_json()) == {"codes": [[1, 2, 3], [3, 3, 1]]}
    assert np.array_equal(ScheduleTable.from_json(t.to_json()).codes, t.codes)
    for bad in ({}, {"codes": [[1, 2], [1]]}, {"codes": [[4]]}, {"codes": 3}):
        with pytest.raises(SchemaError) as e:
            ScheduleTable.from_dict(bad)
        assert e.value.path == "codes"


def test_schedule_csv_offset():
    t = ScheduleTable(np.array([[1, 3]]))
    assert t.to_csv(["a"], offset=10).splitlines() == ["subnet_id,micro_batch,code", "a,10,1", "a,11,3"]


def test_invalid_codes_rejected():
    with pytest.raises(InputError):
        ScheduleTable(np.array([[0, 1]]))
