import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ruleworth.importance import (
    ImportanceReport,
    IncompleteTableError,
    MseTable,
    flag_rules,
    full_importance,
    importance_report,
    marginal,
    monte_carlo_ri,
    per_variable_importance,
    relying_curve,
    rule_importance,
    shapley_weighted,
    wrong_rule_scan,
)
from ruleworth.lab import CoalitionResult
from ruleworth.rules import Coalition

from oracles import brute_curve, brute_fi, brute_ri, mask_of, permutation_shapley, subsets

HAND = MseTable(2, {0: 1e-1, 1: 1e-2, 2: 1e-1, 3: 1e-3})


def random_table(n, rng, spread=3.0):
    return MseTable(n, {m: 10 ** rng.uniform(-spread - 3, -3) for m in range(1 << n)})


def as_sets(table):
    return {s: table[mask_of(s)] for s in subsets(table.n)}


@st.composite
def tables(draw, n_min=1, n_max=5):
    n = draw(st.integers(n_min, n_max))
    # stays above the 1e-16 floor even after scaling by 1e-6
    logs = draw(st.lists(st.floats(-9, 2), min_size=1 << n, max_size=1 << n))
    return MseTable(n, {m: 10.0**v for m, v in enumerate(logs)})


def test_hand_two_rule_table():
    assert rule_importance(HAND, 1) == pytest.approx(1.5, abs=1e-15)
    assert rule_importance(HAND, 2) == pytest.approx(0.5, abs=1e-15)
    assert full_importance(HAND, 1) == pytest.approx(2.0, abs=1e-15)
    assert full_importance(HAND, 2) == pytest.approx(1.0, abs=1e-15)
    curve = relying_curve(HAND, 1)
    assert curve[0][0] == pytest.approx(1.0)
    assert curve[1][0] == pytest.approx(2.0)


@pytest.mark.parametrize(
    "without, with_, expected", [(1e-2, 1e-2, 0.0), (1e-1, 1e-3, 2.0), (1e-3, 1e-1, -2.0)]
)
def test_marginal_examples(without, with_, expected):
    t = MseTable(1, {0: without, 1: with_})
    assert marginal(t, 1, Coalition(1, 1)) == pytest.approx(expected, abs=1e-15)


def test_marginal_requires_membership():
    with pytest.raises(ValueError):
        marginal(HAND, 1, Coalition(2, 2))


def test_nonpositive_mse_rejected():
    with pytest.raises(ValueError):
        MseTable(1, {0: 0.0, 1: 1.0})
    with pytest.raises(ValueError):
        MseTable(1, {0: -1.0, 1: 1.0})


def test_incomplete_table():
    t = MseTable(2, {0: 1.0, 3: 1.0, 1: 1.0})
    with pytest.raises(IncompleteTableError):
        rule_importance(t, 1)
    with pytest.raises(IncompleteTableError):
        relying_curve(t, 1)
    # FI only needs the full coalition and its neighbour
    assert full_importance(t, 2) == 0.0
    with pytest.raises(IncompleteTableError):
        full_importance(t, 1)


def test_floor_guards_zero_like_values():
    t = MseTable(1, {0: 1e-3, 1: 1e-30})
    assert marginal(t, 1, Coalition(1, 1)) == pytest.approx(13.0)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_matches_brute_force(n):
    rng = np.random.default_rng(n)
    t = random_table(n, rng)
    sets = as_sets(t)
    for i in range(1, n + 1):
        assert abs(rule_importance(t, i) - brute_ri(sets, n, i)) < 1e-12
        assert abs(full_importance(t, i) - brute_fi(sets, n, i)) < 1e-12
        assert abs(shapley_weighted(t, i) - permutation_shapley(sets, n, i)) < 1e-12
        curve = relying_curve(t, i)
        for r in range(n):
            assert abs(curve[r][0] - brute_curve(sets, n, i, r)) < 1e-12
            assert len(curve[r][1]) == math.comb(n - 1, r)


@given(tables(), st.floats(1e-6, 1e6))
def test_scale_invariance(t, c):
    s = t.scaled(c)
    for i in range(1, t.n + 1):
        assert abs(rule_importance(s, i) - rule_importance(t, i)) < 1e-12
        assert abs(full_importance(s, i) - full_importance(t, i)) < 1e-12
        assert abs(shapley_weighted(s, i) - shapley_weighted(t, i)) < 1e-12


@given(tables())
def test_partition_and_boundary_identities(t):
    n = t.n
    for i in range(1, n + 1):
        curve = relying_curve(t, i)
        total = sum(math.comb(n - 1, r) * curve[r][0] for r in range(n)) / 2 ** (n - 1)
        assert abs(total - rule_importance(t, i)) < 1e-12
        assert curve[n - 1][0] == full_importance(t, i)


@given(tables(1, 1))
def test_single_rule_degenerates(t):
    assert rule_importance(t, 1) == full_importance(t, 1) == shapley_weighted(t, 1)


@given(tables(), st.data())
def test_marginal_antisymmetry(t, data):
    n = t.n
    i = data.draw(st.integers(1, n))
    mask = data.draw(st.integers(0, (1 << n) - 1)) | (1 << (i - 1))
    s = Coalition(mask, n)
    swapped = dict(t.entries)
    a, b = mask, mask & ~(1 << (i - 1))
    swapped[a], swapped[b] = t.entries[b], t.entries[a]
    assert marginal(MseTable(n, swapped), i, s) == -marginal(t, i, s)


@pytest.mark.parametrize("n", [1, 3, 6])
def test_constant_table_is_zero(n):
    t = MseTable(n, {m: 0.37 for m in range(1 << n)})
    for i in range(1, n + 1):
        assert rule_importance(t, i) == 0
        assert full_importance(t, i) == 0
        assert shapley_weighted(t, i) == 0
        if n > 1:
            assert monte_carlo_ri(t, i, 20, seed=i) == (0.0, 0.0)


def test_exact_report_is_reproducible():
    t = random_table(4, np.random.default_rng(1))
    a, b = importance_report(t), importance_report(t)
    assert a.to_json() == b.to_json()
    back = ImportanceReport.from_dict(json.loads(a.to_json()))
    assert back.to_json() == a.to_json()


def test_csv_has_one_row_per_rule_metric():
    rep = importance_report(HAND, rule_names=["PDE", "IC"])
    rows = rep.to_csv().strip().splitlines()
    assert rows[0] == "rule,name,metric,value"
    assert "1,PDE,RI,1.5" in rows
    assert "2,IC,FI,1.0" in rows
    assert len(rows) == 1 + 2 * (3 + 2)


def test_monte_carlo_exhaustive_equals_exact():
    t = random_table(5, np.random.default_rng(3))
    for i in range(1, 6):
        est, se = monte_carlo_ri(t, i, 16, seed=0, replace=False)
        assert est == pytest.approx(rule_importance(t, i), abs=1e-12)
        assert se == 0.0


def test_monte_carlo_callable_source_trains_only_sampled():
    t = random_table(6, np.random.default_rng(4))
    asked = set()

    def source(mask):
        asked.add(mask)
        return t[mask]

    est, se = monte_carlo_ri(source, 3, 10, seed=1, n=6)
    assert len(asked) <= 20
    assert est == monte_carlo_ri(t, 3, 10, seed=1)[0]
    assert se > 0
    with pytest.raises(ValueError):
        monte_carlo_ri(source, 3, 10, seed=1)
    with pytest.raises(ValueError):
        monte_carlo_ri(t, 3, 0, seed=1)


def test_per_variable_constructed_table():
    n = 3
    base = {m: 1e-3 for m in range(1 << n)}
    d_table = {m: (1e-5 if m & 0b010 else 1e-2) for m in range(1 << n)}
    out = per_variable_importance({"c": MseTable(n, base), "d": MseTable(n, d_table)})
    assert out["c"] == [0.0, 0.0, 0.0]
    assert out["d"][1] == pytest.approx(3.0)
    assert out["d"][0] == 0.0 and out["d"][2] == 0.0


def test_per_variable_identical_to_overall():
    t = random_table(3, np.random.default_rng(7))
    out = per_variable_importance({"u": t})
    assert out["u"] == [rule_importance(t, i) for i in (1, 2, 3)]


def test_harmful_rule_has_minus_one():
    n = 3
    entries = {m: (1e-2 if m & 0b100 else 1e-3) for m in range(1 << n)}
    t = MseTable(n, entries)
    assert rule_importance(t, 3) == pytest.approx(-1.0, abs=1e-15)
    assert flag_rules(importance_report(t)) == [3]


def test_wrong_rule_scan_deltas_and_validation():
    good = MseTable(2, {0: 1e-1, 1: 1e-2, 2: 1e-2, 3: 1e-3})
    bad = MseTable(2, {0: 1e-1, 1: 1e-2, 2: 1e0, 3: 1e-1})

    def evaluate(rule, expr):
        return importance_report(bad if expr == "0.1" else good)

    out = wrong_rule_scan(evaluate, [(2, "0.1"), (2, "0")])
    assert out[0].flagged == [2]
    assert out[1].flagged == []
    assert out[1].delta_ri == [0.0, 0.0]
    assert out[0].delta_ri[1] < -1
    with pytest.raises(ValueError):
        wrong_rule_scan(evaluate, [(2, " ")])


def _result(mask, seed, mse, val=None):
    return CoalitionResult(mask, 1, seed, mse, (mse,), val, 0, "h")


def test_from_results_geometric_mean_and_metric():
    res = [_result(0, 0, 1e-2, 1.0), _result(0, 1, 1e-4, 1.0), _result(1, 0, 1e-3, 2.0)]
    t = MseTable.from_results(res, 1)
    assert t[0] == pytest.approx(1e-3)
    assert MseTable.from_results(res, 1, metric="val")[1] == 2.0
    with pytest.raises(ValueError):
        MseTable.from_results([_result(0, 0, 1.0)], 1, metric="val")
    seeds = MseTable.per_seed(res, 1)
    assert set(seeds) == {0, 1}


def test_monte_carlo_stderr_is_calibrated():
    rng = np.random.default_rng(5)
    t = MseTable(5, {m: 10 ** (-2 - 0.5 * bin(m).count("1") + 0.3 * rng.standard_normal())
                     for m in range(32)})
    exact = rule_importance(t, 2)
    z = []
    for seed in range(1500):
        est, se = monte_carlo_ri(t, 2, 200, seed=seed)
        z.append((est - exact) / se)
    assert 0.93 < np.std(z) < 1.07
    assert abs(np.mean(z)) < 0.1
