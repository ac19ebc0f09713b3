import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raremtl.abtest import (
    AdvertiserOutcome,
    ConstantScorer,
    OracleScorer,
    ReportError,
    SimConfig,
    aggregate,
    event_uniforms,
    geomean,
    route,
    run_ab,
    segment_groups,
    spend_weighted_geomean,
)
from raremtl.assignment import AssignmentConfig, Source, Task, TaskAssignment, assign_all
from raremtl.synth import GeneratorConfig, generate


def outcome(i, spend, cpa_ratio=1.0, conv_ratio=1.0, conv=100):
    # control spend ``spend`` with ``conv`` conversions; variant chosen to hit the ratios
    cv = conv * conv_ratio
    sv = cpa_ratio * (spend / conv) * cv
    return AdvertiserOutcome(i, spend, sv, conv, int(round(cv)))


@pytest.fixture(scope="module")
def world():
    g = GeneratorConfig(n_advertisers=30, n_days=6, clicks_per_day=20000, seed=1)
    setups, log = generate(g)
    cats = {s.setup_id: s.category for s in setups}
    res = assign_all(log, 5, AssignmentConfig(min_clicks=50), categories=cats)
    return setups, log, res.assignments


# -- routing ---------------------------------------------------------------------

def a(cvr, label=Task.HARD):
    return TaskAssignment(1, label, label, 0, Source.STATS, cvr, 1000.0, 0)


def test_route_examples():
    assert route(a(0.005), 0.008) is Task.HARD
    assert route(a(0.009), 0.008) is Task.SOFT  # hard offline at alpha 0.01, soft online
    assert route(a(0.30, Task.SOFT), 0.008) is Task.SOFT
    assert route(a(0.008), 0.008) is Task.HARD


def test_route_fallbacks():
    assert route(a(None, Task.SOFT), 0.008) is Task.SOFT
    assert route(None, 0.008, "PageView") is Task.SOFT
    assert route(None, 0.008, "Purchase") is Task.HARD


# -- aggregation oracles ---------------------------------------------------------

def test_geomean_hand_cases():
    assert geomean([2.0, 1.0], [3.0, 1.0]) == pytest.approx(2 ** 0.75, abs=1e-9)
    assert geomean([2.0, 1.0], [3.0, 1.0]) == pytest.approx(1.68179, abs=1e-5)
    assert geomean([4.0, 0.25], [1.0, 1.0]) == pytest.approx(1.0, abs=1e-12)
    assert geomean([1.5], [7.0]) == pytest.approx(1.5, abs=1e-12)


def test_spend_weighted_geomean_uses_control_spend():
    outs = [outcome(1, 300.0, cpa_ratio=2.0), outcome(2, 100.0, cpa_ratio=1.0)]
    assert spend_weighted_geomean(outs, "cpa_ratio") == pytest.approx(2 ** 0.75, abs=1e-9)


def test_geomean_rejects_nonpositive_ratio():
    bad = AdvertiserOutcome(9, 10.0, 10.0, 10, 0)
    with pytest.raises(ValueError, match="advertiser 9"):
        spend_weighted_geomean([bad], "conversion_ratio")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0.1, 10), st.floats(0.01, 100)), min_size=1, max_size=20))
def test_geomean_between_min_and_max(pairs):
    vals = [p[0] for p in pairs]
    g = geomean(vals, [p[1] for p in pairs])
    assert min(vals) * (1 - 1e-12) <= g <= max(vals) * (1 + 1e-12)


def test_segment_groups_examples():
    g = segment_groups([50.0, 30.0, 20.0])
    assert g == {"Group I": [0], "Group II": [0], "Group III": [0, 1]}
    g = segment_groups([1.0] * 10)
    assert [len(g[k]) for k in ("Group I", "Group II", "Group III")] == [3, 5, 7]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 1000), min_size=1, max_size=30))
def test_groups_nested_and_minimal(spends):
    g = segment_groups(spends)
    i, ii, iii = g["Group I"], g["Group II"], g["Group III"]
    assert set(i) <= set(ii) <= set(iii)
    total = sum(spends)
    for share, members in ((0.3, i), (0.5, ii), (0.7, iii)):
        assert sum(spends[k] for k in members) >= share * total * (1 - 1e-9)
        assert sum(spends[k] for k in members[:-1]) < share * total


def test_aggregate_median_and_table():
    outs = [outcome(1, 100.0, 0.9, 1.1), outcome(2, 50.0, 1.0, 1.0), outcome(3, 10.0, 1.2, 0.8),
            AdvertiserOutcome(4, 5.0, 5.0, 0, 1)]
    rep = aggregate(outs)
    assert rep.excluded == 1
    assert rep.aggregates["Median"]["cpa_ratio"] == pytest.approx(1.0)
    assert rep.aggregates["Median"]["conversion_ratio"] == pytest.approx(1.0)
    table = rep.table()
    assert "Spend-Weighted" in table and "Group III" in table
    assert "excluded advertisers (undefined ratios): 1" in table


def test_pooled_row_survives_undefined_advertisers():
    # neither advertiser converts in both arms, but the pooled totals do
    outs = [AdvertiserOutcome(1, 10.0, 8.0, 0, 2), AdvertiserOutcome(2, 10.0, 4.0, 1, 0)]
    rep = aggregate(outs)
    assert rep.excluded == 2
    assert rep.aggregates["Median"]["cpa_ratio"] is None
    assert rep.aggregates["Pooled"]["cpa_ratio"] == pytest.approx((12.0 / 2) / (20.0 / 1))
    assert rep.aggregates["Pooled"]["conversion_ratio"] == pytest.approx(2.0)
    assert "n/a" in rep.table()
    with pytest.raises(ReportError):
        aggregate([AdvertiserOutcome(1, 10.0, 8.0, 0, 2)])


# -- simulation -------------------------------------------------------------------

def test_event_uniforms_depend_only_on_event():
    ids = np.arange(1000)
    u = event_uniforms(3, ids, 1)
    assert np.array_equal(u[500:], event_uniforms(3, ids[500:], 1))
    assert not np.array_equal(u, event_uniforms(4, ids, 1))
    assert 0 <= u.min() and u.max() < 1
    assert abs(u.mean() - 0.5) < 0.05


@pytest.mark.parametrize("pricing", ["bid", "market"])
def test_null_test_ratios_exactly_one(world, pricing):
    setups, log, assignments = world
    cfg = SimConfig(segment="all", pricing=pricing)
    rep = run_ab(log, setups, assignments, ConstantScorer(0.01), ConstantScorer(0.01), cfg)
    for agg in rep.aggregates.values():
        assert agg["cpa_ratio"] == 1.0
        assert agg["conversion_ratio"] == 1.0
    for o in rep.outcomes:
        assert o.spend_control == o.spend_variant


def test_split_traffic_partitions_clicks(world):
    setups, log, assignments = world
    cfg = SimConfig(segment="all", traffic_mode="split")
    rep = run_ab(log, setups, assignments, ConstantScorer(1e-4), ConstantScorer(1e-4), cfg)
    # tiny bids never exhaust a budget, so every click is bought by exactly one arm
    assert sum(o.clicks_control + o.clicks_variant for o in rep.outcomes) == len(log)
    assert 0.4 < sum(o.clicks_variant for o in rep.outcomes) / len(log) < 0.6


@pytest.mark.parametrize("pricing", ["bid", "market"])
def test_budget_respected(world, pricing):
    setups, log, assignments = world
    rep = run_ab(log, setups, assignments, OracleScorer(), ConstantScorer(0.5), SimConfig(segment="all", pricing=pricing))
    budget = {}
    for s in setups:
        budget[s.advertiser_id] = budget.get(s.advertiser_id, 0.0) + s.daily_budget
    days = len(np.unique(log.day))
    spend = {}
    for o in rep.outcomes:
        spend[o.advertiser_id] = spend.get(o.advertiser_id, 0.0) + o.spend_variant
    for adv, total in spend.items():
        assert total <= budget[adv] / 2 * days * (1 + 1e-9)


def test_n_days_limits_replay(world):
    setups, log, assignments = world
    rep = run_ab(log, setups, assignments, ConstantScorer(1e-4), ConstantScorer(1e-4),
                 SimConfig(segment="all", n_days=2))
    assert sum(o.clicks_control for o in rep.outcomes) == int((log.day < 2).sum())


@pytest.mark.parametrize("pricing", ["bid", "market"])
def test_oracle_beats_constant_control(world, pricing):
    setups, log, assignments = world
    gamma = float(log.converted.mean())
    rep = run_ab(log, setups, assignments, ConstantScorer(gamma), OracleScorer(), SimConfig(seed=2, pricing=pricing))
    pooled = rep.aggregates["Pooled"]
    assert pooled["cpa_ratio"] < 1.0
    assert pooled["conversion_ratio"] > 1.0


def test_simulation_deterministic(world):
    setups, log, assignments = world
    cfg = SimConfig(seed=5)
    r1 = run_ab(log, setups, assignments, ConstantScorer(0.003), OracleScorer(), cfg)
    r2 = run_ab(log, setups, assignments, ConstantScorer(0.003), OracleScorer(), cfg)
    assert r1.to_json() == r2.to_json()
    assert math.isfinite(r1.aggregates["Spend-Weighted"]["cpa_ratio"])


def test_unknown_setup_in_log_rejected(world):
    setups, log, assignments = world
    with pytest.raises(ValueError, match="unknown setups"):
        run_ab(log, setups[:3], assignments, ConstantScorer(0.01), ConstantScorer(0.01), SimConfig())
