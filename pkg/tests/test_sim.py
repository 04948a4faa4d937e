import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ergosim import ergo, sim
from ergosim.adversary import AdversaryConfig, BurstJoin
from ergosim.core import SimConfig
from ergosim.errors import InvariantViolation
from ergosim.sim import RunSettings, Simulation, simulate
from ergosim.traces import GNUTELLA, TraceSpec, generate_trace


@pytest.fixture(scope="module")
def small_trace():
    return generate_trace(TraceSpec(GNUTELLA, initial_population=2000, duration=1500, seed=3))


def settings(**kw):
    base = dict(warmup_s=300.0, horizon_s=1200.0)
    base.update(kw)
    return RunSettings(**base)


def test_no_adversary_no_bad(small_trace):
    r = simulate(settings(), small_trace, 1)
    assert r.max_bad_fraction == 0 and r.summary["bad_joins"] == 0


def test_h3_trusts_an_inflated_estimate(small_trace):
    # the bad-join bound assumes J~ is close to the good join rate; right after
    # start-up J~ is |S| per round, so H3 suppresses every purge
    r = simulate(settings(adversary=AdversaryConfig(2048.0), policy=ergo.ERGO_CH2), small_trace, 2)
    assert r.max_bad_fraction > 1 / 6


def test_same_seed_same_summary(small_trace):
    s = settings(adversary=AdversaryConfig(256.0), policy=ergo.ergo_sf(0.9))
    assert simulate(s, small_trace, 4).summary == simulate(s, small_trace, 4).summary


@pytest.mark.parametrize("policy", [ergo.ERGO, ergo.CCOM])
def test_invariant_and_monitors(small_trace, policy):
    r = simulate(settings(adversary=AdversaryConfig(2048.0), policy=policy), small_trace, 2)
    s = r.summary
    assert r.max_bad_fraction < 1 / 6
    assert s["overlap_violations"] == 0
    assert s["subinterval_violations"] == 0
    assert s["invariant_ok"]


def test_budget_is_conserved(small_trace):
    T = 1000.0
    run = Simulation(settings(adversary=AdversaryConfig(T)), small_trace, 5)
    res = run.run()
    assert res.ledger.adversary_total == run.adv.spent
    assert run.adv.spent + run.adv.budget == pytest.approx(T * 1200.0, rel=1e-9)


def test_iteration_threshold_holds(small_trace):
    r = simulate(settings(adversary=AdversaryConfig(512.0), record_iterations=True), small_trace, 6)
    assert r.iterations
    for rec in r.iterations:
        assert rec.joins + rec.departs <= -(-rec.size_at_tau // 11)


def test_retention_stays_within_kappa_share(small_trace):
    kappa = 1 / 18
    s = settings(adversary=AdversaryConfig(4096.0, respond_to_purges=True, kappa=kappa), record_iterations=True)
    r = simulate(s, small_trace, 7)
    assert r.max_bad_fraction < 1 / 6
    for prev, rec in zip(r.iterations, r.iterations[1:]):
        # bad IDs at the start of an iteration are exactly those retained at the previous purge
        assert rec.size_at_tau - (prev.size_at_tau + prev.joins - prev.departs) <= 0


def _one_at_a_time(monkeypatch):
    real = sim.affordable_joins
    monkeypatch.setattr(sim, "affordable_joins", lambda b, c, constant=False: min(1, real(b, c, constant)))


@pytest.mark.parametrize("policy,T", [(ergo.ERGO, 300.0), (ergo.ERGO_CH2, 300.0), (ergo.ERGO, 37.5)])
def test_batched_joins_match_single_joins(small_trace, monkeypatch, policy, T):
    s = settings(adversary=AdversaryConfig(T), policy=policy, horizon_s=400.0)
    batched = simulate(s, small_trace, 8).summary
    _one_at_a_time(monkeypatch)
    single = simulate(s, small_trace, 8).summary
    assert batched == single


def test_ccom_collapse_matches_unrolled(small_trace, monkeypatch):
    s = settings(adversary=AdversaryConfig(3000.0), policy=ergo.CCOM, horizon_s=400.0)
    fast = Simulation(s, small_trace, 9)
    assert fast.collapsible
    a = fast.run().summary
    slow = Simulation(s, small_trace, 9)
    slow.collapsible = False
    b = slow.run().summary
    assert a.pop("collapsed_iterations") > 0 and b.pop("collapsed_iterations") == 0
    assert a == b


def test_burst_strategy_runs(small_trace):
    r = simulate(settings(adversary=AdversaryConfig(100.0, BurstJoin(10.0))), small_trace, 1)
    assert r.summary["bad_joins"] > 0 and r.max_bad_fraction < 1 / 6


def test_sybilcontrol_reports_cutoff(small_trace):
    s = settings(engine="sybilcontrol", policy=None, adversary=AdversaryConfig(2000.0))
    r = simulate(s, small_trace, 1)
    assert r.summary["cutoff_time_s"] != "" and r.max_bad_fraction >= 1 / 6
    assert r.summary["good_periodic_rate"] == pytest.approx(
        r.ledger.good_periodic / 1200.0) and r.ledger.good_periodic > 0
    assert not r.summary["invariant_ok"]


def test_sybilcontrol_low_rate_keeps_invariant(small_trace):
    r = simulate(settings(engine="sybilcontrol", policy=None, adversary=AdversaryConfig(20.0)), small_trace, 1)
    assert r.summary["cutoff_time_s"] == "" and r.max_bad_fraction < 1 / 6


def test_fail_fast_raises_with_state(small_trace):
    s = settings(engine="sybilcontrol", policy=None, adversary=AdversaryConfig(2000.0), fail_fast=True)
    with pytest.raises(InvariantViolation) as info:
        simulate(s, small_trace, 1)
    assert info.value.time is not None and info.value.state["bad"] > 0


def test_classifier_refusals_are_counted(small_trace):
    r = simulate(settings(adversary=AdversaryConfig(500.0), policy=ergo.ergo_sf(0.9)), small_trace, 1)
    s = r.summary
    assert s["refused_bad_attempts"] > 0
    joins = s["good_joins"] + s["false_refusals"]
    assert abs(s["false_refusals"] - 0.1 * joins) <= 4 * math.sqrt(joins * 0.09) + 2


def test_committee_is_audited(small_trace):
    r = simulate(settings(adversary=AdversaryConfig(64.0), committee_C=8), small_trace, 1)
    assert r.committee_audits
    assert all(a.size_ok for a in r.committee_audits)


def test_background_bad_is_exempt(small_trace):
    s = settings(background_bad_fraction=1 / 24, audit_invariant=False, adversary=AdversaryConfig(100.0))
    run = Simulation(s, small_trace, 1)
    assert run.background == math.floor(2000 / 23)
    run.run()
    assert run.view.bad_members.count_below(run.background) == run.background


def _keyed_sim(small_trace, t_last, estimate):
    run = Simulation(settings(adversary=AdversaryConfig(1.0)), small_trace, 1)
    run.est.t_last, run.est.estimate = t_last, estimate
    return run


def test_slice_ends_when_its_first_join_leaves_the_cost_window(small_trace):
    # the adversary wakes exactly when the oldest join leaves the window, where
    # floor((now - t_last) * J) rounds down to 0
    t_last, est = 14232.935758877076, 3.8339726881268343
    run = _keyed_sim(small_trace, t_last, est)
    now = t_last + 1.0 / est
    assert math.floor((now - t_last) * est) == 0
    assert not now - 1.0 / est < t_last
    assert run._slice_key(now)[1] == 1
    assert run._slice_key(t_last)[1] == 0


@given(st.floats(0, 1e5), st.floats(1e-3, 1e3), st.lists(st.floats(0, 20), min_size=2, max_size=12))
def test_joins_sharing_a_slice_share_a_cost_window(small_trace, t_last, est, offsets):
    run = _keyed_sim(small_trace, t_last, est)
    w = 1.0 / est
    times = sorted({t_last + k * w for k in offsets} | {t_last + math.floor(k) * w + w for k in offsets})
    keys = [run._slice_key(t) for t in times]
    for i, s in enumerate(times):
        for now, key in zip(times[i + 1:], keys[i + 1:]):
            if key == keys[i]:
                assert s > now - w
