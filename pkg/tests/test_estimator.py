import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ergosim.core import Depart, Event, Identity, Join, Kind, SystemView, apply_event
from ergosim.errors import EmptySystem, Uninitialized, ZeroElapsed
from ergosim.estimator import EstimatorState, current_estimate, init_estimator, on_membership_change

from oracles import interval_triggers, random_stream


def _feed(st_, view, stream, times):
    fired = []
    for i, ((is_join, uid), t) in enumerate(zip(stream, times)):
        ev = Event(t, Join(Identity(uid, Kind.GOOD, t))) if is_join else Event(t, Depart(uid))
        apply_event(view, ev)
        _, updated = on_membership_change(st_, view, ev)
        if updated:
            fired.append(i)
    return fired


def test_init_divides_size_by_duration():
    assert init_estimator(SystemView(good=range(100)), 10).estimate == 10.0
    assert init_estimator(SystemView(good={0}), 1).estimate == 1.0


def test_init_empty():
    with pytest.raises(EmptySystem):
        init_estimator(SystemView(), 1.0)


def test_trigger_fires_at_seventh_join():
    stream = [(True, uid) for uid in range(5, 16)]
    oracle = interval_triggers({1, 2, 3, 4}, stream)
    st_ = init_estimator(SystemView(good={1, 2, 3, 4}), 1.0)
    fired = _feed(st_, SystemView(good={1, 2, 3, 4}), stream, [2.0 * (k + 1) for k in range(len(stream))])
    assert fired[:1] == oracle[:1] == [6]


def test_update_uses_size_over_elapsed():
    view = SystemView(good={1, 2, 3, 4})
    st_ = init_estimator(view, 1.0)
    stream = [(True, uid) for uid in range(5, 12)]
    _feed(st_, view, stream, [2.0 * (k + 1) for k in range(7)])
    # joins 2 s apart from t=0; the 7th lands at t=14 with 11 members
    assert st_.interval_index == 1
    assert current_estimate(st_) == pytest.approx(11 / 14)
    rec = st_.intervals[0]
    assert (rec.start, rec.end, rec.size_at_end) == (0.0, 14.0, 11)


def test_no_events_no_trigger():
    view = SystemView(good=range(10))
    st_ = init_estimator(view, 1.0)
    assert st_.delta == 0
    assert not st_.triggered(view.size)


def test_current_estimate_after_init():
    assert current_estimate(init_estimator(SystemView(good=range(100)), 10)) == 10.0


def test_uninitialized():
    with pytest.raises(Uninitialized):
        current_estimate(EstimatorState())
    with pytest.raises(Uninitialized):
        on_membership_change(EstimatorState(), SystemView(good={1}), Event(1.0, Depart(1)))


def test_zero_elapsed_is_defensive():
    st_ = EstimatorState(t_last=5.0, estimate=1.0)
    with pytest.raises(ZeroElapsed):
        st_.update(5.0, 10, 0)


def test_nonpositive_estimate_keeps_previous():
    st_ = EstimatorState(t_last=0.0, estimate=3.0)
    st_.update(1.0, 0, 0)
    assert st_.estimate == 3.0


@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.integers(1, 200))
def test_incremental_trigger_matches_snapshots(seed, init, length):
    rng = random.Random(seed)
    stream = random_stream(rng, init, length)
    view = SystemView(good=range(init))
    st_ = init_estimator(view, 1.0)
    fired = _feed(st_, view, stream, [float(k + 1) for k in range(length)])
    assert fired == interval_triggers(range(init), stream)


@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.integers(1, 120))
def test_intervals_partition_time(seed, init, length):
    rng = random.Random(seed)
    view = SystemView(good=range(init))
    st_ = init_estimator(view, 1.0)
    _feed(st_, view, random_stream(rng, init, length), [float(k + 1) for k in range(length)])
    prev_end = 0.0
    for rec in st_.intervals:
        assert rec.start == prev_end
        assert rec.end > rec.start
        prev_end = rec.end
