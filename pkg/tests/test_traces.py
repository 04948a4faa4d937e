import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ergosim.core import Depart, Event, Identity, Join, Kind
from ergosim.errors import ConfigError, OrderError, ParseError, TraceError
from ergosim.traces import (GNUTELLA, HOUR, ExponentialSource, FileSource, TraceSpec, WeibullSource, draw_sessions,
                            export_trace, generate_exponential_trace, generate_trace, generate_weibull_trace,
                            ingest_trace_file)


def write(tmp_path, *lines, name="t.csv"):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def test_same_second_rows_are_jittered(tmp_path):
    trace = ingest_trace_file(write(tmp_path, "0,join,a", "0,join,b"))
    assert [ev.time for ev in trace.events] == [0.0, 0.000001]


def test_departure_without_join_names_the_id(tmp_path):
    with pytest.raises(ParseError, match="x") as info:
        ingest_trace_file(write(tmp_path, "5,depart,x"))
    assert info.value.line == 1


def test_three_line_file_matches_hand_parse(tmp_path):
    path = write(tmp_path, "time_s,event,id", "1,join,a", "2.5,join,b", "4,depart,a")
    expected = [
        Event(1.0, Join(Identity("a", Kind.GOOD, 1.0))),
        Event(2.5, Join(Identity("b", Kind.GOOD, 2.5))),
        Event(4.0, Depart("a")),
    ]
    trace = ingest_trace_file(path)
    assert trace.events == expected
    assert trace.initial_ids == []


def test_decreasing_timestamp(tmp_path):
    with pytest.raises(OrderError):
        ingest_trace_file(write(tmp_path, "3,join,a", "2,join,b"))


@pytest.mark.parametrize("line", ["x,join,a", "1,leave,a", "1,join"])
def test_malformed_lines(tmp_path, line):
    with pytest.raises(ParseError) as info:
        ingest_trace_file(write(tmp_path, "0,join,z", line))
    assert info.value.line == 2


def test_missing_file(tmp_path):
    with pytest.raises(TraceError):
        ingest_trace_file(tmp_path / "nope.csv")


def test_initial_population_split(tmp_path):
    trace = ingest_trace_file(write(tmp_path, "0,join,a", "0,join,b", "3,depart,a"), initial_until=0)
    assert sorted(i.uid for i in trace.initial_ids) == ["a", "b"]
    assert len(trace.events) == 1


def test_limit(tmp_path):
    trace = ingest_trace_file(write(tmp_path, "1,join,a", "2,join,b", "3,join,c"), limit=2)
    assert len(trace.events) == 2


def test_weibull_shape_one_is_exponential():
    scale_h = 2.0
    draws = draw_sessions(WeibullSource(1.0, scale_h), np.random.default_rng(1), 100_000)
    assert abs(draws.mean() - scale_h * HOUR) <= 0.02 * scale_h * HOUR


def test_weibull_bittorrent_mean():
    src = WeibullSource(0.59, 41.0)
    draws = draw_sessions(src, np.random.default_rng(2), 100_000)
    # oracle: the Weibull mean is scale * Gamma(1 + 1/shape)
    mean = 41.0 * HOUR * math.gamma(1 + 1 / 0.59)
    assert abs(draws.mean() - mean) <= 0.03 * mean


def test_exponential_join_count():
    trace = generate_exponential_trace(TraceSpec(GNUTELLA, duration=10_000, seed=5))
    joins = trace.joins
    assert abs(joins - 10_000) <= 3 * math.sqrt(10_000)


def test_exponential_session_mean():
    draws = draw_sessions(GNUTELLA, np.random.default_rng(3), 100_000)
    assert abs(draws.mean() - 2.3 * HOUR) <= 0.02 * 2.3 * HOUR


def test_zero_duration_is_empty():
    trace = generate_exponential_trace(TraceSpec(GNUTELLA, duration=0.0, seed=1))
    assert trace.events == []
    assert len(trace.initial_ids) == 10_000


def test_weibull_same_seed_same_trace():
    spec = TraceSpec(WeibullSource(0.52, 9.8), initial_population=500, duration=2000, seed=9)
    assert generate_weibull_trace(spec).events == generate_weibull_trace(spec).events


def test_bad_parameters():
    for spec in (TraceSpec(WeibullSource(0, 1.0)), TraceSpec(WeibullSource(1.0, -1)),
                 TraceSpec(ExponentialSource(1.0, 0.0)), TraceSpec(GNUTELLA, initial_population=50)):
        with pytest.raises(ConfigError):
            generate_trace(spec)


def test_export_round_trip(tmp_path):
    spec = TraceSpec(GNUTELLA, initial_population=300, duration=500, seed=4)
    trace = generate_trace(spec)
    path = tmp_path / "out.csv"
    export_trace(trace, path)
    back = generate_trace(TraceSpec(FileSource(str(path)), duration=0.0))
    assert [i.uid for i in back.initial_ids] == [str(i.uid) for i in trace.initial_ids]
    assert [ev.time for ev in back.events] == [ev.time for ev in trace.events]


def test_file_source_checks_floor(tmp_path):
    path = write(tmp_path, "0,join,a", "0,join,b", "1,depart,a")
    with pytest.raises(TraceError):
        generate_trace(TraceSpec(FileSource(str(path)), n0=2, duration=0.0))


def _check_trace(trace, spec):
    eps = Fraction(spec.epsilon).limit_denominator(10**6)
    alive = len(trace.initial_ids)
    last = -math.inf
    cur_round, start_pop, departs = None, alive, 0
    for ev in trace.events:
        assert ev.time > last
        last = ev.time
        r = math.floor(ev.time / spec.round_len)
        if r != cur_round:
            cur_round, start_pop, departs = r, alive, 0
        if ev.is_join:
            alive += 1
        else:
            alive -= 1
            departs += 1
            assert departs <= start_pop * eps
        assert alive >= spec.n0


@given(st.integers(0, 2**32 - 1), st.sampled_from(["exp", "weibull"]), st.integers(12, 40))
def test_generated_traces_respect_floor_and_rate(seed, kind, init):
    src = ExponentialSource(0.01, 0.2) if kind == "exp" else WeibullSource(0.6, 0.01)
    spec = TraceSpec(src, initial_population=init, duration=300, seed=seed, n0=10)
    _check_trace(generate_trace(spec), spec)


def test_suppression_is_reported():
    spec = TraceSpec(ExponentialSource(0.005, 0.05), initial_population=12, duration=400, seed=1, n0=10)
    trace = generate_trace(spec)
    _check_trace(trace, spec)
    assert trace.suppressed + trace.staggered > 0


@given(st.integers(0, 1000))
def test_generation_is_pure(seed):
    spec = TraceSpec(GNUTELLA, initial_population=100, duration=50, seed=seed)
    a, b = generate_trace(spec), generate_trace(spec)
    assert a.events == b.events and a.initial_ids == b.initial_ids
