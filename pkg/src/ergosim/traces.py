"""Good-ID churn: trace file ingestion and synthetic session-model generators."""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .core import Depart, Event, Identity, Join, Kind
from .errors import ConfigError, OrderError, ParseError, TraceError

HOUR = 3600.0
JITTER_S = 1e-6


@dataclass(frozen=True)
class FileSource:
    path: str
    # joins at or before this raw timestamp form the initial population
    initial_until: float | None = 0.0


@dataclass(frozen=True)
class WeibullSource:
    shape: float
    scale_hours: float

    @property
    def mean_session_s(self) -> float:
        return self.scale_hours * HOUR * math.gamma(1 + 1 / self.shape)


@dataclass(frozen=True)
class ExponentialSource:
    mean_hours: float
    arrival_rate_per_s: float

    @property
    def mean_session_s(self) -> float:
        return self.mean_hours * HOUR


GNUTELLA = ExponentialSource(mean_hours=2.3, arrival_rate_per_s=1.0)
BITTORRENT = WeibullSource(shape=0.59, scale_hours=41.0)
ETHEREUM = WeibullSource(shape=0.52, scale_hours=9.8)
PRESETS = {"gnutella": GNUTELLA, "bittorrent": BITTORRENT, "ethereum": ETHEREUM}


@dataclass(frozen=True)
class TraceSpec:
    source: FileSource | WeibullSource | ExponentialSource
    initial_population: int = 10_000
    duration: float = 10_000.0
    seed: int = 0
    n0: int = 100
    epsilon: float = 1 / 12
    round_len: float = 1.0
    max_events: int | None = None

    def validate(self) -> None:
        src = self.source
        if isinstance(src, WeibullSource):
            if not (src.shape > 0 and src.scale_hours > 0):
                raise ConfigError("Weibull shape and scale must be positive")
        elif isinstance(src, ExponentialSource):
            if not (src.mean_hours > 0 and src.arrival_rate_per_s > 0):
                raise ConfigError("exponential mean and arrival rate must be positive")
        elif not isinstance(src, FileSource):
            raise ConfigError(f"unknown trace source {src!r}")
        if self.duration < 0:
            raise ConfigError("duration must be non-negative")
        if not isinstance(src, FileSource) and self.initial_population < self.n0:
            raise ConfigError("initial_population must be at least n0")


@dataclass
class ChurnTrace:
    events: list[Event]
    initial_ids: list[Identity]
    end_time: float = 0.0
    suppressed: int = 0
    staggered: int = 0

    @property
    def joins(self) -> int:
        return sum(1 for ev in self.events if ev.is_join)

    @property
    def departs(self) -> int:
        return len(self.events) - self.joins


def _parse_time(raw: str, lineno: int) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise ParseError(f"bad timestamp {raw!r}", lineno) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite timestamp {raw!r}", lineno)
    return value


def ingest_trace_file(path, limit: int | None = None, initial_until: float | None = None) -> ChurnTrace:
    """Read a ``time_s,event,id`` CSV into a serialized trace.

    Rows sharing one raw timestamp are spread by 1 microsecond each, in file
    order.  With ``initial_until`` set, rows at or before that timestamp are
    folded into the initial population instead of the event list.
    """
    path = Path(path)
    if not path.exists():
        raise TraceError(f"trace file not found: {path}")
    rows = []
    present: set[str] = set()
    last_raw = -math.inf
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or not "".join(rec).strip():
                continue
            if len(rec) != 3:
                raise ParseError(f"expected 3 columns, got {len(rec)}", lineno)
            raw_t, kind, ident = (c.strip() for c in rec)
            if lineno == 1 and kind == "event":
                continue
            t = _parse_time(raw_t, lineno)
            if t < last_raw:
                raise OrderError(f"line {lineno}: timestamp {t} decreases (previous {last_raw})")
            last_raw = t
            if kind == "join":
                if ident in present:
                    raise ParseError(f"id {ident} joins while already present", lineno)
                present.add(ident)
            elif kind == "depart":
                if ident not in present:
                    raise ParseError(f"id {ident} departs without a prior join", lineno)
                present.remove(ident)
            else:
                raise ParseError(f"unknown event kind {kind!r}", lineno)
            rows.append((t, kind, ident))
            if limit is not None and len(rows) >= limit:
                break

    initial: dict[str, Identity] = {}
    events: list[Event] = []
    prev_raw, dup = None, 0
    prev_t = -math.inf
    for raw_t, kind, ident in rows:
        dup = dup + 1 if raw_t == prev_raw else 0
        prev_raw = raw_t
        t = raw_t + dup * JITTER_S
        if initial_until is not None and raw_t <= initial_until:
            if kind == "join":
                initial[ident] = Identity(ident, Kind.GOOD, t)
            else:
                del initial[ident]
            continue
        if t <= prev_t:
            raise OrderError(f"jittered timestamp {t} collides with {prev_t}")
        prev_t = t
        if kind == "join":
            events.append(Event(t, Join(Identity(ident, Kind.GOOD, t))))
        else:
            events.append(Event(t, Depart(ident)))
    end = events[-1].time if events else 0.0
    return ChurnTrace(events=events, initial_ids=list(initial.values()), end_time=end)


def draw_sessions(source, rng: np.random.Generator, n: int) -> np.ndarray:
    """Session lengths in seconds for ``n`` fresh joins."""
    if isinstance(source, WeibullSource):
        return source.scale_hours * HOUR * rng.weibull(source.shape, size=n)
    if isinstance(source, ExponentialSource):
        return rng.exponential(source.mean_session_s, size=n)
    raise ConfigError(f"no session law for {source!r}")


def _residual_weibull(rng, shape, scale, n):
    # stationary residual life: length-biased draw times a uniform fraction
    y = rng.gamma(1 + 1 / shape, 1.0, size=n)
    return rng.random(n) * scale * y ** (1 / shape)


def _assemble(spec: TraceSpec, rng, draw_sessions, draw_residuals, rate) -> ChurnTrace:
    n_init = spec.initial_population
    horizon = spec.duration
    residual = draw_residuals(n_init)
    n_arr = int(rng.poisson(rate * horizon)) if horizon > 0 else 0
    arrivals = np.sort(rng.uniform(0.0, horizon, size=n_arr)) if n_arr else np.empty(0)
    sessions = draw_sessions(n_arr)

    # (time, order, id, is_join); order breaks exact ties deterministically
    times = np.concatenate([residual, arrivals, arrivals + sessions])
    ids = np.concatenate([np.arange(n_init), n_init + np.arange(n_arr), n_init + np.arange(n_arr)])
    is_join = np.concatenate([np.zeros(n_init, bool), np.ones(n_arr, bool), np.zeros(n_arr, bool)])
    keep = times <= horizon
    times, ids, is_join = times[keep], ids[keep], is_join[keep]
    order = np.lexsort((~is_join, times))
    times, ids, is_join = times[order], ids[order], is_join[order]

    initial = [Identity(i, Kind.GOOD, 0.0) for i in range(n_init)]
    return _enforce_floor_and_rate(spec, initial, times.tolist(), ids.tolist(), is_join.tolist())


def _enforce_floor_and_rate(spec, initial, times, ids, is_join) -> ChurnTrace:
    """Defer departures that would break the n0 floor or the per-round cap."""
    eps = Fraction(spec.epsilon).limit_denominator(10**6)
    round_len = spec.round_len
    alive = len(initial)
    deferred: list[tuple[float, int, int]] = []
    seq = 0
    events: list[Event] = []
    suppressed = staggered = 0
    cur_round, round_start_pop, round_departs = None, alive, 0
    present = {ident.uid for ident in initial}
    last_t = 0.0
    i, n = 0, len(times)
    limit = spec.max_events
    while i < n or deferred:
        if limit is not None and len(events) >= limit:
            break
        if deferred and (i >= n or deferred[0][0] < times[i]):
            t, _, uid = heapq.heappop(deferred)
            join = False
        else:
            t, uid, join = times[i], ids[i], is_join[i]
            i += 1
        if t > spec.duration:
            continue
        r = math.floor(t / round_len)
        if r != cur_round:
            cur_round, round_start_pop, round_departs = r, alive, 0
        if not join:
            if uid not in present:
                continue
            cap = (round_start_pop * eps.numerator) // eps.denominator
            if alive - 1 < spec.n0:
                suppressed += 1
                heapq.heappush(deferred, (t + round_len, seq, uid))
                seq += 1
                continue
            if round_departs + 1 > cap:
                staggered += 1
                heapq.heappush(deferred, (t + round_len, seq, uid))
                seq += 1
                continue
            round_departs += 1
            alive -= 1
            present.remove(uid)
        else:
            alive += 1
            present.add(uid)
        if t <= last_t:
            t = math.nextafter(last_t, math.inf)
        last_t = t
        if join:
            events.append(Event(t, Join(Identity(uid, Kind.GOOD, t))))
        else:
            events.append(Event(t, Depart(uid)))
    end = spec.duration if limit is None or len(events) < limit else last_t
    return ChurnTrace(events, initial, end_time=end, suppressed=suppressed, staggered=staggered)


def generate_weibull_trace(spec: TraceSpec, rng: np.random.Generator | None = None) -> ChurnTrace:
    spec.validate()
    src = spec.source
    if not isinstance(src, WeibullSource):
        raise ConfigError("generate_weibull_trace needs a Weibull source")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    scale = src.scale_hours * HOUR
    rate = spec.initial_population / src.mean_session_s
    return _assemble(
        spec,
        rng,
        lambda n: draw_sessions(src, rng, n),
        lambda n: _residual_weibull(rng, src.shape, scale, n),
        rate,
    )


def generate_exponential_trace(spec: TraceSpec, rng: np.random.Generator | None = None) -> ChurnTrace:
    spec.validate()
    src = spec.source
    if not isinstance(src, ExponentialSource):
        raise ConfigError("generate_exponential_trace needs an exponential source")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    # exponential sessions are memoryless, so residuals share the session law
    return _assemble(
        spec,
        rng,
        lambda n: draw_sessions(src, rng, n),
        lambda n: draw_sessions(src, rng, n),
        src.arrival_rate_per_s,
    )


def generate_trace(spec: TraceSpec) -> ChurnTrace:
    src = spec.source
    if isinstance(src, FileSource):
        trace = ingest_trace_file(src.path, limit=spec.max_events, initial_until=src.initial_until)
        alive = len(trace.initial_ids)
        for ev in trace.events:
            alive += 1 if ev.is_join else -1
            if alive < spec.n0:
                raise TraceError(f"good population {alive} below n0={spec.n0} at t={ev.time}")
        if spec.duration:
            trace.events = [ev for ev in trace.events if ev.time <= spec.duration]
            trace.end_time = spec.duration
        return trace
    if isinstance(src, WeibullSource):
        return generate_weibull_trace(spec)
    return generate_exponential_trace(spec)


def export_trace(trace: ChurnTrace, path) -> None:
    """Write a trace in the ingestible CSV format; initial IDs appear as joins at 0."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "event", "id"])
        for ident in trace.initial_ids:
            w.writerow([0, "join", ident.uid])
        for ev in trace.events:
            if ev.is_join:
                w.writerow([repr(ev.time), "join", ev.payload.identity.uid])
            else:
                w.writerow([repr(ev.time), "depart", ev.payload.uid])
