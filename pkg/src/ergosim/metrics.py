"""Epoch detection, smoothness measurement, spend rates and audit monitors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import CostLedger, Event, Join
from .errors import InsufficientData, InsufficientEpochs, ZeroRate

EPOCH_NUM, EPOCH_DEN = 3, 4
ENVELOPE_LOW = 418
ENVELOPE_HIGH = 267


@dataclass(frozen=True)
class EpochRecord:
    index: int
    start: float
    end: float
    good_joins: int
    rho: float
    partial: bool = False
    good_departs: int = 0


@dataclass(frozen=True)
class SmoothnessEstimate:
    alpha: float
    beta: float
    window_lengths_sampled: tuple


@dataclass(frozen=True)
class SpendRates:
    good_spend_rate_A: float
    adversary_spend_rate_T: float
    good_entrance_rate: float
    good_purge_rate: float
    good_periodic_rate: float


@dataclass(frozen=True)
class RatioSample:
    time: float
    estimate: float
    true_rho: float
    ratio: float


@dataclass
class RunMetrics:
    good_spend_rate_A: float = 0.0
    adversary_spend_rate_T: float = 0.0
    max_bad_fraction: float = 0.0
    estimate_ratio_series: list = field(default_factory=list)
    suppressed_departures: int = 0


def _as_tuple(ev):
    if isinstance(ev, Event):
        if isinstance(ev.payload, Join):
            return ev.time, True, ev.payload.identity.uid
        return ev.time, False, ev.payload.uid
    return ev


def detect_epochs(good_events, initial_good, start: float = 0.0, end: float | None = None) -> list[EpochRecord]:
    """Split a good-ID event stream into epochs.

    An epoch closes at the first event where the good set differs from the
    epoch-start good set in at least ceil(3/4 * start size) IDs.
    """
    current = set(initial_good)
    base = frozenset(current)
    need = max(1, -(-EPOCH_NUM * len(base) // EPOCH_DEN))
    added = removed = joins = departs = 0
    epochs: list[EpochRecord] = []
    t0 = start
    last = start
    for ev in good_events:
        t, is_join, uid = _as_tuple(ev)
        last = t
        if is_join:
            current.add(uid)
            joins += 1
            if uid not in base:
                added += 1
        else:
            current.discard(uid)
            departs += 1
            if uid in base:
                removed += 1
            else:
                added -= 1
        if added + removed >= need:
            dur = t - t0
            epochs.append(EpochRecord(len(epochs), t0, t, joins, joins / dur if dur > 0 else 0.0, False, departs))
            base = frozenset(current)
            need = max(1, -(-EPOCH_NUM * len(base) // EPOCH_DEN))
            added = removed = joins = departs = 0
            t0 = t
    stop = max(last, t0) if end is None else max(end, t0)
    dur = stop - t0
    epochs.append(EpochRecord(len(epochs), t0, stop, joins, joins / dur if dur > 0 else 0.0, True, departs))
    return epochs


def alpha_with_skips(epochs) -> tuple[float, int]:
    complete = [e for e in epochs if not e.partial]
    if len(complete) < 2:
        raise InsufficientEpochs(f"need two complete epochs, have {len(complete)}")
    alpha, skipped = 1.0, 0
    for prev, cur in zip(complete, complete[1:]):
        if prev.rho == 0 or cur.rho == 0:
            skipped += 1
            continue
        alpha = max(alpha, cur.rho / prev.rho, prev.rho / cur.rho)
    if skipped == len(complete) - 1:
        raise ZeroRate("every consecutive epoch pair has a zero-rate epoch")
    return alpha, skipped


def estimate_alpha(epochs) -> float:
    return alpha_with_skips(epochs)[0]


def default_window_grid(epoch_len: float, count: int = 8) -> list[float]:
    top = epoch_len / 4
    if top <= 1.0:
        return [top] if top > 0 else []
    return [float(x) for x in np.geomspace(1.0, top, count)]


def _smallest_above(bound: float, ok) -> float:
    """Smallest float found above ``bound`` that satisfies ``ok``."""
    x = bound
    step = max(abs(bound), 1e-300) * 1e-15
    while not ok(x):
        x = x + step if x + step > x else math.nextafter(x, math.inf)
        step *= 2
    return x


def beta_for_window(length: float, rho: float, min_joins: int, max_joins: int, max_departs: int) -> float:
    """Smallest beta meeting the three window inequalities for one window length."""
    lr = length * rho
    need = 1.0
    if math.floor(lr) > min_joins:
        need = max(need, _smallest_above(lr / (min_joins + 1), lambda b: math.floor(lr / b) <= min_joins))
    for top in (max_joins, max_departs):
        if math.ceil(lr) < top:
            if lr == 0:
                return math.inf
            need = max(need, _smallest_above((top - 1) / lr, lambda b, top=top: math.ceil(b * lr) >= top))
    return need


def _max_count(times: np.ndarray, starts: np.ndarray, length: float) -> int:
    """Largest count over windows [s, s + length) for the given starts."""
    if not len(starts):
        return 0
    return int((np.searchsorted(times, starts + length, side="left") - np.searchsorted(times, starts, side="left")).max())


def window_counts(epoch: EpochRecord, join_times: np.ndarray, depart_times: np.ndarray, length: float):
    """(min joins, max joins, max departures) over windows of ``length`` inside the epoch.

    Maxima are attained by windows starting at an event or ending at the
    epoch end.  The join count only
    drops when the start passes a join, so the minimum is either the window
    at the epoch start or one starting just after a join t, which covers
    (t, t + length].
    """
    last_start = epoch.end - length
    j = join_times[(join_times >= epoch.start) & (join_times < epoch.end)]
    d = depart_times[(depart_times >= epoch.start) & (depart_times < epoch.end)]
    # the window flush with the epoch end also has to be tried
    edges = np.array([epoch.start, max(epoch.start, last_start)])
    max_j = _max_count(j, np.concatenate((edges, j[j <= last_start])), length)
    max_d = _max_count(d, np.concatenate((edges, d[d <= last_start])), length)
    min_j = int(np.searchsorted(j, epoch.start + length, side="left"))
    after = j[j < last_start]
    if len(after):
        lo = np.searchsorted(j, after + length, side="right") - np.searchsorted(j, after, side="right")
        min_j = min(min_j, int(lo.min()))
    return min_j, max_j, max_d


def _split_events(good_events):
    joins, departs = [], []
    for ev in good_events:
        t, is_join, _ = _as_tuple(ev)
        (joins if is_join else departs).append(t)
    return np.asarray(joins, float), np.asarray(departs, float)


def estimate_beta(epochs, good_events, window_grid=None) -> float:
    return measure_beta(epochs, good_events, window_grid)[0]


def measure_beta(epochs, good_events, window_grid=None) -> tuple[float, list[float]]:
    complete = [e for e in epochs if not e.partial and e.end > e.start and e.rho > 0]
    if not complete:
        raise InsufficientData("no complete epoch with a positive join rate")
    if window_grid is not None and not len(window_grid):
        raise InsufficientData("window grid is empty")
    joins, departs = _split_events(good_events)
    beta = 1.0
    sampled: list[float] = []
    for ep in complete:
        grid = default_window_grid(ep.end - ep.start) if window_grid is None else window_grid
        for length in grid:
            if not 0 < length <= ep.end - ep.start:
                continue
            sampled.append(float(length))
            min_j, max_j, max_d = window_counts(ep, joins, departs, length)
            beta = max(beta, beta_for_window(length, ep.rho, min_j, max_j, max_d))
    if not sampled:
        raise InsufficientData("no grid length fits inside any epoch")
    return beta, sampled


def measure_smoothness(epochs, good_events, window_grid=None) -> SmoothnessEstimate:
    alpha = estimate_alpha(epochs)
    beta, sampled = measure_beta(epochs, good_events, window_grid)
    return SmoothnessEstimate(alpha, beta, tuple(sampled))


def compute_spend_rates(ledger: CostLedger, horizon: float) -> SpendRates:
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    return SpendRates(
        ledger.good_total / horizon,
        ledger.adversary_total / horizon,
        ledger.good_entrance / horizon,
        ledger.good_purge / horizon,
        ledger.good_periodic / horizon,
    )


def ratio_envelope(alpha: float, beta: float) -> tuple[float, float]:
    return 1.0 / (ENVELOPE_LOW * alpha**4 * beta**3), ENVELOPE_HIGH * alpha**4 * beta**5


def count_envelope_violations(ratio_series, alpha: float, beta: float) -> int:
    lo, hi = ratio_envelope(alpha, beta)
    count = 0
    for sample in ratio_series:
        r = sample.ratio if isinstance(sample, RatioSample) else sample[-1]
        if not lo <= r <= hi:
            count += 1
    return count


def epoch_at(epochs, t: float):
    """Epoch whose [start, end) holds ``t``; the last epoch also owns its end."""
    lo, hi = 0, len(epochs) - 1
    if not epochs or t < epochs[0].start:
        return None
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if epochs[mid].start <= t:
            lo = mid
        else:
            hi = mid - 1
    ep = epochs[lo]
    if t < ep.end or (lo == len(epochs) - 1 and t <= ep.end):
        return ep
    return None


def ratio_series(intervals, epochs) -> list[RatioSample]:
    """J~ / rho at every estimate update, rho taken from the enclosing epoch."""
    out = []
    for rec in intervals:
        ep = epoch_at(epochs, rec.end)
        if ep is None:
            continue
        rho = ep.rho
        ratio = rec.estimate_set / rho if rho > 0 else math.inf
        out.append(RatioSample(rec.end, rec.estimate_set, rho, ratio))
    return out


class SubIntervalMonitor:
    """Checks bad joins against floor(sqrt(2 * spend)) per cost-window slice."""

    def __init__(self):
        self.key = None
        self.bad = 0
        self.spend = 0
        self.checked = 0
        self.violations: list[dict] = []

    def observe(self, key, bad_joins: int, spend: int, now: float) -> None:
        if key != self.key:
            self.close(now)
            self.key = key
        self.bad += bad_joins
        self.spend += spend

    def close(self, now: float) -> None:
        if self.key is not None and (self.bad or self.spend):
            self.checked += 1
            if self.bad > math.isqrt(2 * self.spend):
                self.violations.append(
                    {"time": now, "slice": self.key, "bad_joins": self.bad, "spend": self.spend}
                )
        self.key = None
        self.bad = self.spend = 0
