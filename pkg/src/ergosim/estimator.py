"""GoodJEst join-rate estimator.

The snapshot S(t_last) is never copied.  Uids are issued from a monotone
counter and never reused, so a current member belongs to the snapshot exactly
when its uid is below the watermark recorded at t_last.  Two counters then
give the symmetric difference:

* ``added``: members present now that were not in the snapshot
* ``removed``: snapshot members that have since left
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import Depart, Event, Join, Kind, SystemView
from .errors import EmptySystem, Uninitialized, ZeroElapsed

TRIGGER_NUM, TRIGGER_DEN = 5, 8


@dataclass(frozen=True)
class IntervalRecord:
    index: int
    start: float
    end: float
    size_at_end: int
    estimate_set: float
    true_good_join_rate: float


@dataclass
class EstimatorState:
    t_last: float | None = None
    estimate: float | None = None
    interval_index: int = 0
    watermark: int = 0
    snapshot_size: int = 0
    added: int = 0
    removed: int = 0
    good_joins: int = 0
    intervals: list = field(default_factory=list)

    @property
    def initialized(self) -> bool:
        return self.estimate is not None

    @property
    def delta(self) -> int:
        return self.added + self.removed

    def note_join(self, uid: int, good: bool = True) -> None:
        if uid >= self.watermark:
            self.added += 1
        if good:
            self.good_joins += 1

    def note_depart(self, uid: int) -> None:
        if uid < self.watermark:
            self.removed += 1
        else:
            self.added -= 1

    def note_bulk_join(self, count: int) -> None:
        self.added += count

    def note_bulk_depart(self, old: int, new: int) -> None:
        """``old`` leavers were snapshot members, ``new`` joined after it."""
        self.removed += old
        self.added -= new

    @staticmethod
    def threshold(size: int) -> int:
        return -((-TRIGGER_NUM * size) // TRIGGER_DEN)

    def triggered(self, size: int) -> bool:
        return self.delta >= self.threshold(size)

    def joins_until_trigger(self, size: int) -> int:
        """Fewest further fresh joins (no other events) that fire the trigger.

        Each fresh join adds one to both the difference and the size, so the
        condition 8(d + i) >= 5(s + i) reduces to 3i >= 5s - 8d.
        """
        need = TRIGGER_NUM * size - TRIGGER_DEN * self.delta
        return max(1, -(-need // (TRIGGER_DEN - TRIGGER_NUM)))

    def update(self, now: float, size: int, watermark: int) -> IntervalRecord:
        if self.t_last is None:
            raise Uninitialized("estimator used before initialization")
        elapsed = now - self.t_last
        if elapsed <= 0:
            raise ZeroElapsed(f"interval trigger with zero elapsed time at {now}")
        new = size / elapsed
        if new > 0:
            self.estimate = new
        rec = IntervalRecord(self.interval_index, self.t_last, now, size, self.estimate, self.good_joins / elapsed)
        self.intervals.append(rec)
        self.t_last = now
        self.interval_index += 1
        self.watermark = watermark
        self.snapshot_size = size
        self.added = self.removed = self.good_joins = 0
        return rec


def init_estimator(view: SystemView, init_duration: float, watermark: int | None = None) -> EstimatorState:
    size = view.size
    if size == 0:
        raise EmptySystem("cannot initialize the estimator on an empty system")
    if init_duration <= 0:
        raise ValueError("init_duration must be positive")
    if watermark is None:
        watermark = max(view.members) + 1
    return EstimatorState(
        t_last=view.now,
        estimate=size / init_duration,
        watermark=watermark,
        snapshot_size=size,
    )


def on_membership_change(st: EstimatorState, view: SystemView, ev: Event) -> tuple[EstimatorState, bool]:
    """Fold one applied event into the counters, then test the trigger."""
    if not st.initialized:
        raise Uninitialized("estimator used before initialization")
    if isinstance(ev.payload, Join):
        ident = ev.payload.identity
        st.note_join(ident.uid, good=ident.kind is Kind.GOOD)
    elif isinstance(ev.payload, Depart):
        st.note_depart(ev.payload.uid)
    size = view.size
    if st.triggered(size):
        st.update(view.now, size, watermark=max(st.watermark, _next_uid(view)))
        return st, True
    return st, False


def _next_uid(view: SystemView) -> int:
    return max(view.members, default=-1) + 1


def current_estimate(st: EstimatorState) -> float:
    if not st.initialized:
        raise Uninitialized("no estimate before initialization")
    return st.estimate
