"""ERGO admission and purge logic, with the optional heuristics H1-H4."""

from __future__ import annotations

import bisect
import enum
import math
from dataclasses import dataclass, field

from .core import CostLedger, Event, Identity, Join, Kind, SystemView, apply_event
from .errors import BadEstimate, ConfigError, DuplicateID

PURGE_DIVISOR = 11
# one-in-six bad fraction that the population invariant must stay under
INVARIANT_DEN = 6


class Heuristic(enum.Enum):
    H1_ALIGN_ESTIMATE = "h1"
    H2_SYMMETRIC_DIFF_PURGE = "h2"
    H3_INVARIANT_PURGE = "h3"
    H4_CLASSIFIER = "h4"


@dataclass(frozen=True)
class DefensePolicy:
    heuristics: frozenset = frozenset()
    classifier_accuracy: float | None = None
    window_truncate_at_iteration: bool = True
    # constant entrance cost of 1 turns ERGO into CCom
    constant_entrance_cost: bool = False
    # refused IDs have already solved their entrance challenge when the
    # classifier runs, so a refusal costs the joiner the entrance cost
    refusal_after_challenge: bool = False
    name: str = "ergo"

    def __post_init__(self):
        h4 = Heuristic.H4_CLASSIFIER in self.heuristics
        if h4 != (self.classifier_accuracy is not None):
            raise ConfigError("classifier_accuracy must be set exactly when H4 is enabled")
        if h4 and not 0.5 <= self.classifier_accuracy <= 1.0:
            raise ConfigError("classifier_accuracy must lie in [0.5, 1]")

    def has(self, h: Heuristic) -> bool:
        return h in self.heuristics


ERGO = DefensePolicy(name="ergo")
ERGO_CH1 = DefensePolicy(
    frozenset({Heuristic.H1_ALIGN_ESTIMATE, Heuristic.H2_SYMMETRIC_DIFF_PURGE}), name="ergo-ch1"
)
ERGO_CH2 = DefensePolicy(ERGO_CH1.heuristics | {Heuristic.H3_INVARIANT_PURGE}, name="ergo-ch2")
CCOM = DefensePolicy(constant_entrance_cost=True, name="ccom")


def ergo_sf(accuracy: float) -> DefensePolicy:
    return DefensePolicy(
        ERGO_CH2.heuristics | {Heuristic.H4_CLASSIFIER},
        classifier_accuracy=accuracy,
        refusal_after_challenge=True,
        name=f"ergo-sf{round(accuracy * 100)}",
    )


class JoinWindow:
    """Join timestamps with multiplicities, counted over a trailing window."""

    def __init__(self):
        self._t: list[float] = []
        self._cum: list[int] = []
        self._lo = 0
        self._dropped = 0

    def __len__(self) -> int:
        return self.total

    @property
    def total(self) -> int:
        return self._cum[-1] if self._cum else self._dropped

    def append(self, t: float, count: int = 1) -> None:
        if self._t and t < self._t[-1]:
            raise ValueError("join log must stay time-ordered")
        self._t.append(t)
        self._cum.append(self.total + count)

    def _cum_before(self, i: int) -> int:
        return self._cum[i - 1] if i > 0 else self._dropped

    def count_after(self, lo: float) -> int:
        """Joins strictly later than ``lo``."""
        i = bisect.bisect_right(self._t, lo, self._lo)
        return self.total - self._cum_before(i)

    def first_after(self, lo: float) -> float | None:
        i = bisect.bisect_right(self._t, lo, self._lo)
        return self._t[i] if i < len(self._t) else None

    def prune(self, lo: float) -> None:
        """Forget entries at or before ``lo``; they can no longer be counted."""
        self._lo = bisect.bisect_right(self._t, lo, self._lo)
        if self._lo > 4096 and self._lo * 2 > len(self._t):
            self._dropped = self._cum[self._lo - 1]
            del self._t[: self._lo]
            del self._cum[: self._lo]
            self._lo = 0

    def clear(self) -> None:
        self._t.clear()
        self._cum.clear()
        self._lo = 0
        self._dropped = 0

    def times(self) -> list[float]:
        return self._t[self._lo :]


@dataclass(frozen=True)
class IterationRecord:
    index: int
    start: float
    end: float
    size_at_tau: int
    joins: int
    departs: int
    purge_cost: int
    entrance_cost_good: int
    entrance_cost_bad: int


@dataclass
class IterationState:
    tau: float = 0.0
    size_at_tau: int = 0
    joins: int = 0
    departs: int = 0
    join_log: JoinWindow = field(default_factory=JoinWindow)
    iteration_index: int = 0
    # H2 bookkeeping against S(tau), same watermark scheme as the estimator
    watermark: int = 0
    added: int = 0
    removed: int = 0
    # H3: bound on bad IDs carried over from the previous purge
    carry_bound: int = 0
    entrance_good: int = 0
    entrance_bad: int = 0
    estimate_pending: bool = False

    @classmethod
    def open(cls, now: float, size: int, watermark: int, kappa: float = 0.0) -> "IterationState":
        return cls(tau=now, size_at_tau=size, watermark=watermark, carry_bound=math.floor(kappa * size))

    @property
    def threshold(self) -> int:
        return -(-self.size_at_tau // PURGE_DIVISOR)

    @property
    def delta(self) -> int:
        return self.added + self.removed

    def note_join(self, uid: int, t: float, count: int = 1) -> None:
        self.joins += count
        self.added += count
        self.join_log.append(t, count)

    def note_departure(self, uid: int) -> None:
        self.departs += 1
        if uid < self.watermark:
            self.removed += 1
        else:
            self.added -= 1

    def note_eviction(self, old: int, new: int) -> None:
        self.removed += old
        self.added -= new


def entrance_cost(it: IterationState, now: float, estimate: float, policy: DefensePolicy = ERGO) -> int:
    """1 plus the joins logged in the trailing 1/estimate seconds."""
    if policy.constant_entrance_cost:
        return 1
    if not estimate > 0:
        raise BadEstimate(f"estimate must be positive, got {estimate}")
    return 1 + it.join_log.count_after(now - 1.0 / estimate)


def purge_signal(it: IterationState, policy: DefensePolicy) -> bool:
    if policy.has(Heuristic.H2_SYMMETRIC_DIFF_PURGE):
        return it.delta >= it.threshold
    return it.joins + it.departs >= it.threshold


def joins_until_signal(it: IterationState, policy: DefensePolicy) -> int:
    """Fresh joins needed (with no other events) before the purge signal fires."""
    have = it.delta if policy.has(Heuristic.H2_SYMMETRIC_DIFF_PURGE) else it.joins + it.departs
    return max(1, it.threshold - have)


def bad_join_bound(it: IterationState, now: float, estimate: float) -> int:
    """Upper bound on bad joins so far: joins in excess of the estimated good rate."""
    excess = math.ceil(it.joins - (now - it.tau) * estimate)
    return min(max(excess, 0), it.joins)


def worst_bad(it: IterationState, now: float, estimate: float) -> int:
    return it.carry_bound + bad_join_bound(it, now, estimate)


def invariant_at_risk(it: IterationState, size: int, now: float, estimate: float,
                      lookahead: int | None = None) -> bool:
    """True when the next ``lookahead`` changes could reach a 1/6 bad fraction.

    The default lookahead is one full iteration opened at ``size``, so a
    skipped purge stays safe until the following trigger.  The worst case
    over a mix of bad joins and good departures sits at one of the two pure
    extremes.
    """
    if lookahead is None:
        lookahead = -(-size // PURGE_DIVISOR)
    worst = worst_bad(it, now, estimate)
    return (INVARIANT_DEN * (worst + lookahead) >= size + lookahead
            or INVARIANT_DEN * worst >= size - lookahead)


def should_purge(it: IterationState, size: int, now: float, estimate: float, policy: DefensePolicy) -> bool:
    if not purge_signal(it, policy):
        return False
    if policy.has(Heuristic.H3_INVARIANT_PURGE):
        return invariant_at_risk(it, size, now, estimate)
    return True


def classify_refuses(identity: Identity, policy: DefensePolicy, rng) -> bool:
    """Bernoulli classifier: correct label with probability classifier_accuracy."""
    if not policy.has(Heuristic.H4_CLASSIFIER):
        return False
    correct = rng.random() < policy.classifier_accuracy
    return (identity.kind is Kind.BAD) == correct


def admit(it: IterationState, view: SystemView, identity: Identity, estimate: float,
          ledger: CostLedger, policy: DefensePolicy, rng, now: float | None = None,
          estimator=None) -> tuple[bool, int]:
    """Run one join through the classifier and the entrance challenge."""
    if identity.uid in view.good_members or identity.uid in view.bad_members:
        raise DuplicateID(f"uid {identity.uid} is already a member")
    now = identity.joined_at if now is None else now
    cost = entrance_cost(it, now, estimate, policy)
    good = identity.kind is Kind.GOOD
    admitted = not classify_refuses(identity, policy, rng)
    if not admitted:
        charged = cost if policy.refusal_after_challenge else 0
    else:
        charged = cost
        apply_event(view, Event(now, Join(identity)))
        it.note_join(identity.uid, now)
        if estimator is not None:
            estimator.note_join(identity.uid, good=good)
    if good:
        ledger.good_entrance += charged
        it.entrance_good += charged
    else:
        ledger.adversary_total += charged
        it.entrance_bad += charged
    return admitted, charged


@dataclass(frozen=True)
class PurgeOutcome:
    time: float
    survivors: int
    good_cost: int
    adversary_retained: int
    retained_uids: frozenset
    iteration: IterationRecord


def maybe_purge(it: IterationState, view: SystemView, ledger: CostLedger, policy: DefensePolicy,
                respond=None, estimator=None, kappa: float = 1 / 18, rng=None,
                next_uid: int | None = None, exempt: int = 0) -> tuple[IterationState, PurgeOutcome | None]:
    """Purge if the iteration trigger fires; returns the (possibly new) iteration.

    Under H3 a trigger that is not at risk closes the iteration without a
    purge (the returned outcome is None but the iteration is new).

    ``respond`` is a callable ``(purge_size, bad_roster) -> retained uids``
    supplied by the adversary.  ``exempt`` bad IDs (lowest uids) are a static
    background that never has to re-solve.
    """
    now = view.now
    est = estimator.estimate if estimator is not None else 1.0
    if not purge_signal(it, policy):
        return it, None
    if not should_purge(it, view.size, now, est, policy):
        return skip_purge(it, view, estimator, next_uid, est), None
    return purge(it, view, ledger, policy, respond, estimator, kappa, next_uid, exempt)


def purge(it, view, ledger, policy, respond=None, estimator=None, kappa=1 / 18,
          next_uid=None, exempt=0):
    now = view.now
    purge_size = view.size
    good_cost = len(view.good_members)
    ledger.good_purge += good_cost
    bad = view.bad_members
    retained = frozenset(respond(purge_size, bad)) if respond is not None else frozenset()
    if estimator is not None:
        w = estimator.watermark
        old_before, total_before = bad.count_below(w), len(bad)
    bad.keep_only(retained, prefix=exempt)
    if estimator is not None:
        old_after = bad.count_below(w)
        new_gone = (total_before - old_before) - (len(bad) - old_after)
        estimator.note_bulk_depart(old_before - old_after, new_gone)
    if next_uid is None:
        next_uid = max(view.members, default=-1) + 1
    if estimator is not None and it.estimate_pending:
        h1_align_estimate(estimator, it, now, view.size, next_uid)
    record = IterationRecord(
        it.iteration_index, it.tau, now, it.size_at_tau, it.joins, it.departs,
        good_cost, it.entrance_good, it.entrance_bad,
    )
    new_it = IterationState.open(now, view.size, next_uid)
    new_it.carry_bound = math.floor(kappa * purge_size)
    new_it.iteration_index = it.iteration_index + 1
    if policy.window_truncate_at_iteration:
        it.join_log.clear()
    new_it.join_log = it.join_log
    outcome = PurgeOutcome(now, view.size, good_cost, len(retained), retained, record)
    return new_it, outcome


def skip_purge(it: IterationState, view: SystemView, estimator=None, next_uid: int | None = None,
               estimate: float | None = None) -> IterationState:
    """Close an iteration whose purge H3 held back.

    Nobody pays; the worst-case bad count moves into the next iteration's
    carry so the bound stays sound.  The join log is kept, so entrance costs
    do not drop at a skipped purge.
    """
    now = view.now
    if estimate is None:
        estimate = estimator.estimate if estimator is not None else 1.0
    carry = worst_bad(it, now, estimate)
    if next_uid is None:
        next_uid = max(view.members, default=-1) + 1
    if estimator is not None and it.estimate_pending:
        h1_align_estimate(estimator, it, now, view.size, next_uid)
    new_it = IterationState.open(now, view.size, next_uid)
    new_it.carry_bound = carry
    new_it.iteration_index = it.iteration_index + 1
    new_it.join_log = it.join_log
    return new_it


def h1_align_estimate(estimator, it: IterationState, now: float, size: int, watermark: int):
    """Apply a deferred interval update at the purge that ends the iteration."""
    if it.estimate_pending:
        estimator.update(now, size, watermark)
        it.estimate_pending = False
    return estimator
