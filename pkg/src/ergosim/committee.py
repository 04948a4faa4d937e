"""Committee election at iteration ends and the committee audit."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

from .core import SystemView
from .errors import TooSmall

DEFAULT_C = 32
MIN_GOOD = Fraction(7, 8)
MIN_SIZE = Fraction(7, 9)


def target_size(system_size: int, C: int = DEFAULT_C) -> int:
    if system_size < 2:
        return 1
    return max(1, math.ceil(C * math.log2(system_size)))


@dataclass
class CommitteeState:
    members: set = field(default_factory=set)
    bad_seats: int = 0
    elected_at_iteration: int = 0
    target_size: int = 1
    C: int = DEFAULT_C

    @property
    def size(self) -> int:
        return len(self.members) + self.bad_seats


@dataclass(frozen=True)
class CommitteeAudit:
    iteration: int
    size: int
    good_fraction: float
    size_ok: bool
    majority_ok: bool


def elect_committee(view: SystemView, C: int = DEFAULT_C, rng=None, iteration: int = 0) -> CommitteeState:
    """Sample seats uniformly without replacement from the visible membership.

    The sampler only sees positions in the member list; bad IDs sit after the
    sorted good IDs, and a bad seat is tracked by count since bad IDs never
    depart outside purges.
    """
    n = view.size
    target = target_size(n, C)
    if n < target:
        raise TooSmall(f"{n} members cannot fill a committee of {target}")
    good = sorted(view.good_members)
    picks = rng.choice(n, size=target, replace=False)
    members = {good[p] for p in picks if p < len(good)}
    return CommitteeState(members, target - len(members), iteration, target, C)


def committee_departure(cs: CommitteeState, departed_uid) -> CommitteeState:
    cs.members.discard(departed_uid)
    return cs


def audit_committee(cs: CommitteeState, view: SystemView | None = None, iteration: int | None = None) -> CommitteeAudit:
    size = cs.size
    good = len(cs.members)
    frac = good / size if size else 0.0
    size_ok = size > 0 and MIN_SIZE * cs.target_size <= size <= cs.target_size
    majority_ok = size > 0 and good * MIN_GOOD.denominator >= size * MIN_GOOD.numerator
    it = cs.elected_at_iteration if iteration is None else iteration
    return CommitteeAudit(it, size, frac, bool(size_ok), bool(majority_ok))
