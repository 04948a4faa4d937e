"""Shared domain types: identities, serialized events, membership and cost ledgers."""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigError, DuplicateID, FloorViolation, StaleEvent, UnknownDeparture


class Kind(enum.Enum):
    GOOD = "good"
    BAD = "bad"


@dataclass(frozen=True)
class Identity:
    uid: int
    kind: Kind
    joined_at: float = 0.0


@dataclass(frozen=True)
class Join:
    identity: Identity


@dataclass(frozen=True)
class Depart:
    uid: int


@dataclass(frozen=True)
class Event:
    time: float
    payload: Join | Depart

    @property
    def is_join(self) -> bool:
        return isinstance(self.payload, Join)


class BadRoster:
    """Bad IDs stored as sorted runs of consecutive uids.

    Adversary batches arrive as long runs of consecutive uids, so a run list
    keeps membership exact without one set entry per ID.
    """

    def __init__(self, uids=()):
        self._starts: list[int] = []
        self._counts: list[int] = []
        self._size = 0
        for uid in sorted(uids):
            self.add(uid)

    def __len__(self) -> int:
        return self._size

    def __bool__(self) -> bool:
        return self._size > 0

    def __iter__(self):
        for start, count in zip(self._starts, self._counts):
            yield from range(start, start + count)

    def __contains__(self, uid) -> bool:
        i = bisect.bisect_right(self._starts, uid) - 1
        return i >= 0 and uid < self._starts[i] + self._counts[i]

    def runs(self) -> list[tuple[int, int]]:
        return list(zip(self._starts, self._counts))

    def add(self, uid: int) -> None:
        self.add_range(uid, 1)

    def add_range(self, start: int, count: int) -> None:
        if count <= 0:
            return
        if not self._starts:
            self._starts.append(start)
            self._counts.append(count)
            self._size += count
            return
        if start >= self._starts[-1] + self._counts[-1]:
            if start == self._starts[-1] + self._counts[-1]:
                self._counts[-1] += count
            else:
                self._starts.append(start)
                self._counts.append(count)
            self._size += count
            return
        for uid in range(start, start + count):
            self._insert_one(uid)

    def _insert_one(self, uid: int) -> None:
        if uid in self:
            raise DuplicateID(f"bad uid {uid} already present")
        i = bisect.bisect_right(self._starts, uid)
        self._starts.insert(i, uid)
        self._counts.insert(i, 1)
        self._size += 1
        # merge with neighbours so runs stay maximal
        if i + 1 < len(self._starts) and self._starts[i + 1] == uid + 1:
            self._counts[i] += self._counts.pop(i + 1)
            self._starts.pop(i + 1)
        if i > 0 and self._starts[i - 1] + self._counts[i - 1] == uid:
            self._counts[i - 1] += self._counts.pop(i)
            self._starts.pop(i)

    def remove(self, uid: int) -> None:
        i = bisect.bisect_right(self._starts, uid) - 1
        if i < 0 or uid >= self._starts[i] + self._counts[i]:
            raise UnknownDeparture(uid)
        start, count = self._starts[i], self._counts[i]
        left = uid - start
        right = start + count - uid - 1
        if left and right:
            self._counts[i] = left
            self._starts.insert(i + 1, uid + 1)
            self._counts.insert(i + 1, right)
        elif left:
            self._counts[i] = left
        elif right:
            self._starts[i] = uid + 1
            self._counts[i] = right
        else:
            del self._starts[i]
            del self._counts[i]
        self._size -= 1

    def clear(self) -> None:
        self._starts.clear()
        self._counts.clear()
        self._size = 0

    def count_below(self, watermark: int) -> int:
        """Number of stored uids strictly below ``watermark``."""
        total = 0
        for start, count in zip(self._starts, self._counts):
            if start >= watermark:
                break
            total += min(count, watermark - start)
        return total

    def uids_at(self, positions) -> list[int]:
        """Map positions in sorted order (0 .. len-1) to uids."""
        if not len(positions):
            return []
        cum = np.cumsum(self._counts)
        pos = np.asarray(positions, dtype=np.int64)
        run = np.searchsorted(cum, pos, side="right")
        before = np.concatenate(([0], cum[:-1]))[run]
        starts = np.asarray(self._starts, dtype=np.int64)[run]
        return [int(u) for u in starts + (pos - before)]

    def keep_only(self, uids, prefix: int = 0) -> None:
        """Keep the ``prefix`` lowest uids plus the given ones; drop the rest."""
        starts, counts = [], []
        need = prefix
        for start, count in zip(self._starts, self._counts):
            if need <= 0:
                break
            take = min(count, need)
            starts.append(start)
            counts.append(take)
            need -= take
        self._starts, self._counts = starts, counts
        self._size = prefix - max(need, 0)
        for uid in sorted(uids):
            if uid not in self:
                self.add(uid)


class MemberView:
    """Read-only union of the good set and the bad roster."""

    def __init__(self, good: set, bad: BadRoster):
        self._good = good
        self._bad = bad

    def __len__(self) -> int:
        return len(self._good) + len(self._bad)

    def __contains__(self, uid) -> bool:
        return uid in self._good or uid in self._bad

    def __iter__(self):
        yield from self._good
        yield from self._bad

    def as_set(self) -> set:
        return set(self._good) | set(self._bad)


class SystemView:
    def __init__(self, good=(), bad=(), now: float = 0.0):
        self.good_members: set[int] = set(good)
        self.bad_members = bad if isinstance(bad, BadRoster) else BadRoster(bad)
        self.now = now
        overlap = [u for u in self.good_members if u in self.bad_members]
        if overlap:
            raise DuplicateID(f"uids in both partitions: {sorted(overlap)[:5]}")

    @property
    def members(self) -> MemberView:
        return MemberView(self.good_members, self.bad_members)

    @property
    def size(self) -> int:
        return len(self.good_members) + len(self.bad_members)

    @property
    def bad_fraction(self) -> float:
        n = self.size
        return len(self.bad_members) / n if n else 0.0


@dataclass
class SimConfig:
    n0: int = 100
    kappa: float = 1 / 18
    round_len: float = 1.0
    epsilon: float = 1 / 12
    rng_seed: int = 0
    horizon: float = 10_000.0

    def validate(self) -> None:
        if self.n0 < 4:
            raise ConfigError(f"n0 must be at least 4, got {self.n0}")
        if not 0 < self.kappa <= 1 / 18:
            raise ConfigError(f"kappa must lie in (0, 1/18], got {self.kappa}")
        # epsilon < 1/12 is the analytic requirement; 1/12 itself is the
        # documented default, so only values above it are rejected
        if not 0 < self.epsilon <= 1 / 12:
            raise ConfigError(f"epsilon must lie in (0, 1/12], got {self.epsilon}")
        if self.round_len <= 0:
            raise ConfigError("round_len must be positive")
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")


@dataclass
class CostLedger:
    good_entrance: int = 0
    good_purge: int = 0
    good_periodic: int = 0
    adversary_total: int = 0
    samples: list = field(default_factory=list)
    _last_sample: tuple = (0.0, 0, 0)

    @property
    def good_total(self) -> int:
        return self.good_entrance + self.good_purge + self.good_periodic

    def start(self, now: float) -> None:
        self._last_sample = (now, self.good_total, self.adversary_total)

    def sample(self, now: float) -> None:
        t0, g0, a0 = self._last_sample
        if now <= t0:
            return
        dt = now - t0
        self.samples.append((now, (self.good_total - g0) / dt, (self.adversary_total - a0) / dt))
        self._last_sample = (now, self.good_total, self.adversary_total)


def apply_event(view: SystemView, ev: Event) -> SystemView:
    """Apply one serialized event in place and return the view."""
    if ev.time <= view.now:
        raise StaleEvent(f"event at {ev.time} is not after now={view.now}")
    if isinstance(ev.payload, Join):
        ident = ev.payload.identity
        if ident.uid in view.good_members or ident.uid in view.bad_members:
            raise DuplicateID(f"uid {ident.uid} is already a member")
        if ident.kind is Kind.GOOD:
            view.good_members.add(ident.uid)
        else:
            view.bad_members.add(ident.uid)
    else:
        uid = ev.payload.uid
        if uid in view.good_members:
            view.good_members.remove(uid)
        elif uid in view.bad_members:
            view.bad_members.remove(uid)
        else:
            raise UnknownDeparture(uid)
    view.now = ev.time
    return view


def symmetric_difference_size(a, b) -> int:
    a, b = set(a), set(b)
    return len(a - b) + len(b - a)


def sample_uniform_good_departure(view: SystemView, rng: np.random.Generator, n0: int = 4) -> int:
    """Pick the departing good ID uniformly; refuse to go below the floor."""
    if len(view.good_members) <= n0:
        raise FloorViolation(f"{len(view.good_members)} good members at floor n0={n0}")
    ordered = sorted(view.good_members)
    return ordered[int(rng.integers(len(ordered)))]


def ceil_fraction(num: int, frac: Fraction) -> int:
    """Exact ceil(num * frac) for a rational multiplier."""
    return -((-num * frac.numerator) // frac.denominator)
