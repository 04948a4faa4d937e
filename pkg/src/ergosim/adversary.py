"""Budgeted adversary: accrues T units per second and spends them on bad joins."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class SteadyJoin:
    pass


@dataclass(frozen=True)
class BurstJoin:
    burst_period_s: float = 10.0


@dataclass(frozen=True)
class NoAttack:
    pass


@dataclass(frozen=True)
class AdversaryConfig:
    spend_rate_T: float = 0.0
    strategy: SteadyJoin | BurstJoin | NoAttack = SteadyJoin()
    respond_to_purges: bool = False
    kappa: float = 1 / 18

    def __post_init__(self):
        if self.spend_rate_T < 0:
            raise ConfigError("spend_rate_T must be non-negative")
        if isinstance(self.strategy, BurstJoin) and self.strategy.burst_period_s <= 0:
            raise ConfigError("burst_period_s must be positive")

    @property
    def active(self) -> bool:
        return self.spend_rate_T > 0 and not isinstance(self.strategy, NoAttack)


@dataclass
class AdversaryState:
    budget: float = 0.0
    spent: int = 0
    last_time: float = 0.0
    started_at: float = 0.0
    # refused attempts still owed before the next classifier pass (H4)
    pending_refusals: int | None = None

    def accrue(self, cfg: AdversaryConfig, now: float) -> None:
        if now < self.last_time:
            raise ValueError("adversary clock moved backwards")
        self.budget += cfg.spend_rate_T * (now - self.last_time)
        self.last_time = now

    def spend(self, units: int) -> None:
        # tolerate float dust from accrual; real overdrafts are bugs
        if units > self.budget + 1e-6 * max(1.0, units):
            raise ValueError(f"spending {units} exceeds budget {self.budget}")
        self.budget = max(0.0, self.budget - units)
        self.spent += units


def ramp_cost(count: int, first_cost: int) -> int:
    """Total cost of ``count`` joins whose costs are first_cost, first_cost+1, ..."""
    return count * first_cost + count * (count - 1) // 2


def affordable_joins(budget: float, first_cost: int, constant: bool = False) -> int:
    """Most joins the budget covers when each join raises the next cost by one."""
    if budget < first_cost:
        return 0
    if constant:
        return int(budget // first_cost)
    b = 2 * first_cost - 1
    k = int((-b + math.sqrt(b * b + 8 * budget)) / 2)
    while ramp_cost(k + 1, first_cost) <= budget:
        k += 1
    while k > 0 and ramp_cost(k, first_cost) > budget:
        k -= 1
    return k


def accrue_and_act(st: AdversaryState, cfg: AdversaryConfig, now: float, first_cost: int,
                   constant: bool = False) -> tuple[int, int]:
    """Greedy join burst at ``now``; every join lands inside one cost window.

    Returns (joins, units spent).  BurstJoin only spends on multiples of its
    period.
    """
    st.accrue(cfg, now)
    if not cfg.active:
        return 0, 0
    if isinstance(cfg.strategy, BurstJoin):
        period = cfg.strategy.burst_period_s
        elapsed = now - st.started_at
        if elapsed <= 0 or not math.isclose(elapsed / period, round(elapsed / period), abs_tol=1e-9):
            return 0, 0
    k = affordable_joins(st.budget, first_cost, constant)
    cost = k * first_cost if constant else ramp_cost(k, first_cost)
    if k:
        st.spend(cost)
    return k, cost


def purge_response(st: AdversaryState, cfg: AdversaryConfig, purge_size: int, bad_alive: int, rng) -> list[int]:
    """Positions (0 .. bad_alive-1) of the bad IDs kept through a purge.

    Keeping an ID means solving its purge challenge, so retention is limited
    by the kappa share of challenges and by the budget on hand.
    """
    if not cfg.respond_to_purges or bad_alive == 0:
        return []
    cap = min(bad_alive, math.floor(cfg.kappa * purge_size), math.floor(st.budget + 1e-9))
    if cap <= 0:
        return []
    st.spend(cap)
    picks = rng.choice(bad_alive, size=cap, replace=False)
    return sorted(int(p) for p in picks)


def retention_reserve(cfg: AdversaryConfig, size: int) -> int:
    """Budget held back so the next purge can be answered in full."""
    if not cfg.respond_to_purges:
        return 0
    return math.floor(cfg.kappa * size) + 1
