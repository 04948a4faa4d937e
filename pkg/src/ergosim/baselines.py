"""Comparison defenses: CCom, SybilControl and the closed-form REMP rate."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import CostLedger, SystemView
from .errors import ConfigError


@dataclass(frozen=True)
class CCom:
    pass


@dataclass(frozen=True)
class SybilControl:
    test_period_s: float = 0.5

    def __post_init__(self):
        if self.test_period_s <= 0:
            raise ConfigError("test_period_s must be positive")


@dataclass(frozen=True)
class REMP:
    t_max: float = 1e7

    def __post_init__(self):
        if self.t_max <= 0:
            raise ConfigError("t_max must be positive")


def ccom_entrance_cost() -> int:
    return 1


def sybilcontrol_tick(view: SystemView, ledger: CostLedger, now: float, keep_bad: int | None = None) -> int:
    """One test period: every good member pays 1, every kept bad member costs the adversary 1.

    Returns the number of bad members kept (all of them unless ``keep_bad``
    limits it); the caller evicts the rest.
    """
    ledger.good_periodic += len(view.good_members)
    bad = len(view.bad_members)
    kept = bad if keep_bad is None else min(bad, keep_bad)
    ledger.adversary_total += kept
    return kept


def remp_good_spend_rate(kappa: float, t_max: float) -> float:
    if not 0 < kappa < 1:
        raise ConfigError(f"kappa must lie in (0, 1), got {kappa}")
    if not t_max > 0 or not math.isfinite(t_max):
        raise ConfigError(f"t_max must be positive, got {t_max}")
    return (1 - kappa) * t_max / kappa
