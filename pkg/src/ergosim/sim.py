"""Discrete-event engine for one run: good churn, adversary ticks, defense, monitors.

Bad joins are handled in batches.  At each adversary tick every join of a
batch lands at the tick time, in order, so the k-th join of a batch pays
one more than the (k-1)-th.  A batch is cut at every point where a purge or
an estimator update would fire, so triggers happen at exactly the same join
as they would one join at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ergo
from .adversary import (AdversaryConfig, AdversaryState, BurstJoin, affordable_joins, purge_response,
                        ramp_cost, retention_reserve)
from .committee import audit_committee, committee_departure, elect_committee
from .core import CostLedger, SimConfig, SystemView
from .ergo import DefensePolicy, Heuristic, IterationState
from .errors import InvariantViolation
from .estimator import EstimatorState
from .metrics import SubIntervalMonitor, compute_spend_rates
from .traces import ChurnTrace

INVARIANT_LIMIT = 1 / 6


@dataclass
class RunSettings:
    policy: DefensePolicy | None = ergo.ERGO
    # "ergo" covers ERGO, its heuristic variants and CCom; "sybilcontrol" is periodic testing
    engine: str = "ergo"
    sybil_period_s: float = 0.5
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    warmup_s: float = 0.0
    horizon_s: float = 10_000.0
    ticks_per_window: int = 4
    min_tick_s: float = 0.01
    committee_C: int | None = None
    background_bad_fraction: float = 0.0
    audit_invariant: bool = True
    record_iterations: bool = False
    max_iteration_records: int = 200_000
    record_good_events: bool = False
    sample_period_s: float = 100.0
    fail_fast: bool = False


@dataclass
class RunResult:
    summary: dict
    ledger: CostLedger
    intervals: list
    good_events: list
    initial_good: list
    iterations: list
    committee_audits: list
    violations: list
    max_bad_fraction: float


class Simulation:
    def __init__(self, settings: RunSettings, trace: ChurnTrace, seed: int):
        self.s = settings
        self.trace = trace
        self.seed = seed
        streams = np.random.SeedSequence(seed).spawn(3)
        self.rng_classify = np.random.default_rng(streams[0])
        self.rng_adversary = np.random.default_rng(streams[1])
        self.rng_committee = np.random.default_rng(streams[2])

        self.policy = settings.policy if settings.engine == "ergo" else ergo.CCOM
        self.kappa = settings.sim.kappa
        self.ergo_cost = settings.engine == "ergo" and not self.policy.constant_entrance_cost
        self.h1 = self.policy.has(Heuristic.H1_ALIGN_ESTIMATE)
        self.h3 = self.policy.has(Heuristic.H3_INVARIANT_PURGE)
        self.h4 = self.policy.has(Heuristic.H4_CLASSIFIER)
        self.h2 = self.policy.has(Heuristic.H2_SYMMETRIC_DIFF_PURGE)
        self.purges_enabled = settings.engine == "ergo"
        self.respond = settings.adversary.respond_to_purges
        self.collapsible = (self.purges_enabled and not self.ergo_cost and not self.policy.heuristics
                            and not self.respond and not settings.committee_C
                            and not settings.record_iterations)

        self.view = SystemView()
        self.next_uid = 0
        self.tid_map: dict = {}
        self.refused_tids: set = set()
        g0 = len(trace.initial_ids)
        f = settings.background_bad_fraction
        self.background = math.floor(f * g0 / (1 - f)) if f > 0 else 0
        if self.background:
            self.view.bad_members.add_range(0, self.background)
            self.next_uid = self.background
        for ident in trace.initial_ids:
            self.tid_map[ident.uid] = self.next_uid
            self.view.good_members.add(self.next_uid)
            self.next_uid += 1
        self.initial_good = sorted(self.view.good_members)

        size = self.view.size
        # the initialization round counts as the time needed to assemble S
        self.est = EstimatorState(t_last=0.0, estimate=size / settings.sim.round_len,
                                  watermark=self.next_uid, snapshot_size=size)
        self.it = IterationState.open(0.0, size, self.next_uid, self.kappa)
        self.ledger = CostLedger()
        self.adv = AdversaryState(last_time=settings.warmup_s, started_at=settings.warmup_s)
        self.committee = None
        if settings.committee_C:
            self.committee = elect_committee(self.view, settings.committee_C, self.rng_committee, 0)

        self.now = 0.0
        self.seq = 0
        self.iter_seq = 0
        self.update_seqs: list[int] = []
        self.subintervals = SubIntervalMonitor()
        self.overlap_checked = 0
        self.overlap_violations: list[dict] = []
        self.invariant_violations: list[dict] = []
        self.max_bad_fraction = self.view.bad_fraction
        self.cutoff_time = None
        self.measuring = settings.warmup_s <= 0
        self.stats = dict(good_joins=0, good_departs=0, bad_joins=0, purges=0, refused_bad_attempts=0,
                          false_refusals=0, skipped_purges=0, estimator_updates=0, collapsed_iterations=0)
        self.iterations: list = []
        self.iterations_truncated = False
        self.audits: list = []
        self.good_events: list = []
        self.end = settings.warmup_s + settings.horizon_s
        self.next_sample = settings.warmup_s + settings.sample_period_s

    # ---------------------------------------------------------------- helpers
    @property
    def window(self) -> float:
        return 1.0 / self.est.estimate

    def _cost(self, now: float) -> int:
        if not self.ergo_cost:
            return 1
        return 1 + self.it.join_log.count_after(now - self.window)

    def _slice_key(self, now: float):
        piece = self.it.iteration_index if self.policy.window_truncate_at_iteration else 0
        t_last, w = self.est.t_last, 1.0 / self.est.estimate
        idx = math.floor((now - t_last) * self.est.estimate)
        # settle rounding with the same arithmetic the cost window uses: a slice
        # ends once its start is no longer strictly inside (now - w, now)
        while idx > 0 and now < t_last + idx * w:
            idx -= 1
        while now - w >= t_last + idx * w:
            idx += 1
        return self.est.interval_index, idx, piece

    def _check_fraction(self, now: float, frac: float | None = None) -> None:
        if frac is None:
            frac = self.view.bad_fraction
        if frac > self.max_bad_fraction:
            self.max_bad_fraction = frac
        if frac >= INVARIANT_LIMIT:
            if self.cutoff_time is None:
                self.cutoff_time = now
            if self.s.audit_invariant:
                state = {"time": now, "good": len(self.view.good_members), "bad": len(self.view.bad_members),
                         "iteration": self.it.iteration_index, "estimate": self.est.estimate}
                if len(self.invariant_violations) < 1000:
                    self.invariant_violations.append({"kind": "population", **state})
                if self.s.fail_fast:
                    raise InvariantViolation(f"bad fraction {frac:.4f} at t={now}", now, state)

    def _estimator_update(self, now: float) -> None:
        self.est.update(now, self.view.size, self.next_uid)
        self.update_seqs.append(self.seq)
        self.stats["estimator_updates"] += 1

    def _after_change(self, now: float) -> None:
        view, it, est = self.view, self.it, self.est
        size = len(view.good_members) + len(view.bad_members)
        if not it.estimate_pending and est.added + est.removed >= -((-5 * size) // 8):
            if self.h1:
                it.estimate_pending = True
            else:
                self._estimator_update(now)
        if not self.purges_enabled:
            return
        thr = -(-it.size_at_tau // ergo.PURGE_DIVISOR)
        if self.h2:
            signal = it.added + it.removed >= thr
        else:
            signal = it.joins + it.departs >= thr
        if signal:
            if self.h3 and not ergo.invariant_at_risk(it, size, now, est.estimate):
                self._skip(now)
            else:
                self._purge(now)

    # ------------------------------------------------------------------ purge
    def _respond(self, purge_size: int, bad) -> list[int]:
        movable = len(bad) - self.background
        picks = purge_response(self.adv, self.s.adversary, purge_size, movable, self.rng_adversary)
        if not picks:
            return []
        self.ledger.adversary_total += len(picks)
        return bad.uids_at([p + self.background for p in picks])

    def _close_iteration(self, now: float, index: int, updated: bool) -> None:
        if updated:
            self.update_seqs.append(self.seq)
            self.stats["estimator_updates"] += 1
        inside = sum(1 for s in self.update_seqs if self.iter_seq < s < self.seq)
        self.overlap_checked += 1
        if inside > 1:
            self.overlap_violations.append({"kind": "interval_overlap", "time": now, "iteration": index,
                                           "intervals": inside + 1})
        self.update_seqs = [s for s in self.update_seqs if s >= self.seq]
        self.iter_seq = self.seq

    def _skip(self, now: float) -> None:
        before = self.est.interval_index
        index = self.it.iteration_index
        self.view.now = now
        self.it = ergo.skip_purge(self.it, self.view, self.est, self.next_uid)
        self._close_iteration(now, index, self.est.interval_index != before)
        if self.measuring:
            self.stats["skipped_purges"] += 1

    def _purge(self, now: float) -> None:
        if self.committee is not None:
            self.audits.append(audit_committee(self.committee, iteration=self.it.iteration_index))
        before = self.est.interval_index
        self.view.now = now
        self.it, outcome = ergo.purge(self.it, self.view, self.ledger, self.policy, self._respond, self.est,
                                      self.kappa, self.next_uid, self.background)
        self._close_iteration(now, outcome.iteration.index, self.est.interval_index != before)
        if self.measuring:
            self.stats["purges"] += 1
        if self.s.record_iterations:
            if len(self.iterations) < self.s.max_iteration_records:
                self.iterations.append(outcome.iteration)
            else:
                self.iterations_truncated = True
        if self.committee is not None:
            self.committee = elect_committee(self.view, self.committee.C, self.rng_committee,
                                             self.it.iteration_index)

    # ------------------------------------------------------------- good churn
    def _good_join(self, now: float, tid) -> None:
        uid = self.next_uid
        self.next_uid += 1
        cost = self._cost(now)
        if self.h4 and self.rng_classify.random() >= self.policy.classifier_accuracy:
            # a good ID wrongly labeled bad is lost for good
            if self.policy.refusal_after_challenge:
                self.ledger.good_entrance += cost
                self.it.entrance_good += cost
            self.refused_tids.add(tid)
            self.stats["false_refusals"] += 1
            return
        self.ledger.good_entrance += cost
        self.it.entrance_good += cost
        self.view.good_members.add(uid)
        self.tid_map[tid] = uid
        self.it.note_join(uid, now)
        self.est.note_join(uid, good=True)
        self.stats["good_joins"] += self.measuring
        if self.s.record_good_events:
            self.good_events.append((now, True, uid))
        self.seq += 1
        self._check_fraction(now)
        self._after_change(now)

    def _good_depart(self, now: float, tid) -> None:
        if tid in self.refused_tids:
            self.refused_tids.discard(tid)
            return
        uid = self.tid_map.pop(tid)
        self.view.good_members.remove(uid)
        self.it.note_departure(uid)
        self.est.note_depart(uid)
        if self.committee is not None:
            committee_departure(self.committee, uid)
        self.stats["good_departs"] += self.measuring
        if self.s.record_good_events:
            self.good_events.append((now, False, uid))
        self.seq += 1
        self._check_fraction(now)
        self._after_change(now)

    # -------------------------------------------------------------- adversary
    def _bad_chunk(self, now: float, k: int, first_cost: int) -> None:
        if self.ergo_cost:
            cost = k * first_cost + k * (k - 1) // 2
        else:
            cost = k * first_cost
        self.adv.spend(cost)
        self.ledger.adversary_total += cost
        uid0 = self.next_uid
        self.next_uid += k
        view, it = self.view, self.it
        view.bad_members.add_range(uid0, k)
        it.joins += k
        it.added += k
        it.join_log.append(now, k)
        it.entrance_bad += cost
        self.est.added += k
        self.stats["bad_joins"] += k
        if self.ergo_cost:
            self.subintervals.observe(self._slice_key(now), k, cost, now)
        self.seq += k
        bad = len(view.bad_members)
        frac = bad / (bad + len(view.good_members))
        if frac > self.max_bad_fraction:
            self._check_fraction(now, frac)
        self._after_change(now)

    def _purge_distance(self) -> int:
        # every trigger either purges or closes the iteration, so the signal is never left up
        return ergo.joins_until_signal(self.it, self.policy)

    def _reserve(self) -> int:
        if not self.respond:
            return 0
        return retention_reserve(self.s.adversary, self.view.size)

    def _spend_greedy(self, now: float) -> None:
        constant = not self.ergo_cost
        adv, est = self.adv, self.est
        while True:
            it = self.it
            if constant:
                c = 1
            else:
                c = 1 + it.join_log.count_after(now - 1.0 / est.estimate)
            avail = adv.budget - self._reserve() if self.respond else adv.budget
            if avail < c:
                return
            if self.h4:
                if not self._h4_attempts(now, c, avail):
                    return
                continue
            if self.collapsible and self._try_collapse(now, avail):
                continue
            k = affordable_joins(avail, c, constant)
            if not it.estimate_pending:
                size = len(self.view.good_members) + len(self.view.bad_members)
                k = min(k, est.joins_until_trigger(size))
            if k > 1:
                k = min(k, self._purge_distance())
            self._bad_chunk(now, k, c)

    def _h4_attempts(self, now: float, c: int, avail: float) -> bool:
        """Spend on classifier-refused attempts until one attempt gets through."""
        adv = self.adv
        if adv.pending_refusals is None:
            miss = 1.0 - self.policy.classifier_accuracy
            adv.pending_refusals = int(self.rng_classify.geometric(miss)) - 1 if miss > 0 else math.inf
        if adv.pending_refusals > 0:
            n = min(adv.pending_refusals, int(avail // c))
            if n:
                adv.spend(n * c)
                self.ledger.adversary_total += n * c
                self.stats["refused_bad_attempts"] += n
                self.subintervals.observe(self._slice_key(now), 0, n * c, now)
                adv.pending_refusals -= n
            if adv.pending_refusals > 0:
                return False
            if avail - n * c < c:
                return False
        adv.pending_refusals = None
        self._bad_chunk(now, 1, c)
        return True

    def _try_collapse(self, now: float, avail: float) -> bool:
        """Replay whole CCom iterations arithmetically when they repeat exactly."""
        it = self.it
        if it.joins or it.departs or it.tau != now:
            return False
        thr = it.threshold
        if self.est.joins_until_trigger(self.view.size) <= thr:
            return False
        m = int(avail // thr) - 1
        if m < 1:
            return False
        cost = m * thr
        self.adv.spend(cost)
        self.ledger.adversary_total += cost
        self.ledger.good_purge += m * len(self.view.good_members)
        self.next_uid += cost
        it.iteration_index += m
        it.watermark = self.next_uid
        self.stats["bad_joins"] += cost
        self.stats["collapsed_iterations"] += m
        if self.measuring:
            self.stats["purges"] += m
        self.overlap_checked += m
        self.seq += cost
        self.iter_seq = self.seq
        # the peak of every replayed iteration is thr fresh bad IDs
        self._check_fraction(now, (len(self.view.bad_members) + thr) / (self.view.size + thr))
        return True

    def _adversary_tick(self, now: float) -> float:
        cfg = self.s.adversary
        self.adv.accrue(cfg, now)
        self._spend_greedy(now)
        if isinstance(cfg.strategy, BurstJoin):
            return now + cfg.strategy.burst_period_s
        if not self.ergo_cost:
            return now + self.s.sim.round_len
        dt = max(self.s.min_tick_s, self.window / self.s.ticks_per_window)
        c = self._cost(now)
        short = c + self._reserve() - self.adv.budget
        if short <= 0:
            return now + dt
        wake = now + short / cfg.spend_rate_T
        oldest = self.it.join_log.first_after(now - self.window)
        if oldest is not None:
            wake = min(wake, oldest + self.window)
        return max(now + dt, wake)

    def _sybil_tick(self, now: float) -> None:
        """Periodic test: good IDs pay 1 each, the adversary keeps what it can pay for, then joins."""
        view, adv = self.view, self.adv
        self.ledger.good_periodic += len(view.good_members)
        if now < self.s.warmup_s or not self.s.adversary.active:
            return
        adv.accrue(self.s.adversary, now)
        bad = len(view.bad_members) - self.background
        keep = min(bad, math.floor(adv.budget + 1e-9))
        if keep:
            adv.spend(keep)
            self.ledger.adversary_total += keep
        if keep < bad:
            w = self.est.watermark
            old_before, total_before = view.bad_members.count_below(w), len(view.bad_members)
            # the newest bad IDs are the ones dropped
            view.bad_members.keep_only((), prefix=self.background + keep)
            old_after = view.bad_members.count_below(w)
            self.est.note_bulk_depart(old_before - old_after,
                                      (total_before - old_before) - (len(view.bad_members) - old_after))
        k = math.floor(adv.budget + 1e-9)
        if k:
            adv.spend(k)
            self.ledger.adversary_total += k
            uid0 = self.next_uid
            self.next_uid += k
            view.bad_members.add_range(uid0, k)
            self.est.note_bulk_join(k)
            self.stats["bad_joins"] += k
            self.seq += k
            self._check_fraction(now)
            self._after_change(now)

    # ------------------------------------------------------------------- loop
    def _start_measuring(self, now: float) -> None:
        self.measuring = True
        self.ledger = CostLedger()
        self.ledger.start(now)
        self.adv.last_time = now
        self.adv.started_at = now

    def run(self) -> RunResult:
        s = self.s
        warm = s.warmup_s
        adv_on = s.adversary.active and s.engine == "ergo"
        next_adv = math.inf
        if adv_on:
            burst = s.adversary.strategy
            next_adv = warm + burst.burst_period_s if isinstance(burst, BurstJoin) else warm
        next_sc = s.sybil_period_s if s.engine == "sybilcontrol" else math.inf
        if self.measuring:
            self.ledger.start(0.0)
        events = self.trace.events
        idx, n = 0, len(events)
        end = self.end
        while True:
            t_ev = events[idx].time if idx < n else math.inf
            if t_ev > end:
                t_ev = math.inf
            t_next = min(t_ev, next_adv, next_sc, self.next_sample)
            if not self.measuring and warm <= t_next and warm <= end:
                self._start_measuring(warm)
                continue
            if t_next > end:
                break
            self.now = t_next
            self.view.now = t_next
            if t_next == t_ev:
                ev = events[idx]
                idx += 1
                if ev.is_join:
                    self._good_join(t_ev, ev.payload.identity.uid)
                else:
                    self._good_depart(t_ev, ev.payload.uid)
            elif t_next == next_adv:
                next_adv = self._adversary_tick(t_next)
            elif t_next == next_sc:
                self._sybil_tick(t_next)
                next_sc += s.sybil_period_s
            else:
                self.ledger.sample(t_next)
                self.next_sample += s.sample_period_s
            if not self.ergo_cost or self.policy.window_truncate_at_iteration:
                continue
            self.it.join_log.prune(self.now - 8 * self.window)
        if s.adversary.active and s.engine == "ergo":
            self.adv.accrue(s.adversary, end)
        self.subintervals.close(end)
        return self._result()

    def _result(self) -> RunResult:
        s = self.s
        horizon = s.horizon_s
        rates = compute_spend_rates(self.ledger, horizon)
        good_joins = self.stats["good_joins"]
        summary = {
            "good_spend_rate": rates.good_spend_rate_A,
            "adversary_spend_rate": rates.adversary_spend_rate_T,
            "good_entrance_rate": rates.good_entrance_rate,
            "good_purge_rate": rates.good_purge_rate,
            "good_periodic_rate": rates.good_periodic_rate,
            "mean_entrance_cost": self.ledger.good_entrance / good_joins if good_joins else 0.0,
            "max_bad_fraction": self.max_bad_fraction,
            "invariant_ok": not self.invariant_violations,
            "cutoff_time_s": "" if self.cutoff_time is None else self.cutoff_time - s.warmup_s,
            "overlap_violations": len(self.overlap_violations),
            "overlap_checked": self.overlap_checked,
            "subinterval_violations": len(self.subintervals.violations),
            "subinterval_checked": self.subintervals.checked,
            "estimator_intervals": self.est.interval_index,
            "suppressed_departures": self.trace.suppressed,
            "staggered_departures": self.trace.staggered,
            **self.stats,
        }
        violations = list(self.invariant_violations) + list(self.overlap_violations)
        violations += [{"kind": "subinterval_bound", **v} for v in self.subintervals.violations]
        return RunResult(summary, self.ledger, list(self.est.intervals), self.good_events, self.initial_good,
                         self.iterations, self.audits, violations, self.max_bad_fraction)


def simulate(settings: RunSettings, trace: ChurnTrace, seed: int) -> RunResult:
    return Simulation(settings, trace, seed).run()
