"""Experiment configuration, sweep orchestration and output files."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

from . import __version__, ergo
from .adversary import AdversaryConfig, BurstJoin, NoAttack, SteadyJoin
from .baselines import REMP, remp_good_spend_rate
from .core import SimConfig
from .errors import ConfigError, InsufficientData, InsufficientEpochs, ZeroRate
from .metrics import (alpha_with_skips, detect_epochs, measure_beta, ratio_series, ratio_envelope,
                      count_envelope_violations)
from .sim import RunResult, RunSettings, simulate
from .traces import (PRESETS, ExponentialSource, FileSource, TraceSpec, WeibullSource, generate_trace)

SCHEMA_VERSION = 1
DEFAULT_SWEEP = tuple(2**i for i in range(21))
ESTIMATE_BAD_FRACTIONS = (1 / 1500, 1 / 375, 1 / 94, 1 / 24, 1 / 6)
ESTIMATE_T = (0, 10_000)
H3_BOUND_FORMULA = "carry + clamp(ceil(joins - (now - tau) * J_est), 0, joins); skip when 6*(worst+L) < size+L and 6*worst < size-L, L = ceil(size/11)"

SWEEP_COLUMNS = [
    "defense", "trace", "T", "repeat", "seed", "valid", "good_spend_rate", "adversary_spend_rate",
    "good_entrance_rate", "good_purge_rate", "good_periodic_rate", "mean_entrance_cost", "max_bad_fraction",
    "invariant_ok", "cutoff_time_s", "overlap_violations", "overlap_checked", "subinterval_violations",
    "subinterval_checked", "estimator_intervals", "purges", "skipped_purges", "good_joins", "good_departs",
    "bad_joins", "refused_bad_attempts", "false_refusals", "suppressed_departures", "staggered_departures",
]
MEDIAN_COLUMNS = ["defense", "trace", "T", "repeats", "median_good_spend_rate", "median_adversary_spend_rate",
                  "max_bad_fraction", "all_invariant_ok"]
EPOCH_COLUMNS = ["run", "index", "start_s", "end_s", "good_joins", "rho", "good_departs", "partial"]
RATIO_COLUMNS = ["run", "time_s", "estimate", "true_rho", "ratio"]
COMMITTEE_COLUMNS = ["run", "iteration", "size", "good_fraction", "size_ok", "majority_ok"]
ITERATION_COLUMNS = ["run", "iter", "start_s", "end_s", "size_at_tau", "joins", "departs", "purge_cost",
                     "entrance_cost_good", "entrance_cost_bad"]
INTERVAL_COLUMNS = ["run", "interval", "start_s", "end_s", "size", "estimate", "true_rate"]
VIOLATION_COLUMNS = ["run", "kind", "time", "detail"]
ESTIMATE_COLUMNS = ["trace", "bad_fraction", "T", "seed", "intervals", "ratio_min", "ratio_max", "alpha",
                    "beta", "beta_threshold_a", "beta_threshold_b", "envelope_low", "envelope_high", "envelope_violations", "epochs", "max_bad_fraction"]
FILES = {
    "sweep.csv": SWEEP_COLUMNS,
    "sweep_median.csv": MEDIAN_COLUMNS,
    "epochs.csv": EPOCH_COLUMNS,
    "ratio.csv": RATIO_COLUMNS,
    "committee.csv": COMMITTEE_COLUMNS,
    "iterations.csv": ITERATION_COLUMNS,
    "intervals.csv": INTERVAL_COLUMNS,
    "violations.csv": VIOLATION_COLUMNS,
    "estimate.csv": ESTIMATE_COLUMNS,
}


# ------------------------------------------------------------------ config
@dataclass
class ExperimentConfig:
    trace: TraceSpec = field(default_factory=lambda: TraceSpec(PRESETS["gnutella"]))
    trace_name: str = "gnutella"
    # ergo, ergo-ch1, ergo-ch2, ergo-sfNN, ccom, sybilcontrol, remp
    defense: str = "ergo"
    remp_t_max: float = 1e7
    sybil_period_s: float = 0.5
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    sweep_T: list = field(default_factory=lambda: list(DEFAULT_SWEEP))
    horizon_s: float = 10_000.0
    repeats: int = 3
    seed: int = 0
    # None means one mean session length of the trace source (0 for file traces)
    warmup_s: float | None = None
    committee_C: int | None = None
    record_iterations: bool = False
    audit_invariant: bool = True
    ticks_per_window: int = 4
    workers: int = 1
    estimate_events: int = 100_000
    estimate_bad_fractions: list = field(default_factory=lambda: list(ESTIMATE_BAD_FRACTIONS))
    estimate_T: list = field(default_factory=lambda: list(ESTIMATE_T))

    def validate(self) -> None:
        if not self.sweep_T:
            raise ConfigError("sweep_T must not be empty")
        if any(t < 0 for t in self.sweep_T):
            raise ConfigError("sweep_T values must be non-negative")
        if not self.horizon_s > 0:
            raise ConfigError("horizon_s must be positive")
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if self.warmup_s is not None and self.warmup_s < 0:
            raise ConfigError("warmup_s must be non-negative")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        parse_defense(self.defense)
        self.trace.validate()
        self.sim.validate()
        REMP(self.remp_t_max)

    @property
    def warmup(self) -> float:
        if self.warmup_s is not None:
            return self.warmup_s
        src = self.trace.source
        return 0.0 if isinstance(src, FileSource) else src.mean_session_s

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["trace"]["source"] = _source_to_dict(self.trace.source)
        d["adversary"]["strategy"] = _strategy_to_dict(self.adversary.strategy)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "trace" in raw:
            t = raw["trace"]
            if isinstance(t, str):
                raw.setdefault("trace_name", t)
                t = {"source": t}
            t = dict(t)
            src = t.get("source", "gnutella")
            if isinstance(src, str):
                raw.setdefault("trace_name", src)
            elif isinstance(src, dict):
                raw.setdefault("trace_name", src.get("kind", "custom"))
            t["source"] = _source_from(src)
            raw["trace"] = _build(TraceSpec, t)
        if "adversary" in raw:
            a = dict(raw["adversary"])
            if "strategy" in a:
                a["strategy"] = _strategy_from(a["strategy"])
            raw["adversary"] = _build(AdversaryConfig, a)
        if "sim" in raw:
            raw["sim"] = _build(SimConfig, raw["sim"])
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def _build(kind, values: dict):
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    try:
        return kind(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _source_from(src):
    if isinstance(src, str):
        if src not in PRESETS:
            raise ConfigError(f"unknown trace preset {src!r}; choose from {sorted(PRESETS)}")
        return PRESETS[src]
    src = dict(src)
    kind = src.pop("kind", None)
    if kind == "weibull":
        return _build(WeibullSource, src)
    if kind == "exponential":
        return _build(ExponentialSource, src)
    if kind == "file":
        return _build(FileSource, src)
    raise ConfigError(f"unknown trace source kind {kind!r}")


def _source_to_dict(src) -> dict:
    kind = {WeibullSource: "weibull", ExponentialSource: "exponential", FileSource: "file"}[type(src)]
    return {"kind": kind, **dataclasses.asdict(src)}


def _strategy_from(raw):
    if isinstance(raw, dict):
        raw = dict(raw)
        name = raw.pop("kind", "steady")
    else:
        name, raw = raw, {}
    if name == "steady":
        return SteadyJoin()
    if name == "burst":
        return _build(BurstJoin, raw)
    if name == "none":
        return NoAttack()
    raise ConfigError(f"unknown adversary strategy {name!r}")


def _strategy_to_dict(strategy) -> dict:
    if isinstance(strategy, BurstJoin):
        return {"kind": "burst", "burst_period_s": strategy.burst_period_s}
    return {"kind": "none" if isinstance(strategy, NoAttack) else "steady"}


def parse_defense(name: str):
    """Map a defense name to (engine, policy); REMP has no engine."""
    fixed = {"ergo": ergo.ERGO, "ergo-ch1": ergo.ERGO_CH1, "ergo-ch2": ergo.ERGO_CH2, "ccom": ergo.CCOM}
    if name in fixed:
        return "ergo", fixed[name]
    if name.startswith("ergo-sf"):
        try:
            pct = int(name[len("ergo-sf"):])
        except ValueError:
            raise ConfigError(f"bad classifier accuracy in {name!r}") from None
        return "ergo", ergo.ergo_sf(pct / 100)
    if name == "sybilcontrol":
        return "sybilcontrol", None
    if name == "remp":
        return "remp", None
    raise ConfigError(f"unknown defense {name!r}")


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy of ``cfg`` with flag overrides applied (None values are ignored)."""
    changes = {k: v for k, v in changes.items() if v is not None}
    out = dataclasses.replace(cfg, **changes)
    out.validate()
    return out


# ------------------------------------------------------------------- runs
@dataclass
class SingleRun:
    row: dict
    result: RunResult | None

    @property
    def run_id(self) -> str:
        r = self.row
        return f"{r['defense']}|{r['trace']}|T={r['T']}|rep={r['repeat']}"


@lru_cache(maxsize=8)
def _cached_trace(spec: TraceSpec):
    return generate_trace(spec)


def trace_for(cfg: ExperimentConfig, repeat: int, duration: float | None = None):
    spec = dataclasses.replace(cfg.trace, seed=cfg.trace.seed + repeat,
                               duration=cfg.warmup + cfg.horizon_s if duration is None else duration)
    return _cached_trace(spec)


def _row_base(cfg: ExperimentConfig, T: float, repeat: int, seed: int) -> dict:
    row = {c: "" for c in SWEEP_COLUMNS}
    row.update(defense=cfg.defense, trace=cfg.trace_name, T=T, repeat=repeat, seed=seed)
    return row


def run_single(cfg: ExperimentConfig, T: float, seed: int, repeat: int = 0, trace=None) -> SingleRun:
    """One full run at adversary spend rate T; deterministic in (cfg, T, seed)."""
    engine, policy = parse_defense(cfg.defense)
    row = _row_base(cfg, T, repeat, seed)
    if engine == "remp":
        row.update(valid=T <= cfg.remp_t_max,
                   good_spend_rate=remp_good_spend_rate(cfg.sim.kappa, cfg.remp_t_max),
                   adversary_spend_rate=T)
        return SingleRun(row, None)
    adversary = dataclasses.replace(cfg.adversary, spend_rate_T=T)
    settings = RunSettings(
        policy=policy, engine=engine, sybil_period_s=cfg.sybil_period_s, adversary=adversary, sim=cfg.sim,
        warmup_s=cfg.warmup, horizon_s=cfg.horizon_s, ticks_per_window=cfg.ticks_per_window,
        committee_C=cfg.committee_C, audit_invariant=cfg.audit_invariant,
        record_iterations=cfg.record_iterations,
    )
    if trace is None:
        trace = trace_for(cfg, repeat)
    result = simulate(settings, trace, seed)
    s = result.summary
    row["valid"] = True
    for key in SWEEP_COLUMNS:
        if key in s:
            row[key] = s[key]
    return SingleRun(row, result)


def _sweep_job(args):
    cfg, T, repeat = args
    run = run_single(cfg, T, cfg.seed + repeat, repeat)
    if run.result is not None:
        # keep worker payloads small; bulky per-event data is not emitted for sweeps
        run.result.good_events = []
        run.result.ledger.samples = []
    return run


@dataclass
class ExperimentResults:
    config: ExperimentConfig | None = None
    runs: list = field(default_factory=list)
    medians: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    estimates: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    kind: str = "sweep"

    @property
    def rows(self) -> list[dict]:
        return [r.row for r in self.runs]

    @property
    def any_violation(self) -> bool:
        return any(r.result is not None and r.result.violations for r in self.runs)


def median_rows(runs) -> list[dict]:
    groups: dict = {}
    for run in runs:
        r = run.row
        groups.setdefault((r["defense"], r["trace"], r["T"]), []).append(r)
    out = []
    for (defense, trace, T), rows in groups.items():
        fracs = [r["max_bad_fraction"] for r in rows if r["max_bad_fraction"] != ""]
        oks = [r["invariant_ok"] for r in rows if r["invariant_ok"] != ""]
        out.append({
            "defense": defense, "trace": trace, "T": T, "repeats": len(rows),
            "median_good_spend_rate": statistics.median(r["good_spend_rate"] for r in rows),
            "median_adversary_spend_rate": statistics.median(r["adversary_spend_rate"] for r in rows),
            "max_bad_fraction": max(fracs) if fracs else "",
            "all_invariant_ok": all(oks) if oks else "",
        })
    return out


def run_sweep(cfg: ExperimentConfig) -> ExperimentResults:
    """One row per (T, repeat); repeat r uses seed + r for both trace and run."""
    cfg.validate()
    jobs = [(cfg, T, rep) for rep in range(cfg.repeats) for T in cfg.sweep_T]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            runs = list(pool.map(_sweep_job, jobs))
    else:
        runs = [_sweep_job(job) for job in jobs]
    # collector order is fixed regardless of completion order
    runs.sort(key=lambda r: (r.row["T"], r.row["repeat"]))
    seeds = [cfg.seed + rep for rep in range(cfg.repeats)]
    return ExperimentResults(cfg, runs, median_rows(runs), seeds=seeds)


def estimate_duration(spec: TraceSpec, events: int) -> float:
    """Trace length that comfortably yields ``events`` churn events."""
    src = spec.source
    if isinstance(src, ExponentialSource):
        rate = src.arrival_rate_per_s
    elif isinstance(src, WeibullSource):
        rate = spec.initial_population / src.mean_session_s
    else:
        raise ConfigError("estimate runs need a synthetic trace source")
    # roughly one departure per arrival once the population is stationary
    return 1.5 * events / (2 * rate)


def run_estimate(cfg: ExperimentConfig) -> ExperimentResults:
    """Estimate-ratio experiment: ERGO under background bad fractions and two spend rates."""
    cfg.validate()
    engine, policy = parse_defense(cfg.defense)
    if engine != "ergo":
        raise ConfigError("the estimate experiment runs an ERGO-family defense")
    spec = dataclasses.replace(cfg.trace, max_events=cfg.estimate_events,
                               duration=estimate_duration(cfg.trace, cfg.estimate_events))
    trace = generate_trace(spec)
    results = ExperimentResults(cfg, kind="estimate", seeds=[cfg.seed])
    for frac in cfg.estimate_bad_fractions:
        for T in cfg.estimate_T:
            settings = RunSettings(
                policy=policy, adversary=dataclasses.replace(cfg.adversary, spend_rate_T=T), sim=cfg.sim,
                warmup_s=0.0, horizon_s=trace.end_time, ticks_per_window=cfg.ticks_per_window,
                background_bad_fraction=frac, audit_invariant=False, record_good_events=True,
            )
            result = simulate(settings, trace, cfg.seed)
            run = SingleRun(_row_base(cfg, T, 0, cfg.seed), result)
            run.row["valid"] = True
            for key in SWEEP_COLUMNS:
                if key in result.summary:
                    run.row[key] = result.summary[key]
            tag = f"{cfg.trace_name}|f={frac!r}|T={T}"
            results.estimates.append(_estimate_row(cfg, tag, frac, T, result, results))
            results.runs.append(run)
    return results


def _estimate_row(cfg, tag, frac, T, result: RunResult, results: ExperimentResults) -> dict:
    epochs = detect_epochs(result.good_events, result.initial_good, 0.0, result.good_events[-1][0]
                           if result.good_events else 0.0)
    series = ratio_series(result.intervals, epochs)
    for ep in epochs:
        results.epochs.append({"run": tag, "index": ep.index, "start_s": ep.start, "end_s": ep.end,
                               "good_joins": ep.good_joins, "good_departs": ep.good_departs,
                               "rho": ep.rho, "partial": ep.partial})
    for sample in series:
        results.ratios.append({"run": tag, "time_s": sample.time, "estimate": sample.estimate,
                               "true_rho": sample.true_rho, "ratio": sample.ratio})
    row = {c: "" for c in ESTIMATE_COLUMNS}
    row.update(trace=cfg.trace_name, bad_fraction=frac, T=T, seed=cfg.seed, intervals=len(series),
               epochs=len(epochs), max_bad_fraction=result.max_bad_fraction)
    row.update(zip(("beta_threshold_a", "beta_threshold_b"), beta_thresholds(cfg.sim.n0)))
    if series:
        ratios = [s.ratio for s in series]
        row.update(ratio_min=min(ratios), ratio_max=max(ratios))
    try:
        alpha, _ = alpha_with_skips(epochs)
        beta, _ = measure_beta(epochs, result.good_events)
    except (InsufficientEpochs, InsufficientData, ZeroRate):
        return row
    lo, hi = ratio_envelope(alpha, beta)
    row.update(alpha=alpha, beta=beta, envelope_low=lo, envelope_high=hi,
               envelope_violations=count_envelope_violations(series, alpha, beta))
    return row


def beta_thresholds(n0: int) -> tuple:
    """The two published upper limits on beta; blank where the radicand is negative."""
    out = []
    for radicand in (5 * n0 / 80 - 1, n0 / 120 - 1):
        out.append(math.sqrt(radicand) if radicand >= 0 else "")
    return tuple(out)


def gamma_equivalent(events: int, n0: int) -> float:
    """gamma with n0**gamma equal to the run's join and departure count."""
    return math.log(events) / math.log(n0) if events > 1 and n0 > 1 else 0.0


# ----------------------------------------------------------------- output
def _write_csv(path: Path, columns, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _cell(v) for k, v in row.items()})


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _per_run_rows(results: ExperimentResults):
    committee, iterations, intervals, violations = [], [], [], []
    for run in results.runs:
        res = run.result
        if res is None:
            continue
        rid = run.run_id
        for a in res.committee_audits:
            committee.append({"run": rid, "iteration": a.iteration, "size": a.size,
                              "good_fraction": a.good_fraction, "size_ok": a.size_ok, "majority_ok": a.majority_ok})
        for it in res.iterations:
            iterations.append({"run": rid, "iter": it.index, "start_s": it.start, "end_s": it.end,
                               "size_at_tau": it.size_at_tau, "joins": it.joins, "departs": it.departs,
                               "purge_cost": it.purge_cost, "entrance_cost_good": it.entrance_cost_good,
                               "entrance_cost_bad": it.entrance_cost_bad})
        for rec in res.intervals:
            intervals.append({"run": rid, "interval": rec.index, "start_s": rec.start, "end_s": rec.end,
                              "size": rec.size_at_end, "estimate": rec.estimate_set,
                              "true_rate": rec.true_good_join_rate})
        for v in res.violations:
            detail = {k: val for k, val in v.items() if k not in ("kind", "time")}
            violations.append({"run": rid, "kind": v["kind"], "time": v["time"],
                               "detail": json.dumps(detail, sort_keys=True, default=str)})
    return committee, iterations, intervals, violations


def _event_count(row: dict) -> int:
    return sum(row[k] or 0 for k in ("good_joins", "good_departs", "bad_joins"))


def run_meta(results: ExperimentResults) -> dict:
    cfg = results.config
    suppressed = sum(r.row["suppressed_departures"] or 0 for r in results.runs)
    staggered = sum(r.row["staggered_departures"] or 0 for r in results.runs)
    return {
        "schema_version": SCHEMA_VERSION,
        "code_version": __version__,
        "kind": results.kind,
        "config": cfg.to_dict() if cfg is not None else None,
        "warmup_s": cfg.warmup if cfg is not None else None,
        "seeds": list(results.seeds),
        "runs": len(results.runs),
        "suppressed_departures": suppressed,
        "staggered_departures": staggered,
        "h3_bound": H3_BOUND_FORMULA,
        "gamma_equivalent": {r.run_id: gamma_equivalent(_event_count(r.row), cfg.sim.n0 if cfg else 100)
                             for r in results.runs if r.result is not None},
        "invariant_failures": sum(1 for r in results.runs if r.row["invariant_ok"] is False),
    }


def emit_outputs(results: ExperimentResults, out_dir) -> list[Path]:
    """Write every CSV (headers only when empty) and run_meta.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    committee, iterations, intervals, violations = _per_run_rows(results)
    content = {
        "sweep.csv": results.rows,
        "sweep_median.csv": results.medians,
        "epochs.csv": results.epochs,
        "ratio.csv": results.ratios,
        "committee.csv": committee,
        "iterations.csv": iterations,
        "intervals.csv": intervals,
        "violations.csv": violations,
        "estimate.csv": results.estimates,
    }
    written = []
    for name, columns in FILES.items():
        path = out / name
        _write_csv(path, columns, content[name])
        written.append(path)
    meta = out / "run_meta.json"
    meta.write_text(json.dumps(run_meta(results), indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    written.append(meta)
    return written


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))

