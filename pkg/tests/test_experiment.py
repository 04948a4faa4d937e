import json
import math

import pytest

from ergosim import cli
from ergosim.errors import ConfigError
from ergosim.experiment import (DEFAULT_SWEEP, FILES, ExperimentConfig, ExperimentResults, beta_thresholds,
                                emit_outputs, gamma_equivalent, parse_defense, read_csv, run_single, run_sweep,
                                with_overrides)
from ergosim.traces import ExponentialSource, TraceSpec


def tiny_config(**kw):
    src = ExponentialSource(mean_hours=0.1, arrival_rate_per_s=1.0)
    base = dict(trace=TraceSpec(src, initial_population=300, seed=5), trace_name="tiny", horizon_s=300.0,
                warmup_s=100.0, sweep_T=[0, 4, 64], repeats=2, seed=11)
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_dict_round_trip():
    cfg = tiny_config(defense="ergo-sf98", committee_C=16)
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_config_accepts_preset_names():
    cfg = ExperimentConfig.from_dict({"trace": "bittorrent", "defense": "ccom"})
    assert cfg.trace_name == "bittorrent"
    assert cfg.warmup == cfg.trace.source.mean_session_s


@pytest.mark.parametrize("raw", [{"bogus": 1}, {"defense": "nope"}, {"trace": "nowhere"},
                                 {"sweep_T": []}, {"repeats": 0}, {"sim": {"kappa": 0.5, "extra": 1}}])
def test_bad_configs_are_rejected(raw):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)


def test_defense_names():
    assert parse_defense("remp") == ("remp", None)
    assert parse_defense("sybilcontrol") == ("sybilcontrol", None)
    engine, policy = parse_defense("ergo-sf90")
    assert engine == "ergo" and policy is not None
    with pytest.raises(ConfigError):
        parse_defense("ergo-sfxx")


def test_with_overrides_ignores_none():
    cfg = tiny_config()
    assert with_overrides(cfg, seed=None, repeats=None) == cfg
    assert with_overrides(cfg, seed=3).seed == 3


def test_default_sweep_is_powers_of_two():
    assert list(DEFAULT_SWEEP) == [2**i for i in range(21)]


def test_remp_sweep_cardinality_and_validity():
    cfg = ExperimentConfig(defense="remp", repeats=3, remp_t_max=2**10)
    res = run_sweep(cfg)
    assert len(res.rows) == 21 * 3
    for row in res.rows:
        assert row["valid"] is (row["T"] <= 2**10)
        assert row["good_spend_rate"] == pytest.approx(17 * 2**10)
    assert len(res.medians) == 21


def test_zero_spend_rate_means_no_bad_ids():
    run = run_single(tiny_config(), 0, 1)
    assert run.row["bad_joins"] == 0
    assert run.row["max_bad_fraction"] == 0


def test_sweep_rows_are_ordered_and_seeded():
    res = run_sweep(tiny_config())
    keys = [(r["T"], r["repeat"]) for r in res.rows]
    assert keys == sorted(keys) and len(keys) == 6
    assert {r["seed"] for r in res.rows} == {11, 12}
    assert res.seeds == [11, 12]


def test_empty_results_write_header_only_files(tmp_path):
    emit_outputs(ExperimentResults(tiny_config()), tmp_path)
    for name, columns in FILES.items():
        lines = (tmp_path / name).read_text().splitlines()
        assert lines == [",".join(columns)]
    meta = json.loads((tmp_path / "run_meta.json").read_text())
    assert meta["runs"] == 0 and meta["schema_version"] == 1


def test_sweep_csv_round_trip(tmp_path):
    res = run_sweep(tiny_config(repeats=1))
    emit_outputs(res, tmp_path)
    rows = read_csv(tmp_path / "sweep.csv")
    assert len(rows) == len(res.rows)
    for got, want in zip(rows, res.rows):
        assert float(got["good_spend_rate"]) == want["good_spend_rate"]
        assert float(got["max_bad_fraction"]) == want["max_bad_fraction"]
        assert got["defense"] == want["defense"]
    meta = json.loads((tmp_path / "run_meta.json").read_text())
    assert meta["seeds"] == [11]
    assert meta["warmup_s"] == 100.0


def test_outputs_are_byte_identical_across_executions(tmp_path):
    for name in ("a", "b"):
        emit_outputs(run_sweep(tiny_config(defense="ccom")), tmp_path / name)
    for name in list(FILES) + ["run_meta.json"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_parallel_sweep_matches_serial(tmp_path):
    emit_outputs(run_sweep(tiny_config()), tmp_path / "serial")
    emit_outputs(run_sweep(tiny_config(workers=2)), tmp_path / "pool")
    for name in FILES:
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "pool" / name).read_bytes()


def test_beta_thresholds_blank_for_small_n0():
    a, b = beta_thresholds(100)
    assert a == pytest.approx(math.sqrt(5 * 100 / 80 - 1))
    assert b == ""


def test_gamma_equivalent():
    assert gamma_equivalent(10_000, 100) == pytest.approx(2.0)
    assert gamma_equivalent(1, 100) == 0.0


# ---------------------------------------------------------------- CLI
def write_config(tmp_path, **kw):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny_config(**kw).to_dict()))
    return path


def test_cli_simulate_writes_outputs(tmp_path, capsys):
    cfg = write_config(tmp_path)
    rc = cli.main(["simulate", "--config", str(cfg), "--T", "8", "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_OK
    assert len(read_csv(tmp_path / "o" / "sweep.csv")) == 1
    assert '"defense": "ergo"' in capsys.readouterr().out


def test_cli_sweep_with_flags(tmp_path):
    cfg = write_config(tmp_path)
    rc = cli.main(["sweep", "--config", str(cfg), "--T", "0,2", "--repeats", "1", "--defense", "ccom",
                   "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_OK
    rows = read_csv(tmp_path / "o" / "sweep.csv")
    assert [r["T"] for r in rows] == ["0", "2"]
    assert {r["defense"] for r in rows} == {"ccom"}


def test_cli_unknown_defense_exits_with_error(tmp_path, capsys):
    rc = cli.main(["simulate", "--defense", "bogus", "--out", str(tmp_path)])
    assert rc == cli.EXIT_ERROR
    assert "unknown defense" in capsys.readouterr().err


def test_cli_missing_config_exits_with_error(tmp_path):
    assert cli.main(["sweep", "--config", str(tmp_path / "none.json")]) == cli.EXIT_ERROR


def test_cli_trace_gen_and_analyze(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "t.csv"
    assert cli.main(["trace", "gen", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_OK
    capsys.readouterr()
    report = tmp_path / "r.json"
    assert cli.main(["trace", "analyze", "--config", str(cfg), "--file", str(out), "--out", str(report)]) == 0
    data = json.loads(report.read_text())
    assert data["initial_ids"] == 300
    assert data["events"] > 0
