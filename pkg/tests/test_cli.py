"""CLI dispatch: subcommands, exit codes, usage errors, artifacts."""

import json

import pytest

from blis_sim.cli import cli_dispatch
from blis_sim.protocol import (
    AppSynchMsg,
    Beacon,
    RateControlMsg,
    encode_beacon,
)


@pytest.fixture()
def scenario_file(tmp_path):
    cfg = {
        "name": "cli-unit",
        "seed": 1,
        "duration_s": 60.0,
        "slot_s": 0.01,
        "apps": [{"app_id": 1, "modules": 2, "rate_nml": 4, "rate_lp": 2,
                  "period_s": 60.0}],
        "devices": {"strategy": "atem", "initial_sense_uj": 100,
                    "initial_radio_uj": 500},
        "trace": {"kind": "constant", "power_mw": 5.0, "sample_interval_s": 1.0},
        "aggregator": {"scheme": "vsda", "forecaster": "oracle"},
    }
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture()
def trace_file(tmp_path):
    lines = ["time_s,power_mw"]
    for i in range(200):
        lines.append(f"{float(i)},{5.0}")
    path = tmp_path / "trace.csv"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def test_no_args_prints_usage_exit_1(capsys):
    assert cli_dispatch([]) == 1
    out = capsys.readouterr().out
    assert "run" in out and "compare" in out


def test_unknown_flag_named_in_error(capsys, scenario_file):
    code = cli_dispatch(["run", "--config", scenario_file, "--bogus"])
    assert code == 1
    err = capsys.readouterr().err
    assert "--bogus" in err


def test_run_produces_artifacts(tmp_path, scenario_file, capsys):
    out = tmp_path / "out"
    code = cli_dispatch(["run", "--config", scenario_file, "--seed", "5",
                         "--out", str(out)])
    assert code == 0
    assert (out / "events.log").exists()
    assert (out / "comparison.csv").exists()
    assert (out / "comparison.json").exists()
    report = json.loads((out / "comparison.json").read_text())
    assert report["rows"][0]["seed"] == 5


def test_run_missing_config_exit_1(tmp_path, capsys):
    assert cli_dispatch(["run", "--config", str(tmp_path / "nope.json")]) == 1


def test_run_invalid_config_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"apps": []}))  # missing duration_s
    assert cli_dispatch(["run", "--config", str(bad)]) == 1
    assert "duration_s" in capsys.readouterr().err


def test_compare_over_glob(tmp_path, scenario_file, capsys):
    out = tmp_path / "cmp"
    code = cli_dispatch(["compare", "--configs", scenario_file,
                         "--seeds", "1,2", "--strategies", "atem+vsda,fh+vsda",
                         "--out", str(out)])
    assert code == 0
    report = json.loads((out / "comparison.json").read_text())
    assert len(report["rows"]) == 4
    assert len(report["deltas"]) == 2


def test_forecast_outputs(tmp_path, trace_file, capsys):
    out = tmp_path / "fc"
    code = cli_dispatch(["forecast", "--trace", trace_file, "--model", "lstm",
                         "--epochs", "5", "--window", "5", "--out", str(out)])
    assert code == 0
    loss = (out / "loss.csv").read_text().splitlines()
    assert loss[0] == "epoch,train_loss,val_loss"
    assert len(loss) == 6
    preds = (out / "predictions.csv").read_text().splitlines()
    assert preds[0] == "t,actual_mw,predicted_mw"


def test_forecast_ewma_no_training(tmp_path, trace_file):
    out = tmp_path / "fc2"
    code = cli_dispatch(["forecast", "--trace", trace_file, "--model", "ewma",
                         "--window", "4", "--out", str(out)])
    assert code == 0
    assert not (out / "loss.csv").exists()
    assert (out / "predictions.csv").exists()


def test_codec_round_trip(capsys):
    raw = encode_beacon(Beacon(app_id=1, seq=9,
                               rate_control=RateControlMsg((3, 1), (3, 1)),
                               app_synch=AppSynchMsg((1, 0), (2, 0))))
    code = cli_dispatch(["codec", "--hex", raw.hex()])
    assert code == 0
    out = capsys.readouterr().out
    assert "type: beacon" in out and "seq: 9" in out


def test_codec_bad_hex_exit_1(capsys):
    assert cli_dispatch(["codec", "--hex", "zz"]) == 1


def test_codec_malformed_packet_exit_2(capsys):
    assert cli_dispatch(["codec", "--hex", "0000"]) == 2
