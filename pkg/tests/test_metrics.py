"""Metric computation from logs, comparison pairing, output emission."""

import csv
import json

import pytest

from blis_sim.engine import build_scenario, run
from blis_sim.metrics import (
    CSV_COLUMNS,
    REFERENCE_TARGETS,
    MalformedLog,
    apply_strategy,
    compare,
    compute_metrics,
    emit_outputs,
    parse_log_lines,
)


def config(**overrides) -> dict:
    cfg = {
        "name": "metrics-unit",
        "seed": 3,
        "duration_s": 120.0,
        "slot_s": 0.01,
        "apps": [{"app_id": 1, "modules": 2, "rate_nml": 4, "rate_lp": 2,
                  "period_s": 60.0}],
        "devices": {"strategy": "atem", "initial_sense_uj": 100,
                    "initial_radio_uj": 500},
        "trace": {"kind": "constant", "power_mw": 5.0, "sample_interval_s": 1.0},
        "aggregator": {"scheme": "vsda", "forecaster": "oracle"},
    }
    cfg.update(overrides)
    return cfg


@pytest.fixture(scope="module")
def clean_run():
    sc = build_scenario(config())
    log = run(sc)
    return sc, log


class TestComputeMetrics:
    def test_all_answered_means_zero_loss(self, clean_run):
        sc, log = clean_run
        m = compute_metrics(log, sc)
        assert m.data_loss == 0.0
        assert m.losses == 0
        assert m.mean_packet_delay_s == pytest.approx(0.123071)

    def test_loss_fraction_definition(self):
        lines = [
            "0,sim,start,scenario=x seed=0 duration_us=1000000",
            "0,agg,solicit,app=1 seq=0 module=1",
            "100,agg,solicit_lost,app=1 seq=0 module=1 reason=reattempts_exhausted",
            "200,agg,solicit,app=1 seq=1 module=1",
            "300,agg,solicit_ok,app=1 seq=1 module=1 delay_s=0.1 v=(1,0)",
            "1000000,sim,end,reason=duration stale=0",
        ]
        m = compute_metrics(lines)
        assert m.data_loss == pytest.approx(0.5)

    def test_availability_from_log_matches_engine_integral(self, clean_run):
        sc, log = clean_run
        m = compute_metrics(log, sc)
        for dev_name, audit in m.audits.items():
            dev_frac = m.availability_per_device[dev_name]
            end_us = m.duration_s * 1e6
            assert dev_frac["mcu_sense"] == pytest.approx(
                audit["avail_mcu_us"] / end_us, abs=1e-9)
            assert dev_frac["radio"] == pytest.approx(
                audit["avail_radio_us"] / end_us, abs=1e-9)

    def test_never_available_component(self):
        lines = [
            "0,sim,start,scenario=x seed=0 duration_us=1000000",
            "0,dev:1.1,avail,comp=radio on=0",
            "1000000,sim,end,reason=duration stale=0",
        ]
        m = compute_metrics(lines)
        assert m.initial_per_device["dev:1.1"]["radio"] is None
        assert m.availability["radio"] == 0.0

    def test_metric_determinism(self, clean_run):
        sc, log = clean_run
        a = compute_metrics(log.lines())
        b = compute_metrics(log.lines())
        assert a == b

    def test_malformed_log_names_record(self):
        with pytest.raises(MalformedLog, match="record 2"):
            parse_log_lines(["0,sim,start,ok", "not-a-record"])
        with pytest.raises(MalformedLog, match="record 1"):
            parse_log_lines(["abc,sim,start,x"])

    def test_achieved_rate_bounded_by_targets(self, clean_run):
        sc, log = clean_run
        m = compute_metrics(log, sc)
        acc = m.achieved_rate[1]
        for ach, tgt in zip(acc["achieved_per_period"], acc["targets_per_period"]):
            assert all(a <= t for a, t in zip(ach, tgt))


class TestCompare:
    def test_self_comparison_has_zero_deltas(self):
        report = compare([config()], ["atem+vsda"], seeds=[1, 2],
                         baseline="atem+vsda")
        assert report.deltas == []
        assert len(report.rows) == 2

    def test_pairing_is_by_seed(self):
        report = compare([config()], ["atem+vsda", "fh+vsda"], seeds=[1, 2],
                         baseline="atem+vsda")
        assert {d["seed"] for d in report.deltas} == {1, 2}
        for d in report.deltas:
            assert d["strategy"] == "fh+vsda"

    def test_reference_targets_recorded_not_asserted(self):
        report = compare([config()], ["atem+vsda"], seeds=[1], baseline="atem+vsda")
        assert report.reference_targets == REFERENCE_TARGETS

    def test_summary_has_mean_min_max(self):
        report = compare([config()], ["atem+vsda"], seeds=[1, 2], baseline="atem+vsda")
        agg = report.summary["metrics-unit/atem+vsda"]
        assert set(agg["data_loss"]) == {"mean", "min", "max"}

    def test_apply_strategy_overlay(self):
        cfg = apply_strategy(config(), "central+polling")
        assert cfg["devices"]["strategy"] == "central"
        assert cfg["aggregator"]["scheme"] == "polling"
        # the source config is untouched
        assert config()["devices"]["strategy"] == "atem"


class TestEmitOutputs:
    def test_csv_schema_and_json_round_trip(self, tmp_path):
        report = compare([config()], ["atem+vsda"], seeds=[1], baseline="atem+vsda")
        written = emit_outputs(report, "both", str(tmp_path))
        csv_path = [p for p in written if p.endswith(".csv")][0]
        with open(csv_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0].keys()) == CSV_COLUMNS
        assert rows[0]["schema_version"] == "1"
        json_path = [p for p in written if p.endswith(".json")][0]
        with open(json_path) as fh:
            loaded = json.load(fh)
        assert loaded["rows"][0]["scenario"] == "metrics-unit"
        assert loaded["reference_targets"] == REFERENCE_TARGETS

    def test_empty_report_writes_header_only(self, tmp_path):
        from blis_sim.metrics import ComparisonReport
        report = ComparisonReport(baseline="atem+vsda")
        written = emit_outputs(report, "csv", str(tmp_path))
        with open(written[0]) as fh:
            lines = fh.read().strip().splitlines()
        assert len(lines) == 1
        assert lines[0].split(",") == CSV_COLUMNS
