import csv
import io
import json

import pytest
from hypothesis import given, settings, strategies as st
from statsmodels.stats.proportion import proportion_confint

from vmmsim import campaign
from vmmsim.campaign import (CampaignReport, RunRecord, aggregate, derive_seed, emit_report, load_report,
                             run_campaign, run_once, stage_list, wilson_interval)
from vmmsim.cli import main
from vmmsim.config import CampaignConfig, load_config
from vmmsim.detect import Outcome
from vmmsim.faults import FaultClass, FaultSpec
from vmmsim.machine import ConfigError
from vmmsim.recover import RecoveryConfig


# -- configuration ------------------------------------------------------------

def test_yaml_config_round_trip(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(
        "topology: 3AppVM\n"
        "run_count: 12\n"
        "master_seed: 5\n"
        "formats: [json, csv]\n"
        "recovery: {reinit_locks: false}\n"
        "detectors: {hang_threshold_ms: 800}\n"
        "faults: {weights: {Register: 2.0}}\n"
    )
    cfg = load_config(str(path))
    assert (cfg.topology, cfg.run_count, cfg.master_seed) == ("3AppVM", 12, 5)
    assert cfg.formats == ("json", "csv")
    assert cfg.recovery == RecoveryConfig.full(reinit_locks=False)
    assert cfg.watchdog() == {"hang_threshold_ms": 800}
    assert CampaignConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("doc", [
    {"topolgy": "1AppVM"},
    {"topology": "9AppVM"},
    {"run_count": 0},
    {"formats": ["xml"]},
    {"component": "dvm"},  # 1AppVM has no driver VM pair
    {"recovery": "most"},
    {"recovery": {"not_a_flag": True}},
    {"detectors": {"sensitivity": 3}},
    {"profile": "HVM"},
])
def test_bad_config_rejected(doc):
    with pytest.raises(ConfigError):
        CampaignConfig.from_dict(doc)


def test_fv_profile_applies_to_appvms_only():
    topo = CampaignConfig(topology="3AppVM", profile="FV").build_topology()
    assert {d.name: d.profile for d in topo.domains if d.role == "appvm"} == {
        "AppVM_Net": "FV", "AppVM_Unix": "FV", "AppVM_Blk": "FV"}
    assert all(d.profile == "PV" for d in topo.domains if d.role != "appvm")


def test_workload_override_merges():
    topo = CampaignConfig(workloads={"blk": {"timeout_ms": 5}}).build_topology()
    assert topo.workload["blk"]["timeout_ms"] == 5
    assert topo.workload["blk"]["retry_budget"] == 3
    with pytest.raises(ConfigError):
        CampaignConfig(workloads={"lvs": {}}).build_topology()


# -- seeds and statistics -------------------------------------------------------

def test_derive_seed_frozen():
    # sha256 over "master:index[:attempt]", first 8 bytes big-endian
    assert derive_seed(0, 0) == 12426054289685354689
    assert derive_seed(0, 1) == 17227200041832915037
    assert derive_seed(7, 3, 2) == 14501314893322624222
    assert derive_seed(7, 3, 0) == derive_seed(7, 3)


def test_wilson_matches_independent_implementation():
    lo, hi = wilson_interval(88, 100)
    ref = proportion_confint(88, 100, alpha=0.05, method="wilson")
    assert lo == pytest.approx(ref[0], abs=1e-6) and hi == pytest.approx(ref[1], abs=1e-6)
    assert (round(lo, 3), round(hi, 3)) == (0.802, 0.930)
    assert wilson_interval(0, 0) is None


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=1, max_value=3000), st.data())
def test_wilson_contains_estimate(n, data):
    k = data.draw(st.integers(min_value=0, max_value=n))
    lo, hi = wilson_interval(k, n)
    assert 0 <= lo <= k / n <= hi <= 1


@settings(max_examples=100, deadline=None)
@given(st.floats(min_value=0.05, max_value=0.95), st.integers(min_value=10, max_value=1000))
def test_wilson_narrows_with_more_runs(p, n):
    def width(m):
        lo, hi = wilson_interval(round(p * m), m)
        return hi - lo
    assert width(4 * n) < width(n)


# -- runs and reports -----------------------------------------------------------------

def test_fault_free_control_run(monkeypatch):
    monkeypatch.setattr(campaign, "plan_injection", lambda mix, seed: None)
    rec, _ = run_once(CampaignConfig(), 0)
    assert rec.outcome == Outcome.NON_MANIFESTED.value
    assert rec.verdicts == {"AppVM_Blk": True} and rec.detection is None


def test_targeted_held_lock_without_reinit_fails_recovery(monkeypatch):
    spec = FaultSpec(FaultClass.HELD_DYNAMIC_LOCK, {"domain": 1, "lock": "evtchn"}, 3000, 0, 1)
    monkeypatch.setattr(campaign, "plan_injection", lambda mix, seed: spec)
    cfg = CampaignConfig(recovery=RecoveryConfig.full(reinit_locks=False))
    rec, _ = run_once(cfg, 0)
    assert rec.detection is not None
    assert rec.outcome.startswith("recovery_failure")


def test_run_replay_identical():
    cfg = CampaignConfig(run_count=3)
    for i in range(3):
        assert run_once(cfg, i)[0] == run_once(cfg, i)[0]


def test_single_run_report_equals_the_run():
    cfg = CampaignConfig(run_count=1, master_seed=3)
    rec, _ = run_once(cfg, 0)
    rep = run_campaign(cfg)
    (stage,) = rep.stages
    assert stage.run_count == 1 and stage.invalid == 0
    assert stage.counts[rec.outcome] == 1 and sum(stage.counts.values()) == 1


def test_counts_sum_to_run_count():
    rep = run_campaign(CampaignConfig(topology="3AppVM", run_count=20, stack=True))
    assert [s.name for s in rep.stages] == [n for n, _ in stage_list(CampaignConfig(stack=True))]
    for s in rep.stages:
        assert sum(s.counts.values()) + s.invalid == 20


def test_invalid_runs_excluded_from_rates():
    recs = [RunRecord(0, 1, 1, Outcome.RECOVERED_CRASH.value, digest="a"),
            RunRecord(1, 2, 1, None, invalid="boom"),
            RunRecord(2, 3, 1, Outcome.NON_MANIFESTED.value, digest="b")]
    s = aggregate("Full", RecoveryConfig.full(), recs)
    assert s.invalid == 1 and s.run_count == 3
    assert s.success_rate == 1.0 and s.no_appvm_failure_rate == 1.0


def test_aggregation_ignores_record_order():
    recs = [run_once(CampaignConfig(), i)[0] for i in range(6)]
    a = aggregate("Full", RecoveryConfig.full(), recs)
    b = aggregate("Full", RecoveryConfig.full(), list(reversed(recs)))
    assert a.to_dict() == b.to_dict()


@pytest.fixture(scope="module")
def small_report():
    return run_campaign(CampaignConfig(run_count=12, stack=True))


def test_json_round_trip(small_report):
    text = emit_report(small_report, "json")
    again = load_report(text)
    assert emit_report(again, "json") == text
    assert json.loads(text)["stages"][0]["summary"]["detected"] == small_report.stages[0].detected


def test_csv_has_one_row_per_outcome(small_report):
    rows = list(csv.reader(io.StringIO(emit_report(small_report, "csv"))))
    assert rows[0] == ["outcome"] + [s.name for s in small_report.stages]
    assert [r[0] for r in rows[1:]] == [o.value for o in Outcome]
    assert len(rows) - 1 == len(Outcome) == 10


def test_text_table_lists_every_stage(small_report):
    text = emit_report(small_report, "text")
    lines = text.splitlines()
    assert lines[0].startswith("topology 1AppVM")
    for name, _ in stage_list(CampaignConfig(stack=True)):
        assert any(line.startswith(name) for line in lines)


def test_unknown_format_rejected(small_report):
    with pytest.raises(ValueError):
        emit_report(small_report, "xml")


def test_parallel_report_is_byte_identical():
    cfg = CampaignConfig(topology="3AppVM", run_count=16, master_seed=9)
    serial = emit_report(run_campaign(cfg, workers=1), "json")
    parallel = emit_report(run_campaign(cfg, workers=3), "json")
    assert serial == parallel


def test_report_from_dict_has_no_records(small_report):
    d = small_report.to_dict()
    assert "records" not in d and "workers" not in d["config"]
    assert isinstance(CampaignReport.from_dict(d), CampaignReport)


# -- command line ------------------------------------------------------------------------

def test_cli_campaign_and_report(tmp_path, capsys):
    out = tmp_path / "r.json"
    assert main(["campaign", "--runs", "4", "--format", "json", "--output", str(out)]) == 0
    assert main(["report", str(out), "--format", "csv"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[0] == "outcome,Full" and len(rows) == 11


def test_cli_multiple_formats(tmp_path):
    pattern = str(tmp_path / "r.{fmt}")
    assert main(["campaign", "--runs", "2", "--format", "json", "--format", "text", "--output", pattern]) == 0
    assert (tmp_path / "r.json").exists() and (tmp_path / "r.text").exists()


def test_cli_run_prints_record(capsys):
    assert main(["run", "--index", "2"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec == run_once(CampaignConfig(), 2)[0].to_dict()


def test_cli_run_trace(capsys):
    assert main(["run", "--index", "0", "--trace"]) == 0
    out = capsys.readouterr().out
    head, _, tail = out.partition("\n{")
    events = [json.loads(line) for line in head.splitlines()]
    assert events and all(isinstance(e, list) and isinstance(e[0], int) for e in events)
    assert json.loads("{" + tail)["run_index"] == 0


def test_cli_latency(capsys):
    assert main(["latency", "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["total_ms"] == 2895
    assert main(["latency", "--skip-scrub", "--skip-nmi-check", "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["total_ms"] == 715
    assert main(["latency", "--skip-scrub"]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1].split()[-2] == "815"


def test_cli_usage_errors(capsys):
    with pytest.raises(SystemExit) as e:
        main(["campaign", "--format", "xml"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["run", "--stage", "Turbo", "--stack"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["campaign", "--component", "dvm"])  # default topology has no driver VMs
    assert e.value.code == 2


def test_cli_invalid_runs_exit_3(monkeypatch, capsys):
    def broken(result):
        return "replica diverged"
    monkeypatch.setattr(campaign, "_invariant_violation", broken)
    assert main(["campaign", "--runs", "2"]) == 3
    assert "2 invalid runs" in capsys.readouterr().err
    assert main(["run", "--index", "0"]) == 3
