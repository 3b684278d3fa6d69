"""Acceptance criteria, each checked at its stated tolerance and reported in the terminal summary."""

import time

from conftest import CANNED_TRACES, classify_canned, detected_runs, run_targeted
from test_rvi import BACKENDS, _entries, _manager, _replica_run, _system
from test_vmm import COUNT_DONE, MUTATION, PIN_STEPS, UNMAP_STEPS, VALID_DONE, _pin_run

from vmmsim.campaign import emit_report, run_campaign
from vmmsim.config import CampaignConfig
from vmmsim.detect import Outcome
from vmmsim.faults import FaultClass, FaultSpec
from vmmsim.guests import DomainState
from vmmsim.latency import recovery_latency
from vmmsim.matrix import run_matrix
from vmmsim.recover import RecoveryConfig
from vmmsim.rvi import CREATE_STEPS, ComponentFault, PrivVmCrash, privvm_recover


def test_1_diagnostic_matrix(criterion):
    t0 = time.perf_counter()
    results = run_matrix()
    dt = time.perf_counter() - t0
    bad = [r.case for r in results if not r.ok]
    ok = len(results) == 8 and not bad and dt < 5
    criterion("1 diagnostic matrix", ok, f"{len(results) - len(bad)}/{len(results)} pairs in {dt:.2f}s (< 5s)"
              + (f", failing {bad}" if bad else ""))
    assert ok


def test_2_trend_reproduction(criterion):
    t0 = time.perf_counter()
    rep = run_campaign(CampaignConfig(topology="1AppVM", run_count=1000, stack=True))
    dt = time.perf_counter() - t0
    rates = [s.success_rate for s in rep.stages]
    increasing = all(a < b for a, b in zip(rates, rates[1:]))
    invalid = sum(s.invalid for s in rep.stages)
    ok = (len(rates) == 6 and increasing and rates[0] < 0.30 and rates[-1] > 0.85 and dt < 120
          and invalid == 0)
    shown = " -> ".join(f"{100 * r:.1f}%" for r in rates)
    criterion("2 trend reproduction", ok, f"{shown} in {dt:.0f}s (< 120s), {invalid} invalid")
    assert ok


def test_3_latency(criterion):
    combos = {(False, False): 2895, (True, True): 715, (True, False): 815}
    got = {}
    sums_ok = True
    for scrub in (False, True):
        for nmi in (False, True):
            br = recovery_latency(RecoveryConfig.full(skip_scrub=scrub, skip_nmi_check=nmi))
            got[(scrub, nmi)] = br.total_ms
            sums_ok &= sum(ms for _, ms in br.steps) == br.total_ms
    ok = sums_ok and all(got[k] == v for k, v in combos.items())
    criterion("3 latency", ok, f"unoptimized {got[(False, False)]}, both {got[(True, True)]}, "
              f"skip_scrub {got[(True, False)]} ms; sums over 4 combinations {'ok' if sums_ok else 'WRONG'}")
    assert ok


def _pin_suite():
    problems = []
    for mode in ("reset", "wal", "neither"):
        for step in range(len(PIN_STEPS)):
            s, r = _pin_run(step, mode)
            half = [p for p in s.machine.memory.page_info if p.type_use_count > 0 and not p.validity_bit]
            hang = any(x[1] == "vmm_failure" and x[2] == "VmmHang" for x in r.trace)
            if mode != "neither" and half:
                problems.append(f"pin {mode} step {step}: half-done page")
            if mode == "neither" and hang != (COUNT_DONE <= step < VALID_DONE):
                problems.append(f"pin neither step {step}: hang={hang}")
    return problems


def _unmap_suite():
    problems = []
    for step in range(len(UNMAP_STEPS)):
        fault = FaultSpec(FaultClass.MID_HYPERCALL_CRASH, {"op": "grant_unmap", "step": step}, 800, 0, 1)
        _, r = run_targeted("3AppVM", fault)
        rets = [x[4] for x in r.trace if x[1] == "retry_return" and x[3] == "grant_unmap"]
        if len(rets) != 1 or (rets[0] == 0) != (step <= MUTATION):
            problems.append(f"unmap step {step}: retry returned {rets}")
    return problems


def _create_suite():
    problems = []
    for step in ["begin", *CREATE_STEPS]:
        mgr, hv, xba, clients = _manager({("create", step)})
        try:
            mgr.create(DomainState(7, "AppVM_X", "appvm", 1), BACKENDS, lambda ok: None)
            problems.append(f"create {step}: no crash")
            continue
        except PrivVmCrash:
            pass
        privvm_recover(xba, clients.respond, clients.notify, mgr)
        entries = _entries(mgr.xsd.store, 7)
        whole = 7 in hv.live and len(entries) > 0
        none = 7 not in hv.live and not entries
        if not (whole or none) or xba.log:
            problems.append(f"create {step}: partial state")
    return problems


def test_4_crash_point_enumeration(criterion):
    t0 = time.perf_counter()
    problems = _pin_suite() + _unmap_suite() + _create_suite()
    dt = time.perf_counter() - t0
    n = 3 * len(PIN_STEPS) + len(UNMAP_STEPS) + 1 + len(CREATE_STEPS)
    ok = not problems and dt < 10
    criterion("4 crash-point enumeration", ok, f"{n} crash points in {dt:.2f}s (< 10s)"
              + (f", {problems[:3]}" if problems else ""))
    assert ok


def test_5_preservation_invariants(criterion):
    runs = detected_runs(100)
    keys = ("pages_preserved", "free_disjoint", "time_monotone", "locks_free_after_reboot")
    failed = {k: [seed for seed, _, r in runs if not r.checks.get(k, False)] for k in keys}
    ok = len(runs) == 100 and not any(failed.values())
    criterion("5 preservation invariants", ok, f"{len(runs)} detected runs; "
              + ", ".join(f"{k} {100 - len(v)}/100" for k, v in failed.items()))
    assert ok


def test_6_rvi_suite(criterion):
    parts = {}
    stalls = []
    dvm_ok = True
    for how in ("kill", "crash", "hang"):
        if how == "kill":
            s = _system()
            s.at(10000, lambda: s.vmm_destroy(s.by_name["DVM1"]))
        else:
            s = _system(ComponentFault("DVM1", how, 10000))
        r = s.run()
        summ = r.checks["rvi"]
        dvm_ok &= all(r.verdicts.values()) and not r.vi_failed and summ["failovers"] == 1
        stalls.append(max(t.timeouts for n, t in s.traces.items() if n.startswith("Director")))
    parts["dvm failover"] = dvm_ok
    responses = _replica_run(2024, 1000)
    parts["replica 1000 ops"] = len(responses) == 1000  # _replica_run asserts equality after each op
    answered = True
    for effect in ("crash", "hang", "xenstored_death"):
        r = _system(ComponentFault("PrivVM", effect, 10000)).run()
        summ = r.checks["rvi"]
        answered &= summ["privvm_recoveries"] == 1 and summ["outstanding_xs"] == 0
    parts["privvm answers all"] = answered
    ok = all(parts.values())
    criterion("6 rvi suite", ok, ", ".join(f"{k} {'ok' if v else 'FAIL'}" for k, v in parts.items())
              + f"; client timeouts per DVM failure {stalls}")
    assert ok


def test_7_determinism(criterion):
    configs = [CampaignConfig(topology="3AppVM", run_count=30, stack=True, master_seed=4),
               CampaignConfig(topology="5AppVM", component="dvm", run_count=12, master_seed=4)]
    checks = []
    for cfg in configs:
        a = emit_report(run_campaign(cfg), "json")
        b = emit_report(run_campaign(cfg), "json")
        c = emit_report(run_campaign(cfg, workers=2), "json")
        checks.append(a == b == c)
    ok = all(checks)
    criterion("7 determinism", ok, f"serial, repeat and 2-worker reports byte-identical: {checks}")
    assert ok


def test_8_outcome_taxonomy(criterion):
    got = [classify_canned(t) for t in CANNED_TRACES]
    expected = [t[0] for t in CANNED_TRACES]
    values = [o.value for o in got]
    cats = sorted(v.removeprefix("recovery_failure_") for v in values if v.startswith("recovery_failure_"))
    ok = values == expected and len(set(values)) == 8 and cats == ["i", "ii", "iii", "iv"]
    criterion("8 outcome taxonomy", ok, f"{len(set(values))} distinct classes from 8 traces, categories {cats}")
    assert ok
