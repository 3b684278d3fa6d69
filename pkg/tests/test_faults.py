import dataclasses
import random

import pytest
from hypothesis import given, settings, strategies as st

from conftest import run_targeted
from vmmsim import faults
from vmmsim.campaign import run_campaign, run_once
from vmmsim.config import CampaignConfig
from vmmsim.detect import Outcome, classify_run
from vmmsim.faults import (INJECT_DELAY_MS, INJECT_INSTRUCTIONS, FaultClass, FaultMix, FaultSpec, apply_fault,
                           build_catalog, plan_injection)
from vmmsim.machine import ConfigError
from vmmsim.recover import RecoveryConfig
from vmmsim.system import RunOptions, System
from vmmsim.topology import get_topology
from vmmsim.vmm import Activity, TripleFault, VmmPanic


def _mix(topology="1AppVM"):
    return FaultMix.from_dict({}, catalog=build_catalog(get_topology(topology).op_profile))


def _outcome(r):
    return classify_run(r.detection, r.recovery.get("category"), r.verdicts, r.vi_failed)


# -- planning -----------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=2**63 - 1))
def test_planned_trigger_within_ranges(seed):
    spec = plan_injection(_mix(), seed)
    assert INJECT_DELAY_MS[0] <= spec.delay_ms <= INJECT_DELAY_MS[1]
    assert INJECT_INSTRUCTIONS[0] <= spec.instruction_count <= INJECT_INSTRUCTIONS[1]
    assert spec.seed == seed
    if spec.fault_class == FaultClass.REGISTER:
        assert set(spec.params) == {"reg", "bit"} and 0 <= spec.params["bit"] < 64
    else:
        assert spec.fault_class in faults.INSTRUCTION_CLASSES
        assert {"op", "step", "site"} <= set(spec.params)


def test_plan_is_a_pure_function_of_seed():
    mix = _mix()
    assert plan_injection(mix, 12345) == plan_injection(mix, 12345)
    assert plan_injection(mix, 1) != plan_injection(mix, 2)


def test_plan_frozen_examples():
    mix = _mix()
    spec = plan_injection(mix, 2)
    assert spec == FaultSpec(FaultClass.REGISTER, {"reg": "GPR7", "bit": 54}, 5305, 8198, 1, 2)
    spec = plan_injection(mix, 0)
    assert spec.fault_class == FaultClass.DESTINATION
    assert spec.params == {"op": "mmu_update", "step": 3, "site": "mmu_update:write_pte@cpu1"}
    assert (spec.delay_ms, spec.instruction_count, spec.target_cpu) == (5254, 4291, 1)


def test_empty_catalog_rejected():
    with pytest.raises(ConfigError):
        plan_injection(FaultMix.from_dict({}, catalog=[]), 0)


def test_spec_dict_round_trip():
    spec = plan_injection(_mix(), 7)
    assert FaultSpec.from_dict(spec.to_dict()) == spec


# -- state effects ------------------------------------------------------------

def test_held_dynamic_lock_leaves_exactly_one_lock_held(bench):
    vmm = bench.vmm
    before = set(vmm.locks.held())
    act = Activity(1, "evtchn_send", None, ())
    act.step = 0
    spec = FaultSpec(FaultClass.HELD_DYNAMIC_LOCK, {"domain": 1, "lock": "evtchn"})
    rec, action = apply_fault(bench.machine, vmm, spec, act, 0, _mix(), random.Random(0))
    after = set(vmm.locks.held())
    assert after - before == {"d1.evtchn"}
    assert vmm.locks.dynamic_locks["d1.evtchn"].held_by == 1
    assert isinstance(action, VmmPanic)
    assert rec.fault_class == "HeldDynamicLock"


def test_drop_virq_marks_one_queue(bench):
    vmm = bench.vmm
    act = Activity(0, "timer_tick", None, ())
    act.step = 0
    spec = FaultSpec(FaultClass.DROP_VIRQ, {"domain": 1})
    rec, action = apply_fault(bench.machine, vmm, spec, act, 0, _mix(), random.Random(0))
    assert action is None and rec.effect == "silent_heap"
    corrupt = [oid for oid, o in vmm.heap.objects.items() if o.corrupt]
    assert corrupt == [bench.doms[1].virq_obj] == sorted(rec.touched_objects)


def test_corrupt_sp_flips_one_bit(bench):
    regs = bench.machine.cpus[1].regs
    sp = regs.sp
    act = Activity(1, "evtchn_send", None, ())
    act.step = 0
    rec, action = apply_fault(bench.machine, bench.vmm, FaultSpec(FaultClass.CORRUPT_SP, {"bit": 15}), act, 0,
                              _mix(), random.Random(0))
    assert regs.sp ^ sp == 1 << 15
    expected = VmmPanic if faults.sp_mapped(regs.sp) else TripleFault
    assert type(action) is expected
    assert rec.effect == ("corrupt_sp" if expected is VmmPanic else "triple_fault")


# -- run-level examples -------------------------------------------------------

def test_corrupt_sp_without_fix_sp_fails_after_reboot():
    spec = FaultSpec(FaultClass.CORRUPT_SP, {"bit": 15}, 3000, 0, 1)
    _, r = run_targeted("1AppVM", spec, RecoveryConfig.full(fix_sp=False))
    assert r.detection["kind"] == "crash"
    assert r.recovery["reboot_ok"] is False and r.recovery["category"] == "i"
    _, r = run_targeted("1AppVM", spec)
    assert _outcome(r) == Outcome.RECOVERED_CRASH


def _blk_run(timeout_ms, at):
    topo = get_topology("1AppVM")
    w = {k: dict(v) for k, v in topo.workload.items()}
    w["blk"]["timeout_ms"] = timeout_ms
    s = System(dataclasses.replace(topo, workload=w), RecoveryConfig.full(), 0,
               FaultSpec(FaultClass.DROP_VIRQ, {"domain": 1}, at, 0, 0),
               options=RunOptions(sampler=False, shortcut_none=False))
    return s, s.run()


@pytest.mark.parametrize("at", [3000, 3185, 3370])
def test_lost_virq_with_driver_timeout_is_resent(at):
    s, r = _blk_run(1000, at)
    assert ("virq-queue-dropped", 1) in s.vmm.diagnostics
    assert s.traces["AppVM_Blk"].resends == 1
    assert r.verdicts == {"AppVM_Blk": True}
    assert _outcome(r) == Outcome.NON_MANIFESTED


@pytest.mark.parametrize("at", [3000, 3185, 3370])
def test_lost_virq_without_timeouts_fails_workload(at):
    s, r = _blk_run(10**8, at)
    assert ("virq-queue-dropped", 1) in s.vmm.diagnostics
    assert s.traces["AppVM_Blk"].resends == 0
    assert r.verdicts == {"AppVM_Blk": False}
    assert _outcome(r) == Outcome.SILENT_ONE_APPVM


def test_drop_virq_to_net_appvm_resent_or_fails():
    s, r = run_targeted("3AppVM", FaultSpec(FaultClass.DROP_VIRQ, {"domain": 2}, 3000, 0, 0))
    assert s.by_name["AppVM_Net"].domain_id == 2
    assert ("virq-queue-dropped", 2) in s.vmm.diagnostics
    net = s.traces["AppVM_Net"]
    assert not r.verdicts["AppVM_Net"] or net.max_drop > 0


def test_nop_without_effect_is_not_manifested():
    spec = FaultSpec(FaultClass.NOP, {"op": "mmu_update", "step": 1, "effect": "none"}, 3000, 0, 1)
    _, r = run_targeted("1AppVM", spec)
    assert r.injected and r.corruption["effect"] == "none"
    assert _outcome(r) == Outcome.NON_MANIFESTED


def test_at_most_one_fault_applied_per_run(monkeypatch):
    calls = []
    real = faults.apply_fault

    def counting(*a, **kw):
        calls.append(a[2].fault_class)
        return real(*a, **kw)

    monkeypatch.setattr(faults, "apply_fault", counting)
    cfg = CampaignConfig(run_count=30)
    for i in range(30):
        calls.clear()
        rec, _ = run_once(cfg, i)
        # attempts that never reach the trigger do not apply anything
        assert len(calls) <= 1
        assert (len(calls) == 1) == (rec.fault is not None and rec.invalid is None)


def test_run_replays_identically():
    cfg = CampaignConfig(topology="3AppVM", run_count=5)
    for i in range(5):
        a, ta = run_once(cfg, i, keep_trace=True)
        b, tb = run_once(cfg, i, keep_trace=True)
        assert a.to_dict() == b.to_dict() and ta == tb


def test_shipped_mixture_crash_hang_share():
    # Calibration target: crashes plus hangs make up 65-80% of manifested faults.
    rep = run_campaign(CampaignConfig(run_count=300, recovery=RecoveryConfig()), keep_records=True)
    manifested = [r for r in rep.records["Custom"] if r.outcome not in (None, Outcome.NON_MANIFESTED.value)]
    detected = [r for r in manifested if r.detection and r.detection["kind"] in ("crash", "hang")]
    share = len(detected) / len(manifested)
    print(f"crash+hang share {share:.3f} of {len(manifested)} manifested")
    assert 0.65 <= share <= 0.80
