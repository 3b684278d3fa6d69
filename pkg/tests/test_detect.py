import itertools

import pytest
from hypothesis import given, strategies as st

from conftest import CANNED_TRACES, classify_canned, run_targeted
from vmmsim.detect import (DETECTED_OUTCOMES, RECOVERED_OUTCOMES, DetectedFailure, Outcome, classify_run,
                           detect_hang, on_panic)
from vmmsim.faults import FaultClass, FaultSpec
from vmmsim.machine import Machine
from vmmsim.recover import RecoveryConfig, recovery_outcome_category
from vmmsim.system import RunOptions, System
from vmmsim.topology import get_topology
from vmmsim.vmm import CORRUPT_HOLDER

APPS3 = ["AppVM_Net", "AppVM_Unix", "AppVM_Blk"]


def test_on_panic_event():
    ev = on_panic(1, "bad handle", 1234)
    assert ev == DetectedFailure("crash", 1, "bad handle", 1234, False)
    assert ev.as_dict()["kind"] == "crash"


def test_detect_hang_healthy_and_frozen():
    m = Machine(2)
    for t in range(0, 3000, 100):
        m.watchdogs[0].increment()
        m.watchdogs[1].increment()
        assert detect_hang(m, t) == []
    hangs = []
    for t in range(3000, 5000, 100):
        m.watchdogs[0].increment()
        hangs += detect_hang(m, t)
    assert [(h.kind, h.cpu) for h in hangs][:1] == [("hang", 1)]
    assert hangs[0].time_ms == 3200  # last advance seen at 2900
    assert m.cpus[1].nmi_in_progress and not m.cpus[0].nmi_in_progress


def test_invalid_domain_list_handle_crashes():
    _, r = run_targeted("3AppVM", FaultSpec(FaultClass.CORRUPT_DOMAIN_LIST_HANDLE, {}, 3000, 0, 0))
    assert r.detection["kind"] == "crash"
    assert "domain list" in r.detection["cause"]


def test_triple_fault_is_category_i():
    _, r = run_targeted("1AppVM", FaultSpec(FaultClass.CORRUPT_SP, {"bit": 60}, 3000, 0, 1))
    assert r.detection["triple_fault"] is True
    assert r.recovery["category"] == "i"
    assert classify_run(r.detection, "i", r.verdicts) == Outcome.FAILED_I


def test_held_run_queue_lock_is_a_hang():
    s = System(get_topology("1AppVM"), RecoveryConfig.full(), 0, None,
               options=RunOptions(sampler=False, shortcut_none=False))

    def grab():
        s.vmm.locks.static_locks["schedule.1"].held_by = CORRUPT_HOLDER

    s.at(3000, grab)
    r = s.run()
    assert r.detection["kind"] == "hang" and r.detection["cpu"] == 1
    assert r.recovery["category"] == "ok"


def test_fault_free_run_has_no_detection():
    s = System(get_topology("1AppVM"), RecoveryConfig.full(), 0, None, options=RunOptions(sampler=False))
    r = s.run()
    assert r.detection is None
    assert classify_run(None, None, r.verdicts) == Outcome.NON_MANIFESTED


def test_classify_examples():
    ok = {a: True for a in APPS3}
    assert classify_run({"kind": "crash"}, "ok", ok) == Outcome.RECOVERED_CRASH
    assert classify_run({"kind": "hang"}, "ok", ok) == Outcome.RECOVERED_HANG
    assert classify_run(None, None, {**ok, "AppVM_Net": False}) == Outcome.SILENT_ONE_APPVM
    assert classify_run(None, None, {**ok, "AppVM_Net": False, "AppVM_Blk": False}) == Outcome.SILENT_SYSTEM
    cat = recovery_outcome_category({"reboot_ok": True, "topology": "3AppVM", "appvms": APPS3,
                                     "verdicts": {**ok, "AppVM_Blk": False}, "create_ok": False})
    assert classify_run({"kind": "crash"}, cat, ok) == Outcome.FAILED_IV
    assert classify_run({"kind": "crash"}, None, ok, recovery_enabled=False) == Outcome.DETECTED_NO_RECOVERY
    with pytest.raises(ValueError):
        classify_run({"kind": "crash"}, None, ok)


def test_category_examples():
    assert recovery_outcome_category({"reboot_ok": False, "topology": "1AppVM", "appvms": ["AppVM_Blk"],
                                      "verdicts": {"AppVM_Blk": True}}) == "i"
    bad = {a: False for a in APPS3}
    assert recovery_outcome_category({"reboot_ok": True, "topology": "3AppVM", "appvms": APPS3,
                                      "verdicts": bad, "create_ok": False}) == "ii"


@pytest.mark.parametrize("net,unix,blk,create_ok", list(itertools.product([True, False], repeat=4)))
def test_three_appvm_success_rule(net, unix, blk, create_ok):
    run = {"reboot_ok": True, "topology": "3AppVM", "appvms": APPS3,
           "verdicts": {"AppVM_Net": net, "AppVM_Unix": unix, "AppVM_Blk": blk}, "create_ok": create_ok}
    blk_ok = blk and create_ok
    success = blk_ok and (net or unix)
    assert (recovery_outcome_category(run) == "ok") == success


@pytest.mark.parametrize("verdicts,create_ok,expected", [
    ({"AppVM_Blk": True}, None, "ok"),
    ({"AppVM_Blk": False}, None, "ii"),
    ({"A": True, "B": False, "C": True, "D": True, "E": True}, None, "ok"),
    ({"A": True, "B": False, "C": False, "D": True, "E": True}, None, "iii"),
    ({"A": True, "B": True, "C": True, "D": True, "E": True}, False, "iv"),
])
def test_at_most_one_failed_vm_is_success(verdicts, create_ok, expected):
    run = {"reboot_ok": True, "topology": "other", "appvms": sorted(verdicts), "verdicts": verdicts,
           "create_ok": create_ok}
    assert recovery_outcome_category(run) == expected


def test_canned_traces_cover_every_class_once():
    got = [classify_canned(t).value for t in CANNED_TRACES]
    assert got == [t[0] for t in CANNED_TRACES]
    assert len(set(got)) == 8


@given(st.one_of(st.none(), st.sampled_from(["crash", "hang"])),
       st.sampled_from(["ok", "i", "ii", "iii", "iv"]),
       st.dictionaries(st.sampled_from(APPS3 + ["AppVM_X"]), st.booleans(), min_size=1),
       st.booleans(), st.booleans())
def test_classification_is_exhaustive_and_exclusive(kind, category, verdicts, vi_failed, enabled):
    detection = None if kind is None else {"kind": kind}
    out = classify_run(detection, category, verdicts, vi_failed, enabled)
    assert isinstance(out, Outcome)
    assert out.detected == (detection is not None)
    assert out.silent == (detection is None and (vi_failed or not all(verdicts.values())))
    assert (out in RECOVERED_OUTCOMES) == (detection is not None and enabled and category == "ok")
    assert sum([out.detected, out.silent, out == Outcome.NON_MANIFESTED]) == 1
    assert (out in DETECTED_OUTCOMES) == out.detected
