import random

import pytest
from hypothesis import given, settings, strategies as st

from vmmsim.guests import DomainState
from vmmsim.recover import RecoveryConfig
from vmmsim.rvi import (CREATE_STEPS, DESTROY_STEPS, EAGAIN, ENOENT, RING_STALL_SCANS, ComponentFault,
                        PrivVmCrash, PrivVmRecoveryBlocked, VmManager, Xba, XenStore, XenStored, XsRequest,
                        backend_paths, detect_dvm_failure, domain_paths, plan_component_fault, privvm_recover)
from vmmsim.system import RunOptions, System
from vmmsim.topology import get_topology


# -- XenStore ----------------------------------------------------------------------------

def test_write_then_read():
    xs = XenStore()
    assert xs.write("/a/b", "1") == (0, [])
    assert xs.read("/a/b") == "1"
    assert xs.read("/a/c") == -ENOENT


def test_watch_fires_on_write_below_path():
    xs = XenStore()
    assert xs.watch("/local/domain/3", 3) == (0, [(3, "/local/domain/3", "/local/domain/3")])
    _, events = xs.write("/local/domain/3/device/vif/state", "connected")
    assert events == [(3, "/local/domain/3", "/local/domain/3/device/vif/state")]
    assert xs.write("/other", "x")[1] == []


def test_rm_removes_subtree_and_fires():
    xs = XenStore()
    xs.write("/vm/4/role", "appvm")
    xs.write("/vm/4/name", "x")
    xs.watch("/vm", 0)
    _, events = xs.write("/vm/4", None)
    assert xs.read("/vm/4/role") == -ENOENT and events == [(0, "/vm", "/vm/4")]


def test_transaction_conflict():
    xs = XenStore()
    xs.write("/k", "0")
    tid = xs.tx_start()
    assert xs.read("/k", tid) == "0"
    xs.write("/k", "1")
    xs.write("/t", "x", tid)
    assert xs.tx_end(tid, True) == (-EAGAIN, [])
    assert xs.read("/t") == -ENOENT
    tid = xs.tx_start()
    xs.write("/t", "y", tid)
    assert xs.tx_end(tid, True)[0] == 0 and xs.read("/t") == "y"


# -- XBA replica ------------------------------------------------------------------------

_PATHS = ["/a", "/a/b", "/a/c", "/b", "/b/x/y", "/local/domain/1/state", "/local/domain/2/state"]


def _random_request(rng, rid, open_tx):
    op = rng.choice(["read", "write", "write", "write", "rm", "watch", "unwatch", "tx_start", "tx_commit",
                     "tx_abort"])
    domid = rng.randrange(1, 4)
    path = rng.choice(_PATHS)
    tid = rng.choice(open_tx) if open_tx and rng.random() < 0.4 else None
    if op in ("tx_commit", "tx_abort"):
        tid = rng.choice(open_tx) if open_tx else rng.randrange(1, 5)
    value = str(rng.randrange(100)) if op == "write" else None
    return XsRequest(rid, domid, op, path, value, tid)


def _replica_run(seed, n_ops):
    rng = random.Random(seed)
    responses = []
    xsd = XenStored(XenStore(), Xba(), lambda d, r, res: responses.append((d, r, res)),
                    lambda *ev: None)
    open_tx = []
    for rid in range(1, n_ops + 1):
        req = _random_request(rng, rid, open_tx)
        xsd.handle(req)
        if req.op == "tx_start":
            open_tx.append(responses[-1][2])
        elif req.op in ("tx_commit", "tx_abort") and req.tid in open_tx:
            open_tx.remove(req.tid)
        # every request is acknowledged by now: the replica must match
        assert xsd.xba.store.snapshot() == xsd.store.snapshot(), (seed, rid, req)
        assert xsd.xba.log == {}
    return responses


def test_replica_equals_primary_over_1000_ops():
    responses = _replica_run(2024, 1000)
    assert len(responses) == 1000


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=10**9))
def test_replica_equivalence_property(seed):
    _replica_run(seed, 120)


# -- XenStored crash points ---------------------------------------------------------------

class _Clients:
    def __init__(self):
        self.responses = []
        self.events = []

    def respond(self, domid, req_id, result):
        self.responses.append((domid, req_id, result))

    def notify(self, domid, wpath, changed):
        self.events.append((domid, wpath, changed))


def _crash_at(stage, target_op):
    def hook(s, op_id):
        if s == stage and op_id == target_op:
            raise PrivVmCrash(f"crash at {stage}")
    return hook


@pytest.mark.parametrize("stage", XenStored.STAGES)
def test_every_request_answered_after_stage_crash(stage):
    clients = _Clients()
    xba = Xba()
    xsd = XenStored(XenStore(), xba, clients.respond, clients.notify)
    xsd.handle(XsRequest(1, 5, "watch", "/local/domain/5"))
    clients.events.clear()
    xsd.crash_hook = _crash_at(stage, xsd.next_op)
    req = XsRequest(2, 6, "write", "/local/domain/5/cmd", "go")
    with pytest.raises(PrivVmCrash):
        xsd.handle(req)
    fired_before = list(clients.events)
    new = privvm_recover(xba, clients.respond, clients.notify, next_op=xsd.next_op)
    assert [r for r in clients.responses if r[:2] == (6, 2)] == [(6, 2, 0)]
    ev = (5, "/local/domain/5", "/local/domain/5/cmd")
    assert ev in clients.events
    if stage == "watches_fired":
        assert fired_before == [ev]  # fired once before the crash, again after: duplicates allowed
    assert new.store.read("/local/domain/5/cmd") == "go"
    assert new.store.watches == {"/local/domain/5": [5]}
    assert xba.log == {}
    new.handle(XsRequest(3, 6, "read", "/local/domain/5/cmd"))
    assert clients.responses[-1] == (6, 3, "go")


def test_recovery_blocked_without_replica():
    with pytest.raises(PrivVmRecoveryBlocked):
        privvm_recover(None, lambda *a: None, lambda *a: None)
    xba = Xba()
    xba.alive = False
    with pytest.raises(PrivVmRecoveryBlocked):
        privvm_recover(xba, lambda *a: None, lambda *a: None)


def test_reseed_copies_primary():
    xs = XenStore()
    xs.write("/x", "1")
    xba = Xba()
    xba.alive = False
    xba.reseed(xs)
    assert xba.alive and xba.store.snapshot() == xs.snapshot() and xba.store is not xs


# -- atomic VM management --------------------------------------------------------------------

class _FakeHv:
    def __init__(self):
        self.live = set()

    def hc(self, op, args, then):
        if op == "domctl_create":
            self.live.add(args[0].domain_id)
            then(args[0].domain_id)
        elif op == "domctl_destroy":
            self.live.discard(args[0])
            then(0)
        else:
            then(0)


BACKENDS = {"blk": [1, 2], "net": [1]}


def _entries(store, domid):
    return sorted(p for p in store.tree
                  if any(p == q or p.startswith(q + "/") for q in domain_paths(domid) + backend_paths(domid, BACKENDS)))


def _manager(points):
    clients = _Clients()
    xba = Xba()
    xsd = XenStored(XenStore(), xba, clients.respond, clients.notify)
    hv = _FakeHv()

    def hook(kind, step, op_id):
        if (kind, step) in points:
            raise PrivVmCrash(f"{kind} {step}")

    mgr = VmManager(xsd, hv.hc, lambda d: d in hv.live, hook)
    return mgr, hv, xba, clients


@pytest.mark.parametrize("step", ["begin", *CREATE_STEPS])
def test_create_is_atomic_at_every_crash_point(step):
    mgr, hv, xba, clients = _manager({("create", step)})
    dom = DomainState(7, "AppVM_X", "appvm", 1)
    done = []
    with pytest.raises(PrivVmCrash):
        mgr.create(dom, BACKENDS, done.append)
    privvm_recover(xba, clients.respond, clients.notify, mgr)
    store = mgr.xsd.store
    entries = _entries(store, 7)
    if step == "commit":
        assert 7 in hv.live
        assert store.read("/local/domain/7/name") == "AppVM_X"
        assert len(entries) == 2 + len(backend_paths(7, BACKENDS))
    else:
        assert 7 not in hv.live
        assert entries == []
    assert xba.log == {}
    assert xba.store.snapshot() == store.snapshot()


def test_create_without_crash_commits():
    mgr, hv, xba, _ = _manager(set())
    done = []
    mgr.create(DomainState(7, "AppVM_X", "appvm", 1), BACKENDS, done.append)
    assert done == [True] and 7 in hv.live and xba.log == {}
    assert mgr.xsd.store.read("/local/domain/2/backend/blk/7/state") == "initialising"


@pytest.mark.parametrize("step", ["begin", *DESTROY_STEPS])
def test_destroy_always_completes_after_crash(step):
    mgr, hv, xba, clients = _manager(set())
    mgr.create(DomainState(7, "AppVM_X", "appvm", 1), BACKENDS, lambda ok: None)
    mgr.crash_hook = lambda kind, s, op: (_ for _ in ()).throw(PrivVmCrash(s)) if s == step else None
    with pytest.raises(PrivVmCrash):
        mgr.destroy(7, lambda ok: None, BACKENDS)
    privvm_recover(xba, clients.respond, clients.notify, mgr)
    assert 7 not in hv.live
    assert _entries(mgr.xsd.store, 7) == []
    assert xba.log == {}


# -- driver VM detection ------------------------------------------------------------------

def _dvm():
    d = DomainState(2, "DVM", "dvm", 0)
    d.kernel.update(ring_consumed=0, ring_queued=0, heartbeat_ms=0)
    return d


def test_detect_dvm_panic_and_kill():
    d = _dvm()
    d.status, d.panic_reason = "crashed", "oops"
    assert detect_dvm_failure(d, {}, 0, 250) == {"kind": "crash", "cause": "oops"}
    d.status = "destroyed"
    assert detect_dvm_failure(d, {}, 0, 250)["cause"] == "killed"


def test_detect_dvm_ring_stall():
    d = _dvm()
    mon = {}
    d.kernel.update(ring_consumed=4, ring_queued=2)
    scan = 250
    for i in range(RING_STALL_SCANS):
        d.kernel["heartbeat_ms"] = i * scan
        assert detect_dvm_failure(d, mon, i * scan, scan) is None
    d.kernel["heartbeat_ms"] = RING_STALL_SCANS * scan
    ev = detect_dvm_failure(d, mon, RING_STALL_SCANS * scan, scan)
    assert ev == {"kind": "hang", "cause": "ring consumption stalled"}


def test_detect_dvm_healthy_and_idle():
    d = _dvm()
    mon = {}
    for i in range(20):
        d.kernel["heartbeat_ms"] = i * 250
        d.kernel["ring_consumed"] = i
        d.kernel["ring_queued"] = 1
        assert detect_dvm_failure(d, mon, i * 250, 250) is None
    # an idle ring with nothing queued is not a stall
    d.kernel["ring_queued"] = 0
    d.kernel["heartbeat_ms"] = 10_000
    assert detect_dvm_failure(d, mon, 10_000, 250) is None


def test_detect_dvm_scheduling_stall():
    d = _dvm()
    ev = detect_dvm_failure(d, {}, RING_STALL_SCANS * 250, 250)
    assert ev == {"kind": "hang", "cause": "scheduling stall"}


def test_component_fault_plan_is_seeded():
    a = plan_component_fault("privvm", ["PrivVM"], 11)
    assert a == plan_component_fault("privvm", ["PrivVM"], 11)
    assert a.target == "PrivVM" and 5_000 <= a.delay_ms <= 40_000
    effects = {plan_component_fault("dvm", ["DVM1", "DVM2"], s).effect for s in range(200)}
    assert effects == {"crash", "hang", "none"}


# -- whole-system recovery ---------------------------------------------------------------

def _system(cf=None, order="reinit_first", enabled=True):
    return System(get_topology("5AppVM"), RecoveryConfig.full(), 1,
                  options=RunOptions(component_fault=cf, replace_order=order, rvi_enabled=enabled))


def _rvi_log(r):
    return [e[2:] for e in r.trace if e[1] == "rvi"]


def test_fault_free_five_appvm():
    s = _system()
    r = s.run()
    assert all(r.verdicts.values()) and not r.vi_failed
    summ = r.checks["rvi"]
    assert summ["replica_checks"] > 0 and summ["replica_mismatches"] == 0 and summ["outstanding_xs"] == 0


@pytest.mark.parametrize("effect", ["crash", "hang"])
def test_active_dvm_failure_fails_over_during_blk_and_net(effect):
    s = _system(ComponentFault("DVM1", effect, 10000))
    r = s.run()
    assert all(r.verdicts.values()), r.verdicts
    assert not r.vi_failed
    summ = r.checks["rvi"]
    assert summ["failovers"] == 1 and summ["replacements"] == 1 and summ["dma_violations"] == 0
    assert summ["detections"][0]["kind"] == effect
    new = s.by_name["DVM1.r1"].domain_id
    survivor = s.by_name["DVM2"].domain_id
    assert s.disks[new].storage == s.disks[survivor].storage
    for name in ("Server1", "Server2", "Server3"):
        assert s.by_name[name].kernel["blk_trace"].failure is None


def test_both_dvms_failing_is_a_system_failure():
    s = _system(ComponentFault("DVM1", "crash", 10000))
    s.at(10300, lambda: s.guest_panic(s.by_name["DVM2"], "second failure"))
    r = s.run()
    assert r.vi_failed
    assert ("failover_impossible",) in _rvi_log(r)
    assert not all(r.verdicts.values())


def test_xenstore_dvm_failure_reseeds_replica():
    s = _system(ComponentFault("DVM2", "crash", 10000))
    r = s.run()
    log = _rvi_log(r)
    assert log.index(("xba_lost",)) < log.index(("xba_reseeded", "DVM2.r1"))
    assert all(r.verdicts.values()) and r.checks["rvi"]["replica_mismatches"] == 0


@pytest.mark.parametrize("effect", ["crash", "hang", "xenstored_death"])
def test_privvm_recovery_answers_every_request(effect):
    s = _system(ComponentFault("PrivVM", effect, 10000))
    r = s.run()
    summ = r.checks["rvi"]
    assert summ["privvm_recoveries"] == 1 and summ["outstanding_xs"] == 0 and not summ["blocked"]
    assert all(r.verdicts.values()) and not r.vi_failed
    if effect == "xenstored_death":
        assert ("hostmon", "xenstored missing") in _rvi_log(r)


def test_request_during_privvm_outage_answered_after_recovery():
    s = _system(ComponentFault("PrivVM", "crash", 10000))
    answers = []

    def ask():
        s.rvi.xs_request(s.by_name["Server1"], "read", "/local/domain/0/name",
                         then=lambda res: answers.append((s.now, res)))

    s.at(10100, ask)
    r = s.run()
    recovered = next(e[0] for e in r.trace if e[1] == "rvi" and e[2] == "privvm_recovered")
    assert len(answers) == 1 and answers[0][0] >= recovered
    assert r.checks["rvi"]["outstanding_xs"] == 0


def test_dvm_failure_during_privvm_recovery_is_deferred():
    s = _system(ComponentFault("PrivVM", "crash", 10000))
    s.at(11000, lambda: s.guest_panic(s.by_name["DVM1"], "kill during PrivVM recovery"))
    r = s.run()
    log = _rvi_log(r)
    names = [e[0] for e in log]
    assert names.index("replacement_deferred") < names.index("privvm_recovered") < names.index("replace_begin")
    assert r.checks["rvi"]["replacements"] == 1
    assert all(r.verdicts.values()) and r.checks["rvi"]["outstanding_xs"] == 0


def test_dvm_failure_then_privvm_failure_mid_replacement():
    s = _system(ComponentFault("DVM1", "crash", 10000))
    s.at(10300, lambda: s.guest_panic(s.rvi.privvm, "privvm dies mid replacement"))
    r = s.run()
    summ = r.checks["rvi"]
    assert summ["privvm_recoveries"] == 1 and summ["replacements"] == 1
    assert summ["outstanding_xs"] == 0
    names = [e[2:] for e in r.trace if e[1] == "rvi"]
    # the half-booted replacement is discarded and a fresh one finishes the job
    assert ("replace_orphan_destroyed", "DVM1.r1") in names
    assert ("replace_done", "DVM1.r2") in names
    assert s.by_name["DVM1.r1"].status == "destroyed"
    assert all(r.verdicts.values())


def test_privvm_failure_after_device_handover_resumes_replacement():
    s = _system(ComponentFault("DVM1", "crash", 10000))
    real = s.rvi.manager.destroy
    hit = []

    def destroy(domid, done, meta):
        if domid == 1 and not hit:
            hit.append(s.now)
            s.guest_panic(s.rvi.privvm, "dies before destroying the failed DVM")
            return
        return real(domid, done, meta)

    s.rvi.manager.destroy = destroy
    r = s.run()
    names = [e[2:] for e in r.trace if e[1] == "rvi"]
    assert hit and ("replace_resumed", "DVM1.r1") in names
    summ = r.checks["rvi"]
    assert summ["replacements"] == 1 and summ["outstanding_xs"] == 0
    assert s.doms[1].status == "destroyed" and all(r.verdicts.values())


def test_destroy_before_reinit_corrupts_released_memory():
    r_bad = _system(ComponentFault("DVM1", "crash", 10000), order="destroy_first").run()
    r_ok = _system(ComponentFault("DVM1", "crash", 10000)).run()
    assert r_bad.checks["rvi"]["dma_violations"] > 0
    assert r_ok.checks["rvi"]["dma_violations"] == 0


def test_without_recovery_a_dvm_failure_is_a_system_failure():
    r = _system(ComponentFault("DVM1", "crash", 10000), enabled=False).run()
    assert r.vi_failed and not any(r.verdicts.values())


def test_unknown_replace_order_rejected():
    with pytest.raises(ValueError):
        _system(order="sideways")
