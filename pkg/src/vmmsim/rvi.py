"""Recovery of the rest of the virtualization infrastructure: driver VMs and the PrivVM.

The standalone pieces (``XenStore``, ``Xba``, ``XenStored``, ``VmManager`` and
``privvm_recover``) run synchronously and are what the crash-point
enumerations drive. ``RviManager`` wires them into a ``System`` run: driver VM
failover and replacement, PrivVM recovery, hostmon, the LVS client and the
NIC devices whose DMA the replacement ordering has to respect.
"""

from __future__ import annotations

import copy
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .guests import BlkFront, BlkTrace, DomainState, LvsDirector, LvsServer, LvsTrace, NetFront

RING_STALL_SCANS = 5
HOSTMON_MS = 1000
XBA_MS = 1  # PrivVM to DVM_XS forwarding round trip
DVM_BOOT_MS = 1500
PRIVVM_BOOT_MS = 3000
BROADCAST_MS = 250  # background traffic every NIC receives
SCAN_PERIOD_MS = 250
DRAIN_MS = 1000
RETRANSMIT_MS = 1000  # client TCP connect retry

MUTATING = ("write", "rm", "watch", "unwatch", "tx_start", "tx_commit", "tx_abort")
ENOENT, EAGAIN, EINVAL = 2, 11, 22


class PrivVmCrash(Exception):
    """Raised by a crash hook: the PrivVM dies at this point."""


class PrivVmRecoveryBlocked(RuntimeError):
    """The XenStore replica is unavailable, so the PrivVM cannot be rebuilt."""


# -- XenStore -------------------------------------------------------------------

@dataclass(frozen=True)
class XsRequest:
    req_id: int
    domid: int
    op: str  # read | write | rm | watch | unwatch | tx_start | tx_commit | tx_abort
    path: str = ""
    value: Optional[str] = None
    tid: Optional[int] = None


def _under(path: str, prefix: str) -> bool:
    return path == prefix or path.startswith(prefix.rstrip("/") + "/")


class XenStore:
    """Path/value tree with watches and optimistic transactions."""

    def __init__(self):
        self.tree: dict = {}
        self.watches: dict = {}  # path -> sorted watcher domids
        self.transactions: dict = {}  # tid -> {"base": gen, "writes": {path: value or None}, "touched": set}
        self.gen: dict = {}  # path -> generation of its last change
        self.clock = 0
        self.next_tid = 1

    def copy(self) -> "XenStore":
        return copy.deepcopy(self)

    def snapshot(self) -> tuple:
        tx = tuple(sorted((tid, t["base"], tuple(sorted(t["writes"].items(), key=lambda kv: kv[0])),
                           tuple(sorted(t["touched"]))) for tid, t in self.transactions.items()))
        return (tuple(sorted(self.tree.items())), tuple(sorted((p, tuple(w)) for p, w in self.watches.items())),
                tx, self.next_tid)

    def watchers(self, changed: str) -> list:
        out = []
        for wpath in sorted(self.watches):
            if _under(changed, wpath) or _under(wpath, changed):
                out.extend((domid, wpath, changed) for domid in self.watches[wpath])
        return out

    def _set(self, path: str, value: Optional[str]) -> list:
        self.clock += 1
        if value is None:
            gone = [p for p in self.tree if _under(p, path)]
            if not gone:
                return []
            for p in gone:
                del self.tree[p]
                self.gen[p] = self.clock
        else:
            self.tree[path] = value
        self.gen[path] = self.clock
        return self.watchers(path)

    def read(self, path: str, tid: Optional[int] = None):
        if tid is not None:
            t = self.transactions.get(tid)
            if t is None:
                return -EINVAL
            t["touched"].add(path)
            if path in t["writes"]:
                v = t["writes"][path]
                return v if v is not None else -ENOENT
        return self.tree.get(path, -ENOENT)

    def write(self, path: str, value: Optional[str], tid: Optional[int] = None):
        if tid is not None:
            t = self.transactions.get(tid)
            if t is None:
                return -EINVAL, []
            t["writes"][path] = value
            t["touched"].add(path)
            return 0, []
        return 0, self._set(path, value)

    def watch(self, path: str, domid: int):
        w = self.watches.setdefault(path, [])
        if domid not in w:
            w.append(domid)
            w.sort()
        return 0, [(domid, path, path)]  # a new watch fires once immediately

    def unwatch(self, path: str, domid: int):
        w = self.watches.get(path, [])
        if domid not in w:
            return -ENOENT, []
        w.remove(domid)
        if not w:
            del self.watches[path]
        return 0, []

    def tx_start(self) -> int:
        tid = self.next_tid
        self.next_tid += 1
        self.transactions[tid] = {"base": self.clock, "writes": {}, "touched": set()}
        return tid

    def tx_end(self, tid: int, commit: bool):
        t = self.transactions.pop(tid, None)
        if t is None:
            return -EINVAL, []
        if not commit:
            return 0, []
        if any(self.gen.get(p, 0) > t["base"] for p in t["touched"]):
            return -EAGAIN, []
        events = []
        for path, value in sorted(t["writes"].items(), key=lambda kv: kv[0]):
            events.extend(self._set(path, value))
        return 0, events

    def apply(self, req: XsRequest):
        """Execute one request: (result, watch events)."""
        op = req.op
        if op == "read":
            return self.read(req.path, req.tid), []
        if op == "write":
            return self.write(req.path, req.value, req.tid)
        if op == "rm":
            return self.write(req.path, None, req.tid)
        if op == "watch":
            return self.watch(req.path, req.domid)
        if op == "unwatch":
            return self.unwatch(req.path, req.domid)
        if op == "tx_start":
            return self.tx_start(), []
        if op == "tx_commit":
            return self.tx_end(req.tid, True)
        if op == "tx_abort":
            return self.tx_end(req.tid, False)
        raise ValueError(f"unknown XenStore op {op!r}")


class Xba:
    """XenStore backup agent on DVM_XS: a replica tree and the operation log.

    Log entries are dicts keyed by operation id. XenStore requests go through
    received, applied, responded and are truncated once their watches fired.
    VM management operations record the steps completed so far.
    """

    def __init__(self, host_name: str = "DVM_XS"):
        self.host_name = host_name
        self.store = XenStore()
        self.log: dict = {}
        self.alive = True

    def forward(self, op_id: int, req: XsRequest):
        """Log a request and apply it to the replica; returns the replica's (result, events)."""
        result, events = self.store.apply(req)  # reads too: they touch transaction state
        self.log[op_id] = {"kind": "xs", "req": req, "state": "received", "result": result,
                           "events": list(events)}
        return result, events

    def mirror(self, path: str, value: Optional[str]) -> None:
        """Replicate a PrivVM-internal write (toolstack bookkeeping)."""
        self.store.write(path, value)

    def mark(self, op_id: int, state: str) -> None:
        self.log[op_id]["state"] = state

    def begin_vm_op(self, op_id: int, kind: str, domid: int, meta: dict) -> None:
        self.log[op_id] = {"kind": kind, "domid": domid, "steps": ["begin"], "meta": dict(meta)}

    def step(self, op_id: int, name: str) -> None:
        self.log[op_id]["steps"].append(name)

    def truncate(self, op_id: int) -> None:
        self.log.pop(op_id, None)

    def reseed(self, store: XenStore) -> None:
        """A replacement DVM_XS takes its state from the running PrivVM."""
        self.store = store.copy()
        self.log = {}
        self.alive = True


class XenStored:
    """The XenStore daemon in the PrivVM. Requests are handled one at a time.

    ``respond(domid, req_id, result)`` and ``notify(domid, watch_path, changed)``
    deliver to clients. ``crash_hook(stage, op_id)`` may raise PrivVmCrash.
    ``receive`` forwards to the replica; ``complete`` applies locally, acks and
    fires watches. ``handle`` does both.
    """

    STAGES = ("received", "applied", "responded", "watches_fired")

    def __init__(self, store: XenStore, xba: Optional[Xba], respond: Callable, notify: Callable,
                 crash_hook: Optional[Callable] = None, next_op: int = 1):
        self.store = store
        self.xba = xba
        self.respond = respond
        self.notify = notify
        self.crash_hook = crash_hook
        self.next_op = next_op
        self.busy: Optional[tuple] = None  # (op_id, req) between receive and complete
        self.acked: list = []  # op ids acknowledged, for replica checks

    def _crash(self, stage: str, op_id: int) -> None:
        if self.crash_hook is not None:
            self.crash_hook(stage, op_id)

    def replicated(self) -> bool:
        return self.xba is not None and self.xba.alive

    def alloc_op(self) -> int:
        op_id = self.next_op
        self.next_op += 1
        return op_id

    def receive(self, req: XsRequest) -> int:
        if self.busy is not None:
            raise RuntimeError("XenStored handles one request at a time")
        op_id = self.alloc_op()
        if self.replicated():
            self.xba.forward(op_id, req)
        self.busy = (op_id, req)
        self._crash("received", op_id)
        return op_id

    def complete(self) -> None:
        op_id, req = self.busy
        result, events = self.store.apply(req)
        if self.replicated() and op_id in self.xba.log:
            self.xba.mark(op_id, "applied")
        self._crash("applied", op_id)
        self.busy = None
        self.respond(req.domid, req.req_id, result)
        self.acked.append(op_id)
        if self.replicated() and op_id in self.xba.log:
            self.xba.mark(op_id, "responded")
        self._crash("responded", op_id)
        for ev in events:
            self.notify(*ev)
        self._crash("watches_fired", op_id)
        if self.replicated():
            self.xba.truncate(op_id)

    def handle(self, req: XsRequest) -> None:
        self.receive(req)
        self.complete()

    def internal_write(self, path: str, value: Optional[str]) -> None:
        """Toolstack write that is not a client request; replicated before it is applied."""
        if self.replicated():
            self.xba.mirror(path, value)
        for ev in self.store.write(path, value)[1]:
            self.notify(*ev)


def privvm_recover(xba: Optional[Xba], respond: Callable, notify: Callable,
                   manager: Optional["VmManager"] = None, next_op: int = 1) -> XenStored:
    """Rebuild XenStored in a pristine PrivVM from the replica and settle the log.

    Every logged request gets its response (the result the replica computed)
    and its watches fire again; incomplete VM operations are aborted or rolled
    forward by ``manager``. Watch events may be duplicated, never lost.
    """
    if xba is None or not xba.alive:
        raise PrivVmRecoveryBlocked("XenStore replica unavailable")
    xsd = XenStored(xba.store.copy(), xba, respond, notify, next_op=max([next_op, *xba.log]) + 1)
    pending_vm = []
    for op_id in sorted(xba.log):
        entry = xba.log[op_id]
        if entry["kind"] != "xs":
            pending_vm.append(op_id)
            continue
        req = entry["req"]
        if entry["state"] != "responded":
            respond(req.domid, req.req_id, entry["result"])
            xba.mark(op_id, "responded")
        for ev in entry["events"]:
            notify(*ev)
        xba.truncate(op_id)
    if manager is not None:
        manager.xsd = xsd
        for op_id in pending_vm:
            manager.settle(op_id)
    return xsd


# -- atomic VM management ------------------------------------------------------------

CREATE_STEPS = ("domctl_create", "xs_entries", "backend_connect", "unpause", "commit")
DESTROY_STEPS = ("xs_cleanup", "domctl_destroy", "commit")


def domain_paths(domid: int) -> list:
    return [f"/local/domain/{domid}", f"/vm/{domid}"]


def backend_paths(domid: int, backends: dict) -> list:
    """backends: kind -> list of backend domids."""
    return [f"/local/domain/{b}/backend/{kind}/{domid}" for kind in sorted(backends) for b in backends[kind]]


class VmManager:
    """PrivVM toolstack: VM create and destroy made atomic by the replica's log.

    ``hc(op, args, then)`` issues a hypercall as the PrivVM. ``is_live(domid)``
    asks the hypervisor whether a domain exists. Every step is a continuation
    so the same code runs synchronously in tests and across events in a run.
    """

    def __init__(self, xsd: XenStored, hc: Callable, is_live: Callable,
                 crash_hook: Optional[Callable] = None):
        self.xsd = xsd
        self.hc = hc
        self.is_live = is_live
        self.crash_hook = crash_hook
        self.domains: dict = {}  # domid -> DomainState, for create replays and aborts

    @property
    def xba(self) -> Optional[Xba]:
        return self.xsd.xba if self.xsd.replicated() else None

    def _log_begin(self, kind: str, domid: int, meta: dict) -> int:
        op_id = self.xsd.alloc_op()
        if self.xba is not None:
            self.xba.begin_vm_op(op_id, kind, domid, meta)
        self._crash(kind, "begin", op_id)
        return op_id

    def _log_step(self, op_id: int, kind: str, name: str) -> None:
        xba = self.xba
        if xba is not None and op_id in xba.log:
            xba.step(op_id, name)
        self._crash(kind, name, op_id)

    def _crash(self, kind: str, step: str, op_id: int) -> None:
        if self.crash_hook is not None:
            self.crash_hook(kind, step, op_id)

    def create(self, dom: DomainState, backends: dict, done: Callable) -> None:
        """Create ``dom`` paused, publish it in XenStore, connect backends, unpause."""
        meta = {"backends": {k: list(v) for k, v in backends.items()}}
        self.domains[dom.domain_id] = dom
        op_id = self._log_begin("create", dom.domain_id, meta)
        dom.start_paused = True
        dom.paused_by_controller = True

        def created(r):
            if r != dom.domain_id:
                self._abort_create(op_id, dom.domain_id, meta)
                done(False)
                return
            self._log_step(op_id, "create", "domctl_create")
            self.xsd.internal_write(f"/local/domain/{dom.domain_id}/name", dom.name)
            self.xsd.internal_write(f"/vm/{dom.domain_id}/role", dom.role)
            self._log_step(op_id, "create", "xs_entries")
            for path in backend_paths(dom.domain_id, backends):
                self.xsd.internal_write(path + "/state", "initialising")
            self._log_step(op_id, "create", "backend_connect")
            self.hc("vm_unpause", (dom.domain_id,), unpaused)

        def unpaused(r):
            self._log_step(op_id, "create", "unpause")
            self._commit(op_id, "create")
            done(True)

        self.hc("domctl_create", (dom,), created)

    def destroy(self, domid: int, done: Callable, backends: Optional[dict] = None) -> None:
        meta = {"backends": {k: list(v) for k, v in (backends or {}).items()}}
        op_id = self._log_begin("destroy", domid, meta)
        self._cleanup_entries(domid, meta)
        self._log_step(op_id, "destroy", "xs_cleanup")

        def destroyed(r):
            self._log_step(op_id, "destroy", "domctl_destroy")
            self._commit(op_id, "destroy")
            done(r == 0)

        self.hc("domctl_destroy", (domid,), destroyed)

    def _commit(self, op_id: int, kind: str) -> None:
        xba = self.xba
        if xba is not None:
            xba.step(op_id, "commit")
        self._crash(kind, "commit", op_id)
        if xba is not None:
            xba.truncate(op_id)

    def _cleanup_entries(self, domid: int, meta: dict) -> None:
        for path in domain_paths(domid) + backend_paths(domid, meta["backends"]):
            self.xsd.internal_write(path, None)

    def _abort_create(self, op_id: int, domid: int, meta: dict) -> None:
        self._cleanup_entries(domid, meta)
        if self.is_live(domid):
            self.hc("domctl_destroy", (domid,), lambda r: None)
        if self.xba is not None:
            self.xba.truncate(op_id)

    def settle(self, op_id: int) -> str:
        """Finish a logged operation after a PrivVM crash: abort creates, complete destroys."""
        entry = self.xba.log[op_id]
        domid = entry["domid"]
        if entry["kind"] == "create":
            if "commit" in entry["steps"]:
                self.xba.truncate(op_id)
                return "committed"
            self._abort_create(op_id, domid, entry["meta"])
            return "aborted"
        self._cleanup_entries(domid, entry["meta"])
        if "domctl_destroy" not in entry["steps"] and self.is_live(domid):
            self.hc("domctl_destroy", (domid,), lambda r: None)
        self.xba.truncate(op_id)
        return "completed"


# -- driver VM pairs -------------------------------------------------------------------

@dataclass
class DvmPair:
    active: int
    spare: int
    failed: set = field(default_factory=set)

    def members(self) -> tuple:
        return (self.active, self.spare)


def detect_dvm_failure(dvm: DomainState, monitor: dict, now: int, scan_ms: int,
                       threshold: int = RING_STALL_SCANS) -> Optional[dict]:
    """One detector pass over a driver VM.

    ``monitor`` carries the detector's memory for this DVM: the ring
    consumption count and when it last moved, plus the kernel heartbeat time.
    """
    if dvm.status == "crashed":
        return {"kind": "crash", "cause": dvm.panic_reason or "crash hypercall"}
    if dvm.status == "destroyed":
        return {"kind": "crash", "cause": "killed"}
    consumed, queued = dvm.kernel.get("ring_consumed", 0), dvm.kernel.get("ring_queued", 0)
    if consumed != monitor.get("consumed") or not queued:
        monitor["consumed"] = consumed
        monitor["moved_ms"] = now
    elif now - monitor.get("moved_ms", now) >= threshold * scan_ms:
        return {"kind": "hang", "cause": "ring consumption stalled"}
    beat = dvm.kernel.get("heartbeat_ms")
    if beat is not None and now - beat >= threshold * scan_ms:
        return {"kind": "hang", "cause": "scheduling stall"}
    return None


class Nic:
    """A network card. It keeps DMA-ing received frames into the buffers its
    driver posted until some driver re-initializes it."""

    def __init__(self, machine, source_id: str):
        self.machine = machine
        self.source_id = source_id
        self.owner: Optional[int] = None
        self.buffers: list = []
        self.idx = 0
        self.violations: list = []

    def reset(self, owner: DomainState) -> None:
        self.owner = owner.domain_id
        self.buffers = list(owner.ring_pool[:4])
        self.idx = 0

    def dma(self, now: int) -> None:
        if not self.buffers:
            return
        page = self.buffers[self.idx % len(self.buffers)]
        self.idx += 1
        info = self.machine.memory.page_info[page]
        if info.owner != self.owner:
            self.violations.append({"time_ms": now, "page": page, "owner": info.owner,
                                    "dma_issuer": self.owner, "nic": self.source_id})
        self.machine.memory.contents[page] = (now * 2654435761) & 0xFFFF_FFFF


# -- integration with a run -------------------------------------------------------------------

@dataclass(frozen=True)
class ComponentFault:
    """A fault in a PrivVM or driver VM kernel rather than in the hypervisor."""

    target: str  # domain name
    effect: str  # crash | hang | xenstored_death | none
    delay_ms: int

    def to_dict(self) -> dict:
        return {"target": self.target, "effect": self.effect, "delay_ms": self.delay_ms}


COMPONENT_EFFECTS = {
    "dvm": {"crash": 0.40, "hang": 0.15, "none": 0.45},
    "privvm": {"crash": 0.35, "hang": 0.10, "xenstored_death": 0.10, "none": 0.45},
}


def plan_component_fault(role: str, targets: list, run_seed: int) -> ComponentFault:
    rng = random.Random(f"{run_seed}:plan")
    target = rng.choice(sorted(targets))
    weights = COMPONENT_EFFECTS[role]
    x = rng.random() * sum(weights.values())
    effect = "none"
    for name in weights:
        x -= weights[name]
        if x < 0:
            effect = name
            break
    return ComponentFault(target, effect, rng.randint(5_000, 40_000))


class RviManager:
    """Driver VM and PrivVM recovery inside a ``System`` run, plus the LVS scenario."""

    def __init__(self, system, replace_order: str = "reinit_first", enabled: bool = True,
                 component_fault: Optional[ComponentFault] = None):
        if replace_order not in ("reinit_first", "destroy_first"):
            raise ValueError(f"unknown replacement order {replace_order!r}")
        self.sys = system
        self.topo = system.topo
        self.enabled = enabled
        self.replace_order = replace_order
        self.component_fault = component_fault
        self.rng = random.Random(f"{system.seed}:rvi")
        active, spare = next(iter(self.topo.dvm_pairs.items()))
        self.pair = DvmPair(system.by_name[active].domain_id, system.by_name[spare].domain_id)
        self.xs_dvm = system.by_name[self.topo.xenstore_dvm].domain_id
        self.privvm = system.by_name["PrivVM"]
        self.xba = Xba(self.topo.xenstore_dvm)
        self.xs_rings: dict = {}  # domid -> deque of XsRequest (client memory)
        self.xs_waiting: dict = {}  # (domid, req_id) -> callback
        self.xs_next: dict = {}
        self.xs_scheduled = False
        self.xsd = XenStored(XenStore(), self.xba, self._xs_respond, self._xs_notify)
        self.manager = VmManager(self.xsd, self._priv_hc, self._is_live)
        self.monitors: dict = {}
        self.nics: dict = {}
        self.failovers: list = []
        self.replacements: list = []
        self.privvm_recoveries: list = []
        self.pending_replace: deque = deque()
        self.replacing: Optional[int] = None
        self.replace_ctx: Optional[dict] = None  # progress of the replacement in flight
        self.privvm_down = False
        self.blocked = False
        self.detections: list = []
        self.dma_checks: list = []
        self.generation = 0
        self.replica_checks = 0
        self.replica_mismatches = 0
        self.lvs = None
        self.name_serial = 0
        system.listeners["domain_crash"].append(self.on_domain_crash)
        system.listeners["tick"].append(self.on_tick)
        system.listeners["resume"].append(self.on_resume)

    # -- helpers ------------------------------------------------------------------------
    def _priv_hc(self, op: str, args: tuple, then) -> None:
        priv = self.privvm
        self.sys.hc(priv, op, (priv.domain_id, *args), then)

    def _is_live(self, domid: int) -> bool:
        d = self.sys.vmm.domain_if_live(domid)
        return d is not None and d.status != "destroyed"

    def log(self, *item) -> None:
        self.sys.trace.append((self.sys.now, "rvi", *item))

    def dvm_alive(self, domid: int) -> bool:
        d = self.sys.doms[domid]
        return d.status == "running" and not d.kernel.get("hung")

    # -- setup ---------------------------------------------------------------------------
    def setup(self) -> None:
        s = self.sys
        for domid in self.pair.members():
            dvm = s.doms[domid]
            sid = s._source_for(dvm.name, "net")
            nic = Nic(s.machine, sid)
            nic.reset(dvm)
            self.nics[domid] = nic
            self.monitors[domid] = {}
            dvm.kernel["heartbeat_ms"] = 0
        self.privvm.kernel["xenstored_alive"] = True
        self.privvm.kernel["heartbeat_ms"] = 0
        for d in self.topo.domains:
            dom = s.by_name[d.name]
            self.xsd.internal_write(f"/local/domain/{dom.domain_id}/name", d.name)
        self.lvs = LvsScenario(self)
        self.lvs.build()
        s.at(HOSTMON_MS, self.hostmon)
        s.at(BROADCAST_MS, self.broadcast)
        if self.component_fault is not None:
            s.at(self.component_fault.delay_ms, self.inject_component)

    # -- XenStore clients -----------------------------------------------------------------
    def xs_request(self, dom: DomainState, op: str, path: str = "", value=None, tid=None, then=None) -> None:
        rid = self.xs_next.get(dom.domain_id, 1)
        self.xs_next[dom.domain_id] = rid + 1
        req = XsRequest(rid, dom.domain_id, op, path, value, tid)
        self.xs_rings.setdefault(dom.domain_id, deque()).append(req)
        if then is not None:
            self.xs_waiting[(dom.domain_id, rid)] = then
        self._kick_xenstored()

    def outstanding_requests(self) -> int:
        return len(self.xs_waiting)

    def _kick_xenstored(self) -> None:
        if not self.xs_scheduled and not self.privvm_down:
            self.xs_scheduled = True
            self.sys.guest_after(self.privvm, 0, self._xenstored_run)

    def _xenstored_run(self) -> None:
        self.xs_scheduled = False
        if self.privvm_down or not self.privvm.kernel.get("xenstored_alive"):
            return
        if self.xsd.busy is not None:
            return
        for domid in sorted(self.xs_rings):
            ring = self.xs_rings[domid]
            if ring:
                req = ring.popleft()
                self.xsd.receive(req)
                gen = self.generation
                delay = XBA_MS if self.xsd.replicated() else 0
                self.sys.at(self.sys.now + delay, self._xenstored_complete, gen)
                return

    def _xenstored_complete(self, gen: int) -> None:
        if gen != self.generation or self.privvm_down:
            return
        if not self.sys.can_run(self.privvm):
            self.sys._defer(self.privvm, self._xenstored_complete, (gen,))
            return
        self.xsd.complete()
        self.check_replica()
        if any(self.xs_rings.values()):
            self._kick_xenstored()

    def check_replica(self) -> None:
        if not self.xsd.replicated():
            return
        self.replica_checks += 1
        if self.xba.store.snapshot() != self.xsd.store.snapshot():
            self.replica_mismatches += 1

    def _xs_respond(self, domid: int, req_id: int, result) -> None:
        fn = self.xs_waiting.pop((domid, req_id), None)
        dom = self.sys.doms.get(domid)
        if fn is not None and dom is not None:
            self.sys.guest_after(dom, 0, fn, result)

    def _xs_notify(self, domid: int, wpath: str, changed: str) -> None:
        dom = self.sys.doms.get(domid)
        if dom is None:
            return
        h = dom.handlers.get("xs_watch")
        if h is not None:
            self.sys.guest_after(dom, 0, h, wpath, changed)

    # -- detection -------------------------------------------------------------------------
    def on_tick(self) -> None:
        s = self.sys
        for dom in (self.privvm, *[s.doms[d] for d in self.pair.members()]):
            if s.can_run(dom) and not dom.kernel.get("hung"):
                dom.kernel["heartbeat_ms"] = s.now
        for domid in list(self.pair.members()):
            dvm = s.doms[domid]
            if domid in self.pair.failed or s.vmm.stuck.get(dvm.cpu) is not None:
                continue
            self._ring_counts(dvm)
            ev = detect_dvm_failure(dvm, self.monitors.setdefault(domid, {}), s.now, SCAN_PERIOD_MS)
            if ev is not None:
                self.dvm_failed(domid, ev)
        priv = self.privvm
        if not self.privvm_down and s.vmm.stuck.get(priv.cpu) is None:
            beat = priv.kernel.get("heartbeat_ms")
            if priv.status == "crashed":
                self.privvm_failed({"kind": "crash", "cause": priv.panic_reason or "crash hypercall"})
            elif beat is not None and s.now - beat >= RING_STALL_SCANS * SCAN_PERIOD_MS:
                self.privvm_failed({"kind": "hang", "cause": "scheduling stall"})

    def _ring_counts(self, dvm: DomainState) -> None:
        queued = 0
        for front in self._blkfronts():
            ring = front.rings.get(dvm.domain_id)
            if ring is not None and dvm.domain_id not in front.faulty:
                queued += len(ring.requests)
        for nf in self._netfronts():
            queued += len(nf.tx.get(dvm.domain_id, ()))
        dvm.kernel["ring_queued"] = queued

    def _blkfronts(self) -> list:
        return [d.kernel["blkfront"] for _, d in sorted(self.sys.doms.items())
                if d.alive and "blkfront" in d.kernel]

    def _netfronts(self) -> list:
        return [d.kernel["netfront"] for _, d in sorted(self.sys.doms.items())
                if d.alive and "netfront" in d.kernel]

    def on_domain_crash(self, dom: DomainState) -> bool:
        if dom.role == "dvm" and dom.domain_id in self.pair.members():
            self.dvm_failed(dom.domain_id, {"kind": "crash", "cause": dom.panic_reason or "kernel panic"})
            return self.enabled
        if dom is self.privvm:
            self.privvm_failed({"kind": "crash", "cause": dom.panic_reason or "kernel panic"})
            return self.enabled
        if dom.role == "appvm" and self.lvs is not None:
            self.lvs.appvm_crashed(dom)
        return False

    def on_resume(self) -> None:
        # heartbeats froze with everything else during the hypervisor reboot
        now = self.sys.now
        for dom in (self.privvm, *[self.sys.doms[d] for d in self.pair.members()]):
            if dom.alive and not dom.kernel.get("hung"):
                dom.kernel["heartbeat_ms"] = now
        for m in self.monitors.values():
            m["moved_ms"] = now

    def hostmon(self) -> None:
        s = self.sys
        s.at(s.now + HOSTMON_MS, self.hostmon)
        priv = self.privvm
        if self.privvm_down or not s.can_run(priv):
            return
        if not priv.kernel.get("xenstored_alive"):
            self.log("hostmon", "xenstored missing")
            s.guest_panic(priv, "hostmon: XenStored process gone")

    def record_detection(self, target: str, ev: dict, cpu: int) -> None:
        self.detections.append({"target": target, **ev, "time_ms": self.sys.now})
        if self.component_fault is not None and self.sys.detection is None:
            kind = "hang" if ev["kind"] == "hang" else "crash"
            self.sys.component_detection = {"kind": kind, "cpu": cpu, "cause": f"{target}: {ev['cause']}",
                                            "time_ms": self.sys.now, "triple_fault": False}

    # -- component faults -------------------------------------------------------------------
    def inject_component(self) -> None:
        cf = self.component_fault
        s = self.sys
        dom = s.by_name.get(cf.target)
        if dom is None or dom.status != "running":
            return
        self.sys.component_injected = True
        self.log("component_fault", cf.target, cf.effect)
        if cf.effect == "crash":
            s.guest_panic(dom, "injected kernel fault")
        elif cf.effect == "hang":
            dom.kernel["hung"] = True
        elif cf.effect == "xenstored_death":
            dom.kernel["xenstored_alive"] = False

    # -- driver VM failover and replacement ----------------------------------------------------
    def dvm_failed(self, domid: int, ev: dict) -> None:
        if domid in self.pair.failed:
            return
        s = self.sys
        dvm = s.doms[domid]
        self.pair.failed.add(domid)
        self.log("dvm_failed", dvm.name, ev["kind"], ev["cause"])
        self.record_detection(dvm.name, ev, dvm.cpu)
        if not self.enabled:
            s.vi_failed = True
            return
        self.dvm_failover(domid)
        if domid == self.xs_dvm:
            self.xba.alive = False
            self.log("xba_lost")
        self.pending_replace.append(domid)
        self._next_replacement()

    def dvm_failover(self, domid: int) -> None:
        s = self.sys
        other = self.pair.spare if domid == self.pair.active else self.pair.active
        if other in self.pair.failed:
            self.log("failover_impossible")
            s.vi_failed = True
            for front in self._blkfronts():
                front.mark_faulty(domid, "both driver VMs failed")
            return
        for front in self._blkfronts():
            if domid in front.backends and domid not in front.faulty:
                front.mark_faulty(domid, f"driver VM d{domid} failed")
        if domid == self.pair.active:
            self.pair.active, self.pair.spare = other, domid
            back = s.doms[other].kernel["netback"]
            for nf in self._netfronts():
                if nf.backend == domid:
                    stranded = nf.tx.pop(domid, deque())
                    nf.rebind(other)
                    back.fronts[nf.dom.domain_id] = nf
                    nf.tx[other].extend(stranded)
                    s.hc(nf.dom, "evtchn_send", (nf.dom.domain_id, other, "net"))
        self.failovers.append({"failed": domid, "now_active": self.pair.active, "time_ms": s.now})
        self.log("failover", domid, self.pair.active)

    def _next_replacement(self) -> None:
        if self.replacing is not None or not self.pending_replace:
            return
        if self.privvm_down:
            self.log("replacement_deferred")
            return
        failed = self.pending_replace.popleft()
        self.replacing = failed
        self.dvm_replace(failed)

    def dvm_replace(self, failed_id: int) -> None:
        s = self.sys
        failed = s.doms[failed_id]
        self.name_serial += 1
        base = failed.name.split(".")[0]
        new = s.new_domain(f"{base}.r{self.name_serial}", "dvm", failed.cpu)
        gen = self.generation
        ctx = self.replace_ctx = {"new": new, "stage": "boot", "resume": None}
        self.log("replace_begin", failed.name, new.name, self.replace_order)

        def paused(_r=None):
            if self.replace_order == "destroy_first":
                destroy_failed(after=boot)
            else:
                boot()

        def boot():
            backs = {}
            self.manager.create(new, backs, lambda ok: s.at(s.now + DVM_BOOT_MS, self._guard, gen, booted, ok))

        def booted(ok):
            if not ok:
                self.log("replace_failed", "create")
                s.vi_failed = True
                self.replacing = None
                return
            self._reinit_devices(failed, new)
            ctx["stage"] = "reinit"
            if self.replace_order == "destroy_first":
                ctx["resume"] = reconnect
            else:
                ctx["resume"] = lambda: destroy_failed(after=reconnect)
            ctx["resume"]()

        def destroy_failed(after):
            self.manager.destroy(failed_id, lambda ok: after(), {})

        def reconnect(_r=None):
            self._reconnect(failed, new)
            self.replacing = None
            self.replace_ctx = None
            self.replacements.append({"failed": failed.name, "new": new.name, "time_ms": s.now,
                                      "order": self.replace_order})
            self.log("replace_done", new.name)
            self._next_replacement()

        if failed.status == "running":
            self._priv_hc("vm_pause", (failed_id,), paused)
        else:
            paused()

    def _guard(self, gen: int, fn, *args) -> None:
        """Continue a PrivVM-driven step unless the PrivVM was rebuilt in between."""
        if gen != self.generation:
            return
        self.sys._guest_run(self.privvm, fn, args)

    def _reinit_devices(self, failed: DomainState, new: DomainState) -> None:
        s = self.sys
        new_id = new.domain_id
        for sid, desc in s.vmm.static.irq_descriptors.items():
            if desc.get("guest") == failed.domain_id:
                desc["guest"] = new_id
                src = s.machine.ic.sources[sid]
                # unbinding the dead driver's interrupt ends any delivery it never acknowledged
                cpu = s.machine.cpus[src.bound_cpu]
                if src.vector in cpu.in_service:
                    s.machine.eoi(src.bound_cpu, src.vector)
                src.awaiting_ack = False
                src.masked = False
        s.adopt_devices(failed, new)
        nic = self.nics.pop(failed.domain_id)
        nic.reset(new)
        self.nics[new_id] = nic
        new.kernel["heartbeat_ms"] = s.now
        self.monitors[new_id] = {}
        self.log("devices_reinit", new.name)

    def _reconnect(self, failed: DomainState, new: DomainState) -> None:
        s = self.sys
        fid, nid = failed.domain_id, new.domain_id
        if self.pair.active == fid:
            self.pair.active = nid
        else:
            self.pair.spare = nid
        self.pair.failed.discard(fid)
        disk = s.disks[nid]
        back = new.kernel["blkback"]
        for front in self._blkfronts():
            if fid in front.backends:
                front.backends.remove(fid)
                front.rings.pop(fid, None)
                front.faulty.discard(fid)
                survivor = next((b for b in front.backends if b not in front.faulty), None)
                if survivor is not None:
                    # RAID-1 rebuild from the surviving mirror
                    disk.storage[front.dom.domain_id] = dict(s.disks[survivor].storage.get(front.dom.domain_id, {}))
                front.add_backend(nid)
                back.fronts[front.dom.domain_id] = front
        netback = new.kernel["netback"]
        for nf in self._netfronts():
            netback.fronts[nf.dom.domain_id] = nf
        self.xsd.internal_write(f"/local/domain/{nid}/backend/state", "connected")
        if fid == self.xs_dvm:
            self.xs_dvm = nid
            self.xba.reseed(self.xsd.store)
            self.xba.host_name = new.name
            self.xsd.xba = self.xba
            self.log("xba_reseeded", new.name)

    # -- PrivVM recovery ---------------------------------------------------------------------------
    def privvm_failed(self, ev: dict) -> None:
        if self.privvm_down:
            return
        s = self.sys
        self.privvm_down = True
        self.generation += 1
        self.xs_scheduled = False
        self.log("privvm_failed", ev["kind"], ev["cause"])
        self.record_detection(self.privvm.name, ev, self.privvm.cpu)
        if not self.enabled:
            s.vi_failed = True
            return
        self._try_privvm_recovery()

    def _try_privvm_recovery(self) -> None:
        s = self.sys
        if not self.xba.alive:
            self.blocked = True
            s.vi_failed = True
            self.log("privvm_recovery_blocked")
            return
        old = self.privvm
        s.vmm_destroy(old)
        new = s.new_domain("PrivVM", "privvm", old.cpu)
        new.kernel["xenstored_alive"] = False
        self.privvm = new
        s.by_name["PrivVM"] = new
        s.at(s.now + PRIVVM_BOOT_MS, self._privvm_booted, new)

    def _privvm_booted(self, new: DomainState) -> None:
        s = self.sys
        s.vmm_register(new)
        if not self.xba.alive:
            self.blocked = True
            s.vi_failed = True
            return
        self.xsd.busy = None
        xsd = privvm_recover(self.xba, self._xs_respond, self._xs_notify, self.manager,
                             next_op=self.xsd.next_op)
        self.xsd = xsd
        new.kernel["xenstored_alive"] = True
        new.kernel["heartbeat_ms"] = s.now
        self.privvm_down = False
        self.privvm_recoveries.append({"time_ms": s.now, "new_domid": new.domain_id})
        self.log("privvm_recovered", new.domain_id)
        self.check_replica()
        self._kick_xenstored()
        if self.replacing is not None:
            self._resume_replacement()
        self._next_replacement()
        if self.lvs is not None:
            self.lvs.privvm_back()

    def _resume_replacement(self) -> None:
        """Pick up a replacement the old PrivVM was driving when it failed."""
        ctx = self.replace_ctx
        if ctx is not None and ctx["stage"] == "reinit":
            # the new driver VM already owns the devices: finish with it
            self.log("replace_resumed", ctx["new"].name)
            ctx["resume"]()
            return
        # still booting: discard the half-built driver VM and start over
        self.pending_replace.appendleft(self.replacing)
        self.replacing = None
        self.replace_ctx = None
        orphan = ctx["new"] if ctx is not None else None
        if orphan is not None and self._is_live(orphan.domain_id):
            self.log("replace_orphan_destroyed", orphan.name)
            self.manager.destroy(orphan.domain_id, lambda ok: None, {})

    # -- background traffic --------------------------------------------------------------------------
    def broadcast(self) -> None:
        s = self.sys
        s.at(s.now + BROADCAST_MS, self.broadcast)
        for domid in sorted(self.nics):
            self.nics[domid].dma(s.now)

    def dma_violations(self) -> list:
        out = []
        for domid in sorted(self.nics):
            out.extend(self.nics[domid].violations)
        return out

    def summary(self) -> dict:
        return {
            "failovers": len(self.failovers), "replacements": len(self.replacements),
            "privvm_recoveries": len(self.privvm_recoveries), "blocked": self.blocked,
            "dma_violations": len(self.dma_violations()), "replica_checks": self.replica_checks,
            "replica_mismatches": self.replica_mismatches, "outstanding_xs": self.outstanding_requests(),
            "detections": list(self.detections),
        }



class LvsScenario:
    """Two directors and three real servers on a driver VM pair, plus the clients.

    Clients open one connection every ``connect_every_ms`` at the active NIC.
    A connection unanswered after ``timeout_ms`` counts as a timeout; so does
    every connection open when the backup director takes over.
    """

    def __init__(self, rvi: RviManager):
        self.rvi = rvi
        self.sys = rvi.sys
        self.p = dict(self.sys.topo.workload["lvs"])
        self.client = LvsTrace()
        self.outstanding: dict = {}  # connection id -> time opened
        self.last_sent: dict = {}
        self.next_cid = 1
        self.over = False
        self.directors: list = []
        self.active_director: Optional[int] = None
        self.recreate: Optional[dict] = None
        self.recreate_pending = False
        self.start_ms = 1000

    def build(self) -> None:
        s = self.sys
        topo = s.topo
        servers = [s.by_name[d.name] for d in topo.domains if d.workload == "lvs_server"]
        directors = [s.by_name[d.name] for d in topo.domains if d.workload == "lvs_director"]
        for dom in servers:
            self._server_kernel(dom, LvsTrace())
        sids = [d.domain_id for d in servers]
        for i, dom in enumerate(directors):
            trace = LvsTrace()
            front = self._netfront(dom)
            peer = directors[1 - i].domain_id if len(directors) > 1 else dom.domain_id
            k = LvsDirector(s, dom, front, trace, self, sids, peer, primary=(i == 0))
            dom.kernel["lvs"] = k
            dom.kernel["workload"] = None
            s.traces[dom.name] = trace
            self.directors.append(k)
        self.active_director = directors[0].domain_id
        for dom in servers + directors:
            s._attach(dom)
        for k in self.directors:
            k.start()
        for dom in servers + directors:
            self.rvi.xs_request(dom, "write", f"/local/domain/{dom.domain_id}/device/vif/state", "connected")
            self.rvi.xs_request(dom, "watch", "/lvs/pool")
        for dom in servers + directors:
            s.guest_after(dom, 2000, self.status, dom.name)
        s.at(self.start_ms, self.connect)
        s.at(self.start_ms + 500, self.timeout_scan)
        s.at(self.p["recreate_after_ms"], self.begin_recreate)

    def _netfront(self, dom: DomainState) -> NetFront:
        s = self.sys
        front = NetFront(s, dom, self.rvi.pair.active)  # the NIC is served by the active DVM only
        dom.kernel["netfront"] = front
        dom.handlers["net"] = front.on_virq
        dom.handlers["xs_watch"] = lambda wpath, changed: None
        return front

    def _server_kernel(self, dom: DomainState, trace: LvsTrace) -> None:
        s = self.sys
        pair = self.rvi.pair
        backs = [b for b in pair.members() if b not in pair.failed]
        blk_trace = BlkTrace({})
        front = BlkFront(s, dom, backs, blk_trace, 1000, 3)
        dom.kernel["blkfront"] = front
        dom.kernel["blk_trace"] = blk_trace
        dom.handlers["blk"] = front.on_virq
        nf = self._netfront(dom)
        dom.kernel["lvs"] = LvsServer(s, dom, nf, trace)
        dom.kernel["workload"] = None
        s.traces[dom.name] = trace

    # -- clients --------------------------------------------------------------------
    def connect(self) -> None:
        s = self.sys
        if s.now >= self.p["duration_ms"]:
            self.finish_clients()
            return
        s.at(s.now + self.p["connect_every_ms"], self.connect)
        cid = self.next_cid
        self.next_cid += 1
        self.outstanding[cid] = s.now
        self.last_sent[cid] = s.now
        self.send(cid)

    def send(self, cid: int) -> None:
        s = self.sys
        active = self.rvi.pair.active
        nic = self.rvi.nics.get(active)
        if nic is not None:
            nic.dma(s.now)
        back = s.doms[active].kernel.get("netback")
        if back is not None:
            s._nic_rx(back, self.active_director, ("req", cid))

    def status(self, name: str) -> None:
        """Each LVS VM publishes its counters; directors fold theirs into a shared total."""
        s = self.sys
        dom = s.by_name[name]
        if self.over or dom.status != "running":
            return
        k = dom.kernel["lvs"]
        rvi = self.rvi
        rvi.xs_request(dom, "write", f"/local/domain/{dom.domain_id}/lvs/served", str(k.trace.served))
        if isinstance(k, LvsDirector) and k.active:
            def started(tid):
                if not isinstance(tid, int) or tid < 0:
                    return
                rvi.xs_request(dom, "read", "/lvs/stats/connections", tid=tid,
                               then=lambda v: bump(tid, v))

            def bump(tid, v):
                n = int(v) if isinstance(v, str) else 0
                rvi.xs_request(dom, "write", "/lvs/stats/connections", str(n + 1), tid=tid)
                rvi.xs_request(dom, "tx_commit", tid=tid)

            rvi.xs_request(dom, "tx_start", then=started)
        s.guest_after(dom, 2000, self.status, name)

    def response(self, cid: int) -> None:
        self.last_sent.pop(cid, None)
        if self.outstanding.pop(cid, None) is not None:
            self.client.served += 1

    def timeout_scan(self) -> None:
        s = self.sys
        limit = self.p["timeout_ms"]
        for cid in sorted(self.outstanding):
            if s.now - self.outstanding[cid] >= limit:
                del self.outstanding[cid]
                self.last_sent.pop(cid, None)
                self.client.timeouts += 1
                s.trace.append((s.now, "lvs_timeout", cid))
            elif s.now - self.last_sent[cid] >= RETRANSMIT_MS:
                self.last_sent[cid] = s.now
                self.send(cid)
        if self.over and not self.outstanding:
            self.finish_all()
            return
        s.at(s.now + 500, self.timeout_scan)

    def takeover(self, director: LvsDirector) -> None:
        s = self.sys
        self.active_director = director.dom.domain_id
        reset = len(self.outstanding)
        self.client.timeouts += reset
        self.outstanding.clear()
        self.last_sent.clear()
        s.trace.append((s.now, "lvs_takeover", director.dom.name, reset))
        self.rvi.xs_request(director.dom, "write", "/lvs/active", str(director.dom.domain_id))

    def finish_clients(self) -> None:
        self.over = True

    def finish_all(self) -> None:
        s = self.sys
        if self.recreate is not None and s.create_ok is None:
            s.create_ok = False
        for name in s.topo.appvms:
            trace = s.traces.get(name)
            if trace is not None:
                trace.completed = True
            s.workload_finished(s.by_name[name])

    def appvm_crashed(self, dom: DomainState) -> None:
        pass  # the directors' health checks notice

    # -- destroy and recreate one server ------------------------------------------------
    def begin_recreate(self) -> None:
        s = self.sys
        if self.over:
            return
        if self.rvi.privvm_down:
            self.recreate_pending = True
            return
        servers = [d.name for d in s.topo.domains if d.workload == "lvs_server"]
        name = random.Random(f"{s.seed}:recreate").choice(servers)
        old = s.by_name[name]
        if old.status != "running":
            return
        self.recreate = {"name": name, "old": old.domain_id, "new": None}
        for k in self.directors:
            k.remove_server(old.domain_id)
        s.trace.append((s.now, "lvs_drain", name))
        s.at(s.now + DRAIN_MS, self.rvi._guard, self.rvi.generation, self._destroy_old, old)

    def privvm_back(self) -> None:
        if self.recreate_pending:
            self.recreate_pending = False
            self.begin_recreate()
        elif self.recreate is not None and self.recreate["new"] is None and not self.recreate.get("creating"):
            old = self.sys.doms[self.recreate["old"]]
            if old.status == "destroyed":
                self._create_new(old)
            else:
                self._destroy_old(old)

    def _destroy_old(self, old: DomainState) -> None:
        s = self.sys
        backs = {"vbd": list(old.kernel["blkfront"].backends), "vif": [old.kernel["netfront"].backend]}
        s.detach(old)
        self.rvi.manager.destroy(old.domain_id, lambda ok: self._create_new(old), backs)

    def _create_new(self, old: DomainState) -> None:
        s = self.sys
        self.recreate["creating"] = True
        new = s.new_domain(old.name, "appvm", old.cpu)
        trace = s.traces[old.name]
        pair = self.rvi.pair
        backs = {"vbd": [b for b in pair.members() if b not in pair.failed], "vif": [pair.active]}
        gen = self.rvi.generation

        def created(ok):
            if not ok:
                s.create_ok = False
                return
            s.at(s.now + DVM_BOOT_MS, self.rvi._guard, gen, booted)

        def booted():
            self._server_kernel(new, trace)
            s._attach(new)
            self.recreate["new"] = new.domain_id
            for k in self.directors:
                k.add_server(new.domain_id)
            s.trace.append((s.now, "lvs_recreated", new.name, new.domain_id))

        self.rvi.manager.create(new, backs, created)

    def pong(self, sid: int) -> None:
        if self.recreate is not None and self.recreate["new"] == sid and self.sys.create_ok is None:
            self.sys.create_ok = True

    def finalize(self) -> None:
        s = self.sys
        for name in s.topo.appvms:
            dom = s.by_name[name]
            trace = s.traces[name]
            blk = dom.kernel.get("blk_trace")
            if blk is not None and blk.failure and trace.failure is None:
                trace.failure = blk.failure
        if self.client.timeouts > self.client.max_timeouts:
            individually = [n for n in s.topo.appvms if s.traces[n].failure]
            if not individually:
                for n in s.topo.appvms:
                    s.traces[n].timeouts = self.client.timeouts
