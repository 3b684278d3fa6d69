"""One simulated run: machine, hypervisor, guests, devices and the event loop.

``System`` is also the host interface guest kernels call into (see guests.py).
Guest code runs in events; a hypercall executes to completion within the
event unless a failure point raises. Work for a guest that cannot run (its
CPU is stuck, the hypervisor is rebooting, the domain is paused) is deferred
and replayed once it can.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Optional

from .detect import DetectedFailure, detect_hang, on_panic
from .faults import Effect, FaultMix, FaultSpec, Injector
from .guests import (BlkBack, BlkFront, BlkTrace, DomainState, NetBack, NetFront, NetRunner, NetTrace,
                     StepRunner, StepTrace, Workload, blk_reference, blk_script, evaluate_completion,
                     unix_script)
from .latency import LatencyModel, recovery_latency
from .machine import Delivery, InterruptSource, Machine
from .recover import (RecoveryConfig, RecoveryFailure, failure_handler, microreboot,
                      recovery_outcome_category, retry_pending_hypercalls)
from .topology import Topology
from .vmm import OPS, Frozen, TripleFault, Vmm, VmmFailure, VmmHang, sp_in_vmm

TICK_MS = 100
DISK_MS = 4
NIC_MS = 1
IDE_MS = 3
SCAN_MS = 250
SIGNED64 = 1 << 63


@dataclass
class RunOptions:
    sampler: bool = True
    shortcut_none: bool = True  # a fault with no effect leaves the fault-free trajectory
    check_preservation: bool = True
    latency: LatencyModel = field(default_factory=LatencyModel)
    cutoff_factor: float = 2.0
    privvm_pause: Optional[dict] = None  # {"target": name, "at_ms": t, "hold_ms": d}
    component_fault: Optional[object] = None  # rvi.ComponentFault
    rvi_enabled: bool = True
    replace_order: str = "reinit_first"
    watchdog: dict = field(default_factory=dict)  # {"period_ms", "hang_threshold_ms"}


@dataclass
class RunResult:
    topology: str
    injected: bool
    corruption: Optional[dict]
    detection: Optional[dict]
    recovery: dict
    verdicts: dict
    vi_failed: bool
    create_ok: Optional[bool]
    end_ms: int
    leaked_pages: int
    trace: list
    checks: dict

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for item in self.trace:
            h.update(repr(item).encode())
            h.update(b"\n")
        return h.hexdigest()


class _Freezer:
    """Hook that stops one CPU's activity at a given step."""

    def __init__(self, cpu: int, step: int):
        self.cpu = cpu
        self.step = step

    def __call__(self, vmm, act):
        if act.cpu == self.cpu and act.step == self.step:
            act.frozen = True
            raise Frozen()


def _cost_weighted_step(steps, u: float) -> int:
    total = sum(s.cost for s in steps)
    x = u * total
    for k, s in enumerate(steps):
        x -= s.cost
        if x < 0:
            return k
    return len(steps) - 1


class System:
    def __init__(self, topology: Topology, config: RecoveryConfig, seed: int,
                 fault: Optional[FaultSpec] = None, mix: Optional[FaultMix] = None,
                 options: Optional[RunOptions] = None):
        self.topo = topology
        self.config = config
        self.seed = seed
        self.fault = fault
        self.mix = mix or FaultMix()
        self.opts = options or RunOptions()
        self.srng = random.Random(f"{seed}:sampler")
        self.grng = random.Random(f"{seed}:garbage")
        self.now = 0
        self.q: list = []
        self.seq = 0
        self.trace: list = []
        self.down = False
        self.dead: Optional[str] = None
        self.recovered = False
        self.detection: Optional[DetectedFailure] = None
        self.reboot_ok: Optional[bool] = None
        self.recovery_info: dict = {}
        self.checks: dict = {}
        self.injector: Optional[Injector] = None
        self.finished: set = set()
        self.create_ok: Optional[bool] = None
        self.deferred_doms: dict = {}
        self.virq_scheduled: set = set()
        self.deferred_lines: set = set()
        self.vi_failed = False
        self.ended = False
        self._time_seen = 0
        self.listeners: dict = {"domain_crash": [], "resume": [], "tick": []}
        self.component_detection: Optional[dict] = None
        self.component_injected = False
        self.rvi = None

        n_dom = len(topology.domains)
        sources = [InterruptSource(s.source_id, s.vector, s.level_triggered, bound_cpu=s.cpu)
                   for s in topology.sources]
        wd = self.opts.watchdog
        self.machine = Machine(topology.n_cpus, n_pages=320 + 160 * n_dom, sources=sources,
                               watchdog_period_ms=wd.get("period_ms", 100),
                               hang_threshold_ms=wd.get("hang_threshold_ms", 300))
        self.vmm = Vmm.boot(self.machine, self.clock, wal=config.wal_page_count)
        self._wire(self.vmm)
        for c in range(topology.n_cpus):
            self.machine.cpus[c].regs.sp = sp_in_vmm(c)

        self.doms: dict = {}
        self.by_name: dict = {}
        for i, ds in enumerate(topology.domains):
            dom = DomainState(i, ds.name, ds.role, ds.cpu, profile=ds.profile)
            self.doms[i] = dom
            self.by_name[ds.name] = dom
        for ds in topology.domains:
            if ds.created_at_ms is None:
                self.vmm.register_domain(self.by_name[ds.name])
        for s in topology.sources:
            if s.guest is not None:
                self.vmm.static.irq_descriptors[s.source_id]["guest"] = self.by_name[s.guest].domain_id
        for c in range(topology.n_cpus):
            self.vmm.schedule(c)

        self.disks: dict = {}
        self.line_state: dict = {}  # source id -> callable telling whether the device asserts it
        self.traces: dict = {}
        self.runners: dict = {}
        self._build_drivers()
        self._build_workloads()
        if topology.dvm_pairs:
            from .rvi import RviManager
            self.rvi = RviManager(self, self.opts.replace_order, self.opts.rvi_enabled,
                                  self.opts.component_fault)
            self.rvi.setup()
        self.cutoff_ms = int(topology.nominal_ms * self.opts.cutoff_factor)

    # -- host interface ---------------------------------------------------------
    def clock(self) -> int:
        return self.now

    def at(self, t: int, fn, *args) -> None:
        heapq.heappush(self.q, (t, self.seq, fn, args))
        self.seq += 1

    def domain_rng(self, dom: DomainState) -> random.Random:
        return random.Random(f"{self.seed}:workload:{dom.name}")

    def can_run(self, dom: DomainState) -> bool:
        if self.down or self.dead or dom.status != "running" or dom.kernel.get("hung"):
            return False
        v = dom.vcpus[0]
        vmm = self.vmm
        return v.cpu not in vmm.stuck and vmm.current_vcpu[v.cpu] is v

    def guest_after(self, dom: DomainState, delay: int, fn, *args) -> None:
        self.at(self.now + delay, self._guest_run, dom, fn, args)

    def _guest_run(self, dom, fn, args) -> None:
        if self.can_run(dom):
            fn(*args)
        else:
            self._defer(dom, fn, args)

    def _defer(self, dom, fn, args) -> None:
        if dom.status == "running":
            dom.deferred.append((fn, args))
            self.deferred_doms[dom.domain_id] = dom

    def _flush(self) -> None:
        for domid in sorted(self.deferred_doms):
            dom = self.deferred_doms[domid]
            if not self.can_run(dom):
                continue
            del self.deferred_doms[domid]
            work, dom.deferred = dom.deferred, []
            for i, (fn, args) in enumerate(work):
                if not self.can_run(dom):
                    dom.deferred = work[i:] + dom.deferred
                    self.deferred_doms[domid] = dom
                    break
                fn(*args)
            if self.ended:
                return

    def hc(self, dom: DomainState, op: str, args: tuple, then=None) -> None:
        if not self.can_run(dom):
            self._defer(dom, self.hc, (dom, op, args, then))
            return
        v = dom.vcpus[0]
        v.continuation = (op, args, then)
        try:
            r = self.vmm.hypercall(v.cpu, v, op, args)
        except VmmFailure as e:
            self._vmm_failure(e)
            return
        v.continuation = None
        if then is not None:
            then(r)

    def guest_panic(self, dom: DomainState, reason: str) -> None:
        if dom.status != "running":
            return
        self.trace.append((self.now, "guest_panic", dom.name, reason))
        dom.panic_reason = reason
        if self.can_run(dom):
            self.hc(dom, "crash", (dom.domain_id,))
        dom.status = "crashed"
        dom.deferred.clear()
        self.deferred_doms.pop(dom.domain_id, None)
        trace = self.traces.get(dom.name)
        if trace is not None and trace.failure is None:
            trace.failure = f"kernel panic: {reason}"
        handled = False
        for fn in self.listeners["domain_crash"]:
            handled = bool(fn(dom)) or handled
        if dom.role != "appvm" and not handled:
            self.vi_failed = True
        if dom.role == "appvm":
            self.workload_finished(dom)

    def step_error(self, dom: DomainState, trace, msg: str) -> None:
        self.guest_panic(dom, msg)

    def workload_finished(self, dom: DomainState) -> None:
        self.finished.add(dom.name)
        if all(name in self.finished for name in self.topo.appvms):
            self.ended = True

    def blk_storage(self, dom: DomainState) -> dict:
        front = dom.kernel["blkfront"]
        for b in front.backends:
            if b not in front.faulty:
                return dict(self.disks[b].storage.get(dom.domain_id, {}))
        return {}

    def ide_submit(self, runner) -> None:
        self.at(self.now + IDE_MS, self._ide_done, runner)

    def _ide_done(self, runner) -> None:
        runner.dom.kernel["ide_pending"] = runner.dom.kernel.get("ide_pending", 0) + 1
        self.raise_line("ide")

    def nic_send(self, back: NetBack, fid: int, batch) -> None:
        if batch[0] == "out" and self.rvi is not None:
            self.at(self.now + NIC_MS, self.rvi.lvs.response, batch[1])
            return
        self.at(self.now + NIC_MS, self._nic_rx, back, fid, batch)

    def _nic_rx(self, back: NetBack, fid: int, batch) -> None:
        if back.dom.status != "running":
            return
        back.rx.append((fid, batch))
        self.raise_line(back.source_id)

    # -- devices and interrupts ------------------------------------------------------
    def raise_line(self, sid: str) -> None:
        if self.dead:
            return
        if self.down:
            self.deferred_lines.add(sid)
            return
        if self.machine.raise_interrupt(sid) == Delivery.DELIVERED:
            self._cpu_irq(self.machine.ic.sources[sid].bound_cpu)

    def _cpu_irq(self, cpu: int) -> None:
        if self.down or self.dead or self.vmm.stuck.get(cpu) is True:
            return
        c = self.machine.cpus[cpu]
        by_vector = self.machine.ic.by_vector
        while (vec := c.deliverable()) is not None:
            try:
                self.vmm.irq_device(cpu, by_vector[vec].source_id)
            except VmmFailure as e:
                self._vmm_failure(e)
                return

    def _on_eoi(self, sid: str) -> None:
        if self.line_state.get(sid, _never)():
            self.at(self.now, self.raise_line, sid)

    def _notify(self, domid: int) -> None:
        if domid not in self.virq_scheduled:
            self.virq_scheduled.add(domid)
            self.at(self.now, self._virq_run, domid)

    def _virq_run(self, domid: int) -> None:
        self.virq_scheduled.discard(domid)
        dom = self.doms.get(domid)
        if dom is None or dom.status != "running":
            return
        if not self.can_run(dom):
            self._defer(dom, self._virq_run, (domid,))
            return
        for virq in self.vmm.take_virqs(domid):
            if virq == "pirq:ide":
                dom.kernel["ide_pending"] = max(0, dom.kernel.get("ide_pending", 0) - 1)
            h = dom.handlers.get(virq)
            if h is not None:
                h(virq)
            if self.down or self.ended or not self.can_run(dom):
                break

    def _wire(self, vmm: Vmm) -> None:
        vmm.notify = self._notify
        vmm.on_eoi = self._on_eoi

    # -- construction ----------------------------------------------------------------
    def _source_for(self, dom_name: str, kind: str) -> str:
        for s in self.topo.sources:
            if s.guest == dom_name and s.source_id.startswith(kind):
                return s.source_id
        raise ValueError(f"{dom_name} has no {kind} interrupt line")

    def _build_drivers(self) -> None:
        for ds in self.topo.domains:
            dom = self.by_name[ds.name]
            if "blk" in ds.serves:
                sid = self._source_for(ds.name, "blk")
                disk = Disk(self, dom.domain_id)
                self.disks[dom.domain_id] = disk
                back = BlkBack(self, dom, sid, disk)
                dom.kernel["blkback"] = back
                dom.handlers["blk"] = back.on_kick
                dom.handlers["pirq:" + sid] = back.on_pirq
                self.line_state[sid] = (lambda b=back: bool(b.completed))
            if "net" in ds.serves:
                sid = self._source_for(ds.name, "net")
                back = NetBack(self, dom, sid)
                dom.kernel["netback"] = back
                dom.handlers["net"] = back.on_kick
                dom.handlers["pirq:" + sid] = back.on_pirq
                self.line_state[sid] = (lambda b=back: bool(b.rx))
        for s in self.topo.sources:
            if s.source_id == "ide":
                dom = self.by_name[s.guest]
                self.line_state["ide"] = (lambda d=dom: d.kernel.get("ide_pending", 0) > 0)

    def _build_workloads(self) -> None:
        wl = self.topo.workload
        for ds in self.topo.domains:
            if ds.workload is None:
                continue
            dom = self.by_name[ds.name]
            rng = random.Random(f"{self.seed}:script:{ds.name}")
            if ds.workload == "blk":
                p = wl["blk"]
                script = blk_script(p["n_io"], rng, p["n_mm"])
                trace = BlkTrace(blk_reference(script))
                backs = [self.by_name[b].domain_id for b in ds.blk_backends]
                front = BlkFront(self, dom, backs, trace, p["timeout_ms"], p["retry_budget"])
                dom.kernel["blkfront"] = front
                dom.handlers["blk"] = front.on_virq
                runner = StepRunner(self, dom, Workload("blk", script), trace, p["think_ms"])
                dom.handlers["timer"] = runner.on_timer
                dom.kernel["workload"] = runner.wl
            elif ds.workload == "unix":
                p = wl["unix"]
                has_ide = any(s.source_id == "ide" and s.guest == ds.name for s in self.topo.sources)
                script = unix_script(p["n_steps"], rng, ds.profile, ide=has_ide)
                trace = StepTrace(len(script))
                runner = StepRunner(self, dom, Workload("unix", script), trace, p["think_ms"])
                dom.handlers["timer"] = runner.on_timer
                dom.handlers["pirq:ide"] = runner.on_ide
                dom.kernel["workload"] = runner.wl
            elif ds.workload == "net":
                p = wl["net"]
                trace = NetTrace(0, p["duration_ms"])
                back = self.by_name[ds.net_backend].domain_id
                front = NetFront(self, dom, back)
                dom.kernel["netfront"] = front
                dom.handlers["net"] = front.on_virq
                runner = NetRunner(self, dom, front, trace, p["batch_ms"])
                dom.kernel["workload"] = Workload("net")
            elif ds.workload.startswith("lvs") and self.topo.dvm_pairs:
                continue  # built by the rvi scenario
            else:
                raise ValueError(f"workload {ds.workload!r} needs a driver VM pair")
            self.traces[ds.name] = trace
            self.runners[ds.name] = runner
            if ds.created_at_ms is None:
                self._attach(dom)
                runner.start()
            else:
                self.at(ds.created_at_ms, self._toolstack_create, dom)

    def _attach(self, dom: DomainState) -> None:
        front = dom.kernel.get("blkfront")
        if front is not None:
            for b in front.backends:
                self.doms[b].kernel["blkback"].fronts[dom.domain_id] = front
            self.at(self.now + SCAN_MS, self._scan, dom)
        nf = dom.kernel.get("netfront")
        if nf is not None:
            self.doms[nf.backend].kernel["netback"].fronts[dom.domain_id] = nf

    def detach(self, dom: DomainState) -> None:
        for other in self.doms.values():
            for key in ("blkback", "netback"):
                back = other.kernel.get(key)
                if back is not None:
                    back.fronts.pop(dom.domain_id, None)

    def new_domain(self, name: str, role: str, cpu: int) -> DomainState:
        """A fresh domain record; the toolstack or the hypervisor registers it."""
        dom = DomainState(max(self.doms) + 1, name, role, cpu)
        self.doms[dom.domain_id] = dom
        self.by_name[name] = dom
        return dom

    def vmm_register(self, dom: DomainState) -> None:
        """The hypervisor itself boots a domain (a pristine PrivVM)."""
        if dom.role == "privvm":
            self.vmm.static.domain0 = None
        self.vmm.register_domain(dom)
        try:
            self.vmm.schedule(dom.cpu)
        except VmmFailure as e:
            self._vmm_failure(e)

    def vmm_destroy(self, dom: DomainState) -> None:
        """The hypervisor releases a failed domain without a toolstack."""
        dom.deferred.clear()
        self.deferred_doms.pop(dom.domain_id, None)
        try:
            self.vmm.hc_domctl_destroy(dom.cpu, None, dom.domain_id, dom.domain_id)
        except VmmFailure as e:
            self._vmm_failure(e)
        self.detach(dom)

    def adopt_devices(self, old: DomainState, new: DomainState) -> None:
        """``new`` re-initializes the devices ``old`` drove; in-flight device work is dropped."""
        if "blkback" in old.kernel:
            back = old.kernel["blkback"]
            disk = self.disks.pop(old.domain_id)
            disk.generation += 1
            disk.backend_domid = new.domain_id
            self.disks[new.domain_id] = disk
            nb = BlkBack(self, new, back.source_id, disk)
            new.kernel["blkback"] = nb
            new.handlers["blk"] = nb.on_kick
            new.handlers["pirq:" + back.source_id] = nb.on_pirq
            self.line_state[back.source_id] = (lambda b=nb: bool(b.completed))
        if "netback" in old.kernel:
            back = old.kernel["netback"]
            nb = NetBack(self, new, back.source_id)
            new.kernel["netback"] = nb
            new.handlers["net"] = nb.on_kick
            new.handlers["pirq:" + back.source_id] = nb.on_pirq
            self.line_state[back.source_id] = (lambda b=nb: bool(b.rx))

    def _scan(self, dom: DomainState) -> None:
        if dom.name in self.finished or dom.status != "running" or self.doms.get(dom.domain_id) is not dom:
            return
        front = dom.kernel["blkfront"]
        if self.can_run(dom):
            front.timeout_scan(self.now)
        self.at(self.now + SCAN_MS, self._scan, dom)

    def _toolstack_create(self, dom: DomainState) -> None:
        priv = self.by_name["PrivVM"]

        def created(r):
            self.create_ok = (r == dom.domain_id)
            self.trace.append((self.now, "create", dom.name, r))
            if not self.create_ok:
                trace = self.traces.get(dom.name)
                if trace is not None and trace.failure is None:
                    trace.failure = f"VM create failed ({r})"
                self.workload_finished(dom)
                return
            self._attach(dom)
            self.runners[dom.name].start()

        def go():
            self.hc(priv, "domctl_create", (priv.domain_id, dom), created)

        if priv.status != "running":
            created(-1)
            return
        self.guest_after(priv, 0, go)

    # -- failures, detection and recovery ---------------------------------------------
    def _vmm_failure(self, e: VmmFailure) -> None:
        self.trace.append((self.now, "vmm_failure", type(e).__name__, e.cpu, e.cause))
        if self.recovered:
            self._die(f"post-recovery failure: {e}")
            return
        if self.detection is not None or self.dead:
            return
        if isinstance(e, VmmHang):
            self.vmm.stuck.setdefault(e.cpu, e.irqs_off)
            return
        self._detected(on_panic(e.cpu, e.cause, self.now, isinstance(e, TripleFault)))

    def _die(self, reason: str) -> None:
        if self.dead is None:
            self.dead = reason
            self.trace.append((self.now, "dead", reason))
        self.ended = True

    def _reboot_failed(self, reason: str) -> None:
        self.reboot_ok = False
        self.recovery_info["failure"] = reason
        self._die(f"recovery failed: {reason}")

    def _detected(self, det: DetectedFailure) -> None:
        self.detection = det
        self.trace.append((self.now, "detected", det.kind, det.cpu, det.cause))
        if not self.config.enabled:
            self._die("recovery disabled")
            return
        if det.triple_fault:
            self._reboot_failed("triple fault reset the machine")
            return
        self.down = True
        vmm = self.vmm
        if self.opts.sampler:
            self._sample_snapshot(det)
        before = self._preservation_snapshot() if self.opts.check_preservation else None
        self._time_seen = max(self._time_seen, vmm.time_now())
        try:
            preserved = failure_handler(self.machine, vmm, self.config, det)
            latency = recovery_latency(self.config, self.opts.latency, heap=vmm.heap)
            new = microreboot(preserved, self.config, self.machine, self.clock)
        except (RecoveryFailure, VmmFailure) as e:
            self._reboot_failed(str(e))
            return
        self.recovery_info.update(latency_ms=latency.total_ms, notes=list(preserved.notes))
        if before is not None:
            self._preservation_check(before, new, preserved)
        self.pending_vmm = new
        self.at(self.now + latency.total_ms, self._resume)

    def _sample_snapshot(self, det: DetectedFailure) -> None:
        """Place the other CPUs and the interrupt lines where a random instant would find them."""
        srng = self.srng
        vmm = self.vmm
        saved_hook = vmm.hook
        for c in range(self.topo.n_cpus):
            u, pick, ku = srng.random(), srng.random(), srng.random()
            if c == det.cpu or c in vmm.stuck or vmm.current[c] is not None:
                continue
            v = vmm.current_vcpu[c]
            if v is None:
                continue
            dom = self.doms[v.domid]
            if u >= self.topo.occupancy.get(dom.name, 0.0):
                continue
            op, args = self._harmless_op(dom, pick)
            steps = OPS[op].steps
            k = _cost_weighted_step(steps, ku)
            if not self.config.nmi_ipi:
                # a maskable stop IPI is only taken once interrupts are enabled again
                while k < len(steps) and steps[k].irqs_off:
                    k += 1
                if k == len(steps):
                    continue
            vmm.hook = _Freezer(c, k)
            v.continuation = (op, args, None)
            try:
                vmm.hypercall(c, v, op, args)
                v.continuation = None
            except Frozen:
                self.trace.append((self.now, "sampled", c, op, k))
            except VmmFailure:
                self.trace.append((self.now, "sampled-spin", c, op, k))
            finally:
                vmm.hook = saved_hook
        for sid in sorted(self.topo.line_duty):
            p_in, p_pend = self.topo.line_duty[sid]
            u = srng.random()
            src = self.machine.ic.sources[sid]
            if src.masked or src.awaiting_ack or vmm.stuck.get(src.bound_cpu) is not None:
                continue
            guest = vmm.static.irq_descriptors[sid].get("guest")
            if u < p_in:
                self.machine.raise_interrupt(sid)
                self.machine.cpus[src.bound_cpu].accept()
                try:
                    vmm.deliver_virq(None, guest, "pirq:" + sid)
                except VmmFailure:
                    pass
                self.trace.append((self.now, "line-in-service", sid))
            elif u < p_in + p_pend:
                self.machine.raise_interrupt(sid)
                self.trace.append((self.now, "line-pending", sid))

    def _harmless_op(self, dom: DomainState, pick: float):
        me = dom.domain_id
        if pick < 0.45 and dom.profile == "PV":
            page = dom.pages[34 + int(pick * 10_000) % (len(dom.pages) - 34)]
            return "mmu_update", (me, page, self.machine.memory.contents[page])
        if pick < 0.65:
            return "sched_yield", (me,)
        front = dom.kernel.get("blkfront")
        nf = dom.kernel.get("netfront")
        back = dom.kernel.get("blkback")
        if front is not None:
            return "evtchn_send", (me, front.backends[0], "blk")
        if nf is not None:
            return "evtchn_send", (me, nf.backend, "net")
        if back is not None and back.fronts:
            return "evtchn_send", (me, sorted(back.fronts)[0], "blk")
        return "evtchn_send", (me, me, "kick")

    def _preservation_snapshot(self) -> dict:
        mem = self.machine.memory
        owned = {}
        for p in mem.page_info:
            if p.owner is not None and p.owner >= 0:
                owned[p.page_number] = (mem.contents[p.page_number], p.as_tuple())
        return {"owned": owned, "allocated": {p.page_number for p in mem.page_info if p.owner is not None}}

    def _preservation_check(self, before: dict, new: Vmm, preserved) -> None:
        mem = self.machine.memory
        touched = set()
        if self.injector is not None and self.injector.record is not None:
            touched = self.injector.record.touched_pages
        mismatched = []
        for page, (content, info) in before["owned"].items():
            if page in touched:
                continue
            now_info = mem.page_info[page].as_tuple()
            if mem.contents[page] != content:
                mismatched.append(page)
                continue
            if now_info != info:
                # the repairs are allowed to clear lock bits and stale use counts
                if self.config.reinit_locks and now_info[:4] == info[:4] and info[4]:
                    continue
                if (self.config.reset_page_counter or self.config.wal_page_count) and \
                        now_info[0:2] == info[0:2] and not info[3]:
                    continue
                mismatched.append(page)
        self.checks["pages_preserved"] = not mismatched
        self.checks["mismatched_pages"] = sorted(mismatched)[:16]
        # only pages of structures the reboot itself discarded may come back free
        self.checks["free_disjoint"] = not (new.heap.free_pages & (before["allocated"] - new.reboot_released))
        if self.config.reinit_locks:
            self.checks["locks_free_after_reboot"] = (not new.locks.held() and
                                                     not any(p.lock_bit for p in mem.page_info))

    def _resume(self) -> None:
        vmm = self.vmm = self.pending_vmm
        self.pending_vmm = None
        self._wire(vmm)
        self.down = False
        self.recovered = True
        self.reboot_ok = True
        self.recovery_info["resume_ms"] = self.now
        self.trace.append((self.now, "resume"))
        t = vmm.time_now()
        self.checks["time_monotone"] = t >= self._time_seen
        for w in self.machine.watchdogs:
            w.rearm(self.now)
        for c in range(self.topo.n_cpus):
            self.machine.cpus[c].regs.sp = sp_in_vmm(c)
        domains = [d for d in self.doms.values() if d.vcpus[0].vcpu_obj is not None and d.alive]
        touched = retry_pending_hypercalls(domains, self.config)
        try:
            for c in range(self.topo.n_cpus):
                vmm.schedule(c)
        except VmmFailure as e:
            self._reboot_failed(f"dispatch after reboot: {e.cause}")
            return
        for tr in self.traces.values():
            if isinstance(tr, NetTrace):
                tr.recovery_end_ms = self.now
        for fn in self.listeners["resume"]:
            fn()
        for v in touched:
            dom = self.doms[v.domid]
            if v.continuation is None:
                v.pending_hypercall = None
                v.regs.pc = v.resume_pc
                continue
            op, args, then = v.continuation
            v.continuation = None
            v.pending_hypercall = None
            if v.retry is not None:
                v.retry = None
                self.trace.append((self.now, "retry", dom.name, op))
                self.hc(dom, op, args, self._retry_return(dom.name, op, then))
            else:
                v.regs.pc = v.resume_pc
                self._garbage_return(dom, op, then)
            if self.dead:
                return
        for sid in sorted(set(self.deferred_lines) | set(self.line_state)):
            if self.line_state.get(sid, _never)():
                self.raise_line(sid)
        self.deferred_lines.clear()
        for domid, dom in sorted(self.doms.items()):
            if dom.status == "running" and dom.virq_obj is not None:
                self._notify(domid)
        self._flush()

    def _retry_return(self, name: str, op: str, then):
        def done(ret):
            self.trace.append((self.now, "retry_return", name, op, ret))
            if then is not None:
                then(ret)
        return done

    def _garbage_return(self, dom: DomainState, op: str, then) -> None:
        garbage = self.grng.getrandbits(64)
        check = OPS[op].check
        self.trace.append((self.now, "garbage_return", dom.name, op))
        if check == "panic":
            self.guest_panic(dom, f"bad return value from {op}")
        elif check == "error":
            if then is not None:
                then(-(1 + garbage % 4095))
        elif then is not None:
            then(0)

    # -- main loop -----------------------------------------------------------------------
    def _tick(self) -> None:
        self.at(self.now + TICK_MS, self._tick)
        if self.down or self.dead:
            return
        vmm = self.vmm
        for c in range(self.topo.n_cpus):
            if c in vmm.stuck:
                continue
            try:
                vmm.timer_tick(c)
            except VmmFailure as e:
                self._vmm_failure(e)
                if self.down or self.dead:
                    return
        for det in detect_hang(self.machine, self.now):
            if det.cpu in vmm.stuck and self.detection is None:
                self._detected(det)
                return
        for fn in self.listeners["tick"]:
            fn()
        if self.deferred_doms:
            self._flush()

    def _install_injector(self) -> None:
        if self.dead or self.fault is None:
            return
        self.injector = Injector(self.fault, self.mix, self.clock, self.machine)
        if not self.down and not self.recovered:
            self.vmm.hook = self.injector

    def run(self) -> RunResult:
        self.at(TICK_MS, self._tick)
        if self.fault is not None:
            self.at(self.fault.delay_ms, self._install_injector)
        if self.opts.privvm_pause:
            self._schedule_pause(self.opts.privvm_pause)
        q = self.q
        shortcut = False
        while q and not self.ended:
            t, _, fn, args = heapq.heappop(q)
            if t > self.cutoff_ms:
                self.trace.append((self.cutoff_ms, "cutoff"))
                break
            self.now = t
            fn(*args)
            inj = self.injector
            if (self.opts.shortcut_none and inj is not None and inj.record is not None
                    and inj.record.effect == Effect.NONE.value and self.detection is None
                    and not self.vmm.stuck):
                shortcut = True
                break
        return self._result(shortcut)

    def _schedule_pause(self, spec: dict) -> None:
        priv = self.by_name["PrivVM"]
        target = self.by_name[spec["target"]].domain_id

        def pause():
            self.hc(priv, "vm_pause", (priv.domain_id, target),
                    lambda r: self.guest_after(priv, spec.get("hold_ms", 200), unpause))

        def unpause():
            self.hc(priv, "vm_unpause", (priv.domain_id, target), lambda r: self._flush())

        self.at(spec["at_ms"], self._guest_run, priv, pause, ())

    # -- results ---------------------------------------------------------------------
    def _result(self, shortcut: bool) -> RunResult:
        if self.rvi is not None and self.rvi.lvs is not None:
            self.rvi.lvs.finalize()
            if self.rvi.lvs.recreate is not None and self.create_ok is None:
                self.create_ok = False
        verdicts = {}
        for name in self.topo.appvms:
            trace = self.traces.get(name)
            if shortcut:
                verdicts[name] = True
                continue
            if trace is None:
                verdicts[name] = False
                continue
            if isinstance(trace, NetTrace) and self.dead and trace.failure is None:
                trace.failure = "hypervisor down"
            verdicts[name] = evaluate_completion(self.topo.domain(name).workload, trace).success
        if shortcut:
            self.create_ok = True if any(d.created_at_ms is not None for d in self.topo.domains) else None
        elif any(d.created_at_ms is not None for d in self.topo.domains) and self.create_ok is None:
            self.create_ok = False
        recovery = {"reboot_ok": self.reboot_ok, **self.recovery_info}
        detection = self.detection.as_dict() if self.detection else None
        if self.detection is not None:
            run = {"reboot_ok": bool(self.reboot_ok), "verdicts": verdicts, "appvms": self.topo.appvms,
                   "create_ok": self.create_ok, "topology": self.topo.name}
            recovery["category"] = recovery_outcome_category(run) if self.config.enabled else None
        elif self.component_detection is not None:
            detection = dict(self.component_detection)
            ok = self.opts.rvi_enabled and not self.vi_failed
            recovery["reboot_ok"] = ok
            run = {"reboot_ok": ok, "verdicts": verdicts, "appvms": self.topo.appvms,
                   "create_ok": self.create_ok, "topology": self.topo.name}
            recovery["category"] = recovery_outcome_category(run) if self.opts.rvi_enabled else None
        checks = dict(self.checks)
        if self.rvi is not None:
            checks["rvi"] = self.rvi.summary()
        inj = self.injector
        rec = inj.record.as_dict() if inj is not None and inj.record is not None else None
        if self.opts.component_fault is not None:
            rec = {"component": self.opts.component_fault.to_dict()} if self.component_injected else None
        self.trace.append((self.now, "verdicts", tuple(sorted(verdicts.items()))))
        return RunResult(
            topology=self.topo.name,
            injected=(self.fault is None and self.opts.component_fault is None) or rec is not None,
            corruption=rec, detection=detection, recovery=recovery,
            verdicts=verdicts, vi_failed=self.vi_failed, create_ok=self.create_ok, end_ms=self.now,
            leaked_pages=len(self.vmm.leaked_pages), trace=self.trace, checks=checks)


def _never() -> bool:
    return False


class Disk:
    """A backend's disk; contents survive every software failure."""

    def __init__(self, system: System, backend_domid: int):
        self.system = system
        self.backend_domid = backend_domid
        self.storage: dict = {}  # frontend domid -> {name: checksum}
        self.generation = 0  # bumped when a driver re-initializes the controller

    def submit(self, back: BlkBack, fid: int, req) -> None:
        self.system.at(self.system.now + DISK_MS, self._done, back, fid, req, self.generation)

    def _done(self, back: BlkBack, fid: int, req, gen: int = 0) -> None:
        if gen != self.generation:
            return
        self.storage.setdefault(fid, {})[req.name] = req.checksum
        if back.dom.status != "running":
            return
        back.completed.append((fid, req))
        self.system.raise_line(back.source_id)
