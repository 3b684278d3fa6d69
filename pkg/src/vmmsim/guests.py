"""Guest VMs: domain and VCPU state, scripted workloads, split drivers, evaluators.

Guest kernels talk to the simulated world through a small host interface:
``host.hc`` (issue a hypercall with a continuation), ``host.guest_after``
(run guest code later, deferred while the guest cannot run), the devices
(``disk.submit``, ``host.nic_send``, ``host.ide_submit``) and
``host.guest_panic``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .machine import Registers
from .vmm import GUEST_TEXT_BASE, HYPERCALL_PAGE_BASE, GrantEntry

ROLES = ("privvm", "dvm", "appvm")
STATUSES = ("running", "paused", "crashed", "destroyed")


@dataclass
class VcpuState:
    vcpu_id: int
    domid: int
    cpu: int
    hypercall_page: int
    regs: Registers = field(default_factory=Registers)
    running: bool = False
    pending_hypercall: Optional[dict] = None
    regs_garbage: bool = False
    vcpu_obj: Optional[int] = None
    continuation: object = None
    retry: Optional[dict] = None

    def __post_init__(self):
        self.regs.pc = self.resume_pc
        self.regs.sp = 0xFFFF_C900_0000_0000 + (self.domid << 16)

    @property
    def resume_pc(self) -> int:
        return GUEST_TEXT_BASE + 0x1000 * self.domid + 0x40

    def in_hypercall_page(self) -> bool:
        return self.hypercall_page <= self.regs.pc < self.hypercall_page + 4096

    def __eq__(self, other):
        return self is other

    __hash__ = object.__hash__


@dataclass(eq=False)
class DomainState:
    domain_id: int
    name: str
    role: str
    cpu: int
    profile: str = "PV"
    n_pages: int = 128
    start_paused: bool = False
    vcpus: list = field(default_factory=list)
    pages: list = field(default_factory=list)
    status: str = "paused"
    pause_count: int = 0
    paused_by_controller: bool = False
    foreign_maps: set = field(default_factory=set)
    frontends: dict = field(default_factory=dict)
    lock_ids: list = field(default_factory=list)
    grant_obj: Optional[int] = None
    virq_obj: Optional[int] = None
    timer_obj: Optional[int] = None
    released_pages: list = field(default_factory=list)
    panic_reason: Optional[str] = None
    handlers: dict = field(default_factory=dict)  # virq -> callable(virq)
    deferred: list = field(default_factory=list)
    kernel: dict = field(default_factory=dict)  # driver instances by name

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not self.vcpus:
            self.vcpus = [VcpuState(0, self.domain_id, self.cpu, self.hypercall_page)]

    @property
    def hypercall_page(self) -> int:
        return HYPERCALL_PAGE_BASE + (self.domain_id << 20)

    @property
    def hypercall_frame(self) -> Optional[int]:
        return self.pages[0] if self.pages else None

    @property
    def pt_pages(self) -> list:
        return self.pages[2:18]

    @property
    def ring_pool(self) -> list:
        return self.pages[18:34]

    @property
    def alive(self) -> bool:
        return self.status in ("running", "paused")

    def init_memory(self, memory) -> None:
        for pfn, mfn in enumerate(self.pages):
            memory.contents[mfn] = page_pattern(self.domain_id, pfn)


def page_pattern(domid: int, pfn: int) -> int:
    return (domid * 1_000_003 + pfn * 7_919 + 0x5A5A) & 0xFFFF_FFFF


# -- workload scripts -----------------------------------------------------------

@dataclass
class Workload:
    kind: str  # blk | net | unix | lvs_director | lvs_server
    script: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    pos: int = 0

    def next_step(self):
        if self.pos >= len(self.script):
            return None
        step = self.script[self.pos]
        self.pos += 1
        return step


def blk_script(n_io: int, rng, n_mm: int = 0) -> list:
    """File operations as (name, checksum) writes, interleaved with memory-management steps."""
    steps = []
    for i in range(n_io):
        name = f"f{rng.randrange(max(1, n_io * 3 // 4))}"
        steps.append(("io", name, rng.getrandbits(32)))
    for _ in range(n_mm):
        steps.insert(rng.randrange(len(steps) + 1), ("mm", rng.choice(MM_OPS)))
    return steps


MM_OPS = ("mmu", "mmu", "mmu", "pin", "timer", "yield")
FV_MM_OPS = ("timer", "yield")


def unix_script(n_steps: int, rng, profile: str = "PV", ide: bool = True) -> list:
    ops = MM_OPS if profile == "PV" else FV_MM_OPS
    steps = []
    for _ in range(n_steps):
        if ide and rng.random() < 0.12:
            steps.append(("ide",))
        else:
            steps.append(("mm", rng.choice(ops)))
    return steps


def blk_reference(script: list) -> dict:
    ref = {}
    for step in script:
        if step[0] == "io":
            ref[step[1]] = step[2]
    return ref


def hypercall_types(script: list) -> set:
    """Hypercall names a script can issue, for profile comparisons."""
    names = set()
    mm = {"mmu": "mmu_update", "pin": "page_table_pin", "timer": "set_timer", "yield": "sched_yield"}
    for step in script:
        if step[0] == "mm":
            names.add(mm[step[1]])
            if step[1] == "pin":
                names.add("page_table_unpin")
        elif step[0] == "io":
            names.update(("evtchn_send",))
        elif step[0] == "ide":
            names.add("physdev_eoi")
    return names


def step_workload(domain: DomainState, now: int):
    """Next action of the domain's script; ('complete',) when exhausted."""
    wl = domain.kernel.get("workload")
    step = wl.next_step() if wl is not None else None
    return step if step is not None else ("complete",)


# -- traces and evaluation --------------------------------------------------------

@dataclass(frozen=True)
class Verdict:
    success: bool
    reason: str = ""

    def as_dict(self) -> dict:
        return {"success": self.success, "reason": self.reason}


@dataclass
class BlkTrace:
    reference: dict
    acked: set = field(default_factory=set)
    storage: dict = field(default_factory=dict)
    completed: bool = False
    failure: Optional[str] = None
    resends: int = 0


@dataclass
class NetTrace:
    start_ms: int
    end_ms: int
    delivered: bytearray = field(default_factory=bytearray)
    recovery_end_ms: Optional[int] = None
    failure: Optional[str] = None
    max_gap_ms: int = 10_000
    window_ms: int = 1000
    max_drop: float = 0.10

    def __post_init__(self):
        if not self.delivered:
            self.delivered = bytearray(self.end_ms - self.start_ms)

    def mark(self, t0: int, t1: int) -> None:
        a = max(t0, self.start_ms) - self.start_ms
        b = min(t1, self.end_ms) - self.start_ms
        if b > a:
            self.delivered[a:b] = b"\x01" * (b - a)


@dataclass
class StepTrace:
    total: int
    ok: int = 0
    completed: bool = False
    failure: Optional[str] = None


@dataclass
class LvsTrace:
    timeouts: int = 0
    served: int = 0
    completed: bool = False
    failure: Optional[str] = None
    max_timeouts: int = 2


def longest_zero_run(a: np.ndarray) -> int:
    if a.size == 0:
        return 0
    padded = np.concatenate(([1], a, [1]))
    idx = np.flatnonzero(padded)
    return int(np.max(np.diff(idx)) - 1)


def evaluate_net(trace: NetTrace) -> Verdict:
    if trace.failure:
        return Verdict(False, trace.failure)
    a = np.frombuffer(bytes(trace.delivered), dtype=np.uint8)
    gap = longest_zero_run(a)
    if gap > trace.max_gap_ms:
        return Verdict(False, f"interruption of {gap} ms")
    start = 0
    if trace.recovery_end_ms is not None:
        start = max(0, trace.recovery_end_ms - trace.start_ms)
    seg = a[start:].astype(np.int64)
    w = trace.window_ms
    if seg.size >= w:
        c = np.concatenate(([0], np.cumsum(seg)))
        sums = c[w:] - c[:-w]
        worst = int(sums.min())
        if worst < (1.0 - trace.max_drop) * w:
            return Verdict(False, f"1s window throughput {worst}/{w}")
    return Verdict(True)


def evaluate_blk(trace: BlkTrace) -> Verdict:
    if trace.failure:
        return Verdict(False, trace.failure)
    if not trace.completed:
        return Verdict(False, "did not complete")
    missing = set(trace.reference) - trace.acked
    if missing:
        return Verdict(False, f"{len(missing)} writes never acknowledged")
    if trace.storage != trace.reference:
        return Verdict(False, "final file set differs from reference")
    return Verdict(True)


def evaluate_steps(trace: StepTrace) -> Verdict:
    if trace.failure:
        return Verdict(False, trace.failure)
    if not trace.completed or trace.ok != trace.total:
        return Verdict(False, "terminated prematurely")
    return Verdict(True)


def evaluate_lvs(trace: LvsTrace) -> Verdict:
    if trace.failure:
        return Verdict(False, trace.failure)
    if trace.timeouts > trace.max_timeouts:
        return Verdict(False, f"{trace.timeouts} connection timeouts")
    if not trace.completed:
        return Verdict(False, "did not complete")
    return Verdict(True)


def evaluate_completion(domain_or_kind, trace) -> Verdict:
    kind = getattr(domain_or_kind, "kind", domain_or_kind)
    if isinstance(domain_or_kind, DomainState):
        kind = domain_or_kind.kernel["workload"].kind
    if kind == "blk":
        return evaluate_blk(trace)
    if kind == "net":
        return evaluate_net(trace)
    if kind == "unix":
        return evaluate_steps(trace)
    if kind.startswith("lvs"):
        return evaluate_lvs(trace)
    raise ValueError(f"unknown workload kind {kind!r}")


# -- guest kernels -------------------------------------------------------------------

@dataclass
class Ring:
    """Shared request/response ring; lives in guest memory so it survives a VMM reboot."""

    requests: deque = field(default_factory=deque)
    responses: deque = field(default_factory=deque)


@dataclass
class BlkRequest:
    req_id: int
    name: str
    checksum: int
    page: int
    frontend: int


class BlkFront:
    """Block frontend with an optional RAID-1 layer over several backends."""

    def __init__(self, host, dom: DomainState, backends: list, trace: BlkTrace,
                 timeout_ms: int = 1000, retry_budget: int = 3):
        self.host = host
        self.dom = dom
        self.backends = list(backends)  # active mirror members
        self.rings = {b: Ring() for b in self.backends}
        self.trace = trace
        self.timeout_ms = timeout_ms
        self.retry_budget = retry_budget
        self.inflight: dict = {}
        self.next_id = 1
        self.pool_idx = 0
        self.faulty: set = set()
        self.on_done = None

    def add_backend(self, b: int) -> None:
        if b not in self.backends:
            self.backends.append(b)
            self.rings[b] = Ring()

    def submit(self, name: str, checksum: int, on_done) -> None:
        dom = self.dom
        page = dom.ring_pool[self.pool_idx % len(dom.ring_pool)]
        self.pool_idx += 1
        live = [b for b in self.backends if b not in self.faulty]
        if not live:
            self.fail("no working disk")
            return
        if not self.share(page, live):
            return
        req = BlkRequest(self.next_id, name, checksum, page, dom.domain_id)
        self.next_id += 1
        self.inflight[req.req_id] = {"req": req, "t": self.host.now, "retries": 0,
                                     "waiting": set(live), "done": on_done}
        for b in live:
            self.push(b, req)

    def share(self, page: int, backends) -> bool:
        gobj = self.host.vmm.heap.objects.get(self.dom.grant_obj)
        if gobj is None:
            return False
        table = gobj.payload
        for b in backends:
            entry = table.get((page, b))
            if entry is not None and entry.mapped:
                self.host.guest_panic(self.dom, f"grant for page {page} still in use")
                return False
        for b in backends:
            table[(page, b)] = GrantEntry(page, b)
        return True

    def push(self, b: int, req: BlkRequest) -> None:
        self.rings[b].requests.append(req)
        self.host.hc(self.dom, "evtchn_send", (self.dom.domain_id, b, "blk"))

    def on_virq(self, virq) -> None:
        for b in list(self.backends):
            ring = self.rings[b]
            while ring.responses:
                self.complete(b, *ring.responses.popleft())

    def complete(self, b: int, req_id: int, status: int) -> None:
        st = self.inflight.get(req_id)
        if st is None:
            return
        if status < 0:
            self.mark_faulty(b, f"I/O error from backend d{b}")
        st["waiting"].discard(b)
        if st["waiting"]:
            return
        self.finish(req_id, st)

    def finish(self, req_id: int, st: dict) -> None:
        del self.inflight[req_id]
        req = st["req"]
        if not [b for b in self.backends if b not in self.faulty]:
            self.fail("I/O error")
            return
        self.trace.acked.add(req.name)
        self.end_access(req.page)
        st["done"]()

    def end_access(self, page: int) -> None:
        gobj = self.host.vmm.heap.objects.get(self.dom.grant_obj)
        if gobj is None:
            return
        table = gobj.payload
        for key in [k for k in table if k[0] == page]:
            if not table[key].mapped:
                del table[key]
        # a still-mapped entry stays behind; the next share of that page trips over it

    def mark_faulty(self, b: int, reason: str) -> None:
        if len([x for x in self.backends if x not in self.faulty]) > 1:
            self.faulty.add(b)
            for rid, st in list(self.inflight.items()):
                st["waiting"].discard(b)
                if not st["waiting"]:
                    self.finish(rid, st)
        else:
            self.fail(reason)

    def rebind(self, old: int, new: int) -> None:
        """Failover: the mirror member served by ``old`` is now served by ``new``."""
        if old in self.backends:
            self.faulty.add(old)
        self.add_backend(new)
        self.faulty.discard(new)
        for st in self.inflight.values():
            if old in st["waiting"]:
                st["waiting"].discard(old)
                if new in st["waiting"]:
                    continue  # the mirror write is already queued there
                st["waiting"].add(new)
                gobj = self.host.vmm.heap.objects.get(self.dom.grant_obj)
                if gobj is not None:
                    gobj.payload[(st["req"].page, new)] = GrantEntry(st["req"].page, new)
                self.push(new, st["req"])

    def fail(self, reason: str) -> None:
        if self.trace.failure is None:
            self.trace.failure = reason
        self.host.workload_finished(self.dom)

    def timeout_scan(self, now: int) -> list:
        """Resend requests whose reply is overdue; return the resent request ids."""
        resent = []
        for rid, st in list(self.inflight.items()):
            if now - st["t"] < self.timeout_ms:
                continue
            if st["retries"] >= self.retry_budget:
                for b in list(st["waiting"]):
                    self.mark_faulty(b, f"request {rid} timed out {st['retries']} times")
                    if self.trace.failure:
                        return resent
                continue
            st["retries"] += 1
            st["t"] = now
            self.trace.resends += 1
            for b in list(st["waiting"]):
                self.push(b, st["req"])
            resent.append(rid)
        return resent


def driver_timeout_scan(domain: DomainState, now: int) -> list:
    front = domain.kernel.get("blkfront")
    return front.timeout_scan(now) if front is not None else []


class BlkBack:
    """Block backend in a driver domain (or the PrivVM)."""

    def __init__(self, host, dom: DomainState, source_id: str, disk):
        self.host = host
        self.dom = dom
        self.source_id = source_id
        self.disk = disk
        self.fronts: dict = {}  # frontend domid -> BlkFront (for its ring)
        self.completed: deque = deque()

    def on_kick(self, virq) -> None:
        me = self.dom.domain_id
        for fid, front in list(self.fronts.items()):
            ring = front.rings.get(me)
            while ring is not None and ring.requests:
                self.dom.kernel["ring_consumed"] = self.dom.kernel.get("ring_consumed", 0) + 1
                self.start(fid, ring.requests.popleft())

    def start(self, fid: int, req: BlkRequest) -> None:
        me = self.dom.domain_id

        def mapped(r):
            if r < 0:
                self.respond(fid, req, r)
                return
            self.disk.submit(self, fid, req)

        self.host.hc(self.dom, "grant_map", (me, fid, req.page), mapped)

    def on_pirq(self, virq) -> None:
        me = self.dom.domain_id
        batch = list(self.completed)
        self.completed.clear()

        def eoi_then_respond(_r=None):
            self.host.hc(self.dom, "physdev_eoi", (me, self.source_id), respond_all)

        def respond_all(_r=None):
            for fid, req in batch:
                self.respond(fid, req, 0, kick=False)
            for fid in sorted({f for f, _ in batch}):
                self.host.hc(self.dom, "evtchn_send", (me, fid, "blk"))

        def unmap(i):
            if i == len(batch):
                eoi_then_respond()
                return
            fid, req = batch[i]
            self.host.hc(self.dom, "grant_unmap", (me, fid, req.page), lambda r: unmap(i + 1))

        unmap(0)

    def respond(self, fid: int, req: BlkRequest, status: int, kick: bool = True) -> None:
        front = self.fronts.get(fid)
        if front is None:
            return
        ring = front.rings.get(self.dom.domain_id)
        if ring is None:
            return
        ring.responses.append((req.req_id, status))
        if kick:
            self.host.hc(self.dom, "evtchn_send", (self.dom.domain_id, fid, "blk"))


class NetBack:
    def __init__(self, host, dom: DomainState, source_id: str):
        self.host = host
        self.dom = dom
        self.source_id = source_id
        self.fronts: dict = {}  # domid -> NetFront
        self.rx: deque = deque()

    def on_kick(self, virq) -> None:
        me = self.dom.domain_id
        for fid, front in list(self.fronts.items()):
            while front.tx.get(me):
                item = front.tx[me].popleft()
                self.dom.kernel["ring_consumed"] = self.dom.kernel.get("ring_consumed", 0) + 1
                if isinstance(item, tuple) and item[0] == "to" and item[1] in self.fronts:
                    self.bridge(item[1], item[2])
                else:
                    self.host.nic_send(self, fid, item)

    def bridge(self, dest: int, payload) -> None:
        """Frame between two guests on this backend's bridge; never touches the wire."""
        self.fronts[dest].rx.append(payload)
        self.host.hc(self.dom, "evtchn_send", (self.dom.domain_id, dest, "net"))

    def on_pirq(self, virq) -> None:
        me = self.dom.domain_id
        batch = list(self.rx)
        self.rx.clear()

        def deliver(_r=None):
            for fid, item in batch:
                front = self.fronts.get(fid)
                if front is not None:
                    front.rx.append(item)
            for fid in sorted({f for f, _ in batch}):
                self.host.hc(self.dom, "evtchn_send", (me, fid, "net"))

        self.host.hc(self.dom, "physdev_eoi", (me, self.source_id), deliver)


class NetFront:
    def __init__(self, host, dom: DomainState, backend: int):
        self.host = host
        self.dom = dom
        self.backend = backend
        self.tx: dict = {backend: deque()}
        self.rx: deque = deque()
        self.on_rx = None

    def send(self, item) -> None:
        self.tx.setdefault(self.backend, deque()).append(item)
        self.host.hc(self.dom, "evtchn_send", (self.dom.domain_id, self.backend, "net"))

    def on_virq(self, virq) -> None:
        while self.rx:
            item = self.rx.popleft()
            if self.on_rx is not None:
                self.on_rx(item)

    def rebind(self, new_backend: int) -> None:
        self.backend = new_backend
        self.tx.setdefault(new_backend, deque())


class StepRunner:
    """Runs a scripted process: file I/O, memory management, timer waits, IDE I/O."""

    def __init__(self, host, dom: DomainState, workload: Workload, trace, think_ms: int):
        self.host = host
        self.dom = dom
        self.wl = workload
        self.trace = trace
        self.think_ms = think_ms
        self.pinned: list = []
        self.timer_wait: Optional[int] = None
        self.ide_wait = False
        self.pt_idx = 0
        self.rng = host.domain_rng(dom)

    def start(self) -> None:
        self.host.guest_after(self.dom, self.think_ms, self.next)

    def next(self) -> None:
        if self.trace.failure is not None or self.trace.completed:
            return
        step = step_workload(self.dom, self.host.now)
        kind = step[0]
        if kind == "complete":
            self.trace.completed = True
            if isinstance(self.trace, BlkTrace):
                self.trace.storage = self.host.blk_storage(self.dom)
            self.host.workload_finished(self.dom)
            return
        if kind == "io":
            self.dom.kernel["blkfront"].submit(step[1], step[2], self.step_done)
        elif kind == "mm":
            self.mm(step[1])
        elif kind == "ide":
            self.ide_wait = True
            self.host.ide_submit(self)
        else:
            raise ValueError(f"unknown step {step!r}")

    def step_done(self) -> None:
        if isinstance(self.trace, StepTrace):
            self.trace.ok += 1
        self.host.guest_after(self.dom, self.think_ms, self.next)

    def mm(self, op: str) -> None:
        dom, me = self.dom, self.dom.domain_id
        if op == "mmu":
            page = dom.pages[34 + self.rng.randrange(len(dom.pages) - 34)]
            value = self.rng.getrandbits(32)
            self.host.hc(dom, "mmu_update", (me, page, value), self.ok_if_zero)
        elif op == "pin":
            if len(self.pinned) >= 4:
                page = self.pinned.pop(0)
                self.host.hc(dom, "page_table_unpin", (me, page), self.ok_if_zero)
                return
            page = dom.pt_pages[self.pt_idx % len(dom.pt_pages)]
            self.pt_idx += 1
            self.pinned.append(page)
            self.host.hc(dom, "page_table_pin", (me, page), self.ok_if_zero)
        elif op == "timer":
            deadline = self.host.vmm.time_now() + 20
            self.timer_wait = deadline
            self.host.hc(dom, "set_timer", (me, deadline), self.ignore)
        elif op == "yield":
            self.host.hc(dom, "sched_yield", (me,), self.ok_if_zero)
        else:
            raise ValueError(op)

    def ok_if_zero(self, r) -> None:
        if r != 0:
            self.host.step_error(self.dom, self.trace, f"hypercall returned {r}")
            return
        self.step_done()

    def ignore(self, r) -> None:
        pass

    def on_timer(self, virq) -> None:
        if self.timer_wait is None:
            return
        if self.host.vmm.time_now() < self.timer_wait:
            return  # spurious
        self.timer_wait = None
        self.step_done()

    def on_ide(self, virq) -> None:
        if not self.ide_wait:
            self.host.hc(self.dom, "physdev_eoi", (self.dom.domain_id, "ide"))
            return
        self.ide_wait = False
        self.host.hc(self.dom, "physdev_eoi", (self.dom.domain_id, "ide"), lambda r: self.step_done())


class NetRunner:
    """Echo traffic from a remote host, one batch per ``batch_ms``.

    A batch whose send time falls while the guest cannot run is lost, which is
    what the interruption and throughput-window rules observe.
    """

    def __init__(self, host, dom: DomainState, front: NetFront, trace: NetTrace, batch_ms: int = 100):
        self.host = host
        self.dom = dom
        self.front = front
        self.trace = trace
        self.batch_ms = batch_ms
        self.completed = False
        front.on_rx = self.on_echo

    def start(self) -> None:
        self.host.at(self.trace.start_ms, self.batch)

    def batch(self) -> None:
        t = self.host.now
        if t + self.batch_ms > self.trace.end_ms:
            self.completed = True
            self.host.workload_finished(self.dom)
            return
        self.host.at(t + self.batch_ms, self.batch)
        if self.trace.failure is None and self.host.can_run(self.dom):
            self.front.send(("echo", t))

    def on_echo(self, item) -> None:
        _, t = item
        self.trace.mark(t, t + self.batch_ms)


class LvsServer:
    """Real server behind the directors.

    Answers client requests directly (direct routing), logs every
    ``write_every``-th request to its mirrored disk first, and answers the
    directors' health checks.
    """

    def __init__(self, host, dom: DomainState, front: NetFront, trace: LvsTrace, write_every: int = 5):
        self.host = host
        self.dom = dom
        self.front = front
        self.trace = trace
        self.write_every = write_every
        self.count = 0
        front.on_rx = self.on_rx

    def on_rx(self, item) -> None:
        if self.trace.failure is not None:
            return
        kind = item[0]
        if kind == "req":
            _, cid, _director = item
            self.count += 1
            blk = self.dom.kernel.get("blkfront")
            if blk is not None and self.count % self.write_every == 0:
                blk.submit(f"conn{cid}", (cid * 40503) & 0xFFFF, lambda: self.reply(cid))
            else:
                self.reply(cid)
        elif kind == "ping":
            _, t, director = item
            self.front.send(("to", director, ("pong", self.dom.domain_id, t)))

    def reply(self, cid: int) -> None:
        self.trace.served += 1
        self.front.send(("out", cid))


class LvsDirector:
    """Load balancer. The primary owns the virtual address and heartbeats the
    backup; the backup takes over after ``takeover_misses`` silent checks."""

    def __init__(self, host, dom: DomainState, front: NetFront, trace: LvsTrace, scenario,
                 servers: list, peer: int, primary: bool, health_ms: int = 1000, hb_ms: int = 500,
                 dead_after: int = 3, takeover_misses: int = 4):
        self.host = host
        self.dom = dom
        self.front = front
        self.trace = trace
        self.scenario = scenario
        self.servers = list(servers)
        self.healthy = set(servers)
        self.missed = {s: 0 for s in servers}  # health rounds without a pong
        self.ponged: set = set()
        self.peer = peer
        self.active = primary
        self.health_ms = health_ms
        self.hb_ms = hb_ms
        self.dead_after = dead_after
        self.takeover_misses = takeover_misses
        self.misses = 0
        self.hb_seen = False
        self.rr = 0
        front.on_rx = self.on_rx

    def start(self) -> None:
        self.host.guest_after(self.dom, self.health_ms, self.health)
        self.host.guest_after(self.dom, self.hb_ms, self.heartbeat)

    def on_rx(self, item) -> None:
        kind = item[0]
        if kind == "req":
            if not self.active:
                return
            server = self.pick()
            if server is not None:
                self.front.send(("to", server, ("req", item[1], self.dom.domain_id)))
        elif kind == "pong":
            self.ponged.add(item[1])
            self.scenario.pong(item[1])
        elif kind == "hb":
            self.hb_seen = True

    def pick(self) -> Optional[int]:
        pool = [s for s in self.servers if s in self.healthy]
        if not pool:
            return None
        self.rr += 1
        return pool[self.rr % len(pool)]

    def add_server(self, sid: int) -> None:
        if sid not in self.servers:
            self.servers.append(sid)
        self.missed[sid] = 0
        self.healthy.add(sid)

    def remove_server(self, sid: int) -> None:
        if sid in self.servers:
            self.servers.remove(sid)
        self.healthy.discard(sid)
        self.missed.pop(sid, None)

    def health(self) -> None:
        if self.scenario.over:
            return
        # counted in rounds the director actually ran, so a paused host does not age its servers
        now = self.host.now
        for s in self.servers:
            self.missed[s] = 0 if s in self.ponged else self.missed.get(s, 0) + 1
            if self.missed[s] >= self.dead_after:
                self.healthy.discard(s)
            else:
                self.healthy.add(s)
            self.front.send(("to", s, ("ping", now, self.dom.domain_id)))
        self.ponged.clear()
        self.host.guest_after(self.dom, self.health_ms, self.health)

    def heartbeat(self) -> None:
        if self.scenario.over:
            return
        if self.active:
            self.front.send(("to", self.peer, ("hb",)))
        else:
            self.misses = 0 if self.hb_seen else self.misses + 1
            self.hb_seen = False
            if self.misses >= self.takeover_misses:
                self.active = True
                self.scenario.takeover(self)
        self.host.guest_after(self.dom, self.hb_ms, self.heartbeat)
