"""The simulated hypervisor.

Every hypervisor operation is an explicit sequence of numbered failure points
(``_fp``). A fault injector hooked into ``_fp`` can crash, hang or corrupt the
operation at a precise step, and whatever the operation had already done
(partial mutations, held locks, a VCPU parked inside its hypercall page) stays
behind for the recovery code to deal with.
"""

from __future__ import annotations

import copy
import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .machine import MASK64, VMM_OWNER, Machine

EPERM, ENOENT, EINVAL, EBUSY, ENOMEM = 1, 2, 22, 16, 12
CORRUPT_HOLDER = -2  # lock word overwritten by a fault: looks held, by nobody

HYPERCALL_PAGE_BASE = 0xFFFF_8000_0000_0000
HYPERCALL_STRIDE = 32
GUEST_TEXT_BASE = 0xFFFF_FFFF_8100_0000

VIRQ_TIMER = "timer"

DYNAMIC_LOCK_NAMES = (
    "grant", "evtchn", "page_alloc", "big", "mm", "shadow", "hypercall_deadlock",
    "vcpu_alloc", "rangesets", "pci", "iommu", "vm_event", "paging", "p2m",
    "ioreq", "irq_map", "node_affinity", "suspend", "debug", "xenoprof",
)


class VmmFailure(Exception):
    """Base for conditions that take the hypervisor down."""

    def __init__(self, cpu: int, cause: str):
        super().__init__(f"cpu{cpu}: {cause}")
        self.cpu = cpu
        self.cause = cause


class VmmPanic(VmmFailure):
    pass


class VmmHang(VmmFailure):
    def __init__(self, cpu: int, cause: str, irqs_off: bool):
        super().__init__(cpu, cause)
        self.irqs_off = irqs_off


class TripleFault(VmmFailure):
    pass


class Frozen(Exception):
    """Raised at a freeze directive: the activity stops where it is."""


@dataclass(frozen=True)
class Step:
    label: str
    cost: int = 100
    irqs_off: bool = False


@dataclass(frozen=True)
class OpInfo:
    name: str
    index: Optional[int]  # hypercall number; None for interrupt-context work
    steps: tuple
    check: str = "ignore"  # guest reaction to a bad return: panic | error | ignore

    @property
    def cost(self) -> int:
        return sum(s.cost for s in self.steps)


def _steps(*spec) -> tuple:
    return tuple(Step(*s) if isinstance(s, tuple) else Step(s) for s in spec)


OPS = {
    "mmu_update": OpInfo("mmu_update", 1, _steps(
        "entry", ("validate_entry", 400), "lock_page", "write_pte", "unlock", ("return", 50)), "panic"),
    "page_table_pin": OpInfo("page_table_pin", 2, _steps(
        "entry", "lock_page", "count_inc", "unlock", ("validate", 1500), "set_valid",
        ("tlb_lock", 50, True), ("tlb_send", 100, True), ("return", 50)), "panic"),
    "page_table_unpin": OpInfo("page_table_unpin", 3, _steps(
        "entry", "lock_page", "count_dec", "unlock", ("tlb_lock", 50, True), ("tlb_send", 100, True),
        ("return", 50)), "panic"),
    "evtchn_send": OpInfo("evtchn_send", 4, _steps(
        "entry", "lock_evtchn", "notify", "unlock", ("return", 50)), "ignore"),
    "set_timer": OpInfo("set_timer", 5, _steps(
        "entry", ("lock_timer", 100, True), ("insert", 100, True), ("unlock", 100, True), ("return", 50)),
        "panic"),
    "grant_map": OpInfo("grant_map", 6, _steps(
        "entry", "lock_grant", "check_entry", ("map", 200), "mark_mapped", "unlock", ("return", 50)), "error"),
    "grant_unmap": OpInfo("grant_unmap", 7, _steps(
        "entry", "lock_grant", "check_mapped", ("unmap", 200), "mark_unmapped", "unlock", ("return", 50)),
        "ignore"),
    "physdev_eoi": OpInfo("physdev_eoi", 8, _steps(
        "entry", ("lock_irq_desc", 100, True), ("eoi", 100, True), ("unlock", 100, True), ("return", 50)),
        "ignore"),
    "vm_pause": OpInfo("vm_pause", 9, _steps(
        "entry", "lock_domctl", "count_inc", ("ipi", 150), "wait_running", "unlock", ("return", 50)), "error"),
    "vm_unpause": OpInfo("vm_unpause", 10, _steps(
        "entry", "lock_domctl", "count_dec", "requeue", "unlock", ("return", 50)), "error"),
    "domctl_create": OpInfo("domctl_create", 11, _steps(
        "entry", "lock_domctl", ("alloc_struct", 300), ("alloc_locks", 200), ("link", 150),
        ("alloc_memory", 800), ("alloc_tables", 300), "unlock", ("return", 50)), "error"),
    "domctl_destroy": OpInfo("domctl_destroy", 12, _steps(
        "entry", "lock_domctl", ("unlink", 150), ("free_memory", 800), ("free_struct", 200),
        "unlock", ("return", 50)), "error"),
    "sched_yield": OpInfo("sched_yield", 13, _steps(
        "entry", ("lock_schedule", 100, True), ("requeue", 100, True), ("unlock", 100, True), ("return", 50)),
        "ignore"),
    "crash": OpInfo("crash", 14, _steps("entry", ("mark_crashed", 200), ("return", 50)), "ignore"),
    "irq_device": OpInfo("irq_device", None, _steps(
        ("accept", 100, True), ("lock_irq_desc", 100, True), ("send_virq", 150, True),
        ("unlock", 100, True), ("return", 50, True))),
    "timer_tick": OpInfo("timer_tick", None, _steps(
        ("entry", 100, True), ("lock_timer", 100, True), ("fire", 150, True), ("unlock", 100, True),
        ("watchdog", 50, True), ("schedule", 100, True), ("return", 50, True))),
}
HYPERCALLS = {info.index: name for name, info in OPS.items() if info.index is not None}


def hypercall_entry(page_base: int, op: str) -> int:
    return page_base + HYPERCALL_STRIDE * OPS[op].index


@dataclass(slots=True)
class HeapObject:
    obj_id: int
    kind: str
    payload: object
    pages: tuple
    dynamic_locks: tuple = ()
    corrupt: bool = False


class Heap:
    def __init__(self, memory, free_pages, reserved_init_pages=()):
        self.memory = memory
        self.objects: dict[int, HeapObject] = {}
        self.free_pages: set = set(free_pages)
        self.reserved_init_pages: set = set(reserved_init_pages)
        self.next_id = 1

    def take_pages(self, n: int, owner: int) -> list:
        if len(self.free_pages) < n:
            raise MemoryError("heap exhausted")
        pages = sorted(self.free_pages)[:n]
        for p in pages:
            self.free_pages.discard(p)
            info = self.memory.page_info[p]
            info.owner = owner
            info.type_use_count = 0
            info.validity_bit = False
            info.lock_bit = False
        return pages

    def release_pages(self, pages) -> None:
        for p in pages:
            info = self.memory.page_info[p]
            info.owner = None
            info.type_use_count = 0
            info.validity_bit = False
            info.lock_bit = False
            self.memory.contents[p] = 0  # scrubbed on free
            self.free_pages.add(p)

    def alloc(self, kind: str, payload=None, dynamic_locks=()) -> HeapObject:
        pages = self.take_pages(1, VMM_OWNER)
        obj = HeapObject(self.next_id, kind, payload, tuple(pages), tuple(dynamic_locks))
        self.next_id += 1
        self.objects[obj.obj_id] = obj
        return obj

    def free(self, obj_id: int) -> None:
        obj = self.objects.pop(obj_id)
        self.release_pages(obj.pages)

    def get(self, obj_id) -> Optional[HeapObject]:
        """The live, uncorrupted object or None."""
        obj = self.objects.get(obj_id)
        if obj is None or obj.corrupt:
            return None
        return obj

    def object_pages(self) -> set:
        out = set()
        for obj in self.objects.values():
            out.update(obj.pages)
        return out


@dataclass(slots=True)
class Lock:
    lock_id: str
    dynamic: bool = False
    owner_object: Optional[int] = None
    held_by: Optional[int] = None


class LockRegistry:
    def __init__(self):
        self.static_locks: dict[str, Lock] = {}
        self.dynamic_locks: dict[str, Lock] = {}

    def add_static(self, lock_id: str) -> Lock:
        lock = self.static_locks[lock_id] = Lock(lock_id)
        return lock

    def alloc_dynamic(self, lock_id: str, owner_object: Optional[int]) -> Lock:
        lock = self.dynamic_locks[lock_id] = Lock(lock_id, True, owner_object)
        return lock

    def free_dynamic(self, lock_id: str) -> None:
        self.dynamic_locks.pop(lock_id, None)

    def get(self, lock_id: str) -> Lock:
        lock = self.static_locks.get(lock_id)
        return lock if lock is not None else self.dynamic_locks[lock_id]

    def held(self) -> list:
        return [l.lock_id for l in (*self.static_locks.values(), *self.dynamic_locks.values())
                if l.held_by is not None]


@dataclass
class GrantEntry:
    page: int
    grantee: int
    mapped: bool = False


@dataclass
class StaticSegment:
    """Named handles that survive a microreboot by being copied to a reserved area."""

    domain_list: Optional[int] = None
    domain_hash: Optional[int] = None
    domain0: Optional[int] = None
    xmalloc_free_list: Optional[int] = None
    timer_heap_root: Optional[int] = None
    m2p_table: Optional[int] = None
    time_vars: dict = field(default_factory=lambda: {"base_ms": 0, "tsc": 0})
    irq_descriptors: dict = field(default_factory=dict)
    ioapic_config: dict = field(default_factory=dict)
    shared_page_tracker: Optional[int] = None
    apic_to_cpu: dict = field(default_factory=dict)
    stack_bottom: list = field(default_factory=list)
    page_wal: Optional[int] = None
    idle_domain: Optional[int] = None
    hw_info: Optional[int] = None
    page_directory_ok: bool = True
    microreboot_flag: bool = False

    HANDLE_GROUPS = ("xmalloc_free_list", "domain_list+domain_hash+domain0", "timer_heap_root",
                     "m2p_table", "time_vars", "irq_descriptors+ioapic_config",
                     "shared_page_tracker", "apic_to_cpu")

    def snapshot(self) -> "StaticSegment":
        return copy.deepcopy(self)


STACK_BASE = 0xFFFF_8300_0000_0000
STACK_SHIFT = 15
STACK_SIZE = 1 << STACK_SHIFT
STACK_FRAME = 0xC0  # guest register frame at the top of each stack
DIRECTMAP_BITS = 44


def stack_bottom_for(cpu: int) -> int:
    return STACK_BASE + (cpu + 1) * STACK_SIZE


def sp_in_vmm(cpu: int) -> int:
    """A plausible hypervisor SP for a CPU mid-operation."""
    return stack_bottom_for(cpu) - STACK_FRAME - 0x1F8


def cpu_from_sp(sp: int, n_cpus: int) -> Optional[int]:
    """What Xen-style get_cpu_info() arithmetic derives from an SP."""
    if not STACK_BASE <= sp < STACK_BASE + (n_cpus << STACK_SHIFT):
        return None
    return (sp - STACK_BASE) >> STACK_SHIFT


def sp_mapped(sp: int) -> bool:
    return STACK_BASE <= sp < STACK_BASE + (1 << DIRECTMAP_BITS)


class Activity:
    """One in-flight operation on one CPU."""

    __slots__ = ("cpu", "op", "info", "vcpu", "step", "held", "args", "frozen", "bad_ret")

    def __init__(self, cpu, op, vcpu, args):
        self.cpu = cpu
        self.op = op
        self.info = OPS[op]
        self.vcpu = vcpu
        self.args = args
        self.step = -1
        self.held: list = []
        self.frozen = False
        self.bad_ret: Optional[int] = None  # set by a fault that corrupts the return value

    @property
    def irqs_off(self) -> bool:
        return self.step >= 0 and self.info.steps[self.step].irqs_off


class Vmm:
    """Hypervisor instance. A microreboot replaces this object, not the machine."""

    def __init__(self, machine: Machine, clock: Callable[[], int], heap: Heap, static: StaticSegment):
        self.machine = machine
        self.clock = clock
        self.heap = heap
        self.static = static
        self.locks = LockRegistry()
        n = len(machine.cpus)
        for name in ("domlist", "heap", "call_lock", "domctl", "xmalloc", "console"):
            self.locks.add_static(name)
        for c in range(n):
            self.locks.add_static(f"schedule.{c}")
            self.locks.add_static(f"timer.{c}")
        for sid in machine.ic.sources:
            self.locks.add_static(f"irq_desc.{sid}")
        self.run_queue: list = [[] for _ in range(n)]
        self.current_vcpu: list = [None] * n
        self.current: list = [None] * n  # in-flight Activity per CPU
        self.hook: Optional[Callable] = None  # called as hook(vmm, act) at every failure point
        self.notify: Callable = lambda domid: None
        self.on_eoi: Callable = lambda source_id: None
        self.leaked_pages: set = set()
        self.reboot_released: set = set()  # pages of old structures a microreboot discarded
        self.diagnostics: list = []
        self.stuck: dict = {}  # cpu -> interrupts disabled while spinning

    # -- boot -------------------------------------------------------------
    @classmethod
    def boot(cls, machine: Machine, clock, reserved_init: int = 64, wal: bool = False) -> "Vmm":
        mem = machine.memory
        for p in range(reserved_init):
            mem.page_info[p].owner = VMM_OWNER
        heap = Heap(mem, range(reserved_init, len(mem)), range(reserved_init))
        static = StaticSegment()
        vmm = cls(machine, clock, heap, static)
        static.domain_list = heap.alloc("domain_list", []).obj_id
        static.domain_hash = heap.alloc("domain_hash", {}).obj_id
        static.xmalloc_free_list = heap.alloc("xmalloc_free_list", {"chunks": 64}).obj_id
        static.timer_heap_root = heap.alloc("timer_heap", {"heap": [], "next_id": 1}).obj_id
        static.m2p_table = heap.alloc("m2p", {}).obj_id
        static.shared_page_tracker = heap.alloc("shared_pages", set()).obj_id
        if wal:
            static.page_wal = heap.alloc("page_wal", {}).obj_id
        static.apic_to_cpu = dict(machine.ic.apic_to_cpu)
        static.stack_bottom = [stack_bottom_for(c) for c in range(len(machine.cpus))]
        static.time_vars = {"base_ms": clock(), "tsc": 0}
        for sid, src in machine.ic.sources.items():
            static.irq_descriptors[sid] = {"vector": src.vector, "bound_cpu": src.bound_cpu}
            static.ioapic_config[sid] = {"masked": src.masked, "bound_cpu": src.bound_cpu}
        vmm.create_idle_and_hw_info()
        return vmm

    def create_idle_and_hw_info(self) -> None:
        ncpu = len(self.machine.cpus)
        self.static.idle_domain = self.heap.alloc("idle_domain", {"vcpus": ncpu}).obj_id
        self.static.hw_info = self.heap.alloc("hw_info", {"cpus": ncpu}).obj_id

    # -- helpers ------------------------------------------------------------
    def time_now(self) -> int:
        return self.clock() - self.static.time_vars["base_ms"]

    def obj(self, act: Optional[Activity], obj_id, what: str) -> HeapObject:
        o = self.heap.get(obj_id)
        if o is None:
            raise VmmPanic(act.cpu if act else 0, f"page fault dereferencing {what}")
        return o

    def domains(self, act=None) -> dict:
        """domid -> DomainState, through the preserved hash handle."""
        h = self.obj(act, self.static.domain_hash, "domain hash")
        out = {}
        for domid, oid in h.payload.items():
            out[domid] = self.obj(act, oid, f"domain {domid}").payload
        return out

    def domain(self, act, domid):
        h = self.obj(act, self.static.domain_hash, "domain hash")
        oid = h.payload.get(domid)
        if oid is None:
            return None
        return self.obj(act, oid, f"domain {domid}").payload

    def domain_if_live(self, domid):
        h = self.heap.get(self.static.domain_hash)
        if h is None:
            return None
        o = self.heap.get(h.payload.get(domid))
        return o.payload if o is not None else None

    def _begin(self, cpu: int, op: str, vcpu=None, args=()) -> Activity:
        act = Activity(cpu, op, vcpu, args)
        self.current[cpu] = act
        if vcpu is not None:
            info = act.info
            vcpu.pending_hypercall = {"op": op, "args": tuple(args), "step": 0}
            vcpu.regs.pc = vcpu.hypercall_page + HYPERCALL_STRIDE * info.index + 2
            vcpu.regs.gpr[0] = info.index
            for i, a in enumerate(args[:5]):
                vcpu.regs.gpr[i + 1] = a & MASK64 if isinstance(a, int) else hash(a) & MASK64
        return act

    def _fp(self, act: Activity, k: int) -> None:
        act.step = k
        if act.vcpu is not None:
            act.vcpu.pending_hypercall["step"] = k
        if self.hook is not None:
            self.hook(self, act)

    def _end(self, act: Activity, ret: int = 0) -> int:
        if act.bad_ret is not None:
            ret = act.bad_ret
        self.current[act.cpu] = None
        vcpu = act.vcpu
        if vcpu is not None:
            vcpu.pending_hypercall = None
            vcpu.regs.pc = vcpu.resume_pc
            vcpu.regs.gpr[0] = ret & MASK64
        if act.held:
            self.diagnostics.append(("locks-held-at-exit", act.op, [l.lock_id for l in act.held]))
        return ret

    def _lock(self, act: Activity, lock: Lock) -> None:
        if lock.held_by is not None:
            raise VmmHang(act.cpu, f"spin on {lock.lock_id}", act.irqs_off)
        lock.held_by = act.cpu
        act.held.append(lock)

    def _unlock(self, act: Activity, lock: Lock) -> None:
        lock.held_by = None
        if lock in act.held:
            act.held.remove(lock)

    def _page_lock(self, act: Activity, page: int) -> None:
        info = self.machine.memory.page_info[page]
        if info.lock_bit:
            raise VmmHang(act.cpu, f"spin on page lock {page}", act.irqs_off)
        info.lock_bit = True
        act.held.append(("page", page))

    def _page_unlock(self, act: Activity, page: int) -> None:
        self.machine.memory.page_info[page].lock_bit = False
        if ("page", page) in act.held:
            act.held.remove(("page", page))

    def _dlock(self, domid: int, name: str) -> Lock:
        return self.locks.dynamic_locks[f"d{domid}.{name}"]

    def _tlb_flush(self, act: Activity, k: int) -> None:
        """Steps k (take call_lock) and k+1 (send flush IPIs while holding it)."""
        call_lock = self.locks.static_locks["call_lock"]
        self._fp(act, k)
        self._lock(act, call_lock)
        self._fp(act, k + 1)
        self._unlock(act, call_lock)

    # -- hypercalls -----------------------------------------------------
    # Convention: _fp(act, k) fires at the start of step k of OPS[op].steps, so a
    # crash at k means steps < k have completed and step k has not.
    def hypercall(self, cpu: int, vcpu, op: str, args: tuple) -> int:
        return getattr(self, "hc_" + op)(cpu, vcpu, *args)

    def hc_mmu_update(self, cpu, vcpu, domid, page, value):
        act = self._begin(cpu, "mmu_update", vcpu, (domid, page, value))
        self._fp(act, 0)
        dom = self.domain(act, domid)
        info = self.machine.memory.page_info[page]
        if dom is None or info.owner != domid:
            return self._end(act, -EPERM)
        self._fp(act, 1)
        self._fp(act, 2)
        self._page_lock(act, page)
        self._fp(act, 3)
        self.machine.memory.contents[page] = value & 0xFFFF_FFFF
        self._fp(act, 4)
        self._page_unlock(act, page)
        self._fp(act, 5)
        return self._end(act, 0)

    def hc_page_table_pin(self, cpu, vcpu, domid, page):
        act = self._begin(cpu, "page_table_pin", vcpu, (domid, page))
        self._fp(act, 0)
        dom = self.domain(act, domid)
        info = self.machine.memory.page_info[page]
        if dom is None or info.owner != domid:
            return self._end(act, -EPERM)
        self._fp(act, 1)
        self._page_lock(act, page)
        if info.validity_bit:
            self._page_unlock(act, page)
            return self._end(act, 0)  # already pinned: no-op
        if info.type_use_count > 0:
            # count raised but never validated: looks like a validation in flight
            self._page_unlock(act, page)
            raise VmmHang(cpu, f"pin waits for validation of page {page}", False)
        wal = self.heap.get(self.static.page_wal) if self.static.page_wal is not None else None
        self._fp(act, 2)
        if wal is not None:
            wal.payload[page] = info.type_use_count
        info.type_use_count += 1  # phase A
        self._fp(act, 3)
        self._page_unlock(act, page)
        self._fp(act, 4)
        self._fp(act, 5)
        info.validity_bit = True  # phase B
        if wal is not None:
            wal.payload.pop(page, None)
        self._tlb_flush(act, 6)
        self._fp(act, 8)
        return self._end(act, 0)

    def hc_page_table_unpin(self, cpu, vcpu, domid, page):
        act = self._begin(cpu, "page_table_unpin", vcpu, (domid, page))
        self._fp(act, 0)
        dom = self.domain(act, domid)
        info = self.machine.memory.page_info[page]
        if dom is None or info.owner != domid or not info.validity_bit:
            return self._end(act, -EINVAL)
        self._fp(act, 1)
        self._page_lock(act, page)
        self._fp(act, 2)
        info.type_use_count = max(0, info.type_use_count - 1)
        if info.type_use_count == 0:
            info.validity_bit = False
        self._fp(act, 3)
        self._page_unlock(act, page)
        self._tlb_flush(act, 4)
        self._fp(act, 6)
        return self._end(act, 0)

    def hc_evtchn_send(self, cpu, vcpu, domid, target, virq):
        act = self._begin(cpu, "evtchn_send", vcpu, (domid, target, virq))
        self._fp(act, 0)
        if self.domain(act, domid) is None or self.domain(act, target) is None:
            return self._end(act, -ENOENT)
        lock = self._dlock(domid, "evtchn")
        self._fp(act, 1)
        self._lock(act, lock)
        self._fp(act, 2)
        self.deliver_virq(act, target, virq)
        self._fp(act, 3)
        self._unlock(act, lock)
        self._fp(act, 4)
        return self._end(act, 0)

    def hc_set_timer(self, cpu, vcpu, domid, deadline_ms):
        act = self._begin(cpu, "set_timer", vcpu, (domid, deadline_ms))
        self._fp(act, 0)
        dom = self.domain(act, domid)
        if dom is None:
            return self._end(act, -ENOENT)
        lock = self.locks.static_locks[f"timer.{cpu}"]
        self._fp(act, 1)
        self._lock(act, lock)
        self._fp(act, 2)
        self._timer_insert(act, dom, deadline_ms)
        self._fp(act, 3)
        self._unlock(act, lock)
        self._fp(act, 4)
        return self._end(act, 0)

    def hc_grant_map(self, cpu, vcpu, grantee, granter, page):
        act = self._begin(cpu, "grant_map", vcpu, (grantee, granter, page))
        self._fp(act, 0)
        g = self.domain(act, granter)
        me = self.domain(act, grantee)
        if g is None or me is None:
            return self._end(act, -ENOENT)
        lock = self._dlock(granter, "grant")
        self._fp(act, 1)
        self._lock(act, lock)
        self._fp(act, 2)
        table = self.obj(act, g.grant_obj, "grant table").payload
        entry = table.get((page, grantee))
        if entry is None:
            self._unlock(act, lock)
            return self._end(act, -EINVAL)
        self._fp(act, 3)
        me.foreign_maps.add((granter, page))
        self._fp(act, 4)
        entry.mapped = True
        self._fp(act, 5)
        self._unlock(act, lock)
        self._fp(act, 6)
        return self._end(act, 0)

    def hc_grant_unmap(self, cpu, vcpu, grantee, granter, page):
        act = self._begin(cpu, "grant_unmap", vcpu, (grantee, granter, page))
        self._fp(act, 0)
        g = self.domain(act, granter)
        me = self.domain(act, grantee)
        if g is None or me is None:
            return self._end(act, -ENOENT)
        lock = self._dlock(granter, "grant")
        self._fp(act, 1)
        self._lock(act, lock)
        self._fp(act, 2)
        if (granter, page) not in me.foreign_maps:
            self._unlock(act, lock)
            return self._end(act, -EINVAL)
        self._fp(act, 3)
        me.foreign_maps.discard((granter, page))  # the non-idempotent mutation
        self._fp(act, 4)
        entry = self.obj(act, g.grant_obj, "grant table").payload.get((page, grantee))
        if entry is not None:
            entry.mapped = False
        self._fp(act, 5)
        self._unlock(act, lock)
        self._fp(act, 6)
        return self._end(act, 0)

    def hc_physdev_eoi(self, cpu, vcpu, domid, source_id):
        act = self._begin(cpu, "physdev_eoi", vcpu, (domid, source_id))
        self._fp(act, 0)
        lock = self.locks.static_locks[f"irq_desc.{source_id}"]
        self._fp(act, 1)
        self._lock(act, lock)
        self._fp(act, 2)
        desc = self.static.irq_descriptors[source_id]
        if self.machine.eoi(desc["bound_cpu"], desc["vector"]):
            self.on_eoi(source_id)
        self._fp(act, 3)
        self._unlock(act, lock)
        self._fp(act, 4)
        return self._end(act, 0)

    def hc_vm_pause(self, cpu, vcpu, caller, target):
        act = self._begin(cpu, "vm_pause", vcpu, (caller, target))
        self._fp(act, 0)
        me = self.domain(act, caller)
        if me is None or me.role != "privvm":
            return self._end(act, -EPERM)
        dom = self.domain(act, target)
        if dom is None:
            return self._end(act, -ENOENT)
        lock = self.locks.static_locks["domctl"]
        self._fp(act, 1)
        self._lock(act, lock)
        self._fp(act, 2)
        if not dom.paused_by_controller:
            dom.paused_by_controller = True
            dom.pause_count += 1
        for v in dom.vcpus:
            self._dequeue(v)
        self._fp(act, 3)
        for v in dom.vcpus:
            # the IPI handler deschedules the VCPU only if it is really current there
            if self.current_vcpu[v.cpu] is v:
                self._deschedule(v.cpu)
        self._fp(act, 4)
        if any(v.running for v in dom.vcpus):
            raise VmmHang(cpu, f"vm_pause waits for running flag of d{target}", False)
        self._fp(act, 5)
        self._unlock(act, lock)
        self._fp(act, 6)
        return self._end(act, 0)

    def hc_vm_unpause(self, cpu, vcpu, caller, target):
        act = self._begin(cpu, "vm_unpause", vcpu, (caller, target))
        self._fp(act, 0)
        dom = self.domain(act, target)
        if dom is None:
            return self._end(act, -ENOENT)
        lock = self.locks.static_locks["domctl"]
        self._fp(act, 1)
        self._lock(act, lock)
        self._fp(act, 2)
        if dom.paused_by_controller:
            dom.paused_by_controller = False
            dom.pause_count = max(0, dom.pause_count - 1)
        self._fp(act, 3)
        if dom.pause_count == 0:
            for v in dom.vcpus:
                self._enqueue(v)
        self._fp(act, 4)
        self._unlock(act, lock)
        self._fp(act, 5)
        for v in dom.vcpus:
            if self.current_vcpu[v.cpu] is None:
                self.schedule(v.cpu)
        return self._end(act, 0)

    def hc_domctl_create(self, cpu, vcpu, caller, dom):
        """Register a guest built by the toolstack. Returns the domid."""
        act = self._begin(cpu, "domctl_create", vcpu, (caller, dom.domain_id))
        self._fp(act, 0)
        if self.domain(act, dom.domain_id) is not None:
            return self._end(act, -EBUSY)
        lock = self.locks.static_locks["domctl"]
        self._fp(act, 1)
        self._lock(act, lock)
        self.obj(act, self.static.xmalloc_free_list, "xmalloc free list")
        self.register_domain(dom, act)
        self._fp(act, 7)
        self._unlock(act, lock)
        self._fp(act, 8)
        return self._end(act, dom.domain_id)

    def hc_domctl_destroy(self, cpu, vcpu, caller, target):
        act = self._begin(cpu, "domctl_destroy", vcpu, (caller, target))
        self._fp(act, 0)
        dom = self.domain(act, target)
        if dom is None:
            return self._end(act, -ENOENT)
        lock = self.locks.static_locks["domctl"]
        self._fp(act, 1)
        self._lock(act, lock)
        self._fp(act, 2)
        for v in dom.vcpus:
            self._dequeue(v)
            if self.current_vcpu[v.cpu] is v:
                self._deschedule(v.cpu)
        h = self.obj(act, self.static.domain_hash, "domain hash").payload
        lst = self.obj(act, self.static.domain_list, "domain list").payload
        oid = h.pop(target, None)
        if oid in lst:
            lst.remove(oid)
        self._fp(act, 3)
        self._release_domain_memory(dom)
        self._fp(act, 4)
        self._free_domain_objects(dom, oid)
        dom.status = "destroyed"
        self._fp(act, 5)
        self._unlock(act, lock)
        self._fp(act, 6)
        return self._end(act, 0)

    def hc_sched_yield(self, cpu, vcpu, domid):
        act = self._begin(cpu, "sched_yield", vcpu, (domid,))
        self._fp(act, 0)
        self.domain(act, domid)
        lock = self.locks.static_locks[f"schedule.{cpu}"]
        self._fp(act, 1)
        self._lock(act, lock)
        self._fp(act, 2)
        self._fp(act, 3)
        self._unlock(act, lock)
        self._fp(act, 4)
        return self._end(act, 0)

    def hc_crash(self, cpu, vcpu, domid):
        act = self._begin(cpu, "crash", vcpu, (domid,))
        self._fp(act, 0)
        dom = self.domain(act, domid)
        self._fp(act, 1)
        if dom is not None:
            dom.status = "crashed"
            for v in dom.vcpus:
                self._dequeue(v)
                if self.current_vcpu[v.cpu] is v:
                    self._deschedule(v.cpu)
        self._fp(act, 2)
        return self._end(act, 0)

    # -- interrupt context --------------------------------------------------
    def irq_device(self, cpu: int, source_id: str) -> Optional[int]:
        """Handler for a device line routed to a guest; the EOI is left to the guest."""
        vector = self.machine.cpus[cpu].accept()
        if vector is None:
            return None
        act = self._begin(cpu, "irq_device", None, (source_id,))
        self._fp(act, 0)
        lock = self.locks.static_locks[f"irq_desc.{source_id}"]
        self._fp(act, 1)
        self._lock(act, lock)
        self._fp(act, 2)
        target = self.static.irq_descriptors[source_id].get("guest")
        if target is not None:
            self.deliver_virq(act, target, "pirq:" + source_id)
        self._fp(act, 3)
        self._unlock(act, lock)
        self._fp(act, 4)
        self._end(act)
        return vector

    def timer_tick(self, cpu: int) -> list:
        act = self._begin(cpu, "timer_tick", None, ())
        self._fp(act, 0)
        lock = self.locks.static_locks[f"timer.{cpu}"]
        self._fp(act, 1)
        self._lock(act, lock)
        self._fp(act, 2)
        fired = self.fire_due_timers(act) if cpu == 0 else []
        self._fp(act, 3)
        self._unlock(act, lock)
        self._fp(act, 4)
        self.machine.watchdogs[cpu].increment()
        self._fp(act, 5)
        if self.current_vcpu[cpu] is None and self.run_queue[cpu]:
            self.schedule(cpu)
        self._fp(act, 6)
        self._end(act)
        return fired

    # -- timers ---------------------------------------------------------------
    def _timer_insert(self, act, dom, deadline_ms: int) -> int:
        root = self.obj(act, self.static.timer_heap_root, "timer heap")
        tobj = self.heap.objects.get(dom.timer_obj)
        if tobj is None:
            raise VmmPanic(act.cpu if act else 0, "timer object missing")
        tobj.corrupt = False  # set_timer rewrites every field of the per-VCPU timer
        eid = root.payload["next_id"]
        root.payload["next_id"] = eid + 1
        tobj.payload.update(deadline=deadline_ms, event_id=eid, domid=dom.domain_id)
        heapq.heappush(root.payload["heap"], (deadline_ms, eid, tobj.obj_id))
        return eid

    def set_timer(self, domid: int, deadline_ms: int) -> int:
        dom = self.domain(None, domid)
        return self._timer_insert(None, dom, deadline_ms)

    def fire_due_timers(self, act=None) -> list:
        root = self.obj(act, self.static.timer_heap_root, "timer heap")
        h = root.payload["heap"]
        now = self.time_now()
        fired = []
        while h and h[0][0] <= now:
            deadline, eid, oid = heapq.heappop(h)
            tobj = self.obj(act, oid, "timer event")
            if tobj.payload.get("event_id") != eid:
                continue  # superseded by a later set_timer
            tobj.payload["event_id"] = None
            domid = tobj.payload["domid"]
            if self.domain_if_live(domid) is not None:
                self.deliver_virq(act, domid, VIRQ_TIMER)
                fired.append((domid, VIRQ_TIMER, eid))
        return fired

    # -- event channels ------------------------------------------------------
    def deliver_virq(self, act, domid: int, virq) -> None:
        dom = self.domain(act, domid)
        if dom is None:
            return
        q = self.heap.objects.get(dom.virq_obj)
        if q is None:
            return
        if q.corrupt:
            q.payload.clear()
            q.corrupt = False
            self.diagnostics.append(("virq-queue-dropped", domid))
            return
        q.payload.append(virq)
        self.notify(domid)

    def take_virqs(self, domid: int) -> list:
        dom = self.domain_if_live(domid)
        if dom is None:
            return []
        q = self.heap.objects.get(dom.virq_obj)
        if q is None or q.corrupt:
            return []
        out = list(q.payload)
        q.payload.clear()
        return out

    # -- scheduler ----------------------------------------------------------
    def _runnable(self, vcpu) -> bool:
        dom = self.domain_if_live(vcpu.domid)
        return dom is not None and dom.status == "running" and dom.pause_count == 0

    def _enqueue(self, vcpu) -> None:
        q = self.run_queue[vcpu.cpu]
        if vcpu not in q and self.current_vcpu[vcpu.cpu] is not vcpu and self._runnable(vcpu):
            q.append(vcpu)

    def _dequeue(self, vcpu) -> None:
        q = self.run_queue[vcpu.cpu]
        if vcpu in q:
            q.remove(vcpu)

    def _deschedule(self, cpu: int) -> None:
        v = self.current_vcpu[cpu]
        if v is not None:
            v.running = False
            self.current_vcpu[cpu] = None

    def schedule(self, cpu: int):
        """Dispatch the head of the run queue, or leave the CPU idle."""
        q = self.run_queue[cpu]
        while q and not self._runnable(q[0]):
            q.pop(0)
        if not q:
            return self.current_vcpu[cpu]
        head = q.pop(0)
        prev = self.current_vcpu[cpu]
        if prev is not None:
            self._deschedule(cpu)
            self._enqueue(prev)
        vobj = self.heap.objects.get(head.vcpu_obj)
        if vobj is None or vobj.corrupt:
            raise VmmPanic(cpu, f"bad context for d{head.domid}v{head.vcpu_id}")
        if head.regs_garbage:
            raise VmmPanic(cpu, f"general protection loading d{head.domid}v{head.vcpu_id} context")
        head.running = True
        self.current_vcpu[cpu] = head
        return head

    # -- domain bookkeeping ----------------------------------------------------
    def register_domain(self, dom, act=None) -> None:
        """Allocate the VMM-side structures of a domain and link it in."""
        heap = self.heap
        lst = self.obj(act, self.static.domain_list, "domain list")
        h = self.obj(act, self.static.domain_hash, "domain hash")
        if act:
            self._fp(act, 2)
        dobj = heap.alloc("domain", dom)
        if act:
            self._fp(act, 3)
        dom.lock_ids = []
        for name in DYNAMIC_LOCK_NAMES:
            lid = f"d{dom.domain_id}.{name}"
            self.locks.alloc_dynamic(lid, dobj.obj_id)
            dom.lock_ids.append(lid)
        dobj.dynamic_locks = tuple(dom.lock_ids)
        if act:
            self._fp(act, 4)
        lst.payload.append(dobj.obj_id)
        h.payload[dom.domain_id] = dobj.obj_id
        if dom.role == "privvm" and self.static.domain0 is None:
            self.static.domain0 = dobj.obj_id
        if act:
            self._fp(act, 5)
        pages = heap.take_pages(dom.n_pages, dom.domain_id)
        dom.pages = pages
        m2p = self.obj(act, self.static.m2p_table, "m2p").payload
        for pfn, mfn in enumerate(pages):
            m2p[mfn] = (dom.domain_id, pfn)
        dom.init_memory(self.machine.memory)
        if act:
            self._fp(act, 6)
        dom.grant_obj = heap.alloc("grant_table", {}).obj_id
        dom.virq_obj = heap.alloc("evtchn", deque()).obj_id
        dom.timer_obj = heap.alloc("timer", {"deadline": None, "event_id": None, "domid": dom.domain_id}).obj_id
        for v in dom.vcpus:
            v.vcpu_obj = heap.alloc("vcpu", v).obj_id
        tracker = self.obj(act, self.static.shared_page_tracker, "shared page tracker").payload
        tracker.add((dom.pages[1], dom.domain_id))  # shared_info page
        dom.status = "running"
        dom.pause_count = 1 if dom.start_paused else 0
        for v in dom.vcpus:
            self._enqueue(v)

    def _release_domain_memory(self, dom) -> None:
        m2p = self.heap.objects[self.static.m2p_table].payload
        for p in dom.pages:
            m2p.pop(p, None)
        self.heap.release_pages(dom.pages)
        dom.released_pages = list(dom.pages)
        dom.pages = []

    def _free_domain_objects(self, dom, dobj_id) -> None:
        for lid in dom.lock_ids:
            self.locks.free_dynamic(lid)
        tracker = self.heap.objects[self.static.shared_page_tracker].payload
        for rec in [r for r in tracker if r[1] == dom.domain_id]:
            tracker.discard(rec)
        for oid in (dom.grant_obj, dom.virq_obj, dom.timer_obj, *[v.vcpu_obj for v in dom.vcpus], dobj_id):
            if oid in self.heap.objects:
                self.heap.free(oid)

    # -- introspection used by recovery and tests -----------------------------
    def quiescent_locks_free(self) -> bool:
        if self.locks.held():
            return False
        return not any(p.lock_bit for p in self.machine.memory.page_info)
