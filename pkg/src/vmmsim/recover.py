"""Hypervisor recovery: failure handler, microreboot and re-integration.

Each enhancement is an independent flag on ``RecoveryConfig``. The failure
handler always hands the reboot to the boot CPU (cpu 0); the CPU that detected
the failure notifies it if it is not the boot CPU itself.
"""

from __future__ import annotations

import heapq
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

from .machine import Delivery, Machine
from .vmm import (STACK_FRAME, Heap, StaticSegment, Vmm, cpu_from_sp, sp_in_vmm, sp_mapped,
                  stack_bottom_for)

HANDLER_FRAME = 0x200

FLAG_NAMES = ("nmi_ipi", "ack_interrupts", "hypercall_retry", "fix_sp", "nmi_ack", "reinit_locks",
              "reset_page_counter", "ack_interrupts_enhanced", "clear_running_flag")


@dataclass(frozen=True)
class RecoveryConfig:
    nmi_ipi: bool = False
    ack_interrupts: bool = False
    hypercall_retry: bool = False
    fix_sp: bool = False
    nmi_ack: bool = False
    reinit_locks: bool = False
    reset_page_counter: bool = False
    ack_interrupts_enhanced: bool = False
    clear_running_flag: bool = False
    skip_scrub: bool = False
    skip_nmi_check: bool = False
    wal_page_count: bool = False
    restore_time: bool = True  # off only in diagnostic runs
    enabled: bool = True

    def __post_init__(self):
        if self.ack_interrupts_enhanced and not self.ack_interrupts:
            raise ValueError("ack_interrupts_enhanced requires ack_interrupts")

    def with_flags(self, **kw) -> "RecoveryConfig":
        if kw.get("ack_interrupts") is False and self.ack_interrupts_enhanced:
            kw.setdefault("ack_interrupts_enhanced", False)
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RecoveryConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown recovery options: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def full(cls, **kw) -> "RecoveryConfig":
        return cls(**{**{n: True for n in FLAG_NAMES}, **kw})


_STACK = (
    ("Basic", ()),
    ("+NMI IPI", ("nmi_ipi",)),
    ("+Ack", ("ack_interrupts",)),
    ("+Retry", ("hypercall_retry",)),
    ("+FixSP+NMIack", ("fix_sp", "nmi_ack")),
    ("+Reinit locks", ("reinit_locks",)),
)


def stack_stages(base: Optional[RecoveryConfig] = None) -> list:
    """The incremental enhancement stack as (stage name, config) pairs."""
    cfg = base or RecoveryConfig()
    out = []
    for name, flags in _STACK:
        cfg = cfg.with_flags(**{f: True for f in flags})
        out.append((name, cfg))
    return out


class RecoveryFailure(Exception):
    """Recovery could not bring the hypervisor back; always category (i)."""


class HandlerFailure(RecoveryFailure):
    pass


class RebootFailure(RecoveryFailure):
    pass


@dataclass
class PreservedState:
    static: StaticSegment
    heap: Heap
    page_info: list
    dynamic_locks: dict
    saved_vcpus: dict = field(default_factory=dict)  # (domid, vcpu_id) -> register tuple or None if garbage
    reserved_region: str = "static-snapshot"
    notes: list = field(default_factory=list)


def _vcpu_on(vmm: Vmm, cpu: int):
    v = vmm.current_vcpu[cpu]
    if v is not None:
        return v
    act = vmm.current[cpu]
    return act.vcpu if act is not None else None


def _ipi_ok(machine: Machine, vmm: Vmm, config: RecoveryConfig, target: int, in_handler: bool) -> bool:
    """Can ``target`` be made to run the stop handler?"""
    if config.nmi_ipi:
        return machine.deliver_nmi(target) == Delivery.DELIVERED
    if in_handler:
        return False  # sitting in the failure path with interrupts disabled
    stuck = vmm.stuck.get(target)
    if stuck is not None and stuck:
        return False
    return True


def failure_handler(machine: Machine, vmm: Vmm, config: RecoveryConfig, detection) -> PreservedState:
    n = len(machine.cpus)
    det = detection.cpu
    notes = []
    dcpu = machine.cpus[det]

    # (1) establish which CPU we are on and where the saved guest frame lives
    if config.fix_sp:
        me = machine.cpuid_from_apic(dcpu.apic_id)
        dcpu.regs.sp = vmm.static.stack_bottom[me] - HANDLER_FRAME
        frame_ok = True
    else:
        sp = dcpu.regs.sp
        if not sp_mapped(sp):
            raise HandlerFailure("triple fault: failure handler runs on an unmapped stack")
        derived = cpu_from_sp(sp, n)
        frame_ok = derived == det
        me = derived
        if derived is None:
            victims = sorted(k for k, o in vmm.heap.objects.items() if o.kind in
                             ("domain", "vcpu", "timer", "evtchn", "grant_table"))
            if victims:
                victim = vmm.heap.objects[victims[sp % len(victims)]]
                victim.corrupt = True
                notes.append(f"handler stack overwrote heap object {victim.obj_id} ({victim.kind})")
            me = (sp >> 12) % 256
    # (2) let a hang-detecting CPU accept NMIs again
    if config.nmi_ack and detection.kind == "hang":
        machine.iret_ack(det)
    # (3) stop the other CPUs; cpu 0 performs the reboot
    if me != det:
        raise HandlerFailure(f"cpu{det} believes it is cpu{me}: IPI sent to the sending processor")
    if det != 0:
        boot_stuck = vmm.stuck.get(0)
        if config.nmi_ipi:
            if machine.deliver_nmi(0) != Delivery.DELIVERED:
                raise HandlerFailure("boot cpu cannot take the NMI IPI")
        elif boot_stuck:
            raise HandlerFailure("boot cpu has interrupts disabled")
    call_lock = vmm.locks.static_locks["call_lock"]
    if call_lock.held_by is not None:
        if config.nmi_ipi:
            call_lock.held_by = None
            notes.append("busted call_lock")
        else:
            raise HandlerFailure(f"call_lock held by cpu{call_lock.held_by}")
    for t in range(1, n):
        if not _ipi_ok(machine, vmm, config, t, in_handler=(t == det)):
            raise HandlerFailure(f"cpu{t} never runs the stop IPI handler")
        machine.cpus[t].halted = True
    # (4) save guest registers from each CPU's stack
    saved = {}
    for c in range(n):
        v = _vcpu_on(vmm, c)
        if v is None:
            continue
        if c == det and not frame_ok:
            v.regs_garbage = True
            saved[(v.domid, v.vcpu_id)] = None
            notes.append(f"d{v.domid}v{v.vcpu_id} registers saved from a random region")
        else:
            saved[(v.domid, v.vcpu_id)] = v.regs.as_tuple()
    # (5) acknowledge interrupts
    if config.ack_interrupts:
        for c in range(n):
            for vec in list(machine.cpus[c].in_service):
                machine.eoi(c, vec)
        if config.ack_interrupts_enhanced:
            for src in machine.ic.sources.values():
                src.masked = True
            for c in range(n):
                cpu = machine.cpus[c]
                while (vec := cpu.accept()) is not None:  # dummy vector table: ack and discard
                    machine.eoi(c, vec)
    # (6) copy the static segment to the reserved area
    return PreservedState(vmm.static.snapshot(), vmm.heap, machine.memory.page_info,
                          vmm.locks.dynamic_locks, saved, notes=notes)


def microreboot(preserved: PreservedState, config: RecoveryConfig, machine: Machine, clock) -> Vmm:
    snap = preserved.static
    old = preserved.heap
    if not snap.page_directory_ok:
        raise RebootFailure("page fault early in boot: preserved page tables corrupt")
    n = len(machine.cpus)
    for c in range(n):
        machine.reset_cpu(c)
        machine.cpus[c].regs.sp = sp_in_vmm(c)

    # heap: reuse preserved objects, seed free pages only from pages free in the old heap
    heap = Heap(machine.memory, old.free_pages - old.reserved_init_pages, old.reserved_init_pages)
    heap.objects = old.objects
    heap.next_id = old.next_id
    for p in heap.free_pages:
        info = machine.memory.page_info[p]
        info.owner = None
        info.type_use_count = 0
        info.validity_bit = False
        info.lock_bit = False
        if not config.skip_scrub:
            machine.memory.contents[p] = 0

    static = StaticSegment(microreboot_flag=True)
    static.xmalloc_free_list = snap.xmalloc_free_list
    static.domain_list = snap.domain_list
    static.domain_hash = snap.domain_hash
    static.domain0 = snap.domain0
    static.m2p_table = snap.m2p_table
    if config.restore_time:
        static.time_vars = dict(snap.time_vars)
    else:
        static.time_vars = {"base_ms": clock(), "tsc": 0}
    static.irq_descriptors = {k: dict(v) for k, v in snap.irq_descriptors.items()}
    static.ioapic_config = {k: dict(v) for k, v in snap.ioapic_config.items()}
    static.shared_page_tracker = snap.shared_page_tracker
    static.apic_to_cpu = dict(snap.apic_to_cpu)
    static.stack_bottom = [stack_bottom_for(c) for c in range(n)]
    static.page_wal = snap.page_wal
    static.page_directory_ok = snap.page_directory_ok

    vmm = Vmm(machine, clock, heap, static)
    vmm.locks.dynamic_locks = preserved.dynamic_locks
    for sid, cfg in static.ioapic_config.items():
        src = machine.ic.sources[sid]
        src.masked = cfg["masked"]
        src.bound_cpu = cfg["bound_cpu"]

    for name in ("domain_list", "domain_hash", "m2p_table", "shared_page_tracker", "xmalloc_free_list"):
        if heap.get(getattr(static, name)) is None:
            raise RebootFailure(f"preserved {name} handle does not resolve")

    # idle domain and hardware info are rebuilt; the old copies go back to the heap
    released = set()
    for oid in (snap.idle_domain, snap.hw_info):
        if oid in heap.objects:
            released.update(heap.objects[oid].pages)
            heap.free(oid)
    vmm.create_idle_and_hw_info()

    # walk every domain; a corrupted domain structure is fatal here
    domains = []
    for oid in heap.objects[static.domain_list].payload:
        o = heap.get(oid)
        if o is None:
            raise RebootFailure(f"domain list entry {oid} is corrupt")
        domains.append(o.payload)

    # pending timer events move to a fresh timer heap
    old_root = heap.get(snap.timer_heap_root)
    if old_root is None:
        raise RebootFailure("timer heap root is corrupt")
    new_root = heap.alloc("timer_heap", {"heap": [], "next_id": old_root.payload["next_id"]})
    for deadline, eid, toid in sorted(old_root.payload["heap"]):
        t = heap.get(toid)
        if t is None:
            raise RebootFailure(f"timer event {eid} references a corrupt object")
        if t.payload.get("event_id") == eid:
            heapq.heappush(new_root.payload["heap"], (deadline, eid, toid))
    released.update(old_root.pages)
    heap.free(old_root.obj_id)
    static.timer_heap_root = new_root.obj_id
    vmm.reboot_released = released

    if config.clear_running_flag:
        for d in domains:
            for v in d.vcpus:
                v.running = False
    for d in domains:
        if d.status == "running" and d.pause_count == 0:
            for v in d.vcpus:
                vmm._enqueue(v)

    if config.reinit_locks:
        for lock in vmm.locks.dynamic_locks.values():
            lock.held_by = None
        for info in machine.memory.page_info:
            info.lock_bit = False

    wal = heap.get(static.page_wal) if static.page_wal is not None else None
    if config.wal_page_count and wal is not None:
        for page, count in sorted(wal.payload.items()):
            info = machine.memory.page_info[page]
            info.type_use_count = count
            info.validity_bit = False
        wal.payload.clear()
    elif config.reset_page_counter:
        for info in machine.memory.page_info:
            if info.type_use_count > 0 and not info.validity_bit:
                info.type_use_count = 0

    owned = heap.object_pages()
    vmm.leaked_pages = {p.page_number for p in machine.memory.page_info
                        if p.owner == -1 and p.page_number not in owned
                        and p.page_number not in heap.reserved_init_pages}
    return vmm


def retry_pending_hypercalls(domains, config: RecoveryConfig) -> list:
    """Rewind VCPUs parked inside their hypercall page. Returns the VCPUs touched."""
    touched = []
    for d in domains:
        for v in d.vcpus:
            if v.pending_hypercall is None or not v.in_hypercall_page():
                continue
            touched.append(v)
            if config.hypercall_retry:
                v.regs.pc -= 2
                v.retry = dict(v.pending_hypercall)
            else:
                v.retry = None
    return touched


def recovery_outcome_category(run) -> str:
    """ok, or failure category i-iv, from a finished run's facts.

    ``run`` needs: reboot_ok, verdicts {vm name: bool}, create_ok (None if no create),
    and the topology's app VM names.
    """
    if not run["reboot_ok"]:
        return "i"
    v = run["verdicts"]
    apps = run["appvms"]
    failed = [a for a in apps if not v.get(a, False)]
    create_ok = run.get("create_ok")
    if run["topology"] == "3AppVM":
        blk_ok = v.get("AppVM_Blk", False) and create_ok is not False
        net_ok, unix_ok = v.get("AppVM_Net", False), v.get("AppVM_Unix", False)
        if not blk_ok and not net_ok and not unix_ok:
            return "ii"
        if blk_ok and not net_ok and not unix_ok:
            return "iii"
        if not blk_ok:
            return "iv"
        return "ok"
    if len(failed) == len(apps) and apps:
        return "ii"
    if create_ok is False:
        return "iv"
    if len(failed) > 1:
        return "iii"
    return "ok"
