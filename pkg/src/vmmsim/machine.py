"""Simulated hardware: CPUs, interrupt controller, watchdog and physical memory.

Interrupt priority equals the vector number (higher wins). Time is an integer
count of simulated milliseconds supplied by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

REG_NAMES = ("GPR0", "GPR1", "GPR2", "GPR3", "GPR4", "GPR5", "GPR6", "GPR7", "PC", "SP", "FLAGS")
GPR_NAMES = REG_NAMES[:8]
MASK64 = (1 << 64) - 1

FLAG_CF = 1 << 0
FLAG_ZF = 1 << 6
FLAG_SF = 1 << 7
FLAG_TF = 1 << 8
FLAG_IF = 1 << 9
FLAG_DF = 1 << 10
FLAG_OF = 1 << 11
FLAGS_DEFAULT = 0x2 | FLAG_IF

VMM_OWNER = -1  # PageInfo.owner for hypervisor-owned pages; None means free


class ConfigError(ValueError):
    """A scenario or machine description is inconsistent."""


class Delivery(str, Enum):
    DELIVERED = "delivered"
    BLOCKED = "blocked"
    MASKED = "masked"


@dataclass(slots=True)
class Registers:
    gpr: list = field(default_factory=lambda: [0] * 8)
    pc: int = 0
    sp: int = 0
    flags: int = FLAGS_DEFAULT

    def get(self, name: str) -> int:
        if name.startswith("GPR"):
            return self.gpr[int(name[3:])]
        return getattr(self, name.lower())

    def set(self, name: str, value: int) -> None:
        value &= MASK64
        if name.startswith("GPR"):
            self.gpr[int(name[3:])] = value
        else:
            setattr(self, name.lower(), value)

    def flip(self, name: str, bit: int) -> int:
        """Flip one bit and return the new value."""
        value = self.get(name) ^ (1 << bit)
        self.set(name, value)
        return value

    def copy(self) -> "Registers":
        return Registers(list(self.gpr), self.pc, self.sp, self.flags)

    def as_tuple(self) -> tuple:
        return (*self.gpr, self.pc, self.sp, self.flags)


@dataclass
class Cpu:
    cpu_id: int
    apic_id: int
    regs: Registers = field(default_factory=Registers)
    halted: bool = False
    nmi_in_progress: bool = False
    in_service: list = field(default_factory=list)  # descending priority
    pending: set = field(default_factory=set)

    @property
    def interrupts_enabled(self) -> bool:
        return bool(self.regs.flags & FLAG_IF)

    def highest_in_service(self) -> int:
        return self.in_service[0] if self.in_service else -1

    def deliverable(self) -> Optional[int]:
        """Highest pending vector that outranks everything in service."""
        if not self.pending:
            return None
        v = max(self.pending)
        return v if v > self.highest_in_service() else None

    def accept(self) -> Optional[int]:
        """Move the deliverable pending vector into service and return it."""
        v = self.deliverable()
        if v is None:
            return None
        self.pending.discard(v)
        self.in_service.append(v)
        self.in_service.sort(reverse=True)
        return v


@dataclass
class InterruptSource:
    source_id: str
    vector: int
    level_triggered: bool = True
    masked: bool = False
    awaiting_ack: bool = False
    bound_cpu: int = 0


class InterruptController:
    def __init__(self, sources=(), apic_to_cpu=None):
        self.sources: dict[str, InterruptSource] = {}
        self.by_vector: dict[int, InterruptSource] = {}
        self.apic_to_cpu: dict[int, int] = dict(apic_to_cpu or {})
        for s in sources:
            self.add_source(s)

    def add_source(self, src: InterruptSource) -> None:
        if src.source_id in self.sources or src.vector in self.by_vector:
            raise ConfigError(f"duplicate interrupt source {src.source_id}/{src.vector:#x}")
        self.sources[src.source_id] = src
        self.by_vector[src.vector] = src

    def source(self, source_id: str) -> InterruptSource:
        try:
            return self.sources[source_id]
        except KeyError:
            raise ConfigError(f"unknown interrupt source {source_id!r}") from None


@dataclass
class Watchdog:
    """Per-CPU hang detector fed by the periodic timer tick."""

    counter: int = 0
    last_observed: Optional[tuple] = None  # (counter value, first time seen)
    period_ms: int = 100
    hang_threshold_ms: int = 300
    reported: bool = False

    def increment(self) -> None:
        self.counter += 1

    def tick(self, now_ms: int) -> bool:
        """Observe the counter; True exactly once when it has been frozen long enough."""
        if self.last_observed is None or self.last_observed[0] != self.counter:
            self.last_observed = (self.counter, now_ms)
            self.reported = False
            return False
        if not self.reported and now_ms - self.last_observed[1] >= self.hang_threshold_ms:
            self.reported = True
            return True
        return False

    def rearm(self, now_ms: int) -> None:
        self.last_observed = (self.counter, now_ms)
        self.reported = False


@dataclass(slots=True)
class PageInfo:
    page_number: int
    owner: Optional[int] = None
    type_use_count: int = 0
    validity_bit: bool = False
    lock_bit: bool = False

    def as_tuple(self) -> tuple:
        return (self.page_number, self.owner, self.type_use_count, self.validity_bit, self.lock_bit)


class PhysicalMemory:
    def __init__(self, n_pages: int):
        self.page_info = [PageInfo(i) for i in range(n_pages)]
        self.contents = [0] * n_pages  # abstract page checksum

    def __len__(self) -> int:
        return len(self.page_info)

    def pages_of(self, owner) -> list:
        return [p.page_number for p in self.page_info if p.owner == owner]


@dataclass
class HangEvent:
    cpu_id: int
    time_ms: int


class Machine:
    def __init__(self, n_cpus: int, n_pages: int = 2048, sources=(), apic_ids=None,
                 watchdog_period_ms: int = 100, hang_threshold_ms: int = 300):
        apic_ids = list(apic_ids) if apic_ids is not None else list(range(n_cpus))
        if len(apic_ids) != n_cpus or len(set(apic_ids)) != n_cpus:
            raise ConfigError("apic ids must be distinct, one per cpu")
        self.cpus = [Cpu(i, a) for i, a in enumerate(apic_ids)]
        self.ic = InterruptController(sources, {a: i for i, a in enumerate(apic_ids)})
        self.memory = PhysicalMemory(n_pages)
        self.watchdogs = [Watchdog(period_ms=watchdog_period_ms, hang_threshold_ms=hang_threshold_ms)
                          for _ in range(n_cpus)]
        self.protocol_errors: list = []

    def raise_interrupt(self, source_id: str) -> Delivery:
        src = self.ic.source(source_id)
        if src.masked:
            return Delivery.MASKED
        if src.level_triggered and src.awaiting_ack:
            return Delivery.BLOCKED
        self.cpus[src.bound_cpu].pending.add(src.vector)
        if src.level_triggered:
            src.awaiting_ack = True
        return Delivery.DELIVERED

    def eoi(self, cpu_id: int, vector: int) -> bool:
        cpu = self.cpus[cpu_id]
        if vector not in cpu.in_service:
            self.protocol_errors.append(("eoi-not-in-service", cpu_id, vector))
            return False
        cpu.in_service.remove(vector)
        src = self.ic.by_vector.get(vector)
        if src is not None:
            src.awaiting_ack = False
        return True

    def deliver_nmi(self, cpu_id: int) -> Delivery:
        cpu = self.cpus[cpu_id]
        if cpu.nmi_in_progress:
            return Delivery.BLOCKED
        cpu.nmi_in_progress = True
        return Delivery.DELIVERED

    def iret_ack(self, cpu_id: int) -> None:
        self.cpus[cpu_id].nmi_in_progress = False

    def cpuid_from_apic(self, apic_id: int) -> int:
        try:
            return self.ic.apic_to_cpu[apic_id]
        except KeyError:
            raise LookupError(f"unknown apic id {apic_id}") from None

    def watchdog_tick(self, now_ms: int) -> list:
        return [HangEvent(i, now_ms) for i, w in enumerate(self.watchdogs) if w.tick(now_ms)]

    def reset_cpu(self, cpu_id: int) -> None:
        """CPU INIT during reboot: local interrupt state is lost, the controller keeps its own."""
        cpu = self.cpus[cpu_id]
        cpu.in_service.clear()
        cpu.pending.clear()
        cpu.nmi_in_progress = False
        cpu.halted = False
        cpu.regs = Registers()
