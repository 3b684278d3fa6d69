"""Fault catalog, injection planning and application.

Architectural faults cannot be executed literally here, so each instruction
class maps to a seeded draw from a mixture of downstream effects. Register
faults are more mechanistic: a flipped stack pointer really is what the
failure handler later reads, and a cleared IF bit really leaves the hang
with interrupts disabled.
"""

from __future__ import annotations

import random
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional

from .machine import FLAG_IF, FLAG_TF, REG_NAMES, VMM_OWNER, ConfigError
from .vmm import CORRUPT_HOLDER, EINVAL, OPS, TripleFault, VmmHang, VmmPanic, sp_mapped

INJECT_DELAY_MS = (500, 6500)
INJECT_INSTRUCTIONS = (0, 20_000)


class FaultClass(str, Enum):
    REGISTER = "RegisterBitFlip"
    CODE = "CodeBitFlip"
    NOP = "Nop"
    DESTINATION = "Destination"
    SOURCE = "Source"
    BRANCH = "Branch"
    LOOP = "Loop"
    POINTER = "Pointer"
    INTERFACE = "Interface"
    HELD_DYNAMIC_LOCK = "HeldDynamicLock"
    MID_HYPERCALL_CRASH = "MidHypercallCrash"
    UNACKED_INTERRUPT = "UnackedInterrupt"
    CORRUPT_SP = "CorruptSP"
    CORRUPT_TIMER_HANDLE = "CorruptTimerHandle"
    CORRUPT_DOMAIN_LIST_HANDLE = "CorruptDomainListHandle"
    DROP_VIRQ = "DropVirq"
    MID_PAUSE_CRASH = "MidPauseCrash"
    CORRUPT_VCPU_REGS = "CorruptVcpuRegs"


INSTRUCTION_CLASSES = (FaultClass.CODE, FaultClass.NOP, FaultClass.DESTINATION, FaultClass.SOURCE,
                       FaultClass.BRANCH, FaultClass.LOOP, FaultClass.POINTER, FaultClass.INTERFACE)
RANDOM_CLASSES = (FaultClass.REGISTER, *INSTRUCTION_CLASSES)
TARGETED_CLASSES = tuple(c for c in FaultClass if c not in RANDOM_CLASSES)


class Effect(str, Enum):
    NONE = "none"
    PANIC = "panic"
    MID_OP_CRASH = "mid_op_crash"
    HANG = "hang"
    SILENT_HEAP = "silent_heap"
    WRONG_RETURN = "wrong_return"
    CORRUPT_SP = "corrupt_sp"
    TRIPLE_FAULT = "triple_fault"


DEFAULT_CLASS_WEIGHTS = {
    FaultClass.REGISTER: 0.34, FaultClass.CODE: 0.12, FaultClass.NOP: 0.08,
    FaultClass.DESTINATION: 0.08, FaultClass.SOURCE: 0.08, FaultClass.BRANCH: 0.10,
    FaultClass.LOOP: 0.06, FaultClass.POINTER: 0.08, FaultClass.INTERFACE: 0.06,
}

E = Effect
DEFAULT_MIXTURES = {
    FaultClass.CODE: {E.PANIC: .09, E.MID_OP_CRASH: .16, E.HANG: .08, E.SILENT_HEAP: .12,
                      E.WRONG_RETURN: .39, E.CORRUPT_SP: .06, E.NONE: .10},
    FaultClass.NOP: {E.PANIC: .05, E.MID_OP_CRASH: .14, E.HANG: .06, E.SILENT_HEAP: .12,
                     E.WRONG_RETURN: .32, E.NONE: .31},
    FaultClass.DESTINATION: {E.PANIC: .09, E.MID_OP_CRASH: .12, E.HANG: .05, E.SILENT_HEAP: .15,
                             E.WRONG_RETURN: .39, E.CORRUPT_SP: .08, E.NONE: .12},
    FaultClass.SOURCE: {E.PANIC: .07, E.MID_OP_CRASH: .12, E.HANG: .05, E.SILENT_HEAP: .12,
                        E.WRONG_RETURN: .41, E.NONE: .23},
    FaultClass.BRANCH: {E.PANIC: .05, E.MID_OP_CRASH: .16, E.HANG: .10, E.SILENT_HEAP: .10,
                        E.WRONG_RETURN: .36, E.NONE: .23},
    FaultClass.LOOP: {E.PANIC: .05, E.MID_OP_CRASH: .10, E.HANG: .40, E.SILENT_HEAP: .08,
                      E.WRONG_RETURN: .24, E.NONE: .13},
    FaultClass.POINTER: {E.PANIC: .19, E.MID_OP_CRASH: .10, E.HANG: .04, E.SILENT_HEAP: .14,
                         E.WRONG_RETURN: .35, E.CORRUPT_SP: .06, E.NONE: .12},
    FaultClass.INTERFACE: {E.PANIC: .14, E.MID_OP_CRASH: .05, E.SILENT_HEAP: .10,
                           E.WRONG_RETURN: .60, E.NONE: .11},
}

REGISTER_MIXTURES = {
    "GPR": {E.NONE: .20, E.PANIC: .25, E.SILENT_HEAP: .10, E.WRONG_RETURN: .41, E.HANG: .04},
    "PC": {E.PANIC: .80, E.SILENT_HEAP: .05, E.NONE: .10, E.HANG: .05},
    "FLAGS_IF": {E.NONE: .60, E.HANG: .25, E.PANIC: .15},
    "FLAGS_TF": {E.PANIC: .90, E.NONE: .10},
    "FLAGS_ARITH": {E.NONE: .70, E.PANIC: .15, E.WRONG_RETURN: .10, E.HANG: .05},
    "FLAGS_OTHER": {E.NONE: 1.0},
    "SP_LOW": {E.NONE: .50, E.PANIC: .50},
}
ARITH_FLAG_BITS = (0, 2, 4, 6, 7, 10, 11)

SILENT_TARGETS = {
    "benign": .35, "grant_entry": .08, "dynamic_lock": .12, "virq_queue": .10, "domain": .04,
    "vcpu_regs": .06, "timer_heap": .03, "domain_list": .02, "xmalloc_free_list": .04,
    "page_info": .08, "page_directory": .03, "guest_page": .05,
}
HOT_LOCKS = ("grant", "evtchn")


@dataclass(frozen=True)
class FaultSite:
    site_id: str
    op: str
    step: int
    weight: float
    cpu: int


def build_catalog(op_profile: dict) -> list:
    """Sites weighted by step cost times how often the op runs on each CPU.

    ``op_profile`` maps (op, cpu) to a relative execution frequency.
    """
    raw = []
    for (op, cpu), freq in sorted(op_profile.items()):
        for k, st in enumerate(OPS[op].steps):
            raw.append((f"{op}:{st.label}@cpu{cpu}", op, k, st.cost * freq, cpu))
    total = sum(r[3] for r in raw)
    if total <= 0:
        raise ConfigError("fault catalog is empty")
    return [FaultSite(sid, op, k, w / total, cpu) for sid, op, k, w, cpu in raw]


@dataclass
class FaultMix:
    """The declarative fault section of a campaign."""

    class_weights: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_WEIGHTS))
    mixtures: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_MIXTURES.items()})
    register_mixtures: dict = field(default_factory=lambda: {k: dict(v) for k, v in REGISTER_MIXTURES.items()})
    silent_targets: dict = field(default_factory=lambda: dict(SILENT_TARGETS))
    catalog: list = field(default_factory=list)

    def as_dict(self) -> dict:
        def keyed(d):
            return {getattr(k, "value", k): (keyed(v) if isinstance(v, dict) else v) for k, v in d.items()}
        return {"class_weights": keyed(self.class_weights), "mixtures": keyed(self.mixtures),
                "register_mixtures": keyed(self.register_mixtures),
                "silent_targets": dict(self.silent_targets),
                "catalog": [asdict(s) for s in self.catalog]}

    @classmethod
    def from_dict(cls, d: dict, catalog: Optional[list] = None) -> "FaultMix":
        mix = cls()
        if "class_weights" in d:
            mix.class_weights = {FaultClass(k): float(v) for k, v in d["class_weights"].items()}
        for k, v in d.get("mixtures", {}).items():
            mix.mixtures[FaultClass(k)] = {Effect(e): float(w) for e, w in v.items()}
        for k, v in d.get("register_mixtures", {}).items():
            mix.register_mixtures[k] = {Effect(e): float(w) for e, w in v.items()}
        if "silent_targets" in d:
            mix.silent_targets = {k: float(v) for k, v in d["silent_targets"].items()}
        if "catalog" in d:
            mix.catalog = [FaultSite(**s) for s in d["catalog"]]
        elif catalog is not None:
            mix.catalog = list(catalog)
        return mix


@dataclass
class FaultSpec:
    fault_class: FaultClass
    params: dict = field(default_factory=dict)
    delay_ms: int = 500
    instruction_count: int = 0
    target_cpu: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        return {"fault_class": self.fault_class.value, "params": dict(self.params),
                "delay_ms": self.delay_ms, "instruction_count": self.instruction_count,
                "target_cpu": self.target_cpu, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "FaultSpec":
        return cls(FaultClass(d["fault_class"]), dict(d.get("params", {})), int(d.get("delay_ms", 500)),
                   int(d.get("instruction_count", 0)), int(d.get("target_cpu", 0)), int(d.get("seed", 0)))


@dataclass
class CorruptionRecord:
    fault_class: str
    effect: str
    time_ms: int
    cpu: int
    op: Optional[str]
    step: Optional[int]
    detail: str = ""
    touched_pages: set = field(default_factory=set)
    touched_objects: set = field(default_factory=set)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["touched_pages"] = sorted(self.touched_pages)
        d["touched_objects"] = sorted(self.touched_objects)
        return d


def weighted_choice(rng: random.Random, weights: dict):
    items = [(k, w) for k, w in weights.items() if w > 0]
    if not items:
        raise ConfigError("all weights are zero")
    total = sum(w for _, w in items)
    x = rng.random() * total
    for k, w in items:
        x -= w
        if x < 0:
            return k
    return items[-1][0]


def plan_injection(mix: FaultMix, run_seed: int) -> FaultSpec:
    """Deterministic fault for one run."""
    if not mix.catalog:
        raise ConfigError("fault catalog is empty")
    rng = random.Random(f"{run_seed}:plan")
    cls = weighted_choice(rng, mix.class_weights)
    delay = rng.randint(*INJECT_DELAY_MS)
    count = rng.randint(*INJECT_INSTRUCTIONS)
    site = mix.catalog[_pick_site(rng, mix.catalog)]
    if cls == FaultClass.REGISTER:
        params = {"reg": rng.choice(REG_NAMES), "bit": rng.randrange(64)}
    else:
        params = {"op": site.op, "step": site.step, "site": site.site_id}
    return FaultSpec(cls, params, delay, count, site.cpu, run_seed)


def _pick_site(rng: random.Random, catalog: list) -> int:
    x = rng.random()
    for i, s in enumerate(catalog):
        x -= s.weight
        if x < 0:
            return i
    return len(catalog) - 1


def register_effect(reg: str, bit: int, mix: FaultMix, rng: random.Random) -> Effect:
    m = mix.register_mixtures
    if reg == "SP":
        if bit < 3:
            return weighted_choice(rng, m["SP_LOW"])
        return Effect.CORRUPT_SP
    if reg == "PC":
        return weighted_choice(rng, m["PC"])
    if reg == "FLAGS":
        if (1 << bit) == FLAG_IF:
            return weighted_choice(rng, m["FLAGS_IF"])
        if (1 << bit) == FLAG_TF:
            return weighted_choice(rng, m["FLAGS_TF"])
        if bit in ARITH_FLAG_BITS:
            return weighted_choice(rng, m["FLAGS_ARITH"])
        return weighted_choice(rng, m["FLAGS_OTHER"])
    return weighted_choice(rng, m["GPR"])


class Injector:
    """Failure-point hook that waits for the trigger and then applies one fault.

    Phases: count VMM step costs on the target CPU until the instruction budget
    is used up, then fire at the next eligible failure point. A mid-operation
    crash stays armed until the chosen later step of the same activity.
    """

    def __init__(self, spec: FaultSpec, mix: FaultMix, now_fn, machine):
        self.spec = spec
        self.mix = mix
        self.now_fn = now_fn
        self.machine = machine
        self.remaining = spec.instruction_count
        self.phase = "count"
        self.record: Optional[CorruptionRecord] = None
        self.rng = random.Random(f"{spec.seed}:apply")
        self._later = None  # (activity, step)

    @property
    def fired(self) -> bool:
        return self.record is not None

    def __call__(self, vmm, act) -> None:
        spec = self.spec
        if self.phase == "later":
            if act is self._later[0] and act.step == self._later[1]:
                self.phase = "done"
                vmm.hook = None
                raise VmmPanic(act.cpu, f"fault manifests at {act.op} step {act.step}")
            return
        if self.phase == "done" or act.cpu != spec.target_cpu:
            return
        if self.phase == "count":
            self.remaining -= act.info.steps[act.step].cost
            if self.remaining > 0:
                return
            self.phase = "armed"
        if not self._eligible(act):
            return
        self.phase = "done"
        vmm.hook = None
        self.record, action = apply_fault(self.machine, vmm, spec, act, self.now_fn(), self.mix, self.rng)
        if self.record.effect == Effect.MID_OP_CRASH.value and action is not None:
            self._later = (act, action)
            self.phase = "later"
            vmm.hook = self
            return
        if isinstance(action, BaseException):
            raise action

    def _eligible(self, act) -> bool:
        p = self.spec.params
        cls = self.spec.fault_class
        if cls in (FaultClass.REGISTER, FaultClass.HELD_DYNAMIC_LOCK, FaultClass.CORRUPT_TIMER_HANDLE,
                   FaultClass.CORRUPT_DOMAIN_LIST_HANDLE, FaultClass.DROP_VIRQ, FaultClass.CORRUPT_VCPU_REGS,
                   FaultClass.CORRUPT_SP):
            return "op" not in p or (act.op == p["op"] and act.step == p.get("step", act.step))
        if cls == FaultClass.MID_PAUSE_CRASH:
            return act.op == "vm_pause" and act.step == p.get("step", 3)
        if cls == FaultClass.UNACKED_INTERRUPT:
            return act.op == "irq_device" and act.args[0] == p.get("source", "blk") and act.step == p.get("step", 2)
        return act.op == p["op"] and act.step == p["step"]


def apply_fault(machine, vmm, spec: FaultSpec, act, now: int, mix: FaultMix, rng: random.Random):
    """Mutate state for ``spec`` at failure point ``act``.

    Returns (record, action) where action is an exception to raise now, a later
    step index for a mid-operation crash, or None.
    """
    cls = spec.fault_class
    p = spec.params
    cpu = act.cpu
    rec = CorruptionRecord(cls.value, Effect.NONE.value, now, cpu, act.op, act.step)

    if cls == FaultClass.REGISTER:
        reg, bit = p["reg"], int(p["bit"])
        regs = machine.cpus[cpu].regs
        effect = Effect(p["effect"]) if "effect" in p else register_effect(reg, bit, mix, rng)
        rec.detail = f"{reg} bit {bit}"
        if reg == "SP" and effect == Effect.CORRUPT_SP:
            regs.flip("SP", bit)
            rec.effect = effect.value
            if not sp_mapped(regs.sp):
                rec.effect = Effect.TRIPLE_FAULT.value
                return rec, TripleFault(cpu, "stack pointer outside mapped memory")
            return rec, VmmPanic(cpu, f"fault on corrupted stack pointer {regs.sp:#x}")
        if reg == "FLAGS" and (1 << bit) == FLAG_IF and effect == Effect.HANG:
            rec.effect = effect.value
            vmm.stuck[cpu] = True
            return rec, VmmHang(cpu, "spin with interrupts disabled", True)
        return _apply_effect(machine, vmm, act, effect, rec, mix, rng, p)

    if cls in INSTRUCTION_CLASSES:
        effect = Effect(p["effect"]) if "effect" in p else weighted_choice(rng, mix.mixtures[cls])
        rec.detail = p.get("site", "")
        return _apply_effect(machine, vmm, act, effect, rec, mix, rng, p)

    # targeted classes: the defining inconsistency, then a crash so recovery runs
    if cls == FaultClass.HELD_DYNAMIC_LOCK:
        lid = f"d{p['domain']}.{p.get('lock', 'evtchn')}"
        vmm.locks.dynamic_locks[lid].held_by = cpu
        rec.effect, rec.detail = Effect.PANIC.value, f"{lid} left held"
        return rec, VmmPanic(cpu, f"panic while holding {lid}")
    if cls in (FaultClass.MID_HYPERCALL_CRASH, FaultClass.MID_PAUSE_CRASH, FaultClass.UNACKED_INTERRUPT):
        rec.effect = Effect.PANIC.value
        rec.detail = f"crash at {act.op} step {act.step}"
        return rec, VmmPanic(cpu, rec.detail)
    if cls == FaultClass.CORRUPT_SP:
        bit = int(p.get("bit", 15))
        machine.cpus[cpu].regs.flip("SP", bit)
        rec.effect, rec.detail = Effect.CORRUPT_SP.value, f"SP bit {bit}"
        if not sp_mapped(machine.cpus[cpu].regs.sp):
            rec.effect = Effect.TRIPLE_FAULT.value
            return rec, TripleFault(cpu, "stack pointer outside mapped memory")
        return rec, VmmPanic(cpu, "fault on corrupted stack pointer")
    if cls == FaultClass.CORRUPT_TIMER_HANDLE:
        _silent(vmm, machine, "timer_heap", rec, rng, p)
        rec.effect = Effect.PANIC.value
        return rec, VmmPanic(cpu, "panic after timer corruption")
    if cls == FaultClass.CORRUPT_DOMAIN_LIST_HANDLE:
        _silent(vmm, machine, "domain_list", rec, rng, p)
        rec.effect = Effect.SILENT_HEAP.value
        return rec, None
    if cls == FaultClass.DROP_VIRQ:
        _silent(vmm, machine, "virq_queue", rec, rng, p)
        rec.effect = Effect.SILENT_HEAP.value
        return rec, None
    if cls == FaultClass.CORRUPT_VCPU_REGS:
        _silent(vmm, machine, "vcpu_regs", rec, rng, p)
        rec.effect = Effect.PANIC.value
        return rec, VmmPanic(cpu, "panic after VCPU context corruption")
    raise ConfigError(f"unhandled fault class {cls}")


def _apply_effect(machine, vmm, act, effect: Effect, rec, mix, rng, p):
    cpu = act.cpu
    rec.effect = effect.value
    if effect == Effect.NONE:
        return rec, None
    if effect == Effect.PANIC:
        return rec, VmmPanic(cpu, f"exception in {act.op}")
    if effect == Effect.HANG:
        irqs_off = act.irqs_off or rng.random() < 0.3
        vmm.stuck[cpu] = irqs_off
        return rec, VmmHang(cpu, f"runaway loop in {act.op}", irqs_off)
    if effect == Effect.MID_OP_CRASH:
        n = len(act.info.steps)
        if act.step + 1 >= n:
            rec.effect = Effect.PANIC.value
            return rec, VmmPanic(cpu, f"exception in {act.op}")
        later = rng.randrange(act.step + 1, n)
        rec.detail += f" crash at step {later}"
        return rec, later
    if effect == Effect.WRONG_RETURN:
        if act.vcpu is None:
            rec.effect = Effect.NONE.value
            return rec, None
        act.bad_ret = -EINVAL
        return rec, None
    if effect == Effect.CORRUPT_SP:
        regs = machine.cpus[cpu].regs
        bit = rng.randrange(15, 44)
        regs.flip("SP", bit)
        rec.detail += f" SP bit {bit}"
        return rec, VmmPanic(cpu, "fault on corrupted stack pointer")
    if effect == Effect.TRIPLE_FAULT:
        return rec, TripleFault(cpu, "triple fault")
    if effect == Effect.SILENT_HEAP:
        target = p.get("target") or weighted_choice(rng, mix.silent_targets)
        _silent(vmm, machine, target, rec, rng, p)
        return rec, None
    raise ConfigError(f"unknown effect {effect}")


def _silent(vmm, machine, target: str, rec: CorruptionRecord, rng: random.Random, p: dict) -> None:
    """Silent corruption of one VMM structure; records what it touched."""
    heap = vmm.heap
    doms = sorted(vmm.domains().items()) if heap.get(vmm.static.domain_hash) else []
    pick_dom = None
    if "domain" in p:
        pick_dom = vmm.domain_if_live(p["domain"])
    elif doms:
        pick_dom = doms[rng.randrange(len(doms))][1]
    rec.detail = (rec.detail + f" {target}").strip()
    if target == "benign" or pick_dom is None and target in ("grant_entry", "virq_queue", "domain",
                                                              "vcpu_regs", "timer_heap", "page_info",
                                                              "guest_page"):
        return
    if target == "grant_entry":
        table = heap.objects[pick_dom.grant_obj].payload
        keys = sorted(table)
        if keys:
            key = keys[rng.randrange(len(keys))]
            del table[key]
            rec.detail += f" d{pick_dom.domain_id} {key}"
        rec.touched_objects.add(pick_dom.grant_obj)
    elif target == "dynamic_lock":
        locks = vmm.locks.dynamic_locks
        if rng.random() < 0.6:
            names = sorted(l for l in locks if l.split(".", 1)[1] in HOT_LOCKS)
        else:
            names = sorted(locks)
        if names:
            lid = names[rng.randrange(len(names))]
            locks[lid].held_by = CORRUPT_HOLDER
            rec.detail += f" {lid}"
    elif target == "virq_queue":
        heap.objects[pick_dom.virq_obj].corrupt = True
        rec.touched_objects.add(pick_dom.virq_obj)
    elif target == "domain":
        oid = heap.objects[vmm.static.domain_hash].payload[pick_dom.domain_id]
        heap.objects[oid].corrupt = True
        rec.touched_objects.add(oid)
    elif target == "vcpu_regs":
        v = pick_dom.vcpus[0]
        heap.objects[v.vcpu_obj].corrupt = True
        rec.touched_objects.add(v.vcpu_obj)
    elif target == "timer_heap":
        heap.objects[pick_dom.timer_obj].corrupt = True
        rec.touched_objects.add(pick_dom.timer_obj)
    elif target == "domain_list":
        rec.touched_objects.add(vmm.static.domain_list)
        heap.objects[vmm.static.domain_list].corrupt = True
    elif target == "xmalloc_free_list":
        rec.touched_objects.add(vmm.static.xmalloc_free_list)
        heap.objects[vmm.static.xmalloc_free_list].corrupt = True
    elif target == "page_info":
        page = pick_dom.pages[34 + rng.randrange(len(pick_dom.pages) - 34)]
        machine.memory.page_info[page].owner = None if rng.random() < 0.5 else VMM_OWNER
        rec.touched_pages.add(page)
    elif target == "page_directory":
        vmm.static.page_directory_ok = False
    elif target == "guest_page":
        page = pick_dom.pages[rng.randrange(len(pick_dom.pages))]
        machine.memory.contents[page] ^= 1 << rng.randrange(32)
        rec.touched_pages.add(page)
    else:
        raise ConfigError(f"unknown silent target {target!r}")

