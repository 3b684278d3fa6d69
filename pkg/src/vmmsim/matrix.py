"""Paired diagnostic runs: each targeted fault against the enhancement that repairs it.

Every pair runs the same fault twice with all enhancements on except the one
under test, which is off in the first run and on in the second. The
detection-time sampler is disabled so the outcome depends only on the fault.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .detect import classify_run
from .faults import FaultClass, FaultSpec
from .recover import RecoveryConfig
from .system import RunOptions, System
from .topology import get_topology


@dataclass(frozen=True)
class MatrixCase:
    name: str
    flag: str
    topology: str
    fault: FaultSpec
    options: dict = field(default_factory=dict)
    off_extra: dict = field(default_factory=dict)  # flags that must go off with ``flag``


MATRIX = (
    MatrixCase("held_dynamic_lock", "reinit_locks", "1AppVM",
               FaultSpec(FaultClass.HELD_DYNAMIC_LOCK, {"domain": 1, "lock": "evtchn"}, 3000, 0, 1)),
    MatrixCase("mid_pin_crash", "reset_page_counter", "1AppVM",
               FaultSpec(FaultClass.MID_HYPERCALL_CRASH, {"op": "page_table_pin", "step": 4}, 800, 0, 1)),
    MatrixCase("unacked_interrupt", "ack_interrupts", "1AppVM",
               FaultSpec(FaultClass.UNACKED_INTERRUPT, {"source": "blk", "step": 2}, 3000, 0, 0),
               off_extra={"ack_interrupts_enhanced": False}),
    MatrixCase("corrupt_sp", "fix_sp", "1AppVM",
               FaultSpec(FaultClass.CORRUPT_SP, {"bit": 15}, 3000, 0, 1)),
    MatrixCase("hang_on_nonboot_cpu", "nmi_ack", "1AppVM",
               FaultSpec(FaultClass.LOOP, {"op": "timer_tick", "step": 2, "effect": "hang"}, 3000, 0, 1)),
    MatrixCase("mid_pause_crash", "clear_running_flag", "3AppVM",
               FaultSpec(FaultClass.MID_PAUSE_CRASH, {"step": 3}, 2500, 0, 0),
               options={"privvm_pause": {"target": "AppVM_Unix", "at_ms": 3000, "hold_ms": 300}}),
    MatrixCase("mid_hypercall_return", "hypercall_retry", "1AppVM",
               FaultSpec(FaultClass.MID_HYPERCALL_CRASH, {"op": "mmu_update", "step": 1}, 3000, 0, 1)),
    MatrixCase("handler_lock_held", "nmi_ipi", "1AppVM",
               FaultSpec(FaultClass.MID_HYPERCALL_CRASH, {"op": "page_table_pin", "step": 7}, 800, 0, 1)),
)


@dataclass
class MatrixResult:
    case: str
    flag: str
    off_outcome: str
    on_outcome: str
    off_failed: bool
    on_succeeded: bool

    @property
    def ok(self) -> bool:
        return self.off_failed and self.on_succeeded

    def as_dict(self) -> dict:
        return {"case": self.case, "flag": self.flag, "off": self.off_outcome, "on": self.on_outcome,
                "ok": self.ok}


def run_case(case: MatrixCase, enabled: bool, base: Optional[RecoveryConfig] = None, seed: int = 0):
    base = base or RecoveryConfig.full()
    flags = {case.flag: enabled}
    if not enabled:
        flags.update(case.off_extra)
    elif case.off_extra:
        flags.update({k: True for k in case.off_extra})
    cfg = base.with_flags(**flags)
    opts = RunOptions(sampler=False, shortcut_none=False, **case.options)
    result = System(get_topology(case.topology), cfg, seed, case.fault, options=opts).run()
    outcome = classify_run(result.detection, result.recovery.get("category"), result.verdicts,
                           result.vi_failed, cfg.enabled)
    return result, outcome


def run_matrix(cases=MATRIX, base: Optional[RecoveryConfig] = None) -> list:
    out = []
    for case in cases:
        _, off = run_case(case, False, base)
        _, on = run_case(case, True, base)
        out.append(MatrixResult(case.name, case.flag, off.value, on.value,
                                off.detected and not off.value.startswith("recovered"),
                                on.value.startswith("recovered")))
    return out
