"""Crash and hang detection, and run outcome classification."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional


@dataclass(frozen=True)
class DetectedFailure:
    kind: str  # crash | hang
    cpu: int
    cause: str
    time_ms: int
    triple_fault: bool = False

    def as_dict(self) -> dict:
        return {"kind": self.kind, "cpu": self.cpu, "cause": self.cause, "time_ms": self.time_ms,
                "triple_fault": self.triple_fault}


def on_panic(cpu: int, cause: str, now_ms: int, triple_fault: bool = False) -> DetectedFailure:
    return DetectedFailure("crash", cpu, cause, now_ms, triple_fault)


def detect_hang(machine, now_ms: int) -> list:
    """Hang detections from one watchdog pass; the hung CPU takes the watchdog NMI."""
    out = []
    for ev in machine.watchdog_tick(now_ms):
        machine.deliver_nmi(ev.cpu_id)
        out.append(DetectedFailure("hang", ev.cpu_id, "watchdog counter frozen", now_ms))
    return out


class Outcome(str, Enum):
    RECOVERED_CRASH = "recovered_crash"
    RECOVERED_HANG = "recovered_hang"
    FAILED_I = "recovery_failure_i"
    FAILED_II = "recovery_failure_ii"
    FAILED_III = "recovery_failure_iii"
    FAILED_IV = "recovery_failure_iv"
    DETECTED_NO_RECOVERY = "detected_no_recovery"
    SILENT_ONE_APPVM = "silent_one_appvm"
    SILENT_SYSTEM = "silent_system"
    NON_MANIFESTED = "non_manifested"

    @property
    def detected(self) -> bool:
        return self in DETECTED_OUTCOMES

    @property
    def silent(self) -> bool:
        return self in (Outcome.SILENT_ONE_APPVM, Outcome.SILENT_SYSTEM)


DETECTED_OUTCOMES = (Outcome.RECOVERED_CRASH, Outcome.RECOVERED_HANG, Outcome.FAILED_I, Outcome.FAILED_II,
                     Outcome.FAILED_III, Outcome.FAILED_IV, Outcome.DETECTED_NO_RECOVERY)
RECOVERED_OUTCOMES = (Outcome.RECOVERED_CRASH, Outcome.RECOVERED_HANG)
CATEGORY_OUTCOME = {"i": Outcome.FAILED_I, "ii": Outcome.FAILED_II, "iii": Outcome.FAILED_III,
                    "iv": Outcome.FAILED_IV}


def classify_run(detection: Optional[dict], category: Optional[str], verdicts: dict,
                 vi_failed: bool = False, recovery_enabled: bool = True) -> Outcome:
    """Map a finished run to exactly one outcome.

    ``detection`` is the first DetectedFailure as a dict (or None), ``category``
    is ok or i-iv for detected runs, ``verdicts`` maps app VM name to success,
    ``vi_failed`` says a PrivVM or driver VM died without hypervisor detection.
    """
    if detection is not None:
        if not recovery_enabled:
            return Outcome.DETECTED_NO_RECOVERY
        if category == "ok":
            return Outcome.RECOVERED_HANG if detection["kind"] == "hang" else Outcome.RECOVERED_CRASH
        try:
            return CATEGORY_OUTCOME[category]
        except KeyError:
            raise ValueError(f"detected run without a recovery category: {category!r}") from None
    failed = [name for name, ok in verdicts.items() if not ok]
    if not failed and not vi_failed:
        return Outcome.NON_MANIFESTED
    if len(failed) == 1 and not vi_failed:
        return Outcome.SILENT_ONE_APPVM
    return Outcome.SILENT_SYSTEM
