"""Recovery latency cost model."""

from __future__ import annotations

from dataclasses import asdict, dataclass

STEP_ORDER = ("cpu_init", "timer_hw_init", "record_allocated_pages", "restore_check_page_frames",
              "create_heap", "scrub_unallocated", "other")


@dataclass(frozen=True)
class LatencyModel:
    cpu_init: int = 150
    timer_hw_init: int = 410
    nmi_check: int = 100  # part of timer_hw_init, dropped by skip_nmi_check
    record_allocated_pages: int = 20
    restore_check_page_frames: int = 30
    create_heap: int = 200
    scrub_unallocated: int = 2080
    other: int = 5

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyModel":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass(frozen=True)
class LatencyBreakdown:
    steps: tuple  # (name, ms) in STEP_ORDER

    @property
    def total_ms(self) -> int:
        return sum(ms for _, ms in self.steps)

    def as_dict(self) -> dict:
        return {"breakdown": dict(self.steps), "total_ms": self.total_ms}


class ScrubStateError(ValueError):
    """skip_scrub was requested but the free pages are not all scrubbed."""


def free_pages_scrubbed(heap) -> bool:
    contents = heap.memory.contents
    return all(contents[p] == 0 for p in heap.free_pages)


def recovery_latency(config, model: LatencyModel = LatencyModel(), heap=None) -> LatencyBreakdown:
    """Per-step reboot cost for ``config``'s latency options.

    With ``heap`` given, skip_scrub is only accepted if every free page is
    already zero; otherwise skipping the scrub would expose stale data.
    """
    if config.skip_scrub and heap is not None and not free_pages_scrubbed(heap):
        raise ScrubStateError("free pages hold stale data; scrubbing cannot be skipped")
    d = asdict(model)
    nmi = d.pop("nmi_check")
    if config.skip_nmi_check:
        d["timer_hw_init"] -= nmi
    if config.skip_scrub:
        d["scrub_unallocated"] = 0
    return LatencyBreakdown(tuple((k, d[k]) for k in STEP_ORDER))
