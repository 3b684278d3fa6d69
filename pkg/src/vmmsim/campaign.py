"""Fault-injection campaigns: seeded runs, aggregation and reports.

A campaign is a list of stages (one recovery configuration each) times
``run_count`` runs. Run ``i`` of every stage uses the seed derived from
``(master_seed, i)``, so stages see the same fault plan and differ only in
the recovery configuration. A planned fault that never fires is re-planned
from a derived attempt seed, up to ``MAX_ATTEMPTS`` times.

Reports are built from records sorted by run index, so the byte output does
not depend on worker count or completion order.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from statistics import NormalDist
from typing import Optional

from .config import FORMATS, CampaignConfig
from .detect import DETECTED_OUTCOMES, Outcome, classify_run
from .faults import plan_injection
from .recover import RecoveryConfig, stack_stages
from .rvi import plan_component_fault
from .system import RunOptions, System

MAX_ATTEMPTS = 5
CATEGORIES = ("i", "ii", "iii", "iv")


def derive_seed(master_seed: int, run_index: int, attempt: int = 0) -> int:
    key = f"{master_seed}:{run_index}" if attempt == 0 else f"{master_seed}:{run_index}:{attempt}"
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big")


def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> Optional[tuple]:
    if n == 0:
        return None
    z = NormalDist().inv_cdf(0.5 + confidence / 2)
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * ((p * (1 - p) / n + z * z / (4 * n * n)) ** 0.5) / denom
    return (round(centre - half, 6), round(centre + half, 6))


@dataclass
class RunRecord:
    run_index: int
    seed: int
    attempts: int
    outcome: Optional[str]  # None for invalid runs
    fault: Optional[dict] = None
    detection: Optional[dict] = None
    category: Optional[str] = None
    verdicts: dict = field(default_factory=dict)
    vi_failed: bool = False
    latency_ms: Optional[int] = None
    leaked_pages: int = 0
    digest: str = ""
    invalid: Optional[str] = None  # diagnostics when the simulator broke an internal invariant

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


def stage_list(config: CampaignConfig) -> list:
    if config.stack:
        return stack_stages(_stack_base(config.recovery))
    return [("Full" if config.recovery == RecoveryConfig.full() else "Custom", config.recovery)]


def _stack_base(rec: RecoveryConfig) -> RecoveryConfig:
    """The non-flag settings of ``rec`` with every enhancement off."""
    return RecoveryConfig(skip_scrub=rec.skip_scrub, skip_nmi_check=rec.skip_nmi_check,
                          wal_page_count=rec.wal_page_count, restore_time=rec.restore_time)


def _component_targets(config: CampaignConfig, topo) -> list:
    if config.component == "privvm":
        return [d.name for d in topo.domains if d.role == "privvm"]
    return sorted(set(topo.dvm_pairs) | set(topo.dvm_pairs.values()))


def run_once(config: CampaignConfig, run_index: int, recovery: Optional[RecoveryConfig] = None,
             keep_trace: bool = False):
    """One campaign run. Returns the record, plus the trace when ``keep_trace``."""
    recovery = recovery or config.recovery
    topo = config.build_topology()
    mix = config.build_mix(topo)
    result = None
    seed = derive_seed(config.master_seed, run_index)
    attempt = 0
    plan = None
    for attempt in range(MAX_ATTEMPTS):
        seed = derive_seed(config.master_seed, run_index, attempt)
        opts = RunOptions(latency=config.latency, watchdog=config.watchdog(),
                          rvi_enabled=config.rvi.get("enabled", True),
                          replace_order=config.rvi.get("replace_order", "reinit_first"))
        fault = None
        if config.component == "vmm":
            fault = plan_injection(mix, seed)
            plan = fault.to_dict() if fault is not None else None
        else:
            opts.component_fault = plan_component_fault(config.component, _component_targets(config, topo), seed)
            plan = {"component": config.component, **opts.component_fault.to_dict()}
        try:
            result = System(topo, recovery, seed, fault, mix, opts).run()
            diag = _invariant_violation(result)
        except Exception as e:  # simulator bug: keep the campaign going, flag the run
            return _invalid(run_index, seed, attempt + 1, plan, f"{type(e).__name__}: {e}"), None
        if diag:
            return _invalid(run_index, seed, attempt + 1, plan, diag), None
        if result.injected:
            break
    outcome = classify_run(result.detection, result.recovery.get("category"), result.verdicts,
                           result.vi_failed, recovery.enabled)
    rec = RunRecord(run_index=run_index, seed=seed, attempts=attempt + 1, outcome=outcome.value,
                    fault=plan, detection=result.detection, category=result.recovery.get("category"),
                    verdicts=dict(result.verdicts), vi_failed=result.vi_failed,
                    latency_ms=result.recovery.get("latency_ms"), leaked_pages=result.leaked_pages,
                    digest=result.digest)
    return rec, (result.trace if keep_trace else None)


def _invalid(run_index, seed, attempts, plan, diag) -> RunRecord:
    return RunRecord(run_index=run_index, seed=seed, attempts=attempts, outcome=None, fault=plan,
                     invalid=diag)


def _invariant_violation(result) -> Optional[str]:
    rvi = result.checks.get("rvi")
    if rvi and rvi.get("replica_mismatches"):
        return f"XenStore replica diverged {rvi['replica_mismatches']} times"
    return None


def _run_index(config: CampaignConfig, recovery: RecoveryConfig, run_index: int) -> RunRecord:
    return run_once(config, run_index, recovery)[0]


@dataclass
class StageReport:
    name: str
    recovery: dict
    run_count: int
    invalid: int
    counts: dict  # outcome value -> runs, every outcome present
    digest: str  # over the per-run trace digests, in run order

    @property
    def detected(self) -> int:
        return sum(self.counts[o.value] for o in DETECTED_OUTCOMES)

    @property
    def recovered(self) -> int:
        return self.counts[Outcome.RECOVERED_CRASH.value] + self.counts[Outcome.RECOVERED_HANG.value]

    @property
    def silent(self) -> dict:
        return {"one_appvm": self.counts[Outcome.SILENT_ONE_APPVM.value],
                "system": self.counts[Outcome.SILENT_SYSTEM.value]}

    @property
    def manifested(self) -> int:
        return self.detected + sum(self.silent.values())

    @property
    def categories(self) -> dict:
        return {c: self.counts[f"recovery_failure_{c}"] for c in CATEGORIES}

    @property
    def success_rate(self) -> Optional[float]:
        return self.recovered / self.detected if self.detected else None

    @property
    def success_ci(self) -> Optional[tuple]:
        return wilson_interval(self.recovered, self.detected)

    @property
    def no_appvm_failure_rate(self) -> Optional[float]:
        """Share of all valid runs in which no AppVM failed."""
        valid = self.run_count - self.invalid
        if not valid:
            return None
        ok = self.recovered + self.counts[Outcome.NON_MANIFESTED.value]
        return ok / valid

    @property
    def detected_share(self) -> Optional[float]:
        """Crash and hang detections as a share of manifested faults."""
        return self.detected / self.manifested if self.manifested else None

    def summary(self) -> dict:
        return {"detected": self.detected, "recovered": self.recovered, "success_rate": self.success_rate,
                "success_ci": list(self.success_ci) if self.success_ci else None,
                "no_appvm_failure_rate": self.no_appvm_failure_rate, "silent": self.silent,
                "manifested": self.manifested, "detected_share": self.detected_share,
                "categories": self.categories}

    def to_dict(self) -> dict:
        return {"name": self.name, "recovery": self.recovery, "run_count": self.run_count,
                "invalid": self.invalid, "counts": dict(self.counts), "digest": self.digest,
                "summary": self.summary()}

    @classmethod
    def from_dict(cls, d: dict) -> "StageReport":
        return cls(d["name"], d["recovery"], d["run_count"], d["invalid"], dict(d["counts"]), d["digest"])


def aggregate(name: str, recovery: RecoveryConfig, records: list) -> StageReport:
    records = sorted(records, key=lambda r: r.run_index)
    counts = {o.value: 0 for o in Outcome}
    invalid = 0
    h = hashlib.sha256()
    for r in records:
        if r.outcome is None:
            invalid += 1
        else:
            counts[r.outcome] += 1
        h.update(f"{r.run_index}:{r.outcome}:{r.digest}\n".encode())
    return StageReport(name, recovery.as_dict(), len(records), invalid, counts, h.hexdigest())


@dataclass
class CampaignReport:
    config: dict
    stages: list
    records: dict = field(default_factory=dict)  # stage name -> list of RunRecord, not serialized

    def stage(self, name: str) -> StageReport:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"config": self.config, "stages": [s.to_dict() for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignReport":
        return cls(d["config"], [StageReport.from_dict(s) for s in d["stages"]])


def run_campaign(config: CampaignConfig, workers: Optional[int] = None, keep_records: bool = False,
                 run_count: Optional[int] = None) -> CampaignReport:
    workers = workers or config.workers
    n = run_count or config.run_count
    stages = []
    kept = {}
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for name, rec_cfg in stage_list(config):
            fn = partial(_run_index, config, rec_cfg)
            if pool is None:
                records = [fn(i) for i in range(n)]
            else:
                records = list(pool.map(fn, range(n), chunksize=max(1, n // (workers * 8))))
            stages.append(aggregate(name, rec_cfg, records))
            if keep_records:
                kept[name] = records
    finally:
        if pool is not None:
            pool.shutdown()
    cfg = config.to_dict()
    cfg.pop("workers")  # the report must not depend on parallelism
    cfg["run_count"] = n
    return CampaignReport(cfg, stages, kept)


def emit_report(report: CampaignReport, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        return _csv(report)
    if fmt == "text":
        return _text(report)
    raise ValueError(f"unknown report format {fmt!r}; expected one of {', '.join(FORMATS)}")


def load_report(text: str) -> CampaignReport:
    return CampaignReport.from_dict(json.loads(text))


def _csv(report: CampaignReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["outcome"] + [s.name for s in report.stages])
    for o in Outcome:
        w.writerow([o.value] + [s.counts[o.value] for s in report.stages])
    return buf.getvalue()


def _pct(x: Optional[float]) -> str:
    return "-" if x is None else f"{100 * x:.1f}%"


def _text(report: CampaignReport) -> str:
    c = report.config
    lines = [f"topology {c['topology']}  component {c['component']}  runs {c['run_count']}  "
             f"seed {c['master_seed']}", ""]
    head = (f"{'stage':<15}{'detected':>9}{'recovered':>10}{'success':>9}  {'95% CI':<17}"
            f"{'i':>4}{'ii':>4}{'iii':>4}{'iv':>4}{'silent1':>8}{'silentS':>8}{'nonman':>7}{'invalid':>8}")
    lines.append(head)
    lines.append("-" * len(head))
    for s in report.stages:
        ci = s.success_ci
        ci_s = f"[{100 * ci[0]:.1f}, {100 * ci[1]:.1f}]" if ci else "-"
        cat = s.categories
        lines.append(f"{s.name:<15}{s.detected:>9}{s.recovered:>10}{_pct(s.success_rate):>9}  {ci_s:<17}"
                     f"{cat['i']:>4}{cat['ii']:>4}{cat['iii']:>4}{cat['iv']:>4}"
                     f"{s.silent['one_appvm']:>8}{s.silent['system']:>8}"
                     f"{s.counts[Outcome.NON_MANIFESTED.value]:>7}{s.invalid:>8}")
    lines.append("")
    for s in report.stages:
        lines.append(f"{s.name}: no AppVM failure {_pct(s.no_appvm_failure_rate)}, "
                     f"detected share of manifested {_pct(s.detected_share)}")
    return "\n".join(lines) + "\n"


__all__ = ["CampaignReport", "RunRecord", "StageReport", "aggregate", "derive_seed", "emit_report",
           "load_report", "run_campaign", "run_once", "stage_list", "wilson_interval"]
