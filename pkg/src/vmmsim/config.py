"""Campaign configuration: a declarative YAML document mapped onto simulator options."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .faults import FaultMix, build_catalog
from .latency import LatencyModel
from .machine import ConfigError
from .recover import RecoveryConfig
from .topology import Topology, get_topology

COMPONENTS = ("vmm", "dvm", "privvm")
FORMATS = ("json", "csv", "text")

_TOP_KEYS = {"topology", "profile", "workloads", "faults", "component", "recovery", "stack", "run_count",
             "master_seed", "formats", "detectors", "latency", "rvi", "workers"}
_DETECTOR_KEYS = {"watchdog_period_ms", "hang_threshold_ms"}
_RVI_KEYS = {"enabled", "replace_order"}


@dataclass
class CampaignConfig:
    topology: str = "1AppVM"
    profile: str = "PV"
    workloads: dict = field(default_factory=dict)  # per-kind overrides merged into the topology
    faults: dict = field(default_factory=dict)  # FaultMix.from_dict input
    component: str = "vmm"
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig.full)
    stack: bool = False
    run_count: int = 1000
    master_seed: int = 0
    formats: tuple = ("text",)
    detectors: dict = field(default_factory=dict)
    latency: LatencyModel = field(default_factory=LatencyModel)
    rvi: dict = field(default_factory=lambda: {"enabled": True, "replace_order": "reinit_first"})
    workers: int = 1

    def __post_init__(self):
        if self.profile not in ("PV", "FV"):
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.component not in COMPONENTS:
            raise ConfigError(f"unknown component {self.component!r}")
        if self.run_count < 1:
            raise ConfigError("run_count must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        for fmt in self.formats:
            if fmt not in FORMATS:
                raise ConfigError(f"unknown report format {fmt!r}")
        _check_keys("detectors", self.detectors, _DETECTOR_KEYS)
        _check_keys("rvi", self.rvi, _RVI_KEYS)
        topo = self.build_topology()
        if self.component != "vmm" and not topo.dvm_pairs:
            raise ConfigError(f"component {self.component!r} needs a topology with a driver VM pair")

    def build_topology(self) -> Topology:
        topo = get_topology(self.topology)
        if self.profile != "PV":
            doms = [dataclasses.replace(d, profile=self.profile) if d.role == "appvm" else d
                    for d in topo.domains]
            topo = dataclasses.replace(topo, domains=type(topo.domains)(doms))
        if self.workloads:
            merged = {k: dict(v) for k, v in topo.workload.items()}
            for kind, over in self.workloads.items():
                if kind not in merged:
                    raise ConfigError(f"topology {self.topology} has no {kind!r} workload")
                merged[kind].update(over)
            topo = dataclasses.replace(topo, workload=merged)
        return topo

    def build_mix(self, topo: Optional[Topology] = None) -> FaultMix:
        topo = topo or self.build_topology()
        try:
            return FaultMix.from_dict(self.faults, catalog=build_catalog(topo.op_profile))
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad fault section: {e}") from None

    def watchdog(self) -> dict:
        out = {}
        if "watchdog_period_ms" in self.detectors:
            out["period_ms"] = int(self.detectors["watchdog_period_ms"])
        if "hang_threshold_ms" in self.detectors:
            out["hang_threshold_ms"] = int(self.detectors["hang_threshold_ms"])
        return out

    def to_dict(self) -> dict:
        return {"topology": self.topology, "profile": self.profile, "workloads": self.workloads,
                "faults": self.faults, "component": self.component, "recovery": self.recovery.as_dict(),
                "stack": self.stack, "run_count": self.run_count, "master_seed": self.master_seed,
                "formats": list(self.formats), "detectors": dict(self.detectors),
                "latency": dataclasses.asdict(self.latency), "rvi": dict(self.rvi), "workers": self.workers}

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        if not isinstance(d, dict):
            raise ConfigError("campaign config must be a mapping")
        _check_keys("campaign", d, _TOP_KEYS)
        kw = dict(d)
        try:
            if "recovery" in kw:
                rec = kw["recovery"]
                if isinstance(rec, str):
                    rec = {"full": RecoveryConfig.full(), "basic": RecoveryConfig()}.get(rec)
                    if rec is None:
                        raise ConfigError(f"unknown recovery preset {kw['recovery']!r}")
                    kw["recovery"] = rec
                else:
                    base = RecoveryConfig.full().as_dict()
                    base.update(rec)
                    kw["recovery"] = RecoveryConfig.from_dict(base)
            if "latency" in kw:
                kw["latency"] = LatencyModel.from_dict(kw["latency"])
            if "formats" in kw:
                fmts = kw["formats"]
                kw["formats"] = (fmts,) if isinstance(fmts, str) else tuple(fmts)
            if "rvi" in kw:
                kw["rvi"] = {"enabled": True, "replace_order": "reinit_first", **kw["rvi"]}
            for k in ("run_count", "master_seed", "workers"):
                if k in kw:
                    kw[k] = int(kw[k])
            cfg = cls(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        cfg.build_mix()
        return cfg


def _check_keys(where: str, d: dict, known: set) -> None:
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def load_config(path: str) -> CampaignConfig:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
    return CampaignConfig.from_dict(data or {})
