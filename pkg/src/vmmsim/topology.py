"""System configurations: which domains run where, devices, and execution profiles.

Each topology also carries the profile data the fault catalog and the
detection-time sampler need: how often each hypervisor operation runs on each
CPU, and how likely a CPU or interrupt line is to be mid-activity at a random
instant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .machine import ConfigError


@dataclass(frozen=True)
class SourceSpec:
    source_id: str
    vector: int
    cpu: int
    guest: Optional[str]  # domain that handles the line
    level_triggered: bool = True


@dataclass(frozen=True)
class DomainSpec:
    name: str
    role: str
    cpu: int
    workload: Optional[str] = None  # blk | net | unix | lvs_director | lvs_server
    blk_backends: tuple = ()
    net_backend: Optional[str] = None
    serves: tuple = ()  # backend drivers: "blk", "net"
    created_at_ms: Optional[int] = None  # None: running when benchmarks start
    profile: str = "PV"


@dataclass
class Topology:
    name: str
    n_cpus: int
    domains: list
    sources: list
    op_profile: dict  # (op, cpu) -> relative frequency, for the fault catalog
    occupancy: dict  # domain name -> probability its CPU is inside a hypercall
    line_duty: dict  # source id -> (p in service, p pending)
    nominal_ms: int  # fault-free run length bound
    workload: dict = field(default_factory=dict)
    dvm_pairs: dict = field(default_factory=dict)  # active DVM name -> spare DVM name
    xenstore_dvm: Optional[str] = None

    def domain(self, name: str) -> DomainSpec:
        for d in self.domains:
            if d.name == name:
                return d
        raise ConfigError(f"no domain {name!r} in {self.name}")

    @property
    def appvms(self) -> list:
        return [d.name for d in self.domains if d.role == "appvm"]

    def domid(self, name: str) -> int:
        return [d.name for d in self.domains].index(name)


BLK_WORKLOAD = {"n_io": 60, "n_mm": 30, "think_ms": 90, "timeout_ms": 1000, "retry_budget": 3}


def one_appvm() -> Topology:
    return Topology(
        name="1AppVM", n_cpus=2,
        domains=[
            DomainSpec("PrivVM", "privvm", 0, serves=("blk",)),
            DomainSpec("AppVM_Blk", "appvm", 1, "blk", blk_backends=("PrivVM",)),
        ],
        sources=[SourceSpec("blk", 0x30, 0, "PrivVM"), SourceSpec("net", 0x31, 0, None)],
        op_profile={
            ("mmu_update", 1): 2.0, ("page_table_pin", 1): 0.25, ("page_table_unpin", 1): 0.1,
            ("set_timer", 1): 0.35, ("sched_yield", 1): 0.35, ("evtchn_send", 1): 1.0,
            ("timer_tick", 1): 1.4,
            ("grant_map", 0): 1.0, ("grant_unmap", 0): 1.0, ("physdev_eoi", 0): 1.0,
            ("evtchn_send", 0): 1.0, ("irq_device", 0): 1.0, ("timer_tick", 0): 1.6,
        },
        occupancy={"PrivVM": 0.15, "AppVM_Blk": 0.30},
        line_duty={"blk": (0.22, 0.02)},
        nominal_ms=14_000,
        workload={"blk": dict(BLK_WORKLOAD)},
    )


def three_appvm() -> Topology:
    return Topology(
        name="3AppVM", n_cpus=5,
        domains=[
            DomainSpec("PrivVM", "privvm", 0),
            DomainSpec("DVM", "dvm", 1, serves=("blk", "net")),
            DomainSpec("AppVM_Net", "appvm", 2, "net", net_backend="DVM"),
            DomainSpec("AppVM_Unix", "appvm", 3, "unix"),
            DomainSpec("AppVM_Blk", "appvm", 4, "blk", blk_backends=("DVM",), created_at_ms=9000),
        ],
        sources=[SourceSpec("blk", 0x30, 1, "DVM"), SourceSpec("net", 0x31, 1, "DVM"),
                 SourceSpec("ide", 0x32, 3, "AppVM_Unix")],
        op_profile={
            ("mmu_update", 3): 1.5, ("page_table_pin", 3): 0.3, ("page_table_unpin", 3): 0.15,
            ("set_timer", 3): 0.3, ("sched_yield", 3): 0.3, ("physdev_eoi", 3): 0.3,
            ("irq_device", 3): 0.3, ("timer_tick", 3): 1.2,
            ("evtchn_send", 2): 1.0, ("timer_tick", 2): 1.2,
            ("grant_map", 1): 0.4, ("grant_unmap", 1): 0.4, ("physdev_eoi", 1): 1.2,
            ("evtchn_send", 1): 1.4, ("irq_device", 1): 1.2, ("timer_tick", 1): 1.2,
            ("timer_tick", 0): 1.4, ("domctl_create", 0): 0.05, ("vm_pause", 0): 0.03,
            ("vm_unpause", 0): 0.03,
        },
        occupancy={"PrivVM": 0.05, "DVM": 0.2, "AppVM_Net": 0.15, "AppVM_Unix": 0.3, "AppVM_Blk": 0.3},
        line_duty={"blk": (0.08, 0.02), "net": (0.10, 0.03), "ide": (0.05, 0.01)},
        nominal_ms=22_000,
        workload={"blk": {**BLK_WORKLOAD, "n_io": 40, "n_mm": 20},
                  "net": {"duration_ms": 14_000, "batch_ms": 100},
                  "unix": {"n_steps": 110, "think_ms": 100}},
    )


def five_appvm() -> Topology:
    return Topology(
        name="5AppVM", n_cpus=8,
        domains=[
            DomainSpec("PrivVM", "privvm", 0),
            DomainSpec("DVM1", "dvm", 1, serves=("blk", "net")),
            DomainSpec("DVM2", "dvm", 2, serves=("blk", "net")),
            DomainSpec("Director1", "appvm", 3, "lvs_director", net_backend="DVM1"),
            DomainSpec("Director2", "appvm", 4, "lvs_director", net_backend="DVM1"),
            DomainSpec("Server1", "appvm", 5, "lvs_server", blk_backends=("DVM1", "DVM2"), net_backend="DVM1"),
            DomainSpec("Server2", "appvm", 6, "lvs_server", blk_backends=("DVM1", "DVM2"), net_backend="DVM1"),
            DomainSpec("Server3", "appvm", 7, "lvs_server", blk_backends=("DVM1", "DVM2"), net_backend="DVM1"),
        ],
        sources=[SourceSpec("blk", 0x30, 1, "DVM1"), SourceSpec("net", 0x31, 1, "DVM1"),
                 SourceSpec("blk2", 0x34, 2, "DVM2"), SourceSpec("net2", 0x35, 2, "DVM2")],
        op_profile={
            **{("evtchn_send", c): 1.0 for c in range(3, 8)},
            **{("mmu_update", c): 0.4 for c in range(5, 8)},
            **{("timer_tick", c): 1.0 for c in range(8)},
            ("grant_map", 1): 0.5, ("grant_unmap", 1): 0.5, ("physdev_eoi", 1): 1.5,
            ("evtchn_send", 1): 2.0, ("irq_device", 1): 1.5,
            ("grant_map", 2): 0.5, ("grant_unmap", 2): 0.5, ("physdev_eoi", 2): 0.5,
            ("evtchn_send", 2): 0.5, ("irq_device", 2): 0.5,
            ("domctl_create", 0): 0.05, ("domctl_destroy", 0): 0.05,
        },
        occupancy={"PrivVM": 0.05, "DVM1": 0.2, "DVM2": 0.1, "Director1": 0.15, "Director2": 0.05,
                   "Server1": 0.15, "Server2": 0.15, "Server3": 0.15},
        line_duty={"blk": (0.05, 0.01), "net": (0.10, 0.03), "blk2": (0.05, 0.01)},
        nominal_ms=75_000,
        workload={"lvs": {"duration_ms": 60_000, "connect_every_ms": 100, "timeout_ms": 3000,
                          "recreate_after_ms": 50_000}},
        dvm_pairs={"DVM1": "DVM2"},
        xenstore_dvm="DVM2",
    )


TOPOLOGIES = {"1AppVM": one_appvm, "3AppVM": three_appvm, "5AppVM": five_appvm}


def get_topology(name: str) -> Topology:
    try:
        return TOPOLOGIES[name]()
    except KeyError:
        raise ConfigError(f"unknown topology {name!r}") from None
