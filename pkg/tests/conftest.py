import pytest

from vmmsim.guests import DomainState
from vmmsim.machine import InterruptSource, Machine
from vmmsim.vmm import Vmm


class Clock:
    def __init__(self, t=0):
        self.t = t

    def __call__(self):
        return self.t


class Bench:
    """A booted hypervisor with a PrivVM (0), an AppVM (1) and a driver VM (2)."""

    def __init__(self, n_cpus=2, wal=False):
        self.clock = Clock()
        src = [InterruptSource("blk", 0x30, True, bound_cpu=0), InterruptSource("net", 0x31, True, bound_cpu=0)]
        self.machine = Machine(n_cpus, n_pages=1024, sources=src)
        self.vmm = Vmm.boot(self.machine, self.clock, wal=wal)
        self.doms = {}
        for domid, (name, role, cpu) in enumerate((("PrivVM", "privvm", 0), ("AppVM", "appvm", 1),
                                                    ("DVM", "dvm", 0))):
            d = DomainState(domid, name, role, cpu % n_cpus)
            self.vmm.register_domain(d)
            self.doms[domid] = d
        for c in range(n_cpus):
            self.vmm.schedule(c)

    def hc(self, domid, op, *args):
        d = self.doms[domid]
        return self.vmm.hypercall(d.cpu, d.vcpus[0], op, args)


@pytest.fixture
def bench():
    return Bench()


def run_targeted(topology, fault, config=None, seed=0, **opts):
    """One run of a fully specified fault with the detection-time sampler off."""
    from vmmsim.recover import RecoveryConfig
    from vmmsim.system import RunOptions, System
    from vmmsim.topology import get_topology

    s = System(get_topology(topology), config or RecoveryConfig.full(), seed, fault,
               options=RunOptions(sampler=False, shortcut_none=False, **opts))
    return s, s.run()


def _crash(t=3000):
    return {"kind": "crash", "cpu": 1, "cause": "canned", "time_ms": t, "triple_fault": False}


def _run3(reboot_ok=True, net=True, unix=True, blk=True, create_ok=True):
    return {"reboot_ok": reboot_ok, "topology": "3AppVM", "appvms": ["AppVM_Net", "AppVM_Unix", "AppVM_Blk"],
            "verdicts": {"AppVM_Net": net, "AppVM_Unix": unix, "AppVM_Blk": blk}, "create_ok": create_ok}


# One hand-built trace per outcome class: (expected outcome value, detection, recovery run facts or None,
# verdicts, vi_failed). Detected traces carry the facts fed to recovery_outcome_category.
CANNED_TRACES = [
    ("recovered_crash", _crash(), _run3(), None, False),
    ("recovery_failure_i", _crash(), _run3(reboot_ok=False, net=False, unix=False, blk=False), None, False),
    ("recovery_failure_ii", _crash(), _run3(net=False, unix=False, blk=False, create_ok=False), None, False),
    ("recovery_failure_iii", _crash(), _run3(net=False, unix=False), None, False),
    ("recovery_failure_iv", _crash(), _run3(blk=False, create_ok=False), None, False),
    ("silent_one_appvm", None, None, {"AppVM_Net": False, "AppVM_Unix": True, "AppVM_Blk": True}, False),
    ("silent_system", None, None, {"AppVM_Net": True, "AppVM_Unix": True, "AppVM_Blk": True}, True),
    ("non_manifested", None, None, {"AppVM_Net": True, "AppVM_Unix": True, "AppVM_Blk": True}, False),
]


def classify_canned(trace):
    from vmmsim.detect import classify_run
    from vmmsim.recover import recovery_outcome_category

    _, detection, run, verdicts, vi_failed = trace
    if detection is not None:
        return classify_run(detection, recovery_outcome_category(run), run["verdicts"], vi_failed)
    return classify_run(None, None, verdicts, vi_failed)


def detected_runs(n, topologies=("1AppVM", "3AppVM"), master=0):
    """The first ``n`` seeded campaign-style runs whose failure was detected and whose reboot completed."""
    from vmmsim.campaign import derive_seed
    from vmmsim.faults import FaultMix, build_catalog, plan_injection
    from vmmsim.recover import RecoveryConfig
    from vmmsim.system import RunOptions, System
    from vmmsim.topology import get_topology

    out = []
    i = 0
    while len(out) < n:
        topo = get_topology(topologies[i % len(topologies)])
        mix = FaultMix.from_dict({}, catalog=build_catalog(topo.op_profile))
        seed = derive_seed(master, i)
        s = System(topo, RecoveryConfig.full(), seed, plan_injection(mix, seed), mix, RunOptions())
        r = s.run()
        if r.detection is not None and "pages_preserved" in r.checks:
            out.append((seed, s, r))
        i += 1
    return out


# -- acceptance criteria reporting ------------------------------------------------

ACCEPTANCE = []  # (label, passed, detail), in the order the criteria ran


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's verdict; unrecorded means it raised first."""
    got = []

    def record(label, passed, detail=""):
        got.append((label, bool(passed), detail))

    yield record
    if got:
        ACCEPTANCE.extend(got)
    else:
        ACCEPTANCE.append((request.node.name, False, "raised before a verdict"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")
