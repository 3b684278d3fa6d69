"""Command-line entry point: ``vmmsim run|campaign|matrix|latency|report``."""

from __future__ import annotations

import argparse
import json
import sys

from .campaign import emit_report, load_report, run_campaign, run_once, stage_list
from .config import FORMATS, CampaignConfig, load_config
from .latency import recovery_latency
from .machine import ConfigError
from .matrix import run_matrix
from .recover import RecoveryConfig


def _config(args) -> CampaignConfig:
    cfg = load_config(args.config) if args.config else CampaignConfig()
    over = {}
    for key in ("topology", "component", "master_seed", "run_count", "workers"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    if getattr(args, "stack", False):
        over["stack"] = True
    if over:
        d = cfg.to_dict()
        d.update(over)
        cfg = CampaignConfig.from_dict(d)
    return cfg


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="campaign YAML file")
    p.add_argument("--topology", choices=("1AppVM", "3AppVM", "5AppVM"))
    p.add_argument("--component", choices=("vmm", "dvm", "privvm"))
    p.add_argument("--seed", dest="master_seed", type=int)


def _write(text: str, path) -> None:
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    cfg = _config(args)
    stages = dict(stage_list(cfg))
    if args.stage and args.stage not in stages:
        raise ConfigError(f"unknown stage {args.stage!r}; have {sorted(stages)}")
    recovery = stages[args.stage] if args.stage else cfg.recovery
    rec, trace = run_once(cfg, args.index, recovery, keep_trace=True)
    if args.trace and trace is not None:
        for item in trace:
            print(json.dumps(item, default=str))
    print(json.dumps(rec.to_dict(), indent=2, sort_keys=True))
    return 0 if rec.invalid is None else 3


def cmd_campaign(args) -> int:
    cfg = _config(args)
    report = run_campaign(cfg)
    fmts = args.format or list(cfg.formats)
    for fmt in fmts:
        out = args.output.replace("{fmt}", fmt) if args.output and len(fmts) > 1 else args.output
        _write(emit_report(report, fmt), out)
    invalid = sum(s.invalid for s in report.stages)
    if invalid:
        print(f"vmmsim: {invalid} invalid runs (simulator invariant violations)", file=sys.stderr)
        return 3
    return 0


def cmd_matrix(args) -> int:
    results = run_matrix()
    if args.json:
        print(json.dumps([r.as_dict() for r in results], indent=2))
    else:
        for r in results:
            mark = "ok  " if r.ok else "FAIL"
            print(f"{mark} {r.case:<22} {r.flag:<24} off={r.off_outcome:<22} on={r.on_outcome}")
    return 0 if all(r.ok for r in results) else 1


def cmd_latency(args) -> int:
    cfg = RecoveryConfig.full(skip_scrub=args.skip_scrub, skip_nmi_check=args.skip_nmi_check)
    br = recovery_latency(cfg)
    if args.json:
        print(json.dumps(br.as_dict(), indent=2))
    else:
        for name, ms in br.steps:
            print(f"{name:<28}{ms:>6} ms")
        print(f"{'total':<28}{br.total_ms:>6} ms")
    return 0


def cmd_report(args) -> int:
    with open(args.path) as fh:
        report = load_report(fh.read())
    _write(emit_report(report, args.format), args.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vmmsim", description="Hypervisor microreboot recovery simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one seeded run, printed as JSON")
    _common(p)
    p.add_argument("--index", type=int, default=0, help="run index within the campaign")
    p.add_argument("--stage", help="enhancement stack stage name (with --stack)")
    p.add_argument("--stack", action="store_true")
    p.add_argument("--trace", action="store_true", help="print the event trace first")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("campaign", help="a fault-injection campaign")
    _common(p)
    p.add_argument("--runs", dest="run_count", type=int)
    p.add_argument("--stack", action="store_true", help="run every enhancement stack stage")
    p.add_argument("--workers", type=int)
    p.add_argument("--format", action="append", choices=FORMATS)
    p.add_argument("--output", help="output file; '{fmt}' is replaced when several formats are given")
    p.set_defaults(fn=cmd_campaign)

    p = sub.add_parser("matrix", help="paired fault and enhancement diagnostics")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_matrix)

    p = sub.add_parser("latency", help="recovery latency breakdown with every enhancement on")
    p.add_argument("--skip-scrub", action="store_true")
    p.add_argument("--skip-nmi-check", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_latency)

    p = sub.add_parser("report", help="re-render a stored JSON campaign report")
    p.add_argument("path")
    p.add_argument("--format", choices=FORMATS, default="text")
    p.add_argument("--output")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        parser.error(str(e))
    except (OSError, ValueError) as e:
        print(f"vmmsim: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
