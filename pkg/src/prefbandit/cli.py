"""Command line entry point: run, design, coverage and report."""
from __future__ import annotations

import argparse
import sys
from typing import List, Optional

import numpy as np

from .bandit import load_instance
from .coverage import coverage_curve
from .design import preferential_design
from .harness import (ExperimentSpec, SpecError, build_instance, load_config, records_from_csv,
                      records_to_csv, report, run_experiment)

_DESIGN_KEYS = {"tol", "max_iters", "marginal_iters", "workers"}
_COVERAGE_KEYS = {"radii", "budget", "p", "refine_steps"}


def _seed_list(text: str) -> List[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty seed list")
    return out


def _emit(text: str, out: Optional[str]):
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _instance_from_args(args, cfg):
    if args.instance:
        return load_instance(args.instance)
    if cfg is None or "instance" not in cfg:
        raise SpecError("give --instance or a config with an 'instance' block")
    return build_instance(cfg["instance"])


def _block(cfg, name, allowed):
    block = dict((cfg or {}).get(name, {}))
    unknown = set(block) - allowed
    if unknown:
        raise SpecError(f"unknown {name} keys {sorted(unknown)}")
    return block


def cmd_run(args):
    cfg = load_config(args.config)
    for k in ("design", "coverage"):
        cfg.pop(k, None)
    if args.seed is not None:
        cfg["seeds"] = args.seed
    spec = ExperimentSpec.from_dict(cfg)
    records = run_experiment(spec, parallelism=args.parallelism)
    _emit(records_to_csv(records), args.out or spec.output)


def cmd_design(args):
    cfg = load_config(args.config) if args.config else None
    inst = _instance_from_args(args, cfg)
    opts = _block(cfg, "design", _DESIGN_KEYS)
    design = preferential_design(inst, **opts)
    text = design.to_csv(args.out)
    if not args.out:
        sys.stdout.write(text)
    sys.stderr.write(design.summary() + "\n")


def cmd_coverage(args):
    cfg = load_config(args.config) if args.config else None
    inst = _instance_from_args(args, cfg)
    opts = _block(cfg, "coverage", _COVERAGE_KEYS)
    radii = opts.pop("radii", None)
    if args.radii:
        radii = [float(r) for r in args.radii.split(",")]
    if radii is None:
        radii = list(np.linspace(0, inst.radius, 9))
    seed = (args.seed or [0])[0]
    curve = coverage_curve(inst, radii, rng=np.random.default_rng(seed), **opts)
    _emit(curve.to_csv(), args.out)


def cmd_report(args):
    records = []
    for path in args.records:
        records.extend(records_from_csv(path))
    text = report(records, template=args.template, series_dir=args.series_dir,
                  aggregator=args.aggregator)
    _emit(text, args.out)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="prefbandit", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="JSON experiment file")
        p.add_argument("--seed", type=_seed_list, help="seed list such as 0,1,2 or 0..19")
        p.add_argument("--out", help="output path (stdout if omitted)")
        p.add_argument("--format", choices=["csv"], default="csv")

    p = sub.add_parser("run", help="run an experiment grid and write RunRecord rows")
    common(p, config_required=True)
    p.add_argument("--parallelism", type=int, default=1)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("design", help="compute a preferential design for an instance")
    common(p)
    p.add_argument("--instance", help="instance text file")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("coverage", help="estimate the local coverage curve")
    common(p)
    p.add_argument("--instance", help="instance text file")
    p.add_argument("--radii", help="comma separated increasing radii")
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("report", help="summarize one or more record files")
    p.add_argument("records", nargs="+")
    p.add_argument("--out")
    p.add_argument("--series-dir", help="write two-column series files here")
    p.add_argument("--template", default="default", choices=["default", "rates"])
    p.add_argument("--aggregator", default="median", choices=["median", "mean"])
    p.add_argument("--format", choices=["csv"], default="csv")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (SpecError, OSError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
