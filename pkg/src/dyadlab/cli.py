"""Command-line entry point for the experiment suites.

Exit codes: 0 all assertions passed, 1 an assertion failed, 2 configuration
or input error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .core import GridShift, TorusGrid, sample_shift
from .harness import (
    ConfigError,
    ExperimentConfig,
    Report,
    SUITES,
    emit_plotdata,
    run_suite,
)
from .kernels import get_kernel
from .representation import KernelTensor, decompose


def _base_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.grid_level is not None:
        cfg.level = args.grid_level
    if args.samples is not None:
        cfg.samples = args.samples
    if args.out is not None:
        cfg.out_dir = args.out
    if args.format is not None:
        cfg.fmt = args.format
    return cfg


def _run_named(args, suites: list[str]) -> int:
    cfg = _base_config(args)
    ok = True
    for name in suites:
        cfg.suite = name
        report = run_suite(cfg)
        path = report.write(cfg.out_dir, cfg.fmt)
        n_fail = sum(not r.passed for r in report.rows)
        print(f"{name}: {len(report.rows)} rows, {n_fail} failures -> {path}")
        ok = ok and report.all_passed
    return 0 if ok else 1


def cmd_verify_identities(args) -> int:
    return _run_named(args, ["identity"])


def cmd_decompose(args) -> int:
    cfg = _base_config(args)
    grid = TorusGrid.make(cfg.level, tuple(cfg.dims))
    if args.kernel_file:
        with open(args.kernel_file, "rb") as fp:
            tensor = KernelTensor.load(fp)
    else:
        try:
            spec = get_kernel(args.kernel, i=args.component_i, j=args.component_j)
        except KeyError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        tensor = KernelTensor.from_kernel(grid, spec)
    rng = np.random.default_rng(cfg.seed)
    om = sample_shift(tensor.grid, rng) if args.random_shift else GridShift.zero(tensor.grid)
    dec = decompose(tensor, om)
    resid = dec.residual_on_haar_triples()
    os.makedirs(cfg.out_dir, exist_ok=True)
    manifest = dec.manifest()
    manifest["residual"] = resid
    man_path = os.path.join(cfg.out_dir, "decomposition.json")
    with open(man_path, "w") as fp:
        json.dump({k: v if not isinstance(v, dict) else {str(kk): vv for kk, vv in v.items()}
                   for k, v in manifest.items()}, fp, indent=1, sort_keys=True)
    from .model_ops import dmo_to_json

    for key, op, size in dec.extracted_full_paraproducts():
        name = f"fullpara_{key[0]}{key[1]}.json"
        with open(os.path.join(cfg.out_dir, name), "w") as fp:
            fp.write(dmo_to_json(op))
    if args.export_families:
        shifts = dec.extracted_shift_families()
        partials = dec.extracted_partial_paraproducts()
        for fname, fams in (("shift_families.json", shifts),
                            ("partial_families.json", partials)):
            payload = [
                {k: v for k, v in rec.items() if k != "operator"}
                | {"operator": rec["operator"].to_payload()}
                for rec in fams
            ]
            with open(os.path.join(cfg.out_dir, fname), "w") as fp:
                json.dump(payload, fp, sort_keys=True, default=list)
        print(f"exported {len(shifts)} shift families, {len(partials)} partial families")
    print(f"decomposition residual {resid:.3e} -> {man_path}")
    return 0 if resid <= cfg.tolerance else 1


def cmd_sweep_weighted(args) -> int:
    return _run_named(args, ["weighted", "coefficients"])


def cmd_commutators(args) -> int:
    return _run_named(args, ["commutator", "duality"])


def cmd_lower_bound(args) -> int:
    return _run_named(args, ["lowerbound"])


def cmd_suite(args) -> int:
    return _run_named(args, [args.name])


def cmd_emit_plotdata(args) -> int:
    with open(args.report) as fp:
        payload = json.load(fp)
    report = Report(payload["suite"], payload["seed"])
    for row in payload["rows"]:
        report.add(row["experiment"], row["cell"], row["seed"], row["value"],
                   row["bound"], row["passed"])
    try:
        table = emit_plotdata(report, args.x, args.y)
    except KeyError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = args.out or "plotdata.csv"
    if os.path.isdir(out):
        out = os.path.join(out, "plotdata.csv")
    with open(out, "w") as fp:
        fp.write(table)
    print(f"wrote {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dyadlab",
                                     description="finite dyadic model-operator laboratory")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--grid-level", type=int)
    parser.add_argument("--samples", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--format", choices=("csv", "json"))
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("verify-identities").set_defaults(func=cmd_verify_identities)

    p = sub.add_parser("decompose")
    p.add_argument("--kernel", default="riesz")
    p.add_argument("--kernel-file")
    p.add_argument("--component-i", type=int, default=1)
    p.add_argument("--component-j", type=int, default=1)
    p.add_argument("--random-shift", action="store_true")
    p.add_argument("--export-families", action="store_true")
    p.set_defaults(func=cmd_decompose)

    sub.add_parser("sweep-weighted").set_defaults(func=cmd_sweep_weighted)
    sub.add_parser("commutators").set_defaults(func=cmd_commutators)
    sub.add_parser("lower-bound").set_defaults(func=cmd_lower_bound)

    p = sub.add_parser("suite")
    p.add_argument("name", choices=sorted(SUITES))
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("emit-plotdata")
    p.add_argument("report", help="JSON report file")
    p.add_argument("--x", default="cell")
    p.add_argument("--y", default="value")
    p.set_defaults(func=cmd_emit_plotdata)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
