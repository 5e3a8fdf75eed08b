"""Command-line entry point: ``ghofl run|sweep|inspect|diagnose|gen-synthetic``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import harness
from .blobs import load_head
from .client_stats import deserialize_bundle
from .datamodel import write_embeddings
from .diagnostics import gaussianity
from .recipes import SyntheticRecipe, generate


def _public(report: dict) -> dict:
    return {k: v for k, v in report.items() if not k.startswith("_")}


def _print_summary(report: dict) -> None:
    for r in report["runs"]:
        accs = "  ".join(f"{h}={v['accuracy']:.4f}" for h, v in r["heads"].items())
        print(f"{r['partition_label']:<36} bytes={r['total_bytes']:<10} {accs}")
    inv = report.get("invariance")
    if inv:
        print(f"max relative parameter difference across partitions: {inv['params_max_rel_diff']:.3e}")


def cmd_run(args) -> int:
    cfg = harness.load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    report = harness.run(cfg)
    _print_summary(report)
    if args.json:
        print(json.dumps(_public(report), indent=2, default=harness._jsonable))
    return 0


def cmd_sweep(args) -> int:
    cfg = harness.load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    report = harness.sweep(cfg, harness.parse_axes(args.axis))
    _print_summary(report)
    return 0


def cmd_inspect(args) -> int:
    head, basis, header = load_head(args.blob)
    info = {
        "kind": header["kind"],
        "meta": header["meta"],
        "arrays": {e["name"]: e["shape"] for e in header["arrays"]},
        "parameter_count": int(head.parameter_count()),
        "fisher_dim": None if basis is None else basis.k_f,
    }
    print(json.dumps(info, indent=2))
    return 0


def cmd_diagnose(args) -> int:
    agg = deserialize_bundle(Path(args.bundle).read_bytes())
    report = gaussianity(agg, min_count=args.min_count)
    if args.csv:
        report.write_csv(args.csv)
    if args.json:
        report.write_json(args.json)
    print(json.dumps(report.summary(), indent=2))
    return 0


def cmd_gen_synthetic(args) -> int:
    raw = yaml.safe_load(Path(args.recipe).read_text()) or {}
    recipe = harness._strict(SyntheticRecipe, raw, "recipe")
    train, test, _ = generate(recipe)
    out = Path(args.output)
    suffix = out.suffix or ".csv"
    stem = out.with_suffix("")
    write_embeddings(train, f"{stem}.train{suffix}")
    write_embeddings(test, f"{stem}.test{suffix}")
    print(f"wrote {stem}.train{suffix} ({train.n} rows) and {stem}.test{suffix} ({test.n} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ghofl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("config")
    r.add_argument("--output-dir")
    r.add_argument("--json", action="store_true", help="also print the full report")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="sweep Dirichlet alpha and client counts")
    s.add_argument("config")
    s.add_argument("--axis", action="append", default=[], help="e.g. alpha=0.05,0.5 or clients=5,50")
    s.add_argument("--output-dir")
    s.set_defaults(func=cmd_sweep)

    i = sub.add_parser("inspect", help="describe a GHH1 head blob")
    i.add_argument("blob")
    i.set_defaults(func=cmd_inspect)

    d = sub.add_parser("diagnose", help="skewness/kurtosis report from a GHB1 bundle")
    d.add_argument("bundle")
    d.add_argument("--min-count", type=int, default=8)
    d.add_argument("--csv")
    d.add_argument("--json")
    d.set_defaults(func=cmd_diagnose)

    g = sub.add_parser("gen-synthetic", help="write train/test embedding files from a recipe")
    g.add_argument("recipe")
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_gen_synthetic)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except harness.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (harness.ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
