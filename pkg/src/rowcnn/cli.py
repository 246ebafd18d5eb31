"""``rowcnn`` command line: plan, train, verify, gen-data.

Exit codes: 0 success, 2 config/data error, 3 infeasible plan, 4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys
import time

import numpy as np

from . import column, engine
from .data import images_to_tensor, load_dataset, synthetic_images, tile_images, write_dataset
from .errors import DataFormatError, InfeasiblePlanError, InvalidShapeError, RowCNNError
from .meter import Category, MemoryMeter
from .netspec import init_params, load_config
from .planner import MODES, MemoryModel, estimate_flops, make_plan, plan_report, solve_n
from .verify import run_verification

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_VERIFY = 0, 2, 3, 4

REPORT_COLUMNS = ["mode", "N", "segments", "iter", "loss", "peak_featuremap_bytes",
                  "peak_cache_bytes", "peak_total_bytes", "flops_est", "elapsed_ms", "seed"]

_SUFFIX = {"": 1, "k": 1 << 10, "m": 1 << 20, "g": 1 << 30}


def parse_bytes(text: str) -> int:
    """``"11200"``, ``"64M"``, ``"1.5G"`` -> bytes."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+)\s*([kKmMgG]?)[bB]?\s*", text)
    if not m:
        raise argparse.ArgumentTypeError(f"not a byte size: {text!r}")
    return int(float(m.group(1)) * _SUFFIX[m.group(2).lower()])


def parse_dims(text: str) -> tuple:
    parts = re.split(r"[x,]", text)
    if len(parts) != 3 or not all(p.strip().isdigit() and int(p) > 0 for p in parts):
        raise argparse.ArgumentTypeError(f"dims must be C,H,W or CxHxW: {text!r}")
    return tuple(int(p) for p in parts)


def _segments_arg(text: str):
    return text if text == "auto" else int(text)


def _plan(spec, args, budget=None):
    return make_plan(spec, args.mode, args.batch, rows=args.rows, segments=args.segments,
                     budget=budget, element_size=args.element_size, xi=args.xi)


# -- plan ------------------------------------------------------------------

def cmd_plan(args) -> int:
    spec = load_config(args.config)
    plan = _plan(spec, args, args.mem_budget)
    report = plan_report(spec, plan, args.batch, args.element_size, args.xi, args.mem_budget)
    if args.mem_budget is not None:
        model = MemoryModel.from_spec(spec, args.batch, args.mem_budget, args.element_size, args.xi)
        report["solve_n"] = {"FP": solve_n(model, "FP"), "BP": solve_n(model, "BP")}
    text = json.dumps(report, indent=2)
    print(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    return EXIT_OK


# -- train -----------------------------------------------------------------

def _dataset(spec, args):
    if args.data:
        x, y = load_dataset(args.data)
        if x.shape[1:] != spec.input_dims:
            raise DataFormatError(f"dataset images are {x.shape[1:]}, network expects {spec.input_dims}")
        return x, y
    samples = max(4 * args.batch, 16)
    images, labels = synthetic_images(samples, spec.input_dims, spec.class_count, args.seed)
    return images_to_tensor(images), labels.astype(np.int64)


def cmd_train(args) -> int:
    spec = load_config(args.config)
    plan = _plan(spec, args, args.mem_budget)
    x, y = _dataset(spec, args)
    params = init_params(spec, args.seed)
    flops = estimate_flops(spec, plan, args.batch).totals[args.mode]
    out = open(args.report, "w", newline="") if args.report else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for it in range(args.iters):
            idx = (np.arange(args.batch) + it * args.batch) % len(x)
            meter = MemoryMeter(args.element_size)
            start = time.perf_counter()
            if args.mode == "column":
                params, loss = column.train_step(spec, params, x[idx], y[idx], args.lr, meter)
            else:
                params, loss = engine.train_step_rowwise(spec, params, x[idx], y[idx], args.lr, plan, meter)
            elapsed = 0 if args.deterministic else round((time.perf_counter() - start) * 1000.0, 3)
            rep = meter.snapshot()
            writer.writerow([
                args.mode, plan.n_bp, len(plan.segments), it, repr(float(loss)),
                rep.combined_peak([Category.FEATURE_MAP, Category.CHECKPOINT]),
                rep.combined_peak([Category.SHARE_CACHE, Category.OVERLAP_REPLICA]),
                rep.global_peak, flops, elapsed, args.seed,
            ])
            if args.events and it == args.iters - 1:
                meter.export_events(args.events)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


# -- verify ----------------------------------------------------------------

def cmd_verify(args) -> int:
    spec = load_config(args.config) if args.config else None
    sharing = args.fault != "sharing-off"
    results, seeds = run_verification(args.trials, args.seed, args.tol, sharing, spec=spec)
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAIL seed={r.seed} mode={r.mode} N={r.rows} segments={r.segments} "
              f"grad_rel_err={r.grad_rel_err:.3e} loss_rel_err={r.loss_rel_err:.3e} shape_ok={r.shape_ok}")
    worst = max((r.grad_rel_err for r in results), default=0.0)
    print(f"{len(seeds)} trials, {len(results)} mode checks, {len(failed)} failures, "
          f"worst gradient relative error {worst:.3e} (tol {args.tol:g})")
    if failed:
        print("failing seeds: " + " ".join(str(s) for s in sorted({r.seed for r in failed})))
        return EXIT_VERIFY
    return EXIT_OK


# -- gen-data --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    images, labels = synthetic_images(args.samples, args.dims, args.classes, args.seed)
    if args.tile > 1:
        images = tile_images(images, args.tile)
    write_dataset(args.out, images, labels)
    print(f"wrote {len(images)} images of {images.shape[1:]} to {args.out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def _add_plan_args(p):
    p.add_argument("config", help="network config JSON")
    p.add_argument("--mode", choices=MODES, default="2ps")
    p.add_argument("--mem-budget", type=parse_bytes, default=None, help="bytes; K/M/G suffixes allowed")
    p.add_argument("--rows", type=int, default=None, help="row count N (solved from the budget if omitted; a per-segment cap for -h modes)")
    p.add_argument("--segments", type=_segments_arg, default=None, help="checkpoint segments for -h modes")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--element-size", type=int, default=8)
    p.add_argument("--xi", type=int, default=None, help="residual elements (default: measured)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rowcnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="solve a row plan and print its report")
    _add_plan_args(p)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_plan)

    t = sub.add_parser("train", help="run SGD iterations and write a per-iteration CSV")
    _add_plan_args(t)
    t.set_defaults(batch=4)
    t.add_argument("--iters", type=int, default=10)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--data", help="directory with images.idx and labels.idx")
    t.add_argument("--report", help="CSV path (stdout if omitted)")
    t.add_argument("--events", help="write the last iteration's meter events as CSV")
    t.add_argument("--deterministic", action="store_true", help="write elapsed_ms as 0")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="compare every row mode to the column oracle on random inputs")
    v.add_argument("config", nargs="?", help="fixed network (random networks if omitted)")
    v.add_argument("--trials", type=int, default=10)
    v.add_argument("--tol", type=float, default=1e-9)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--fault", choices=["sharing-off"], default=None,
                   help="negative control: drop 2PS share caches and delta carries")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gen-data", help="write a synthetic IDX dataset")
    g.add_argument("--samples", type=int, default=64)
    g.add_argument("--dims", type=parse_dims, default=(1, 16, 16))
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tile", type=int, default=1, help="repeat each image tile x tile times")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InfeasiblePlanError as exc:
        print(f"error: infeasible plan, violated bound '{exc.bound}': {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (RowCNNError, OSError) as exc:
        kind = "data" if isinstance(exc, (DataFormatError, OSError)) else "config"
        if isinstance(exc, InvalidShapeError):
            kind = "shape"
        print(f"error ({kind}): {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
