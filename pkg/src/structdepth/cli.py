"""Batch command-line front end.

Exit status: 0 on success, 1 when inputs fail validation or a check fails,
2 on usage or parse errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .core import boundary_weight_mask, compute_normals
from .fileio import FormatError, load_depth, write_pfm, write_pgm8
from .gradcheck import BLOCK_NAMES, DEFAULT_EPS, GRADCHECK_TOL, gradcheck
from .losses import DEFAULT_GAMMA, DEFAULT_LAMBDAS, EmptyOverlapError, Stage, total_loss
from .metrics import aggregate, evaluate
from .mixer import (
    CATEGORIES,
    DEFAULT_BATCH_SIZE,
    DEFAULT_STAGES,
    CurriculumSchedule,
    PlateauConfig,
    ScheduleError,
    next_batch,
    parse_datasets,
)

SCHEMA_VERSION = "1.0"
DEPTH_SUFFIXES = (".pfm", ".pgm")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class InputError(Exception):
    """Bad input file or argument combination; maps to exit status 2."""


def _make_report(command, parameters, seed=None):
    return {
        "schema_version": SCHEMA_VERSION,
        "tool": "structdepth",
        "tool_version": __version__,
        "command": command,
        "parameters": parameters,
        "seed": seed,
        "results": [],
        "aggregate": {},
    }


def dump_report(report) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def _write_report(report, path):
    text = dump_report(report)
    if path:
        Path(path).write_text(text, encoding="utf-8")
    return text


def _depth_files(path: Path):
    if path.is_file():
        return {path.stem: path}
    if path.is_dir():
        return {p.stem: p for p in sorted(path.iterdir()) if p.suffix.lower() in DEPTH_SUFFIXES}
    raise InputError(f"{path} does not exist")


def match_pairs(pred: Path, gt: Path):
    """Pair files by stem; returns (sorted [(name, pred, gt)], unmatched names)."""
    pred, gt = Path(pred), Path(gt)
    if pred.is_file() and gt.is_file():
        return [(gt.stem, pred, gt)], []
    preds = _depth_files(pred)
    gts = _depth_files(gt)
    names = sorted(set(preds) & set(gts))
    unmatched = sorted(set(preds) ^ set(gts))
    return [(n, preds[n], gts[n]) for n in names], unmatched


def _run_parallel(fn, items, jobs):
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _load_pairs(args):
    pairs, unmatched = match_pairs(args.pred, args.gt)
    if unmatched:
        for name in unmatched:
            print(f"unmatched file name: {name}", file=sys.stderr)
        return None
    if not pairs:
        print("no depth files found", file=sys.stderr)
        return None
    return pairs


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    pairs = _load_pairs(args)
    if pairs is None:
        return EXIT_FAIL
    report = _make_report("eval", {"pred": str(args.pred), "gt": str(args.gt), "clamp_max": args.clamp_max, "depth_scale": args.depth_scale})

    def work(item):
        name, p, g = item
        try:
            m = evaluate(load_depth(p, args.depth_scale), load_depth(g, args.depth_scale), clamp_max=args.clamp_max)
        except EmptyOverlapError as exc:
            return name, None, str(exc)
        return name, m, None

    ok = []
    for name, m, err in _run_parallel(work, pairs, args.jobs):
        if err:
            report["results"].append({"name": name, "error": err})
        else:
            report["results"].append({"name": name, "metrics": m.as_dict()})
            ok.append(m)
    if ok:
        report["aggregate"] = aggregate(ok).as_dict()
    _write_report(report, args.report)
    _print_metrics_table(report)
    return EXIT_OK if ok else EXIT_FAIL


def _print_metrics_table(report):
    cols = ("rel", "rmse", "log10", "delta1", "delta2", "delta3", "pixel_count")
    print(f"{'name':<24}" + "".join(f"{c:>12}" for c in cols))
    rows = [(r["name"], r.get("metrics"), r.get("error")) for r in report["results"]]
    if report["aggregate"]:
        rows.append(("ALL", report["aggregate"], None))
    for name, m, err in rows:
        if err:
            print(f"{name:<24}  {err}")
            continue
        cells = "".join(f"{m[c]:>12d}" if c == "pixel_count" else f"{m[c]:>12.5f}" for c in cols)
        print(f"{name:<24}{cells}")


# ---------------------------------------------------------------- loss


def cmd_loss(args) -> int:
    pairs = _load_pairs(args)
    if pairs is None:
        return EXIT_FAIL
    lambdas = tuple(args.lambdas)
    params = {
        "pred": str(args.pred),
        "gt": str(args.gt),
        "stage": args.stage,
        "gamma": args.gamma,
        "lambdas": list(lambdas),
        "edge_weights": args.edge_weights,
        "low": args.low,
        "high": args.high,
        "grid": args.grid,
        "depth_scale": args.depth_scale,
    }
    report = _make_report("loss", params, seed=args.seed)

    def work(indexed):
        index, (name, p, g) = indexed
        # per-file stream depends only on the seed and the file's sorted position
        rng = np.random.default_rng([args.seed, index])
        pred = load_depth(p, args.depth_scale)
        gt = load_depth(g, args.depth_scale)
        weights = boundary_weight_mask(gt, args.low, args.high) if args.edge_weights else None
        try:
            lb = total_loss(pred, gt, Stage(args.stage), lambdas, args.gamma, weights, rng, grid=args.grid)
        except EmptyOverlapError as exc:
            return name, None, str(exc)
        return name, lb, None

    done = []
    for name, lb, err in _run_parallel(work, list(enumerate(pairs)), args.jobs):
        if err:
            report["results"].append({"name": name, "error": err})
        else:
            report["results"].append({"name": name, "losses": lb.as_dict()})
            done.append(lb)
    if done:
        report["aggregate"] = {
            key: float(np.mean([getattr(lb, key) for lb in done])) for key in ("berhu", "gradient", "normal", "gfrl", "total")
        }
        report["aggregate"]["count"] = len(done)
    _write_report(report, args.report)
    for entry in report["results"]:
        if "losses" in entry:
            l_ = entry["losses"]
            print(f"{entry['name']:<24} total={l_['total']:.6g} berhu={l_['berhu']:.6g} gradient={l_['gradient']:.6g} normal={l_['normal']:.6g} gfrl={l_['gfrl']:.6g}")
        else:
            print(f"{entry['name']:<24} {entry['error']}")
    return EXIT_OK if done else EXIT_FAIL


# ---------------------------------------------------------------- mask


def cmd_mask(args) -> int:
    gt = load_depth(args.gt, args.depth_scale)
    weights = boundary_weight_mask(gt, args.low, args.high, args.kernel).weights
    img = np.where(weights == 5.0, 255, 0).astype(np.uint8)
    Path(args.out).write_bytes(write_pgm8(img))
    print(f"wrote {args.out}: {int((img == 255).sum())} boundary pixels of {img.size}")
    return EXIT_OK


# ------------------------------------------------------------- normals


def cmd_normals(args) -> int:
    gt = load_depth(args.gt, args.depth_scale)
    Path(args.out).write_bytes(write_pfm(compute_normals(gt)))
    print(f"wrote {args.out}")
    return EXIT_OK


# -------------------------------------------------------------- sample


def read_loss_history(path) -> list[tuple[int, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["epoch", "loss"]:
            raise InputError(f"{path}: header must be 'epoch,loss'")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((int(row[0]), float(row[1])))
            except (ValueError, IndexError):
                raise InputError(f"{path}:{lineno}: expected 'epoch,loss', got {row!r}") from None
    return rows


def _parse_stages(text):
    if text is None:
        return list(DEFAULT_STAGES)
    stages = []
    for part in text.split(";"):
        cats = [c.strip() for c in part.split(",") if c.strip()]
        unknown = [c for c in cats if c not in CATEGORIES]
        if unknown:
            raise InputError(f"unknown categories {unknown} in --stages")
        stages.append(frozenset(cats))
    return stages


def cmd_sample(args) -> int:
    try:
        records = json.loads(Path(args.datasets).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{args.datasets}: not valid JSON ({exc})") from None
    try:
        datasets = parse_datasets(records)
        schedule = CurriculumSchedule(datasets, _parse_stages(args.stages))
        cfg = PlateauConfig(args.epsilon, args.patience)
    except ScheduleError as exc:
        raise InputError(f"{args.datasets}: {exc}") from None
    params = {
        "datasets": str(args.datasets),
        "stages": [sorted(s, key=CATEGORIES.index) for s in schedule.stages],
        "stage": args.stage,
        "auto": bool(args.auto),
        "loss_history": str(args.loss_history) if args.loss_history else None,
        "batches": args.batches,
        "batch_size": args.batch_size,
        "patience": cfg.patience,
        "epsilon": cfg.epsilon,
    }
    report = _make_report("sample", params, seed=args.seed)

    transitions = []
    if args.auto:
        if not args.loss_history:
            raise InputError("--auto needs --loss-history")
        for epoch, loss in read_loss_history(args.loss_history):
            if schedule.observe_epoch(loss, cfg):
                transitions.append({"epoch": epoch, "stage": schedule.active_stage})
    elif args.stage is not None:
        if not 0 <= args.stage < len(schedule.stages):
            raise InputError(f"--stage must be in [0, {len(schedule.stages) - 1}]")
        schedule.active_stage = args.stage

    try:
        rng = np.random.default_rng(args.seed)
        batches = [next_batch(schedule, args.batch_size, rng) for _ in range(args.batches)]
    except ScheduleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL

    counts = {d.id: 0 for d in schedule.datasets}
    for batch in batches:
        for ds, _ in batch.entries:
            counts[ds] += 1
    draws = sum(counts.values())
    report["results"] = [[[ds, idx] for ds, idx in b.entries] for b in batches]
    report["aggregate"] = {
        "draws": draws,
        "active_stage": schedule.active_stage,
        "active_categories": sorted(schedule.active_categories, key=CATEGORIES.index),
        "frequencies": {k: v / draws for k, v in counts.items()} if draws else {},
        "transitions": transitions,
        "schedule": schedule.to_dict(),
    }
    _write_report(report, args.report)
    for t in transitions:
        print(f"epoch {t['epoch']}: advanced to stage {t['stage']}")
    for ds, f in report["aggregate"]["frequencies"].items():
        print(f"{ds:<24}{f:>10.4f}")
    return EXIT_OK


# ----------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    blocks = BLOCK_NAMES if args.block == "all" else (args.block,)
    report = _make_report("gradcheck", {"block": args.block, "eps": args.eps, "tolerance": GRADCHECK_TOL}, seed=args.seed)
    ok = True
    for name in blocks:
        r = gradcheck(name, args.seed, args.eps)
        report["results"].append(r.as_dict())
        ok &= r.passed()
        for key, err in r.errors.items():
            print(f"{name:<8}{key:<18}{err:.3e}  {'ok' if err < GRADCHECK_TOL else 'FAIL'}")
    report["aggregate"] = {"max_error": max(r["max_error"] for r in report["results"]), "passed": ok}
    _write_report(report, args.report)
    return EXIT_OK if ok else EXIT_FAIL


# -------------------------------------------------------------- parser


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


def _odd_kernel(text):
    v = int(text)
    if v < 1 or v % 2 == 0:
        raise argparse.ArgumentTypeError(f"kernel must be a positive odd integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="structdepth", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def depth_scale(p):
        p.add_argument("--depth-scale", type=_positive_float, default=0.001, help="meters per unit for 16-bit PGM inputs")

    p = sub.add_parser("eval", help="depth metrics over prediction/ground-truth pairs")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--clamp-max", type=_positive_float, default=None, help="clamp predictions to this depth (m)")
    p.add_argument("--report", type=Path)
    p.add_argument("--jobs", type=_positive_int, default=1)
    depth_scale(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loss", help="staged training loss per pair")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--stage", type=int, choices=(1, 2, 3), default=3)
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.add_argument("--lambdas", type=float, nargs=4, default=list(DEFAULT_LAMBDAS), metavar="L")
    p.add_argument("--edge-weights", action="store_true", help="weight BerHu by the ground-truth boundary mask")
    p.add_argument("--low", type=float, default=None, help="Canny low threshold (default 0.1 x max gradient)")
    p.add_argument("--high", type=float, default=None, help="Canny high threshold (default 0.2 x max gradient)")
    p.add_argument("--grid", type=_positive_int, default=16, help="sampling grid for the ranking loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", type=Path)
    p.add_argument("--jobs", type=_positive_int, default=1)
    depth_scale(p)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("mask", help="write the boundary weight mask as an 8-bit PGM")
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--low", type=float, default=None)
    p.add_argument("--high", type=float, default=None)
    p.add_argument("--kernel", type=_odd_kernel, default=5)
    p.add_argument("--out", type=Path, required=True)
    depth_scale(p)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("sample", help="draw curriculum-balanced batches")
    p.add_argument("--datasets", type=Path, required=True, help="JSON array of {id, category, size}")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--stage", type=int, default=None, help="0-based curriculum stage to sample from")
    mode.add_argument("--auto", action="store_true", help="replay --loss-history to pick the stage")
    p.add_argument("--loss-history", type=Path, help="CSV with header 'epoch,loss'")
    p.add_argument("--stages", default=None, help="cumulative stages, e.g. 'I,S;I,S,PT;I,S,PT,HC'")
    p.add_argument("--batches", type=_positive_int, default=1)
    p.add_argument("--batch-size", type=_positive_int, default=DEFAULT_BATCH_SIZE)
    p.add_argument("--patience", type=_positive_int, default=5)
    p.add_argument("--epsilon", type=_positive_float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    p.add_argument("--block", choices=(*BLOCK_NAMES, "all"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=_positive_float, default=DEFAULT_EPS)
    p.add_argument("--report", type=Path)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("normals", help="write the surface-normal field as a 3-channel PFM")
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    depth_scale(p)
    p.set_defaults(func=cmd_normals)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
