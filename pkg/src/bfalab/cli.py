"""Command-line entry point: ``bfalab {train,attack,experiment,compare,grad-stats,hist}``.

Exit codes: 0 success (attack: lowest goal reached), 2 config error, 3 data
error (unreadable dataset or checkpoint), 4 run failure, 5 attack budget
exhausted, 6 attack stalled.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .analysis import gradient_summary, weight_histogram, write_rows_csv
from .attack import BUDGET_EXHAUSTED, GOAL_REACHED, STALLED, run_attack, write_trace
from .config import ExperimentPlan, load_plan, plan_hash
from .data import DataError, sample_attack_set
from .experiment import (CompareError, ManifestError, RunManifest, checkpoint_path, compare_reports, load_dataset,
                         run_experiment)
from .models import CheckpointError, load_checkpoint, save_checkpoint
from .train import ConfigError, TrainingDiverged, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUN, EXIT_BUDGET, EXIT_STALLED = 0, 2, 3, 4, 5, 6
ATTACK_EXIT = {GOAL_REACHED: EXIT_OK, BUDGET_EXHAUSTED: EXIT_BUDGET, STALLED: EXIT_STALLED}

log = logging.getLogger("bfalab")


def _floats(v):
    return tuple(float(t) for t in v.split(",") if t.strip())


def _mask(v):
    return None if v.strip().lower() == "all" else tuple(int(t) for t in v.split(",") if t.strip())


def _plan(args) -> ExperimentPlan:
    plan = load_plan(args.config) if getattr(args, "config", None) else ExperimentPlan()
    over = {}
    for flag, field in (("budget", "budget"), ("goals", "goals"), ("mask", "mask"), ("heuristic", "heuristic"),
                        ("eval_subsample", "eval_subsample")):
        v = getattr(args, flag, None)
        if v is not None:
            over[field] = v
    if "mask" in over and over["mask"] is None:
        over["mask"] = None
    if over:
        try:
            plan = replace(plan, attack=replace(plan.attack, **over))
        except ConfigError as exc:
            raise ConfigError(f"command line: {exc}", exc.field) from None
    return plan


def _out(args, default="runs") -> Path:
    return Path(args.out or default)


def cmd_train(args) -> int:
    plan = _plan(args)
    seed = args.seed if args.seed is not None else plan.train_seeds[0]
    root = _out(args)
    ds = load_dataset(plan, args.data_dir)
    cfg = plan.training_config(seed)

    def progress(epoch, m):
        log.info("epoch %d/%d lr=%.4g loss=%.4f train_acc=%.4f test_acc=%.4f", epoch + 1, cfg.epochs, m["lr"],
                 m["train_loss"], m["train_acc"], m["test_acc"])

    model, record = train(plan.arch, ds, cfg, progress=progress)
    ckpt = save_checkpoint(model, checkpoint_path(root, seed))
    csv_path = root / "reports" / f"train-seed-{seed}.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    record.to_csv(csv_path)
    manifest = RunManifest.load(root)
    manifest.plan_hash = manifest.plan_hash or plan_hash(plan)
    manifest.record(ckpt)
    manifest.record(csv_path)
    manifest.save()
    print(f"test accuracy {record.test_acc[-1]:.4f}")
    print(ckpt)
    return EXIT_OK


def cmd_attack(args) -> int:
    plan = _plan(args)
    seed = args.seed if args.seed is not None else plan.attack_seeds[0]
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(plan, args.data_dir)
    cfg = plan.attack_config(seed)

    def progress(r):
        log.info("flip %d: layer %d weight %d bit %d  loss %.4f -> %.4f  acc %.4f", r.step, r.address.layer,
                 r.address.index, r.address.bit, r.pre_loss, r.post_loss, r.post_acc)

    trace = run_attack(model, ds, cfg, progress=progress)
    root = _out(args)
    out = write_trace(trace, root / "traces" / f"{Path(args.checkpoint).stem}-attack-{seed}.trace")
    for g in trace.goals:
        s = trace.goal_steps.get(g)
        print(f"goal {g:g}: {'not reached' if s is None else f'{s} flips'}")
    print(f"termination {trace.termination} after {len(trace.records)} flips")
    print(out)
    return ATTACK_EXIT[trace.termination]


def cmd_experiment(args) -> int:
    plan = _plan(args)
    reports = run_experiment(plan, _out(args, f"runs/{plan.name}"), data_dir=args.data_dir, jobs=args.jobs)
    import json
    summary = json.loads((reports / "summary.json").read_text())
    for row in summary.get("goal_stats", []):
        if row["group"] == "all":
            mean = "n/a" if row["mean_flips"] is None else f"{row['mean_flips']:.2f} ({row['std_flips']:.2f})"
            print(f"goal {row['goal']:g}: mean flips {mean}  reached {row['reached']}/{row['runs']}")
    print(reports)
    if summary["failures"]:
        for f in summary["failures"]:
            print(f"failed cell {f.get('args')}: {f['error']}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def _fmt(v):
    if v is None:
        return "n/a"
    return f"{v:+.2f}" if isinstance(v, float) else str(v)


def cmd_compare(args) -> int:
    rows = compare_reports(args.reports)
    cols = list(rows[0].keys())
    print("\t".join(cols))
    for r in rows:
        print("\t".join(_fmt(r[c]) if c.startswith("delta") else ("n/a" if r[c] is None else
                        (f"{r[c]:.2f}" if isinstance(r[c], float) and c != "goal" else str(r[c]))) for c in cols))
    if args.out:
        write_rows_csv(args.out, rows, cols)
    return EXIT_OK


def cmd_grad_stats(args) -> int:
    plan = _plan(args)
    seed = args.seed if args.seed is not None else plan.attack_seeds[0]
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(plan, args.data_dir)
    batch = sample_attack_set(ds.train_x, ds.train_y, plan.attack.attack_size, seed)
    rows = gradient_summary(model, batch.x, batch.y).rows()
    cols = ["layer", "name", "min", "q1", "median", "q3", "max", "mean"]
    print("\t".join(cols))
    for r in rows:
        print("\t".join(str(r[c]) if c in ("layer", "name") else f"{r[c]:.4e}" for c in cols))
    if args.out:
        write_rows_csv(args.out, rows, cols)
    return EXIT_OK


def cmd_hist(args) -> int:
    model = load_checkpoint(args.checkpoint)
    rows = []
    for name, (counts, edges) in weight_histogram(model, args.bins).items():
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            rows.append({"layer": name, "lo": float(lo), "hi": float(hi), "count": int(c)})
    if args.out:
        write_rows_csv(args.out, rows, ["layer", "lo", "hi", "count"])
    else:
        print("layer\tlo\thi\tcount")
        for r in rows:
            print(f"{r['layer']}\t{r['lo']:.5g}\t{r['hi']:.5g}\t{r['count']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bfalab",
                                description="Train int8 quantized networks and run bit-flip attacks on them.")
    p.add_argument("--version", action="version", version=f"bfalab {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings and results")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, out=True):
        sp.add_argument("--config", help="INI run configuration")
        if data:
            sp.add_argument("--data-dir", help="MNIST IDX directory (overrides BFALAB_DATA_DIR and [data] dir)")
        if out:
            sp.add_argument("--out", help="output directory or file")

    def attack_flags(sp):
        sp.add_argument("--budget", type=int)
        sp.add_argument("--goals", type=_floats, help="comma-separated accuracy goals, e.g. 0.11,0.25")
        sp.add_argument("--mask", type=_mask, help="comma-separated layer ids, or 'all'")
        sp.add_argument("--heuristic", choices=("gradient", "taylor"))
        sp.add_argument("--eval-subsample", type=int, help="test samples used for accuracy (0 = all)")

    sp = sub.add_parser("train", help="train one seed and write a checkpoint")
    common(sp)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("attack", help="run BFA on a checkpoint and write a trace")
    sp.add_argument("checkpoint")
    common(sp)
    sp.add_argument("--seed", type=int, help="attack seed (selects the attack set)")
    attack_flags(sp)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("experiment", help="train all seeds, attack each, aggregate reports")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1)
    attack_flags(sp)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("compare", help="side-by-side goal statistics of report directories")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--out", help="also write the table as CSV")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("grad-stats", help="per-layer |dL/dW| summary on the attack set")
    sp.add_argument("checkpoint")
    common(sp)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_grad_stats)

    sp = sub.add_parser("hist", help="per-layer histogram of quantized weights")
    sp.add_argument("checkpoint")
    sp.add_argument("--bins", type=int, default=32)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_hist)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, CompareError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, ManifestError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, RuntimeError, ValueError, OSError) as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
