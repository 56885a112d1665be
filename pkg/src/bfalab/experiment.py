"""Experiment orchestration: seeds x attacks grids, run directories, manifests.

Run directory layout::

    <out>/plan.lock                 resolved configuration
    <out>/manifest.json             artifact checksums, timestamps, version
    <out>/checkpoints/seed-<s>.ckpt
    <out>/traces/seed-<s>-attack-<a>.trace
    <out>/reports/*.csv, summary.json
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence


from . import __version__
from . import init as init_mod
from .analysis import (accuracy_curve, goal_stats, gradient_summary, layer_breakdown, write_curve_csv,
                       write_rows_csv)
from .attack import AttackTrace, goal_crossing_monotone, read_trace, run_attack, write_trace
from .config import ExperimentPlan, plan_hash, plan_to_text, resolve_data_dir
from .data import Dataset, DataError, load_mnist, sample_attack_set, synthetic_gaussians
from .models import load_checkpoint, save_checkpoint
from .train import train

log = logging.getLogger(__name__)


class ManifestError(Exception):
    """An artifact is missing or does not match its recorded checksum."""


class CompareError(ValueError):
    """Reports cannot be compared."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    root: Path
    plan_hash: str = ""
    artifacts: dict = field(default_factory=dict)  # relative path -> sha256
    timestamps: dict = field(default_factory=dict)
    version: str = __version__
    extra: dict = field(default_factory=dict)

    @property
    def path(self) -> Path:
        return self.root / "manifest.json"

    @classmethod
    def load(cls, root) -> "RunManifest":
        root = Path(root)
        p = root / "manifest.json"
        if not p.exists():
            return cls(root)
        d = json.loads(p.read_text())
        return cls(root, d.get("plan_hash", ""), d.get("artifacts", {}), d.get("timestamps", {}),
                   d.get("version", ""), d.get("extra", {}))

    def record(self, path) -> None:
        rel = str(Path(path).resolve().relative_to(self.root.resolve()))
        self.artifacts[rel] = sha256_file(path)
        self.timestamps[rel] = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        d = {"plan_hash": self.plan_hash, "version": self.version, "artifacts": dict(sorted(self.artifacts.items())),
             "timestamps": dict(sorted(self.timestamps.items())), "extra": self.extra}
        self.path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")

    def verify(self) -> None:
        for rel, digest in self.artifacts.items():
            p = self.root / rel
            if not p.exists():
                raise ManifestError(f"{p}: listed in manifest but missing")
            if sha256_file(p) != digest:
                raise ManifestError(f"{p}: checksum does not match manifest")


def load_dataset(plan: ExperimentPlan, data_dir: Optional[str] = None) -> Dataset:
    if plan.data.source == "synthetic":
        d = plan.data
        return synthetic_gaussians(d.n, d.dims, d.classes, d.seed, separation=d.separation)
    root = resolve_data_dir(plan, data_dir)
    if not root:
        raise DataError("no MNIST directory: pass --data-dir, set BFALAB_DATA_DIR, or set [data] dir")
    return load_mnist(root)


def checkpoint_path(root: Path, seed: int) -> Path:
    return root / "checkpoints" / f"seed-{seed}.ckpt"


def trace_path(root: Path, seed: int, attack_seed: int) -> Path:
    return root / "traces" / f"seed-{seed}-attack-{attack_seed}.trace"


# -- cells (top-level so they pickle for process pools) ------------------------

def _train_cell(plan: ExperimentPlan, seed: int, root: Path, data_dir) -> dict:
    ckpt = checkpoint_path(root, seed)
    if ckpt.exists():
        model = load_checkpoint(ckpt)
        if model.provenance.get("training", {}).get("seed") == seed:
            return {"seed": seed, "status": "cached", "test_acc": model.provenance.get("final_test_acc")}
    ds = load_dataset(plan, data_dir)
    model, record = train(plan.arch, ds, plan.training_config(seed))
    save_checkpoint(model, ckpt)
    csv_path = root / "reports" / f"train-seed-{seed}.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    record.to_csv(csv_path)
    return {"seed": seed, "status": "trained", "test_acc": record.test_acc[-1]}


def _attack_cell(plan: ExperimentPlan, seed: int, attack_seed: int, root: Path, data_dir) -> dict:
    out = trace_path(root, seed, attack_seed)
    if out.exists():
        t = read_trace(out)
        if t.config.get("seed") == attack_seed:
            return {"seed": seed, "attack_seed": attack_seed, "status": "cached", "termination": t.termination}
    ds = load_dataset(plan, data_dir)
    model = load_checkpoint(checkpoint_path(root, seed))
    trace = run_attack(model, ds, plan.attack_config(attack_seed))
    write_trace(trace, out)
    return {"seed": seed, "attack_seed": attack_seed, "status": "attacked", "termination": trace.termination}


def _guard(fn, *args) -> dict:
    try:
        return fn(*args)
    except Exception as exc:  # recorded as a failure marker, the grid keeps going
        return {"status": "failed", "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc(),
                "args": [a for a in args if isinstance(a, int)]}


def _map(jobs: int, fn, argsets: Sequence[tuple]) -> list:
    if jobs <= 1 or len(argsets) <= 1:
        return [_guard(fn, *a) for a in argsets]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_guard, fn, *a) for a in argsets]
        return [f.result() for f in futures]


def run_experiment(plan: ExperimentPlan, out, *, data_dir: Optional[str] = None, jobs: int = 1) -> Path:
    """Train every seed, attack every (seed, attack seed) cell, then aggregate reports."""
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    lock = root / "plan.lock"
    text = plan_to_text(plan)
    if lock.exists() and lock.read_text() != text:
        raise ValueError(f"{root} holds a different plan; use a fresh output directory")
    lock.write_text(text)
    manifest = RunManifest.load(root)
    manifest.plan_hash = plan_hash(plan)
    manifest.record(lock)

    train_results = _map(jobs, _train_cell, [(plan, s, root, data_dir) for s in plan.train_seeds])
    trained = [s for s, r in zip(plan.train_seeds, train_results) if r["status"] != "failed"]
    for s in trained:
        manifest.record(checkpoint_path(root, s))
        rec = root / "reports" / f"train-seed-{s}.csv"
        if rec.exists():
            manifest.record(rec)
    cells = [(plan, s, a, root, data_dir) for s in trained for a in plan.attack_seeds]
    attack_results = _map(jobs, _attack_cell, cells)
    for (_, s, a, _, _), r in zip(cells, attack_results):
        if r["status"] != "failed":
            manifest.record(trace_path(root, s, a))
    failures = [r for r in train_results + attack_results if r["status"] == "failed"]
    for f in failures:
        log.error("cell %s failed: %s", f.get("args"), f["error"])
    aggregate(plan, root, manifest, data_dir=data_dir, failures=failures)
    manifest.save()
    return root / "reports"


def collect_traces(plan: ExperimentPlan, root: Path) -> dict:
    out = {}
    for s in plan.train_seeds:
        ts = [read_trace(trace_path(root, s, a)) for a in plan.attack_seeds if trace_path(root, s, a).exists()]
        if ts:
            out[s] = ts
    return out


def aggregate(plan: ExperimentPlan, root: Path, manifest: RunManifest, *, data_dir=None,
              failures: Sequence[dict] = ()) -> dict:
    reports = root / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    by_seed = collect_traces(plan, root)
    all_traces = [t for s in sorted(by_seed) for t in by_seed[s]]
    summary = {"plan_hash": plan_hash(plan), "arch": plan.arch, "goals": list(plan.attack.goals),
               "traces": len(all_traces), "failures": [{k: v for k, v in f.items() if k != "traceback"}
                                                        for f in failures]}
    if all_traces:
        gs = goal_stats(by_seed, plan.attack.goals)
        write_rows_csv(reports / "goal_stats.csv", gs.rows())
        lb = layer_breakdown(all_traces)
        write_rows_csv(reports / "layer_breakdown.csv", lb.rows())
        write_curve_csv(reports / "curve.csv", accuracy_curve(all_traces))
        summary["goal_stats"] = gs.rows()
        summary["layer_breakdown"] = lb.rows()
        summary["goal_monotone"] = all(goal_crossing_monotone(t) for t in all_traces)
        summary["terminations"] = {k: sum(t.termination == k for t in all_traces)
                                   for k in sorted({t.termination for t in all_traces})}
    # gradient statistics of each trained model, before any flip, on the first attack seed's set
    rows = []
    ds = None
    for s in sorted(by_seed) or [s for s in plan.train_seeds if checkpoint_path(root, s).exists()]:
        try:
            ds = ds or load_dataset(plan, data_dir)
        except DataError:
            break
        model = load_checkpoint(checkpoint_path(root, s))
        batch = sample_attack_set(ds.train_x, ds.train_y, plan.attack.attack_size, plan.attack_seeds[0])
        for r in gradient_summary(model, batch.x, batch.y).rows():
            rows.append({"seed": s, **r})
    if rows:
        write_rows_csv(reports / "gradient_summary.csv", rows)
    summary["gradient_summary"] = rows
    (reports / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for p in sorted(reports.glob("*")):
        if p.is_file():
            manifest.record(p)
    return summary


def _load_report(report_dir) -> dict:
    report_dir = Path(report_dir)
    root = report_dir.parent if report_dir.name == "reports" else report_dir
    RunManifest.load(root).verify()
    p = root / "reports" / "summary.json"
    if not p.exists():
        raise CompareError(f"{root}: no reports/summary.json")
    d = json.loads(p.read_text())
    d["_root"] = str(root)
    return d


def compare_reports(report_dirs: Sequence) -> list[dict]:
    """Pooled mean flips-to-goal per report, with deltas against the first report."""
    if len(report_dirs) < 2:
        raise CompareError("need at least two report directories")
    reports = [_load_report(d) for d in report_dirs]
    goals = reports[0]["goals"]
    for r in reports[1:]:
        if r["goals"] != goals:
            raise CompareError(f"goal lists differ: {goals} vs {r['goals']} ({r['_root']})")
    rows = []
    for g in goals:
        row = {"goal": g}
        base = None
        for n, r in enumerate(reports):
            cell = next((c for c in r.get("goal_stats", []) if c["goal"] == g and c["group"] == "all"), None)
            mean = cell["mean_flips"] if cell else None
            row[f"mean_{n}"] = mean
            row[f"reached_{n}"] = f"{cell['reached']}/{cell['runs']}" if cell else "0/0"
            if n == 0:
                base = mean
            else:
                row[f"delta_{n}"] = None if mean is None or base is None else mean - base
        rows.append(row)
    return rows


def _init_params():
    return {"normal_std": init_mod.NORMAL_STD, "uniform_bound": init_mod.UNIFORM_BOUND}


def cached_train(arch: str, dataset: Dataset, config, cache_dir, progress=None):
    """Train once per (arch, dataset, config); later calls load the stored checkpoint."""
    key = hashlib.sha256(json.dumps({"arch": arch, "data": dataset.name, "train": config.as_dict(),
                                     "init": _init_params(), "version": __version__},
                                    sort_keys=True).encode()).hexdigest()[:16]
    path = Path(cache_dir) / f"{arch}-seed{config.seed}-{key}.ckpt"
    if path.exists():
        return load_checkpoint(path)
    model, record = train(arch, dataset, config, progress=progress)
    save_checkpoint(model, path)
    record.to_csv(path.with_suffix(".csv"))
    return model


def cached_attack(model, dataset: Dataset, config, cache_dir) -> AttackTrace:
    """Run an attack once per (model bytes, dataset, config); later calls read the stored trace."""
    h = hashlib.sha256()
    h.update(model.arch.encode())
    h.update(model.code_bytes())
    h.update(json.dumps({"data": dataset.name, "attack": config.as_dict(), "version": __version__},
                        sort_keys=True).encode())
    path = Path(cache_dir) / f"{model.arch}-{h.hexdigest()[:16]}.trace"
    if path.exists():
        return read_trace(path)
    trace = run_attack(model, dataset, config)
    write_trace(trace, path)
    return trace
