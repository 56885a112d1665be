"""Evaluation metrics over attack traces and models."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .attack import AttackTrace
from .models import Model


@dataclass(frozen=True)
class GoalCell:
    goal: float
    group: str  # trained-model seed, or "all"
    runs: int
    reached: int
    mean: Optional[float]  # over reached runs only
    std: Optional[float]  # population std over reached runs

    @property
    def not_reached(self) -> int:
        return self.runs - self.reached


@dataclass
class GoalStats:
    goals: tuple
    cells: list = field(default_factory=list)

    def cell(self, goal: float, group="all") -> GoalCell:
        for c in self.cells:
            if c.goal == goal and c.group == str(group):
                return c
        raise KeyError((goal, group))

    def rows(self) -> list[dict]:
        return [{"goal": c.goal, "group": c.group, "runs": c.runs, "reached": c.reached,
                 "not_reached": c.not_reached, "mean_flips": c.mean, "std_flips": c.std} for c in self.cells]


def _mean_std(values: Sequence[int]):
    if not values:
        return None, None
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def goal_stats(traces_by_group: Mapping, goals: Optional[Iterable[float]] = None) -> GoalStats:
    """Mean and population std of flips-to-goal per (goal, group), plus pooled "all" cells.

    Unreached runs are excluded from mean/std and counted separately.
    """
    groups = {str(k): list(v) for k, v in traces_by_group.items()}
    if goals is None:
        goals = sorted({g for ts in groups.values() for t in ts for g in t.goals})
    goals = tuple(sorted(float(g) for g in goals))
    stats = GoalStats(goals)
    pooled = [t for k in sorted(groups) for t in groups[k]]
    for g in goals:
        for name, ts in sorted(groups.items()) + [("all", pooled)]:
            steps = sorted(t.goal_steps.get(g) for t in ts if t.goal_steps.get(g) is not None)
            mean, std = _mean_std(steps)
            stats.cells.append(GoalCell(g, name, len(ts), len(steps), mean, std))
    return stats


@dataclass
class LayerBreakdown:
    layer_names: list
    flips: list
    flip_share: list  # percent
    damage: list  # summed clamped accuracy drop per layer
    damage_share: Optional[list]  # percent, None when the total drop is 0

    def rows(self) -> list[dict]:
        out = []
        for i, name in enumerate(self.layer_names):
            out.append({"layer": i, "name": name, "flips": self.flips[i], "flip_pct": self.flip_share[i],
                        "damage_pct": None if self.damage_share is None else self.damage_share[i]})
        return out


def layer_breakdown(traces: Sequence[AttackTrace], layer_names: Optional[Sequence[str]] = None) -> LayerBreakdown:
    """Share of permanent flips and of accuracy drop attributed to each layer.

    A flip's damage is its test-accuracy drop (pre - post), clamped at 0.
    """
    traces = list(traces)
    if not traces:
        raise ValueError("need at least one trace")
    if layer_names is None:
        layer_names = traces[0].layer_names
    n = max([len(layer_names)] + [r.address.layer + 1 for t in traces for r in t.records])
    names = list(layer_names) + [f"layer{i}" for i in range(len(layer_names), n)]
    flips = [0] * n
    damage = [0.0] * n
    for t in traces:
        for r in t.records:
            flips[r.address.layer] += 1
            damage[r.address.layer] += max(r.pre_acc - r.post_acc, 0.0)
    total = sum(flips)
    share = [100.0 * f / total if total else 0.0 for f in flips]
    dtotal = sum(damage)
    dshare = [100.0 * d / dtotal for d in damage] if dtotal > 0 else None
    return LayerBreakdown(names, flips, share, damage, dshare)


@dataclass
class GradientSummary:
    layer_names: list
    stats: list  # per layer dict(min, q1, median, q3, max, mean)

    def median(self, layer: int) -> float:
        return self.stats[layer]["median"]

    def rows(self) -> list[dict]:
        return [{"layer": i, "name": n, **s} for i, (n, s) in enumerate(zip(self.layer_names, self.stats))]


def gradient_summary(model: Model, x: np.ndarray, y: np.ndarray) -> GradientSummary:
    """Box-plot statistics of |dL/dW| per weighted layer on a batch."""
    state = model.gradients(x, y)
    stats = []
    for i in model.weighted:
        g = np.abs(state.weight_grads[i]).reshape(-1)
        q0, q1, q2, q3, q4 = np.percentile(g, [0, 25, 50, 75, 100])
        stats.append({"min": float(q0), "q1": float(q1), "median": float(q2), "q3": float(q3),
                      "max": float(q4), "mean": float(g.mean())})
    return GradientSummary(model.layer_names, stats)


def weight_histogram(model: Model, bins: int = 64) -> dict:
    """Per-layer histogram of dequantized weights: name -> (counts, edges)."""
    if bins < 2:
        raise ValueError("need at least 2 bins")
    out = {}
    for i in model.weighted:
        p = model.params[i]
        counts, edges = np.histogram(p.effective.reshape(-1), bins=bins)
        out[p.name] = (counts, edges)
    return out


def accuracy_curve(traces: Sequence[AttackTrace]) -> list[tuple[int, float, float]]:
    """(flips, mean_acc, std_acc) for flips = 0..max trace length.

    A trace that stopped early keeps its last accuracy for later flip counts.
    """
    traces = list(traces)
    if not traces:
        return []
    length = max(len(t.records) for t in traces)
    acc = np.empty((len(traces), length + 1))
    for r, t in enumerate(traces):
        a = t.accuracies()
        acc[r, :len(a)] = a
        acc[r, len(a):] = a[-1]
    return [(k, float(acc[:, k].mean()), float(acc[:, k].std())) for k in range(length + 1)]


def write_rows_csv(path, rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> None:
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("n/a" if row.get(k) is None else row.get(k)) for k in columns})


def write_curve_csv(path, curve) -> None:
    write_rows_csv(path, [{"flips": k, "mean_acc": m, "std_acc": s} for k, m, s in curve],
                   ["flips", "mean_acc", "std_acc"])
