"""Full-scale MNIST acceptance criteria.

Needs the four MNIST IDX files in ``$BFALAB_DATA_DIR`` (default
``/root/data/mnist``). Trained checkpoints and attack traces are cached under
``$BFALAB_ACCEPTANCE_CACHE`` (default ``.cache/acceptance`` in the repo), so
only the first run pays for training (about 1.5 h on one CPU core). Each
criterion prints one PASS/FAIL line in the terminal summary.
"""
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from bfalab.analysis import goal_stats, gradient_summary, layer_breakdown
from bfalab.attack import AttackConfig, goal_crossing_monotone, read_trace, replay
from bfalab.data import DataError, load_mnist, sample_attack_set
from bfalab.experiment import cached_attack, cached_train
from bfalab.models import ARCH_CCNN, ARCH_MLP
from bfalab.train import TrainingConfig

pytestmark = pytest.mark.acceptance

REPO = Path(__file__).resolve().parent.parent
DATA_DIR = os.environ.get("BFALAB_DATA_DIR", "/root/data/mnist")
CACHE = Path(os.environ.get("BFALAB_ACCEPTANCE_CACHE", REPO / ".cache" / "acceptance"))
SEEDS = (1, 2, 3)
ATTACK_SEEDS = (1, 2, 3)
MLP_EPOCHS = 40
CCNN_EPOCHS = 15
CCNN_EVAL_SUBSAMPLE = 2000


@pytest.fixture(scope="module")
def mnist():
    try:
        return load_mnist(DATA_DIR)
    except DataError as exc:
        pytest.skip(f"MNIST not available: {exc}")


def recipe(lr, seed, epochs=MLP_EPOCHS):
    return TrainingConfig(lr=lr, scheduler="exponential", gamma=0.95, epochs=epochs, batch_size=128,
                          weight_decay=3e-4, init="normal", seed=seed)


@pytest.fixture(scope="module")
def mlp_slow(mnist):
    return {s: cached_train(ARCH_MLP, mnist, recipe(0.01, s), CACHE) for s in SEEDS}


@pytest.fixture(scope="module")
def mlp_fast(mnist):
    return {s: cached_train(ARCH_MLP, mnist, recipe(0.1, s), CACHE) for s in SEEDS}


@pytest.fixture(scope="module")
def ccnn(mnist):
    return cached_train(ARCH_CCNN, mnist, recipe(0.01, 1, CCNN_EPOCHS), CACHE)


def grid(models, mnist, **kw):
    cfg = dict(budget=400, goals=(0.11, 0.25, 0.5, 0.75))
    cfg.update(kw)
    return {s: [cached_attack(models[s], mnist, AttackConfig(seed=a, **cfg), CACHE / "traces")
                for a in ATTACK_SEEDS] for s in models}


@pytest.fixture(scope="module")
def grid_slow(mlp_slow, mnist):
    return grid(mlp_slow, mnist)


@pytest.fixture(scope="module")
def grid_fast(mlp_fast, mnist):
    return grid(mlp_fast, mnist)


def last_layer_share(by_seed):
    traces = [t for ts in by_seed.values() for t in ts]
    return layer_breakdown(traces).flip_share[-1]


def mean_to_goal(by_seed, goal):
    cell = goal_stats(by_seed, (goal,)).cell(goal)
    return cell.mean, cell.reached, cell.runs


def test_c1_mlp_accuracy(mlp_slow, criterion):
    accs = {s: m.provenance["final_test_acc"] for s, m in mlp_slow.items()}
    ok = all(0.95 <= a <= 0.975 for a in accs.values())
    detail = "test acc " + ", ".join(f"seed {s}: {100 * a:.2f}%" for s, a in accs.items()) + "  (want [95.0, 97.5])"
    criterion("C1 MLP accuracy", ok, detail)
    assert ok, detail


def test_c2_ccnn_accuracy(ccnn, criterion):
    acc = ccnn.provenance["final_test_acc"]
    ok = 0.95 <= acc <= 0.98
    detail = f"test acc {100 * acc:.2f}% after {CCNN_EPOCHS} epochs  (want [95.0, 98.0])"
    criterion("C2 C-CNN accuracy", ok, detail)
    assert ok, detail


def test_c3_flip_localization(grid_slow, grid_fast, criterion):
    slow, fast = last_layer_share(grid_slow), last_layer_share(grid_fast)
    ok = slow >= 90.0 and fast < 60.0
    detail = f"last-layer flip share: lr 0.01 {slow:.1f}% (want >= 90), lr 0.1 {fast:.1f}% (want < 60)"
    criterion("C3 flip localization", ok, detail)
    assert ok, detail


def test_c4_learning_rate_gap(grid_slow, grid_fast, criterion):
    (ms, rs, ns), (mf, rf, nf) = mean_to_goal(grid_slow, 0.11), mean_to_goal(grid_fast, 0.11)
    ok = ms is not None and mf is not None and abs(ms - mf) >= 20
    if ms is None or mf is None:
        direction = "n/a"
    else:
        direction = "lr 0.1 needs more" if mf > ms else "lr 0.01 needs more"
    fmt = lambda m: "n/a" if m is None else f"{m:.1f}"  # noqa: E731
    detail = (f"mean flips to 11%: lr 0.01 {fmt(ms)} ({rs}/{ns} reached), lr 0.1 {fmt(mf)} ({rf}/{nf}); "
              f"gap want >= 20; direction: {direction}")
    criterion("C4 learning-rate sensitivity", ok, detail)
    assert ok, detail


def test_c5_st_bfa_ccnn(ccnn, mnist, criterion):
    cfg = dict(budget=400, goals=(0.2,), eval_subsample=CCNN_EVAL_SUBSAMPLE)
    std = {1: [cached_attack(ccnn, mnist, AttackConfig(seed=a, **cfg), CACHE / "traces") for a in ATTACK_SEEDS]}
    st = {1: [cached_attack(ccnn, mnist, AttackConfig(seed=a, mask=(0,), **cfg), CACHE / "traces")
              for a in ATTACK_SEEDS]}
    m_std, r_std, n = mean_to_goal(std, 0.2)
    m_st, r_st, _ = mean_to_goal(st, 0.2)
    fewer = m_std is not None and m_st is not None and r_std == n and r_st == n and m_std - m_st >= 30
    # conv-layer gradient median before and after 10 standard-BFA flips, on each attack set
    rises = []
    for a, trace in zip(ATTACK_SEEDS, std[1]):
        batch = sample_attack_set(mnist.train_x, mnist.train_y, 256, a)
        before = gradient_summary(ccnn, batch.x, batch.y).median(0)
        after = gradient_summary(replay(ccnn, trace, min(10, len(trace.records))), batch.x, batch.y).median(0)
        rises.append((before, after))
    up = all(b < a for b, a in rises)
    ok = fewer and up
    fmt = lambda m: "n/a" if m is None else f"{m:.1f}"  # noqa: E731
    detail = (f"flips to 20%: BFA {fmt(m_std)} ({r_std}/{n}), ST-BFA conv {fmt(m_st)} ({r_st}/{n}), want "
              f">= 30 fewer; conv |grad| median before->after 10 flips: "
              + ", ".join(f"{b:.2e}->{a:.2e}" for b, a in rises))
    criterion("C5 ST-BFA vs BFA on C-CNN", ok, detail)
    assert ok, detail


def test_c6_st_bfa_mlp_penalty(mlp_slow, mnist, criterion):
    cfg = dict(budget=400, goals=(0.5,))
    std = {s: [cached_attack(mlp_slow[s], mnist, AttackConfig(seed=1, **cfg), CACHE / "traces")] for s in SEEDS}
    st = {s: [cached_attack(mlp_slow[s], mnist, AttackConfig(seed=1, mask=(0,), **cfg), CACHE / "traces")]
          for s in SEEDS}
    m_std, r_std, n = mean_to_goal(std, 0.5)
    m_st, r_st, _ = mean_to_goal(st, 0.5)
    ok = m_std is not None and m_st is not None and r_std == n and r_st == n and m_st - m_std >= 20
    fmt = lambda m: "n/a" if m is None else f"{m:.1f}"  # noqa: E731
    detail = f"flips to 50%: BFA {fmt(m_std)} ({r_std}/{n}), ST-BFA first layer {fmt(m_st)} ({r_st}/{n}); want >= 20 more"
    criterion("C6 ST-BFA penalty on MLP", ok, detail)
    assert ok, detail


PROPERTY_FILES = ["test_tensor.py", "test_quant.py", "test_attack.py", "test_models.py", "test_data.py",
                  "test_train.py"]


def test_c7_property_suite(criterion):
    t0 = time.perf_counter()
    r = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                        *[str(REPO / "tests" / f) for f in PROPERTY_FILES]],
                       capture_output=True, text=True, cwd=REPO)
    wall = time.perf_counter() - t0
    summary = (r.stdout.strip().splitlines() or ["no output"])[-1]
    ok = r.returncode == 0 and wall < 60
    detail = f"{summary}; wall {wall:.1f}s (want all pass, < 60s)"
    criterion("C7 property suite", ok, detail)
    assert ok, detail + "\n" + r.stdout[-3000:]


def test_c8_goal_monotonicity(criterion):
    paths = sorted((CACHE / "traces").glob("*.trace"))
    if not paths:
        pytest.skip("no acceptance traces produced")
    bad = [p.name for p in paths if not goal_crossing_monotone(read_trace(p))]
    ok = not bad
    detail = f"{len(paths) - len(bad)}/{len(paths)} traces monotone" + (f"; violations: {bad}" if bad else "")
    criterion("C8 goal-crossing monotonicity", ok, detail)
    assert ok, detail
