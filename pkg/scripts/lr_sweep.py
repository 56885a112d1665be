"""MLP learning-rate study: train at lr 0.01 and 0.1, attack each model, compare.

Prints the last-layer flip share and mean flips-to-goal per learning rate and
writes goal_stats / layer_breakdown CSVs per rate under --out.

    python scripts/lr_sweep.py --data-dir /path/to/mnist --out runs/lr_sweep
"""
import argparse
import logging
from pathlib import Path

from bfalab.analysis import goal_stats, layer_breakdown, write_rows_csv
from bfalab.attack import AttackConfig
from bfalab.data import load_mnist
from bfalab.experiment import cached_attack, cached_train
from bfalab.models import ARCH_MLP
from bfalab.train import TrainingConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", required=True)
    ap.add_argument("--out", default="runs/lr_sweep")
    ap.add_argument("--rates", default="0.01,0.1")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--attacks", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--budget", type=int, default=400)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    ds = load_mnist(args.data_dir)
    out = Path(args.out)
    goals = (0.11, 0.25, 0.5, 0.75)
    for lr in (float(r) for r in args.rates.split(",")):
        by_seed = {}
        for s in range(1, args.seeds + 1):
            model = cached_train(ARCH_MLP, ds, TrainingConfig(lr=lr, epochs=args.epochs, seed=s), out / "models")
            by_seed[s] = [cached_attack(model, ds, AttackConfig(budget=args.budget, goals=goals, seed=a),
                                        out / "traces") for a in range(1, args.attacks + 1)]
        gs = goal_stats(by_seed, goals)
        lb = layer_breakdown([t for ts in by_seed.values() for t in ts])
        write_rows_csv(out / f"goal_stats_lr{lr:g}.csv", gs.rows())
        write_rows_csv(out / f"layer_breakdown_lr{lr:g}.csv", lb.rows())
        print(f"lr {lr:g}")
        for row in lb.rows():
            dmg = "n/a" if row["damage_pct"] is None else f"{row['damage_pct']:.1f}"
            print(f"  {row['name']:8s} flips {row['flip_pct']:5.1f}%  damage {dmg}%")
        for g in goals:
            c = gs.cell(g)
            mean = "n/a" if c.mean is None else f"{c.mean:.1f} ({c.std:.1f})"
            print(f"  goal {g:.2f}: {mean}  reached {c.reached}/{c.runs}")


if __name__ == "__main__":
    main()
