"""Weight-initialization study on the MLP: accuracy and flips-to-goal per scheme.

    python scripts/init_sweep.py --data-dir /path/to/mnist --seeds 2 --attacks 2
"""
import argparse
import logging
from pathlib import Path

from bfalab.analysis import goal_stats, write_rows_csv
from bfalab.attack import AttackConfig
from bfalab.data import load_mnist
from bfalab.experiment import cached_attack, cached_train
from bfalab.init import SCHEMES
from bfalab.models import ARCH_MLP
from bfalab.train import TrainingConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", required=True)
    ap.add_argument("--schemes", default=",".join(SCHEMES))
    ap.add_argument("--seeds", type=int, default=2)
    ap.add_argument("--attacks", type=int, default=2)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--budget", type=int, default=400)
    ap.add_argument("--out", default="runs/init_sweep")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    ds = load_mnist(args.data_dir)
    out = Path(args.out)
    goals = (0.11, 0.25, 0.5, 0.75)
    rows = []
    for scheme in args.schemes.split(","):
        by_seed = {}
        for s in range(1, args.seeds + 1):
            cfg = TrainingConfig(lr=0.01, epochs=args.epochs, init=scheme, seed=s)
            model = cached_train(ARCH_MLP, ds, cfg, out / "models")
            print(f"{scheme} seed {s}: test acc {model.provenance['final_test_acc']:.4f}")
            by_seed[s] = [cached_attack(model, ds, AttackConfig(budget=args.budget, goals=goals, seed=a),
                                        out / "traces") for a in range(1, args.attacks + 1)]
        for r in goal_stats(by_seed, goals).rows():
            if r["group"] == "all":
                rows.append({"init": scheme, **r})
                print(f"  goal {r['goal']:.2f}: mean {r['mean_flips']}  reached {r['reached']}/{r['runs']}")
    out.mkdir(parents=True, exist_ok=True)
    write_rows_csv(out / "init_goal_stats.csv", rows)


if __name__ == "__main__":
    main()
