"""Standard BFA vs ST-BFA (attack restricted to chosen layers) on one architecture.

    python scripts/st_bfa.py --data-dir /path/to/mnist --arch ccnn-32f3 --mask 0 --goal 0.2 --epochs 15
    python scripts/st_bfa.py --data-dir /path/to/mnist --arch mlp-784-512-256-128-10 --mask 0 --goal 0.5
"""
import argparse
import logging
from pathlib import Path

import numpy as np

from bfalab.analysis import gradient_summary, write_curve_csv, accuracy_curve
from bfalab.attack import AttackConfig, replay
from bfalab.data import load_mnist, sample_attack_set
from bfalab.experiment import cached_attack, cached_train
from bfalab.train import TrainingConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", required=True)
    ap.add_argument("--arch", default="ccnn-32f3")
    ap.add_argument("--mask", default="0", help="comma-separated layer ids for ST-BFA")
    ap.add_argument("--goal", type=float, default=0.2)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--attacks", type=int, default=3)
    ap.add_argument("--budget", type=int, default=400)
    ap.add_argument("--eval-subsample", type=int, default=0)
    ap.add_argument("--out", default="runs/st_bfa")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    ds = load_mnist(args.data_dir)
    out = Path(args.out)
    mask = tuple(int(t) for t in args.mask.split(","))
    model = cached_train(args.arch, ds, TrainingConfig(lr=0.01, epochs=args.epochs, seed=args.seed), out / "models")
    print(f"{args.arch} seed {args.seed}: test acc {model.provenance['final_test_acc']:.4f}")
    base = dict(budget=args.budget, goals=(args.goal,), eval_subsample=args.eval_subsample)
    runs = {}
    for name, extra in (("bfa", {}), ("st-bfa", {"mask": mask})):
        runs[name] = [cached_attack(model, ds, AttackConfig(seed=a, **base, **extra), out / "traces")
                      for a in range(1, args.attacks + 1)]
        steps = [t.goal_steps[args.goal] for t in runs[name]]
        reached = [s for s in steps if s is not None]
        mean = f"{np.mean(reached):.1f}" if reached else "n/a"
        print(f"{name:7s} flips to {args.goal:g}: {steps}  mean {mean}")
        write_curve_csv(out / f"curve_{name}.csv", accuracy_curve(runs[name]))

    names = model.layer_names
    for a, trace in zip(range(1, args.attacks + 1), runs["bfa"]):
        batch = sample_attack_set(ds.train_x, ds.train_y, 256, a)
        before = gradient_summary(model, batch.x, batch.y)
        after = gradient_summary(replay(model, trace, min(10, len(trace.records))), batch.x, batch.y)
        meds = ", ".join(f"{n} {before.median(i):.2e}->{after.median(i):.2e}" for i, n in enumerate(names))
        print(f"attack {a}: median |dL/dW| before -> after 10 BFA flips: {meds}")


if __name__ == "__main__":
    main()
