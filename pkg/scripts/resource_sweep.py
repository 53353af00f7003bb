"""Train dmnn8-synthetic at several FLOPs targets and tabulate what the gates settle on.

    python scripts/resource_sweep.py --rates 0.3 0.5 0.8 --steps 2000
"""

import argparse
import csv
import sys

import numpy as np

from dmnn.data import synth_dataset
from dmnn.train import TrainConfig, evaluate, train


def main(argv=None):
    p = argparse.ArgumentParser()
    p.add_argument("--rates", type=float, nargs="+", default=[0.3, 0.5, 0.8])
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-", help="CSV path, '-' for stdout")
    args = p.parse_args(argv)

    rows = []
    for r in args.rates:
        cfg = TrainConfig.synthetic(target_rate=r, max_steps=args.steps, seed=args.seed)
        res = train(cfg)
        ev = evaluate(res.network, synth_dataset(cfg.seed))
        cat_means = [np.concatenate(v).mean() for v in ev.category_rates.values()]
        last = res.history[-1]
        rows.append([r, last.mean_exec_rate, last.flops_ratio, ev.top1_err, ev.flops_ratio,
                     min(cat_means), max(cat_means)])

    f = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["r", "train_exec_rate", "train_flops_ratio", "eval_train_err", "eval_flops_ratio",
                "min_category_rate", "max_category_rate"])
    for row in rows:
        w.writerow([repr(float(v)) for v in row])
    if f is not sys.stdout:
        f.close()


if __name__ == "__main__":
    main()
