"""Full CIFAR-100 comparison: gated dmnn50-cifar (N=2, r=0.7) against the ungated baseline.

Takes hours on a CPU. Expects the CIFAR-100 binary release (train.bin, test.bin).

    python scripts/cifar_extended.py --data data/cifar-100-binary --out runs/cifar
"""

import argparse
from pathlib import Path

from dmnn.train import TrainConfig, train


def main(argv=None):
    p = argparse.ArgumentParser()
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="runs/cifar")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    out = Path(args.out)

    common = dict(preset="dmnn50-cifar", data_dir=args.data, epochs=args.epochs, seed=args.seed)
    gated = train(TrainConfig(n_subblocks=2, target_rate=0.7, out_dir=str(out / "gated"), **common))
    base = train(TrainConfig(n_subblocks=1, target_rate=1.0, gated=False, out_dir=str(out / "baseline"), **common))
    g, b = gated.history[-1], base.history[-1]
    print(f"gated    top1_err {g.top1_err:.4f} flops_ratio {g.flops_ratio:.4f}")
    print(f"baseline top1_err {b.top1_err:.4f}")
    print(f"gap {100 * (g.top1_err - b.top1_err):+.2f} points")


if __name__ == "__main__":
    main()
