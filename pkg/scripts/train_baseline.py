"""Train the default model (circular sigma, learnable center) on a
generated dataset.

Usage: python scripts/make_dataset.py --out data/default
       python scripts/train_baseline.py --data data/default --out runs/baseline
"""

import argparse
import sys

from seedclust.cli import main as cli_main


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", default="data/default")
    parser.add_argument("--out", default="runs/baseline")
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--config", default=None,
                        help="optional JSON file with train/model sections")
    parser.add_argument("--resume", action="store_true")
    args = parser.parse_args()

    argv = ["train", "--data", args.data, "--out", args.out]
    if args.epochs is not None:
        argv += ["--epochs", str(args.epochs)]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    if args.config:
        argv += ["--config", args.config]
    if args.resume:
        argv.append("--resume")
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
