"""Train and score every cell of the bandwidth/center ablation grid.

Usage: python scripts/make_dataset.py --out data/default
       python scripts/run_ablation.py --data data/default --out runs/ablation
"""

import argparse
import sys

from seedclust.cli import main as cli_main


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", default="data/default")
    parser.add_argument("--out", default="runs/ablation")
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--grid", default=None,
                        help="optional JSON list of [sigma_mode, center_mode] pairs")
    parser.add_argument("--config", default=None)
    parser.add_argument("--force", action="store_true")
    args = parser.parse_args()

    argv = ["ablate", "--data", args.data, "--out", args.out]
    if args.epochs is not None:
        argv += ["--epochs", str(args.epochs)]
    if args.grid:
        argv += ["--grid", args.grid]
    if args.config:
        argv += ["--config", args.config]
    if args.force:
        argv.append("--force")
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
