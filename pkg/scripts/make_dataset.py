"""Render the default mixed-size synthetic dataset.

Usage: python scripts/make_dataset.py --out data/default --count 600
"""

import argparse
import sys

from seedclust.cli import main as cli_main


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/default")
    parser.add_argument("--count", type=int, default=600)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--spec", default=None,
                        help="optional JSON file of scene spec overrides")
    parser.add_argument("--force", action="store_true")
    args = parser.parse_args()

    argv = ["generate", "--out", args.out, "--count", str(args.count)]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    if args.spec:
        argv += ["--spec", args.spec]
    if args.force:
        argv.append("--force")
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
