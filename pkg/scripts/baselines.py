#!/usr/bin/env python3
"""Score the non-learned baselines on a set of synthetic pairs.

Prints the metric table for pixel averaging and local-std selection, which
gives a reference point for `mfuse eval` on the same data.

    python3 scripts/baselines.py --pairs 8 --size 128
"""
import argparse

from mfuse.metrics import average_fuse, evaluate, format_report, make_synthetic_set, select_fuse


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=8)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--sigma", type=float, default=2.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data = make_synthetic_set(args.pairs, shape=(args.size, args.size), sigma=args.sigma, seed=args.seed)
    for label, fuse in (("average", average_fuse), ("select", select_fuse)):
        rows = [(f"pair{i}", evaluate(p1, p2, fuse(p1, p2))) for i, (_, p1, p2) in enumerate(data)]
        print(f"# {label}")
        print(format_report(rows))


if __name__ == "__main__":
    main()
