#!/usr/bin/env python3
"""Varying-overlap study on D1: softmax logging policies with strength
o in {1, 2, 3}; reports how stable each method's metrics are across o."""

import argparse

from cfst import harness
from cfst.harness import ExperimentConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/overlap")
    ap.add_argument("--overlaps", default="1,2,3")
    args = ap.parse_args()

    by_overlap = {}
    for o in [float(t) for t in args.overlaps.split(",")]:
        cfg = ExperimentConfig(
            datasets=["D1"], policy="softmax", overlap=o,
            backbones=["dm"], methods=["backbone", "pl", "pl_cvat"],
            output_dir=f"{args.out}/o{o:g}")
        by_overlap[o] = harness.run_experiment(cfg)

    for o, reports in sorted(by_overlap.items()):
        for rep in reports:
            print(f"o={o:g} {rep.backbone:>4} {rep.method:>8} "
                  f"nll={rep.mean['nll']:.4f}+-{rep.stderr['nll']:.4f} "
                  f"hamming={rep.mean['hamming']:.4f}")


if __name__ == "__main__":
    main()
