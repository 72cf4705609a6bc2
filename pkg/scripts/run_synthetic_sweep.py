#!/usr/bin/env python3
"""Full pricing-simulator sweep: D1-D5 x {dm, hsic, udm} x {backbone, pl,
pl_cvat}, five seeds each, aggregated into results/synthetic/aggregate.csv.

Takes roughly 20-25 minutes on one core; pass --quick for a small smoke
version (two datasets, two seeds, short training).
"""

import argparse
import time

from cfst import harness
from cfst.harness import ExperimentConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/synthetic")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()

    cfg = ExperimentConfig(
        datasets=["D1", "D2", "D3", "D4", "D5"],
        backbones=["dm", "hsic", "udm"],
        methods=["backbone", "pl", "pl_cvat"],
        output_dir=args.out,
        workers=args.workers,
    )
    if args.quick:
        cfg = harness.replace(cfg, datasets=["D1", "D2"], seeds=[0, 1],
                              backbone_epochs=30, inner_epochs=5)
    t0 = time.time()
    reports = harness.run_experiment(cfg)
    print(f"{len(reports)} (dataset, backbone, method) aggregates "
          f"in {time.time() - t0:.0f}s -> {cfg.resolved_output_dir()}")
    for rep in reports:
        print(f"{rep.dataset} {rep.backbone:>5} {rep.method:>8} "
              f"nll={rep.mean['nll']:.4f}+-{rep.stderr['nll']:.4f} "
              f"hamming={rep.mean['hamming']:.4f}")


if __name__ == "__main__":
    main()
