#!/usr/bin/env python3
"""Batch-size / query-count ablation on the synthetic dataset.

Reproduces the directional claims at desk scale: larger pre-training
batches beat the UMTRA-style batch=ways configuration, and more query
views per prototype help. Every grid point shares the backbone init,
data seed, and evaluation episodes (paired comparison); results are
averaged over --seeds independent repetitions.

    python3 scripts/ablation_table.py --iterations 400 --seeds 3
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from prototransfer.augment import (
    AugmentationPipeline,
    PixelDropout,
    RandomErasing,
    RandomResizedCrop,
    pipeline_from_preset,
)
from prototransfer.data import make_synthetic_dataset
from prototransfer.evaluation import (
    AblationPoint,
    ablation_sweep,
    umtra_point,
    write_reports_csv,
)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--iterations", type=int, default=400)
    ap.add_argument("--batch-sizes", default="50")
    ap.add_argument("--queries", default="1,3")
    ap.add_argument("--ways", type=int, default=5)
    ap.add_argument("--shots", type=int, default=5)
    ap.add_argument("--episodes", type=int, default=300)
    ap.add_argument("--noise", type=float, default=0.6)
    ap.add_argument("--threads", type=int, default=4)
    ap.add_argument(
        "--dropout-rate", type=float, default=0.5,
        help="per-pixel dropout rate; 0.25 tempers the BN-statistics skew that "
        "heavier rates cause in high-Q batches at short horizons",
    )
    ap.add_argument("--out", default="runs/ablation.csv")
    args = ap.parse_args()

    train = make_synthetic_dataset(16, 64, 16, noise_std=args.noise, seed=0, split="train")
    test = make_synthetic_dataset(
        8, 40, 16, noise_std=args.noise, seed=777, class_offset=100, split="test"
    )
    if args.dropout_rate == 0.5:
        pipe = pipeline_from_preset("synthetic", 1, 16)
    else:
        pipe = AugmentationPipeline(
            [
                RandomResizedCrop(scale=(0.6, 1.0), ratio=(3 / 4, 4 / 3), out_size=16),
                PixelDropout(p=0.3, drop_rate=args.dropout_rate),
                RandomErasing(scale=(0.02, 0.2), ratio=(0.3, 3.3)),
            ],
            channels=1, out_size=16, name=f"synthetic-dr{args.dropout_rate:g}",
        )

    points = [umtra_point(args.ways)]
    for b in (int(x) for x in args.batch_sizes.split(",")):
        for q in (int(x) for x in args.queries.split(",")):
            p = AblationPoint(b, q, False)
            if p not in points:
                points.append(p)

    means = {p.label(): [] for p in points}
    all_reports = []
    for seed in range(args.seeds):
        t0 = time.time()
        reports = ablation_sweep(
            points, train, test, pipe, seed=seed,
            iterations=args.iterations, n_ways=args.ways, k_shots=args.shots,
            n_episodes=args.episodes, threads=args.threads,
        )
        all_reports.extend(reports)
        row = "  ".join(f"{p.label()} {r.mean:.4f}" for p, r in zip(points, reports))
        print(f"seed {seed}: {row}  ({time.time() - t0:.0f}s)")
        for p, r in zip(points, reports):
            means[p.label()].append(r.mean)

    print()
    for label, vals in means.items():
        print(f"{label:12s} mean {np.mean(vals):.4f} over {len(vals)} seeds  {vals}")
    write_reports_csv(args.out, all_reports, header={"script": "ablation_table"})
    print(f"\nrows written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
