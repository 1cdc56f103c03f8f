#!/usr/bin/env python3
"""Train-vs-test episode accuracy gap: self-supervised ProtoCLR against
a supervised episodic prototypical network, on synthetic data with
disjoint latent-class families for the two splits.

The claim, directionally: the self-supervised representation overfits
its training classes less, so its gap is no larger than the supervised
baseline's.

    python3 scripts/generalization_gap.py --seeds 3 --iterations 150
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from prototransfer.augment import pipeline_from_preset
from prototransfer.data import make_synthetic_dataset
from prototransfer.evaluation import generalization_gap
from prototransfer.fewshot import ProtoNetConfig, train_protonet_supervised
from prototransfer.network import init_conv4
from prototransfer.protoclr import ProtoCLRConfig, train_protoclr


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--iterations", type=int, default=150)
    ap.add_argument("--ways", type=int, default=5)
    ap.add_argument("--shots", type=int, default=5)
    ap.add_argument("--episodes", type=int, default=150)
    ap.add_argument("--noise", type=float, default=0.6)
    ap.add_argument("--threads", type=int, default=4)
    args = ap.parse_args()

    train = make_synthetic_dataset(16, 64, 16, noise_std=args.noise, seed=0, split="train")
    test = make_synthetic_dataset(
        8, 40, 16, noise_std=args.noise, seed=777, class_offset=100, split="test"
    )
    pipe = pipeline_from_preset("synthetic", 1, 16)

    gaps = {"protoclr": [], "supervised": []}
    for seed in range(args.seeds):
        t0 = time.time()
        ssl_net = init_conv4(1, 16, seed=seed)
        ssl_net, _ = train_protoclr(
            ssl_net, train, pipe,
            ProtoCLRConfig(batch_size=50, n_queries=3, max_iterations=args.iterations,
                           patience=args.iterations + 1, checkpoint_interval=0, seed=seed),
        )
        sup_net = init_conv4(1, 16, seed=seed)
        sup_net = train_protonet_supervised(
            sup_net, train,
            ProtoNetConfig(n_ways=args.ways, k_shots=args.shots, q_queries=10,
                           max_iterations=args.iterations, seed=seed),
        )
        line = [f"seed {seed}:"]
        for name, net in (("protoclr", ssl_net), ("supervised", sup_net)):
            tr, te, gap = generalization_gap(
                net, train, test, args.ways, args.shots,
                n_episodes=args.episodes, seed=777, threads=args.threads,
            )
            gaps[name].append(gap)
            line.append(f"{name} gap {gap:+.4f} (train {tr.mean:.3f} test {te.mean:.3f})")
        print("  ".join(line) + f"  ({time.time() - t0:.0f}s)")

    print()
    for name, vals in gaps.items():
        print(f"{name:10s} mean gap {np.mean(vals):+.4f} over {len(vals)} seeds")
    return 0


if __name__ == "__main__":
    sys.exit(main())
