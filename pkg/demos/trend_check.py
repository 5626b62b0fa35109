"""Desk-scale comparison of tiny AP-P3D-C against tiny C2D on the jittered synthetic set.

Each seed trains both models for the desk preset (30 epochs) and evaluates
rank-1 on the held-out identities.  Roughly a minute per model per seed.

    python3 demos/trend_check.py --seeds 0 1 2
"""

import argparse
import time

import numpy as np

from ap3d.network import arch_spec, build_network
from ap3d.tensorcore import default_dtype
from ap3d.traineval import SynthConfig, TrainConfig, evaluate, generate_synthetic, split_query_gallery, train


def run(arch: str, seed: int) -> float:
    synth = SynthConfig(frames_per_tracklet=32, seed=seed)
    query, gallery = split_query_gallery(generate_synthetic(synth, "test"))
    with default_dtype(np.float32):
        model = build_network(arch_spec(arch, num_classes=synth.num_identities), seed=seed)
        train(model, generate_synthetic(synth, "train"), TrainConfig.desk(seed=seed))
        return evaluate(model, query, gallery).rank1


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--archs", nargs="+", default=["tiny-ap-p3d-c", "tiny-c2d"])
    args = parser.parse_args()

    scores = {}
    for arch in args.archs:
        scores[arch] = []
        for seed in args.seeds:
            start = time.perf_counter()
            scores[arch].append(run(arch, seed))
            print(f"{arch:>14} seed {seed}: rank-1 {scores[arch][-1]:.3f} ({time.perf_counter() - start:.0f}s)")
    for arch, v in scores.items():
        print(f"{arch:>14} median rank-1 {np.median(v):.3f}")


if __name__ == "__main__":
    main()
