"""Register a spatially shifted feature map back onto its central frame.

A random (C, H, W) map is rolled two columns to the right to play the role of
a misaligned neighbouring frame.  With an identity embedding the APM should
undo the shift, and the fit should sharpen as the scale factor s grows.

    python3 demos/registration_toy.py
"""

import numpy as np

from ap3d.apm import APM, ApmConfig, reconstruct, similarity_heatmap

C, H, W = 32, 8, 6


def main():
    rng = np.random.default_rng(0)
    central = rng.standard_normal((C, H, W))
    adjacent = np.roll(central, 2, axis=2)

    print(f"unregistered  |adjacent - central|max = {np.abs(adjacent - central).max():.3f}")
    for s in (1.0, 4.0, 16.0, 50.0):
        apm = APM(C, ApmConfig(scale_s=s, embed_divisor=1, use_contrastive_attention=False), rng=0)
        apm.g.weight.data[...] = np.eye(C).reshape(apm.g.weight.shape)
        y = reconstruct(central, adjacent, apm).data
        peak = similarity_heatmap(central, adjacent, apm, (3, 2)).max()
        print(f"s={s:>4g}  |y - central|max = {np.abs(y - central).max():.2e}  heatmap peak = {peak:.3f}")


if __name__ == "__main__":
    main()
