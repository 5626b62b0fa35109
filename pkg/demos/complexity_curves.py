"""Multiply-accumulate counts against clip length for an AP3D block and a non-local block.

Prints one row per T and the relative residual of a linear and a quadratic fit.

    python3 demos/complexity_curves.py
"""

import numpy as np

from ap3d.blocks import Ap3dWrapper, NonLocalBlock
from ap3d.tensorcore import flops, no_grad
from ap3d.traineval import fit_polynomial

TS = (2, 4, 8, 16, 32)


def macs(fn) -> int:
    with no_grad(), flops.count_macs() as tally:
        fn()
    return sum(tally.values())


def main():
    wrap = Ap3dWrapper(16, 16, rng=0)
    nl = NonLocalBlock(16, subsample=False, rng=0)
    ap_v = [macs(lambda: wrap(np.zeros((1, 16, t, 16, 8)))) for t in TS]
    nl_v = [macs(lambda: nl(np.zeros((1, 16, t, 16, 8)))) for t in TS]
    print(f"{'T':>3} {'AP3D MACs':>12} {'NL MACs':>12}")
    for t, a, b in zip(TS, ap_v, nl_v):
        print(f"{t:>3} {a:>12,} {b:>12,}")
    for name, v in (("AP3D", ap_v), ("NL", nl_v)):
        lin = fit_polynomial(TS, v, 1)[1]
        quad = fit_polynomial(TS, v, 2)[1]
        print(f"{name:>4}: linear fit residual {lin:.1e}, quadratic fit residual {quad:.1e}")


if __name__ == "__main__":
    main()
