"""Parameter and multiply-accumulate counts.

MACs are tallied by the primitives themselves during a real forward pass in
eval mode, so every count reflects the graph that actually runs:

* convolution: ``out_elements * in_channels * prod(kernel)``
* linear: ``out_elements * in_features``
* matmul between activations: ``m * n * p``

BatchNorm, ReLU, pooling, softmax and elementwise products are not counted.
Two conventions are exposed.  ``"layers"`` keeps convolution and linear
layers (the usual convention of GFLOPs tables in the literature); ``"all"`` adds the
parameter-free activation products of APM registration and non-local
attention, which is where the dependence on clip length shows up.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..network import VideoNet
from ..tensorcore import Module, default_dtype, flops, no_grad

CONVENTIONS = {"layers": ("conv", "linear"), "all": flops.CATEGORIES}


def count_params(model: Module, include_head: bool = False) -> int:
    """Number of trainable scalars.

    For a :class:`VideoNet` the default counts the stem and residual stages,
    leaving out the BN neck and the classifier whose size depends on the
    identity count.  ``include_head=True`` counts every parameter.
    """
    if include_head or not isinstance(model, VideoNet):
        return model.num_parameters()
    head = {id(p) for m in (model.neck, model.classifier) if m is not None for p in m.parameters()}
    return sum(p.data.size for p in model.parameters() if id(p) not in head)


def mac_breakdown(model: Module, input_shape: Sequence[int], dtype=np.float32) -> dict[str, int]:
    """MACs per category for one forward pass on zeros of ``input_shape``."""
    was_training = model.training
    model.eval()
    try:
        with default_dtype(dtype), no_grad(), flops.count_macs() as tally:
            model(np.zeros(tuple(input_shape), dtype=dtype))
    finally:
        model.train(was_training)
    return {k: int(tally.get(k, 0)) for k in flops.CATEGORIES}


def count_flops(model: Module, input_shape: Sequence[int], convention: str = "all", dtype=np.float32) -> int:
    """Total MACs of a forward pass under ``convention`` ("all" or "layers")."""
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}; choose from {sorted(CONVENTIONS)}")
    breakdown = mac_breakdown(model, input_shape, dtype)
    return sum(breakdown[k] for k in CONVENTIONS[convention])


def clip_shape(batch: int, frames: int, height: int, width: int) -> tuple[int, int, int, int, int]:
    return (batch, frames, 3, height, width)


def parse_input_shape(text: str) -> tuple[int, ...]:
    """``"4x3x256x128"`` (T x C x H x W) -> (1, 4, 3, 256, 128)."""
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"bad input shape {text!r}; expected TxCxHxW") from None
    if len(dims) == 4:
        dims = (1,) + dims
    if len(dims) != 5 or min(dims) < 1 or dims[2] != 3:
        raise ValueError(f"bad input shape {text!r}; expected TxCxHxW with C=3")
    return dims


def fit_polynomial(ts: Sequence[float], values: Sequence[float], degree: int) -> tuple[np.ndarray, float]:
    """Least-squares fit of ``values`` by a polynomial in ``ts`` without constant term.

    Returns the coefficients (highest power first) and the largest relative residual.
    """
    t = np.asarray(ts, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    design = np.stack([t**k for k in range(degree, 0, -1)], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = np.max(np.abs(design @ coef - y) / np.abs(y))
    return coef, float(resid)
