"""Central finite-difference gradient checks.

The error reported for one tensor is ``max|analytic - numeric| / max(|analytic|, |numeric|)``.
The numerator runs over the checked elements, the analytic maximum over the
whole tensor; a check passes when the largest such error over all tensors is
below ``tol``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .tensor import (
    Tensor,
    add,
    amax,
    backward,
    concat,
    default_dtype,
    div,
    exp,
    getitem,
    log,
    matmul,
    mean,
    mul,
    pad_zeros,
    relu,
    reshape,
    sigmoid,
    sum_,
    transpose,
)

DEFAULT_STEP = 1e-4
DEFAULT_TOL = 1e-4


@dataclass
class GradcheckReport:
    name: str
    max_rel_err: float
    checked: int
    tol: float = DEFAULT_TOL

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err < self.tol)


def check_tensors(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    step: float = DEFAULT_STEP,
    max_elems: int | None = None,
    rng: np.random.Generator | None = None,
    zero_atol: float = 0.0,
) -> tuple[float, int]:
    """Compare backward() against central differences for each tensor in ``tensors``.

    ``loss_fn`` must rebuild the scalar loss from the current ``.data`` of the
    tensors.  With ``max_elems`` only that many randomly chosen elements per
    tensor are perturbed.  A tensor whose analytic and numeric gradients both
    stay below ``zero_atol`` in magnitude counts as an exact (vanishing) match.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    backward(loss)
    worst, checked = 0.0, 0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idx = rng.choice(flat.size, size=max_elems, replace=False)
        numeric = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            numeric[k] = (up - down) / (2 * step)
        a = analytic.reshape(-1)[idx]
        # the full analytic tensor sets the scale, so sampling a few near-zero
        # entries of a sparse gradient does not turn round-off into error
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        err = 0.0 if scale <= zero_atol else float(np.abs(a - numeric).max() / scale)
        worst = max(worst, err)
        checked += idx.size
    return worst, checked


def _projected(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    proj = rng.standard_normal(out.shape)
    return lambda o: sum_(mul(o, proj))


# name -> (builder, default input shapes, input transform)
def _bn_train(x, g, b):
    c = x.shape[1]
    return F.batch_norm(x, g, b, np.zeros(c), np.ones(c), training=True)


def _bn_eval(x, g, b):
    c = x.shape[1]
    return F.batch_norm(x, g, b, np.full(c, 0.1), np.full(c, 1.7), training=False)


_positive = lambda a: np.abs(a) + 0.5  # noqa: E731

OPS: dict[str, tuple[Callable, list[tuple[int, ...]], Callable | None]] = {
    "add": (lambda a, b: add(a, b), [(3, 4), (4,)], None),
    "mul": (lambda a, b: mul(a, b), [(3, 4), (3, 1)], None),
    "div": (lambda a, b: div(a, b), [(3, 4), (3, 4)], _positive),
    "matmul": (lambda a, b: matmul(a, b), [(2, 3, 4), (2, 4, 5)], None),
    "sum": (lambda a: sum_(a, axis=1), [(3, 4, 2)], None),
    "mean": (lambda a: mean(a, axis=(0, 2)), [(3, 4, 2)], None),
    "max": (lambda a: amax(a, axis=1), [(3, 5)], None),
    "exp": (lambda a: exp(a), [(6,)], None),
    "log": (lambda a: log(a), [(6,)], _positive),
    "relu": (lambda a: relu(a), [(4, 5)], None),
    "sigmoid": (lambda a: sigmoid(a), [(8,)], None),
    "softmax": (lambda a: F.softmax(a, axis=1), [(3, 5)], None),
    "log_softmax": (lambda a: F.log_softmax(a, axis=1), [(3, 5)], None),
    "l2_normalize": (lambda a: F.l2_normalize(a, axis=1), [(3, 4)], None),
    "linear": (lambda x, w, b: F.linear(x, w, b), [(3, 4), (5, 4), (5,)], None),
    "conv2d": (lambda x, w, b: F.conv2d(x, w, b, stride=1, padding=1), [(2, 3, 5, 4), (2, 3, 3, 3), (2,)], None),
    "conv2d_strided": (lambda x, w: F.conv2d(x, w, None, stride=2, padding=1), [(1, 2, 5, 6), (3, 2, 3, 3)], None),
    "conv3d": (lambda x, w, b: F.conv3d(x, w, b, stride=1, padding=1), [(1, 2, 3, 4, 4), (2, 2, 3, 3, 3), (2,)], None),
    "conv3d_temporal_stride": (
        lambda x, w: F.conv3d(x, w, None, stride=(3, 1, 1), padding=(0, 1, 1)),
        [(1, 2, 6, 3, 3), (2, 2, 3, 3, 3)],
        None,
    ),
    "batch_norm": (_bn_train, [(4, 3, 2, 2), (3,), (3,)], None),
    "batch_norm_eval": (_bn_eval, [(4, 3, 2, 2), (3,), (3,)], None),
    "max_pool2d": (lambda a: F.max_pool2d(a, 3, 2, 1), [(1, 2, 5, 6)], None),
    "spatial_max_pool": (lambda a: F.spatial_max_pool(a), [(2, 3, 2, 4, 3)], None),
    "temporal_avg_pool": (lambda a: F.temporal_avg_pool(a), [(2, 3, 4)], None),
    "concat": (lambda a, b: concat([a, b], axis=1), [(2, 3), (2, 2)], None),
    "slice": (lambda a: getitem(a, (slice(None), slice(1, 4, 2))), [(3, 5)], None),
    "pad_zeros": (lambda a: pad_zeros(a, [(1, 0), (0, 2)]), [(2, 3)], None),
    "transpose": (lambda a: transpose(a, (1, 0, 2)), [(2, 3, 4)], None),
    "reshape": (lambda a: reshape(a, (4, 6)), [(2, 3, 4)], None),
    "cross_entropy": (lambda a: F.cross_entropy(a, [0, 2, 1]), [(3, 4)], None),
}


def gradcheck(op: str, shapes: Sequence[Sequence[int]] | None = None, seed: int = 0,
              tol: float = DEFAULT_TOL) -> GradcheckReport:
    """Finite-difference check of one registered primitive in double precision."""
    if op not in OPS:
        raise KeyError(f"unknown op {op!r}; known: {', '.join(sorted(OPS))}")
    builder, default_shapes, transform = OPS[op]
    shapes = [tuple(s) for s in (shapes or default_shapes)]
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        arrays = [rng.uniform(-1.0, 1.0, size=s) for s in shapes]
        if transform is not None:
            arrays = [transform(a) for a in arrays]
        inputs = [Tensor(a, requires_grad=True) for a in arrays]
        probe = builder(*inputs)
        project = _projected(probe, rng)
        err, n = check_tensors(lambda: project(builder(*inputs)), inputs)
    return GradcheckReport(op, err, n, tol)
