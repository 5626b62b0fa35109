"""Neural-network primitives on :class:`Tensor` with hand-written backward passes."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import flops
from .tensor import Tensor, _make, _unbroadcast, as_tensor, mean, amax

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
NORM_EPS = 1e-12


def _tuple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(x) for x in v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


def _conv_nd(x: Tensor, w: Tensor, b: Tensor | None, stride, padding, nd: int, op: str) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != nd + 2:
        raise ValueError(f"{op}: input must be rank {nd + 2}, got shape {x.shape}")
    if w.ndim != nd + 2:
        raise ValueError(f"{op}: weight must be rank {nd + 2}, got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"{op}: input has {x.shape[1]} channels but weight expects {w.shape[1]} "
            f"(input {x.shape}, weight {w.shape})"
        )
    stride = _tuple(stride, nd)
    padding = _tuple(padding, nd)
    if min(stride) < 1 or min(padding) < 0:
        raise ValueError(f"{op}: stride must be >= 1 and padding >= 0")
    ksize = w.shape[2:]
    spatial = x.shape[2:]
    for s, k, p in zip(spatial, ksize, padding):
        if s + 2 * p < k:
            raise ValueError(f"{op}: kernel {ksize} larger than padded input {spatial} (pad {padding})")

    n, c = x.shape[:2]
    oc = w.shape[0]
    sp_axes = tuple(range(2, 2 + nd))
    k_axes = tuple(range(2 + nd, 2 + 2 * nd))
    pointwise = all(k == 1 for k in ksize) and all(p == 0 for p in padding)

    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in padding]) if any(padding) else x.data
    if pointwise:
        win = xp[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
        out = np.tensordot(w.data.reshape(oc, c), win, axes=([1], [1]))  # (OC, N, *O)
        out = np.moveaxis(out, 0, 1)
    else:
        win = sliding_window_view(xp, ksize, axis=sp_axes)
        win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
        out = np.tensordot(win, w.data, axes=((1,) + k_axes, (1,) + sp_axes))  # (N, *O, OC)
        out = np.moveaxis(out, -1, 1)
    out_sp = out.shape[2:]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape((1, oc) + (1,) * nd)
    out = np.ascontiguousarray(out)
    flops.record("conv", int(np.prod(out.shape)) * c * int(np.prod(ksize)))

    def bw(g):
        gx = gw = gb = None
        o_axes = (0,) + sp_axes
        if w.requires_grad:
            if pointwise:
                gw = np.tensordot(g, win, axes=(o_axes, o_axes)).reshape(w.shape)
            else:
                gw = np.tensordot(g, win, axes=(o_axes, o_axes))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=o_axes)
        if x.requires_grad:
            if pointwise:
                gsub = np.moveaxis(np.tensordot(w.data.reshape(oc, c), g, axes=([0], [1])), 0, 1)
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                gxp[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)] = gsub
            else:
                gcols = np.tensordot(g, w.data, axes=([1], [0]))  # (N, *O, C, *K)
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for offs in np.ndindex(*ksize):
                    piece = np.moveaxis(gcols[(Ellipsis,) + offs], -1, 1)
                    idx = (slice(None), slice(None)) + tuple(
                        slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(offs, stride, out_sp)
                    )
                    gxp[idx] += piece
            if any(padding):
                gx = gxp[(slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(padding, spatial))]
            else:
                gx = gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, (lambda g: bw(g)[:2]) if b is None else bw, op)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of an NCHW input with an (OC, IC, kh, kw) kernel."""
    return _conv_nd(x, weight, bias, stride, padding, 2, "conv2d")


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of an NCTHW input with an (OC, IC, kt, kh, kw) kernel."""
    return _conv_nd(x, weight, bias, stride, padding, 3, "conv3d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for (N, in) inputs and (out, in) weights."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = x.data @ weight.data.T
    flops.record("linear", out.size * weight.shape[1])
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    if bias is None:
        return _make(out, (x, weight), lambda g: bw(g)[:2], "linear")
    return _make(out, (x, weight, bias), bw, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom
    active = norm > eps

    def bw(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(active, (g - out * proj) / denom, g / denom),)

    return _make(out, (x,), bw, "l2_normalize")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation over every axis except axis 1.

    In training mode the running statistics are updated in place (unbiased
    variance, exponential moving average with ``momentum``).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2:
        raise ValueError(f"batch_norm: expected at least (N, C), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: parameters must have shape ({c},), got {gamma.shape}, {beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = x.size // c if c else 0

    if training:
        if m == 0:
            raise ValueError("batch_norm: empty batch in training mode")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * m / (m - 1) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
        out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

        def bw(g):
            gg = gb = gx = None
            if gamma.requires_grad:
                gg = (g * xhat).sum(axis=axes)
            if beta.requires_grad:
                gb = g.sum(axis=axes)
            if x.requires_grad:
                dxhat = g * gamma.data.reshape(bshape)
                gx = (inv.reshape(bshape) / m) * (
                    m * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            return gx, gg, gb

        return _make(out, (x, gamma, beta), bw, "batch_norm")

    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw_eval(g):
        gx = g * (gamma.data * inv).reshape(bshape) if x.requires_grad else None
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), bw_eval, "batch_norm")


def max_pool2d(x: Tensor, kernel_size=3, stride=2, padding=1) -> Tensor:
    """Max pooling over the last two axes; any leading axes are batch-like."""
    x = as_tensor(x)
    kh, kw = _tuple(kernel_size, 2)
    sh, sw = _tuple(stride, 2)
    ph, pw = _tuple(padding, 2)
    lead = x.ndim - 2
    pad = [(0, 0)] * lead + [(ph, ph), (pw, pw)]
    xp = np.pad(x.data, pad, constant_values=-np.inf) if ph or pw else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(-2, -1))[..., ::sh, ::sw, :, :]
    oh, ow = win.shape[-4:-2]
    flat = win.reshape(win.shape[:-2] + (kh * kw,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                hit = arg == i * kw + j
                gxp[..., i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw] += g * hit
        return (gxp[..., ph : ph + x.shape[-2], pw : pw + x.shape[-1]],)

    return _make(np.ascontiguousarray(out), (x,), bw, "max_pool2d")


def spatial_max_pool(x: Tensor) -> Tensor:
    """Global max over the trailing (H, W) axes."""
    return amax(x, axis=(-2, -1))


def temporal_avg_pool(x: Tensor, axis: int = 2) -> Tensor:
    """Average over the frame axis (axis 2 of an N, C, T[, H, W] tensor)."""
    return mean(x, axis=axis)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits, axis=1)
    picked = logp[np.arange(len(labels)), labels]
    return -mean(picked)


def he_normal(shape, fan: int, rng: np.random.Generator, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan)).astype(dtype)


__all__ = [
    "conv2d",
    "conv3d",
    "linear",
    "softmax",
    "log_softmax",
    "l2_normalize",
    "batch_norm",
    "max_pool2d",
    "spatial_max_pool",
    "temporal_avg_pool",
    "cross_entropy",
    "he_normal",
    "BN_EPS",
    "BN_MOMENTUM",
]
