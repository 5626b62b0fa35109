"""Appearance-Preserving Module: feature-map registration plus contrastive gating.

Given a central map ``c`` and an adjacent map ``x`` (both C x H x W), every
position ``i`` of the reconstructed map is a softmax-weighted sum of all
adjacent features::

    a_ij = s * cos(g(c_i), g(x_j))
    y_i  = sum_j softmax_j(a_ij) * x_j
    z_i  = sigmoid(w . (theta(c_i) * phi(y_i))) * y_i

``g``, ``theta`` and ``phi`` are bias-free 1x1 convolutions to C/divisor
channels and ``w`` is a 1x1 convolution to one channel.  Maps may be passed
unbatched (C, H, W) or batched (B, C, H, W).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .imageio import write_pgm
from .tensorcore import (
    Conv,
    Module,
    Tensor,
    as_tensor,
    concat,
    conv2d,
    l2_normalize,
    matmul,
    mul,
    pad_zeros,
    reshape,
    sigmoid,
    slice_axis,
    softmax,
    transpose,
)


@dataclass(frozen=True)
class ApmConfig:
    scale_s: float = 4.0
    embed_divisor: int = 16
    use_contrastive_attention: bool = True
    min_embed_channels: int = 1

    def __post_init__(self):
        if not self.scale_s > 0:
            raise ValueError(f"scale_s must be > 0, got {self.scale_s}")
        if self.embed_divisor < 1 or self.min_embed_channels < 1:
            raise ValueError("embed_divisor and min_embed_channels must be positive")

    def embed_channels(self, channels: int) -> int:
        return max(channels // self.embed_divisor, self.min_embed_channels)

    def to_dict(self) -> dict:
        return asdict(self)


class APM(Module):
    """Parameters g, theta, phi and w for one temporal kernel."""

    def __init__(self, channels: int, config: ApmConfig | None = None, rng=None):
        super().__init__()
        self.config = config or ApmConfig()
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        ce = self.config.embed_channels(channels)
        self.channels, self.embed = channels, ce
        self.g = Conv(channels, ce, 1, rng=rng)
        self.theta = Conv(channels, ce, 1, rng=rng)
        self.phi = Conv(channels, ce, 1, rng=rng)
        # zero gate weights: the mask starts at a neutral 0.5
        self.w = Conv(ce, 1, 1, init="zeros")

    # -- batched building blocks on (B, C, H, W) ----------------------------
    def _pointwise(self, conv: Conv, x: Tensor) -> Tensor:
        return conv2d(x, conv.weight)

    def affinity_from_embeddings(self, gc: Tensor, gx: Tensor, scale: float | None = None) -> Tensor:
        s = self.config.scale_s if scale is None else scale
        b, ce, h, w = gc.shape
        nc = reshape(l2_normalize(gc, axis=1), (b, ce, h * w))
        nx = reshape(l2_normalize(gx, axis=1), (b, ce, h * w))
        return matmul(transpose(nc, (0, 2, 1)), nx) * s

    def register(self, gc: Tensor, gx: Tensor, x: Tensor, scale: float | None = None) -> Tensor:
        b, c, h, w = x.shape
        weights = softmax(self.affinity_from_embeddings(gc, gx, scale), axis=-1)  # (B, P_central, P_adjacent)
        flat = reshape(x, (b, c, h * w))
        return reshape(matmul(flat, transpose(weights, (0, 2, 1))), (b, c, h, w))

    def gate(self, central: Tensor, y: Tensor) -> Tensor:
        joint = mul(self._pointwise(self.theta, central), self._pointwise(self.phi, y))
        return sigmoid(self._pointwise(self.w, joint))

    def forward(self, central, adjacent) -> Tensor:
        return apm_forward(central, adjacent, self)

    # -- clip-level alignment used by the AP3D wrapper ----------------------
    def align_neighbors(self, clip: Tensor, offsets: Sequence[int]) -> list[Tensor]:
        """Reconstruct the neighbour at each offset of every frame of an (N, C, T, H, W) clip.

        ``g`` is evaluated once per frame; neighbours outside the clip are zero maps.
        Returns one (N, C, T, H, W) tensor per offset.
        """
        n, c, t, h, w = clip.shape
        frames = transpose(clip, (0, 2, 1, 3, 4))  # (N, T, C, H, W)
        flat = reshape(frames, (n * t, c, h, w))
        g_frames = reshape(self._pointwise(self.g, flat), (n, t, self.embed, h, w))
        k = len(offsets)
        gc = concat([reshape(g_frames, (n * t, self.embed, h, w))] * k, axis=0)
        gx = concat([reshape(shift_frames(g_frames, o, axis=1), (n * t, self.embed, h, w)) for o in offsets], axis=0)
        xs = concat([reshape(shift_frames(frames, o, axis=1), (n * t, c, h, w)) for o in offsets], axis=0)
        y = self.register(gc, gx, xs)
        if self.config.use_contrastive_attention:
            y = mul(y, self.gate(concat([flat] * k, axis=0), y))
        out = []
        for i in range(k):
            zi = reshape(slice_axis(y, 0, i * n * t, (i + 1) * n * t), (n, t, c, h, w))
            out.append(transpose(zi, (0, 2, 1, 3, 4)))
        return out


def shift_frames(x: Tensor, offset: int, axis: int = 2) -> Tensor:
    """Frame ``t`` of the result is frame ``t + offset`` of ``x``; out-of-range frames are zeros."""
    if offset == 0:
        return x
    t = x.shape[axis]
    lo, hi = max(0, -offset), max(0, offset)
    pads = [(0, 0)] * x.ndim
    pads[axis] = (lo, hi)
    padded = pad_zeros(x, pads)
    start = offset + lo
    return slice_axis(padded, axis, start, start + t)


def _batched(*maps):
    ts = [as_tensor(m) for m in maps]
    single = ts[0].ndim == 3
    if any(t.ndim != ts[0].ndim for t in ts) or ts[0].ndim not in (3, 4):
        raise ValueError(f"feature maps must all be (C, H, W) or (B, C, H, W); got {[t.shape for t in ts]}")
    if any(t.shape != ts[0].shape for t in ts):
        raise ValueError(f"feature map shapes differ: {[t.shape for t in ts]}")
    if single:
        ts = [reshape(t, (1,) + t.shape) for t in ts]
    return single, ts


def _unbatch(t: Tensor, single: bool) -> Tensor:
    return reshape(t, t.shape[1:]) if single else t


def _check_channels(apm: APM, x: Tensor):
    if x.shape[1] != apm.channels:
        raise ValueError(f"APM built for {apm.channels} channels, got maps with {x.shape[1]}")


def affinity(central, adjacent, apm: APM, scale: float | None = None) -> Tensor:
    """Scaled cosine similarity between every central and every adjacent position: (P, P)."""
    single, (c, x) = _batched(central, adjacent)
    _check_channels(apm, c)
    out = apm.affinity_from_embeddings(apm._pointwise(apm.g, c), apm._pointwise(apm.g, x), scale)
    return _unbatch(out, single)


def reconstruct(central, adjacent, apm: APM, scale: float | None = None) -> Tensor:
    """Adjacent map re-sampled onto the central map's layout (the registration output)."""
    single, (c, x) = _batched(central, adjacent)
    _check_channels(apm, c)
    y = apm.register(apm._pointwise(apm.g, c), apm._pointwise(apm.g, x), x, scale)
    return _unbatch(y, single)


def contrastive_attention(central, reconstructed, apm: APM) -> Tensor:
    """Per-position gate in (0, 1), shape (1, H, W) or (B, 1, H, W)."""
    single, (c, y) = _batched(central, reconstructed)
    _check_channels(apm, c)
    return _unbatch(apm.gate(c, y), single)


def apm_forward(central, adjacent, apm: APM, scale: float | None = None) -> Tensor:
    single, (c, x) = _batched(central, adjacent)
    _check_channels(apm, c)
    y = apm.register(apm._pointwise(apm.g, c), apm._pointwise(apm.g, x), x, scale)
    if apm.config.use_contrastive_attention:
        y = mul(y, apm.gate(c, y))
    return _unbatch(y, single)


def similarity_heatmap(central, adjacent, apm: APM, query: tuple[int, int], scale: float | None = None) -> np.ndarray:
    """Softmax-normalised affinity row of ``query`` = (row, col), reshaped to (H, W)."""
    c = as_tensor(central)
    if c.ndim != 3:
        raise ValueError(f"similarity_heatmap takes single (C, H, W) maps, got {c.shape}")
    _, h, w = c.shape
    r, col = query
    if not (0 <= r < h and 0 <= col < w):
        raise IndexError(f"query {query} outside {h}x{w} map")
    aff = affinity(c, adjacent, apm, scale)
    row = softmax(aff, axis=-1).data[r * w + col]
    return row.reshape(h, w)


def export_heatmap(heatmap: np.ndarray, stem) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (H rows of W values) and an 8-bit ``<stem>.pgm`` scaled to the map maximum."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, pgm_path = stem.with_suffix(".csv"), stem.with_suffix(".pgm")
    np.savetxt(csv_path, heatmap, delimiter=",", fmt="%.10g")
    peak = heatmap.max()
    img = np.zeros(heatmap.shape, dtype=np.uint8) if peak <= 0 else np.round(255 * heatmap / peak).astype(np.uint8)
    write_pgm(pgm_path, img)
    return csv_path, pgm_path
