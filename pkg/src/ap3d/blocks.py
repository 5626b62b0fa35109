"""Residual blocks: C2D, I3D, P3D-A/B/C, their AP3D variants, and a Non-local block.

All blocks consume and produce video tensors laid out (N, C, T, H, W).
Spatial kernels are (1, 3, 3), temporal kernels (3, 1, 1); the I3D core is
(3, 3, 3).  In the AP variants every temporal kernel is wrapped in an
:class:`Ap3dWrapper`, which aligns each frame's neighbours with the APM before
running the temporal convolution with temporal stride equal to its kernel size.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from .apm import APM, ApmConfig, shift_frames
from .tensorcore import (
    BatchNorm,
    Conv,
    Module,
    Tensor,
    add,
    as_tensor,
    matmul,
    max_pool2d,
    relu,
    reshape,
    softmax,
    stack,
    transpose,
)


class BlockKind(str, enum.Enum):
    C2D = "C2D"
    I3D = "I3D"
    AP_I3D = "AP_I3D"
    P3D_A = "P3D_A"
    P3D_B = "P3D_B"
    P3D_C = "P3D_C"
    AP_P3D_A = "AP_P3D_A"
    AP_P3D_B = "AP_P3D_B"
    AP_P3D_C = "AP_P3D_C"
    NL2D = "NL2D"

    @property
    def is_ap(self) -> bool:
        return self.value.startswith("AP_")

    @property
    def p3d_variant(self) -> str | None:
        return self.value[-1] if "P3D" in self.value else None

    @classmethod
    def parse(cls, value) -> "BlockKind":
        if isinstance(value, BlockKind):
            return value
        key = str(value).upper().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown block kind {value!r}; choose from {[k.value for k in cls]}") from None


class Ap3dWrapper(Module):
    """APM-aligned temporal convolution that keeps the frame count.

    For every frame ``t`` the neighbours ``t + o`` (zeros outside the clip) are
    reconstructed by the APM and interleaved around the original frame in
    offset order, e.g. (y[t-1], x[t], y[t+1]).  The convolution then runs
    with temporal stride ``k`` and no temporal padding, so frame ``t`` of the
    output sees exactly its own aligned triple.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel=(3, 1, 1), spatial_stride: int = 1,
                 offsets: Sequence[int] | None = None, apm_config: ApmConfig | None = None, rng=None):
        super().__init__()
        kt, kh, kw = kernel
        offsets = list(offsets) if offsets is not None else [o for o in range(-(kt // 2), kt // 2 + 1) if o != 0]
        if len(offsets) != kt - 1 or 0 in offsets or len(set(offsets)) != len(offsets):
            raise ValueError(f"need {kt - 1} distinct non-zero offsets for temporal kernel {kt}, got {offsets}")
        self.offsets = sorted(offsets)
        self.apm = APM(in_ch, apm_config, rng=rng)
        self.conv = Conv(in_ch, out_ch, kernel, stride=(kt, spatial_stride, spatial_stride),
                         padding=(0, kh // 2, kw // 2), rng=rng)
        # test hook: skip registration and feed the raw neighbours
        self.identity_apm = False

    def gather(self, x: Tensor) -> Tensor:
        """The interleaved (N, C, k*T, H, W) stack fed to the strided convolution."""
        x = as_tensor(x)
        if x.shape[1] != self.apm.channels:
            raise ValueError(f"Ap3dWrapper expects {self.apm.channels} channels, got {x.shape[1]}")
        if self.identity_apm:
            aligned = [shift_frames(x, o) for o in self.offsets]
        else:
            aligned = self.apm.align_neighbors(x, self.offsets)
        by_offset = dict(zip(self.offsets, aligned))
        by_offset[0] = x
        ordered = [by_offset[o] for o in sorted(by_offset)]
        n, c, t, h, w = x.shape
        return reshape(stack(ordered, axis=3), (n, c, t * len(ordered), h, w))

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(self.gather(x))


def _temporal(in_ch: int, out_ch: int, ap: bool, spatial_stride: int, apm_config, rng) -> Module:
    if ap:
        return Ap3dWrapper(in_ch, out_ch, (3, 1, 1), spatial_stride, apm_config=apm_config, rng=rng)
    return Conv(in_ch, out_ch, (3, 1, 1), stride=(1, spatial_stride, spatial_stride), padding=(1, 0, 0), rng=rng)


class SpatialCore(Module):
    """3x3 spatial convolution + BN + ReLU (the C2D core)."""

    def __init__(self, in_ch, out_ch, stride=1, rng=None, **_):
        super().__init__()
        self.conv = Conv(in_ch, out_ch, (1, 3, 3), stride=(1, stride, stride), padding=(0, 1, 1), rng=rng)
        self.bn = BatchNorm(out_ch)

    def forward(self, x):
        return relu(self.bn(self.conv(x)))


class I3DCore(Module):
    """Inflated 3x3x3 convolution + BN + ReLU, optionally APM-aligned."""

    def __init__(self, in_ch, out_ch, stride=1, ap=False, apm_config=None, rng=None):
        super().__init__()
        if ap:
            self.conv = Ap3dWrapper(in_ch, out_ch, (3, 3, 3), stride, apm_config=apm_config, rng=rng)
        else:
            self.conv = Conv(in_ch, out_ch, (3, 3, 3), stride=(1, stride, stride), padding=1, rng=rng)
        self.bn = BatchNorm(out_ch)

    def forward(self, x):
        return relu(self.bn(self.conv(x)))


class P3DCore(Module):
    """Factorised spatial (1x3x3) and temporal (3x1x1) convolutions.

    A: serial, spatial -> temporal.  B: parallel branches on the same input,
    summed.  C: serial with a skip from the spatial output past the temporal
    convolution.
    """

    def __init__(self, in_ch, out_ch, stride=1, variant="C", ap=False, apm_config=None, rng=None):
        super().__init__()
        if variant not in ("A", "B", "C"):
            raise ValueError(f"unknown P3D variant {variant!r}")
        self.variant = variant
        self.spatial = Conv(in_ch, out_ch, (1, 3, 3), stride=(1, stride, stride), padding=(0, 1, 1), rng=rng)
        self.bn_s = BatchNorm(out_ch)
        if variant == "B":
            self.temporal = _temporal(in_ch, out_ch, ap, stride, apm_config, rng)
        else:
            self.temporal = _temporal(out_ch, out_ch, ap, 1, apm_config, rng)
        self.bn_t = BatchNorm(out_ch)

    def forward(self, x):
        if self.variant == "B":
            return relu(add(self.bn_s(self.spatial(x)), self.bn_t(self.temporal(x))))
        s = relu(self.bn_s(self.spatial(x)))
        t = self.bn_t(self.temporal(s))
        if self.variant == "A":
            return relu(t)
        return relu(add(s, t))


def make_core(kind: BlockKind, in_ch: int, out_ch: int, stride: int, apm_config=None, rng=None) -> Module:
    kind = BlockKind.parse(kind)
    if kind in (BlockKind.C2D, BlockKind.NL2D):
        return SpatialCore(in_ch, out_ch, stride, rng=rng)
    if kind in (BlockKind.I3D, BlockKind.AP_I3D):
        return I3DCore(in_ch, out_ch, stride, ap=kind.is_ap, apm_config=apm_config, rng=rng)
    return P3DCore(in_ch, out_ch, stride, kind.p3d_variant, ap=kind.is_ap, apm_config=apm_config, rng=rng)


class Shortcut(Module):
    def __init__(self, in_ch, out_ch, stride, rng=None):
        super().__init__()
        self.conv = Conv(in_ch, out_ch, 1, stride=(1, stride, stride), rng=rng)
        self.bn = BatchNorm(out_ch)

    def forward(self, x):
        return self.bn(self.conv(x))


class Bottleneck(Module):
    """1x1 reduce -> core -> 1x1 expand, residual add, ReLU.  Stride sits on the core."""

    expansion = 4

    def __init__(self, kind, in_ch: int, mid_ch: int, stride: int = 1, apm_config=None, rng=None):
        super().__init__()
        self.kind = BlockKind.parse(kind)
        out_ch = mid_ch * self.expansion
        self.conv1 = Conv(in_ch, mid_ch, 1, rng=rng)
        self.bn1 = BatchNorm(mid_ch)
        self.core = make_core(self.kind, mid_ch, mid_ch, stride, apm_config, rng)
        self.conv3 = Conv(mid_ch, out_ch, 1, rng=rng)
        self.bn3 = BatchNorm(out_ch)
        self.shortcut = Shortcut(in_ch, out_ch, stride, rng) if (stride != 1 or in_ch != out_ch) else None
        self.out_channels = out_ch

    def forward(self, x):
        x = as_tensor(x)
        out = self.core(relu(self.bn1(self.conv1(x))))
        out = self.bn3(self.conv3(out))
        identity = self.shortcut(x) if self.shortcut is not None else x
        return relu(add(out, identity))


class BasicBlock(Module):
    """Two 3x3 convolutions; the first is the (possibly temporal) core."""

    expansion = 1

    def __init__(self, kind, in_ch: int, out_ch: int, stride: int = 1, apm_config=None, rng=None):
        super().__init__()
        self.kind = BlockKind.parse(kind)
        self.core = make_core(self.kind, in_ch, out_ch, stride, apm_config, rng)
        self.conv2 = Conv(out_ch, out_ch, (1, 3, 3), padding=(0, 1, 1), rng=rng)
        self.bn2 = BatchNorm(out_ch)
        self.shortcut = Shortcut(in_ch, out_ch, stride, rng) if (stride != 1 or in_ch != out_ch) else None
        self.out_channels = out_ch

    def forward(self, x):
        x = as_tensor(x)
        out = self.bn2(self.conv2(self.core(x)))
        identity = self.shortcut(x) if self.shortcut is not None else x
        return relu(add(out, identity))


def build_block(kind, in_channels: int, mid_channels: int, stride: int = 1, basic: bool = False,
                apm_config: ApmConfig | None = None, rng=None) -> Module:
    """Residual block of ``kind``; for basic blocks ``mid_channels`` is the output width."""
    if in_channels < 1 or mid_channels < 1 or stride < 1:
        raise ValueError("channels and stride must be positive")
    kind = BlockKind.parse(kind)
    if kind is BlockKind.NL2D:
        raise ValueError("NL2D is inserted after a residual block; build it with NonLocalBlock")
    cls = BasicBlock if basic else Bottleneck
    return cls(kind, in_channels, mid_channels, stride, apm_config=apm_config, rng=rng)


class NonLocalBlock(Module):
    """Space-time Non-local block (embedded Gaussian) with a residual connection.

    Every one of the T*H*W positions attends to every position; with
    ``subsample`` the key/value paths are 2x2 max-pooled spatially
    (skipped on maps smaller than 2x2).  The
    output BN starts with zero scale, so a fresh block is the identity.
    """

    def __init__(self, channels: int, reduction: int = 2, subsample: bool = True, rng=None):
        super().__init__()
        inner = max(channels // reduction, 1)
        self.inner, self.subsample = inner, subsample
        self.theta = Conv(channels, inner, 1, bias=True, rng=rng)
        self.phi = Conv(channels, inner, 1, bias=True, rng=rng)
        self.g = Conv(channels, inner, 1, bias=True, rng=rng)
        self.proj = Conv(inner, channels, 1, bias=True, rng=rng)
        self.bn = BatchNorm(channels, gamma=0.0)

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 5:
            raise ValueError(f"NonLocalBlock expects (N, C, T, H, W), got {x.shape}")
        n, c, t, h, w = x.shape
        q = reshape(self.theta(x), (n, self.inner, t * h * w))
        k, v = self.phi(x), self.g(x)
        # maps smaller than the pooling window are attended at full resolution
        if self.subsample and min(h, w) >= 2:
            k, v = max_pool2d(k, 2, 2, 0), max_pool2d(v, 2, 2, 0)
        m = int(np.prod(k.shape[2:]))
        k = reshape(k, (n, self.inner, m))
        v = reshape(v, (n, self.inner, m))
        attn = softmax(matmul(transpose(q, (0, 2, 1)), k), axis=-1)  # (N, THW, M)
        y = matmul(v, transpose(attn, (0, 2, 1)))  # (N, inner, THW)
        y = reshape(y, (n, self.inner, t, h, w))
        return add(x, self.bn(self.proj(y)))
