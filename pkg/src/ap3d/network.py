"""ResNet-style video backbones with configurable block replacement.

Residual stages are numbered 1..4 (conv2_x .. conv5_x of ResNet); the stem
(7x7 convolution + max pool) precedes them.  The head applies spatial max
pooling, temporal average pooling and a BatchNorm neck, followed by an
optional bias-free classifier.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .apm import ApmConfig
from .blocks import BasicBlock, BlockKind, Bottleneck, NonLocalBlock, build_block
from .tensorcore import (
    BatchNorm,
    Conv,
    Linear,
    Module,
    Tensor,
    as_tensor,
    max_pool2d,
    no_grad,
    relu,
    spatial_max_pool,
    temporal_avg_pool,
    transpose,
)

STAGE_BLOCKS = {18: (2, 2, 2, 2), 34: (3, 4, 6, 3), 50: (3, 4, 6, 3), "tiny": (1, 1, 1, 1)}
POLICIES = ("none", "one_block", "per2_stage23", "two_blocks_stage23", "all_stage23")


@dataclass
class NetworkSpec:
    depth: int | str = 50
    stage_blocks: tuple[int, ...] = (3, 4, 6, 3)
    base_width: int = 64
    # entries are (stage 1..4, block indices, kind)
    replacement: list[tuple[int, list[int], str]] = field(default_factory=list)
    remove_stage5_downsample: bool = True
    num_classes: int = 0
    bottleneck: bool = True
    apm: ApmConfig = field(default_factory=ApmConfig)
    nl_subsample: bool = True

    def __post_init__(self):
        self.stage_blocks = tuple(int(b) for b in self.stage_blocks)
        if isinstance(self.apm, dict):
            self.apm = ApmConfig(**self.apm)
        self.replacement = [(int(s), sorted(int(i) for i in idx), BlockKind.parse(k).value)
                            for s, idx, k in self.replacement]
        self.validate()

    @property
    def feature_dim(self) -> int:
        return self.base_width * 8 * (4 if self.bottleneck else 1)

    def validate(self) -> None:
        if len(self.stage_blocks) != 4 or min(self.stage_blocks) < 1:
            raise ValueError(f"stage_blocks must be four positive counts, got {self.stage_blocks}")
        if self.base_width < 1 or self.num_classes < 0:
            raise ValueError("base_width must be positive and num_classes non-negative")
        if self.depth == 50 and (self.stage_blocks != (3, 4, 6, 3) or not self.bottleneck):
            raise ValueError("depth 50 uses bottleneck blocks with counts (3, 4, 6, 3)")
        seen = set()
        for stage, idx, kind in self.replacement:
            if not 1 <= stage <= 4:
                raise ValueError(f"replacement stage {stage} outside 1..4")
            for i in idx:
                if not 0 <= i < self.stage_blocks[stage - 1]:
                    raise ValueError(f"block index {i} outside stage {stage} ({self.stage_blocks[stage - 1]} blocks)")
                key = (stage, i, kind == BlockKind.NL2D.value)
                if key in seen:
                    raise ValueError(f"block {i} of stage {stage} replaced twice")
                seen.add(key)

    def kind_at(self, stage: int, index: int) -> BlockKind:
        for s, idx, kind in self.replacement:
            if s == stage and index in idx and kind != BlockKind.NL2D.value:
                return BlockKind(kind)
        return BlockKind.C2D

    def has_nl_after(self, stage: int, index: int) -> bool:
        return any(s == stage and index in idx and kind == BlockKind.NL2D.value for s, idx, kind in self.replacement)

    # -- JSON -----------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_blocks"] = list(self.stage_blocks)
        d["replacement"] = [[s, list(idx), k] for s, idx, k in self.replacement]
        d["feature_dim"] = self.feature_dim
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        fdim = d.pop("feature_dim", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown NetworkSpec keys: {sorted(unknown)}")
        spec = cls(**d)
        if fdim is not None and fdim != spec.feature_dim:
            raise ValueError(f"feature_dim {fdim} inconsistent with widths (expected {spec.feature_dim})")
        return spec

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))


def replacement_policy(policy: str, stage_blocks: Sequence[int], kind, stage: int | None = None):
    """Expand a named policy to explicit (stage, indices, kind) entries.

    ``one_block`` replaces the second last block of ``stage``;
    ``per2_stage23`` every second block (0, 2, ...) of stages 2 and 3;
    ``two_blocks_stage23`` the second last block of each of stages 2 and 3;
    ``all_stage23`` every block of stages 2 and 3.
    """
    policy = policy.replace("-", "_")
    kind = BlockKind.parse(kind).value
    if policy == "none":
        return []
    if policy == "one_block":
        if stage is None or not 1 <= stage <= 4:
            raise ValueError("one_block needs a stage in 1..4")
        return [(stage, [max(stage_blocks[stage - 1] - 2, 0)], kind)]
    if policy == "per2_stage23":
        return [(s, list(range(0, stage_blocks[s - 1], 2)), kind) for s in (2, 3)]
    if policy == "two_blocks_stage23":
        return [(s, [max(stage_blocks[s - 1] - 2, 0)], kind) for s in (2, 3)]
    if policy == "all_stage23":
        return [(s, list(range(stage_blocks[s - 1])), kind) for s in (2, 3)]
    raise ValueError(f"unknown policy {policy!r}; choose from {POLICIES}")


def backbone_spec(depth, num_classes: int = 0, base_width: int | None = None, **kw) -> NetworkSpec:
    """Spec for ResNet-18/34/50 or the tiny desk-scale network, with no replacement."""
    if depth not in STAGE_BLOCKS:
        raise ValueError(f"unknown depth {depth!r}; choose from {list(STAGE_BLOCKS)}")
    if depth == "tiny":
        defaults = dict(base_width=16, bottleneck=False, apm=ApmConfig(embed_divisor=4))
    else:
        defaults = dict(base_width=64, bottleneck=depth == 50)
    if base_width is not None:
        defaults["base_width"] = base_width
    defaults.update(kw)
    return NetworkSpec(depth=depth, stage_blocks=STAGE_BLOCKS[depth], num_classes=num_classes, **defaults)


_ARCH_KINDS = {
    "c2d": "C2D", "i3d": "I3D", "ap-i3d": "AP_I3D", "nl": "NL2D",
    "p3d-a": "P3D_A", "p3d-b": "P3D_B", "p3d-c": "P3D_C",
    "ap-p3d-a": "AP_P3D_A", "ap-p3d-b": "AP_P3D_B", "ap-p3d-c": "AP_P3D_C",
}


def arch_spec(arch: str, policy: str = "per2_stage23", num_classes: int = 0, stage: int | None = None,
              **kw) -> NetworkSpec:
    """Spec from a name like ``resnet50-ap-p3d-c`` or ``tiny-c2d``."""
    backbone, _, kind = arch.lower().partition("-")
    depths = {"resnet18": 18, "resnet34": 34, "resnet50": 50, "tiny": "tiny"}
    if backbone not in depths or kind not in _ARCH_KINDS:
        raise ValueError(f"unknown arch {arch!r}; expected <{'|'.join(depths)}>-<{'|'.join(_ARCH_KINDS)}>")
    spec = backbone_spec(depths[backbone], num_classes=num_classes, **kw)
    if kind != "c2d":
        spec = replace(spec, replacement=replacement_policy(policy, spec.stage_blocks, _ARCH_KINDS[kind], stage))
    return spec


class Stage(Module):
    def __init__(self, blocks: list[Module]):
        super().__init__()
        self.blocks = blocks

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


class VideoNet(Module):
    """Backbone + head.  ``forward`` takes (N, T, 3, H, W) clips and returns (feature, logits)."""

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(seed)
        w = spec.base_width
        self.stem_conv = Conv(3, w, (1, 7, 7), stride=(1, 2, 2), padding=(0, 3, 3), rng=rng)
        self.stem_bn = BatchNorm(w)
        in_ch = w
        stages = []
        for si, nblocks in enumerate(spec.stage_blocks, start=1):
            width = w * 2 ** (si - 1)
            stride = 1 if si == 1 or (si == 4 and spec.remove_stage5_downsample) else 2
            blocks: list[Module] = []
            for bi in range(nblocks):
                kind = spec.kind_at(si, bi)
                block = build_block(kind, in_ch, width, stride if bi == 0 else 1, basic=not spec.bottleneck,
                                    apm_config=spec.apm, rng=rng)
                blocks.append(block)
                in_ch = block.out_channels
                if spec.has_nl_after(si, bi):
                    blocks.append(NonLocalBlock(in_ch, subsample=spec.nl_subsample, rng=rng))
            stages.append(Stage(blocks))
        self.stage1, self.stage2, self.stage3, self.stage4 = stages
        self.neck = BatchNorm(in_ch)
        self.classifier = Linear(in_ch, spec.num_classes, bias=False, std=0.001, rng=rng) if spec.num_classes else None
        self.feature_dim = in_ch

    @property
    def stages(self) -> list[Stage]:
        return [self.stage1, self.stage2, self.stage3, self.stage4]

    def backbone(self, clips) -> Tensor:
        """(N, T, 3, H, W) -> final feature map (N, C, T, h, w)."""
        x = as_tensor(clips)
        if x.ndim != 5 or x.shape[2] != 3:
            raise ValueError(f"expected clips shaped (N, T, 3, H, W), got {x.shape}")
        x = transpose(x, (0, 2, 1, 3, 4))
        x = relu(self.stem_bn(self.stem_conv(x)))
        x = max_pool2d(x, 3, 2, 1)
        for stage in self.stages:
            x = stage(x)
        return x

    def forward(self, clips):
        fmap = self.backbone(clips)
        pooled = temporal_avg_pool(spatial_max_pool(fmap))  # (N, C)
        feature = self.neck(pooled)
        logits = self.classifier(feature) if self.classifier is not None else None
        return feature, logits


def build_network(spec: NetworkSpec, seed: int = 0) -> VideoNet:
    spec.validate()
    return VideoNet(spec, seed)


def extract_feature(model: VideoNet, clip) -> np.ndarray:
    """Retrieval feature of one (T, 3, H, W) clip or a batch of clips, computed in eval mode."""
    x = np.asarray(clip.data if isinstance(clip, Tensor) else clip)
    single = x.ndim == 4
    if single:
        x = x[None]
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            feat, _ = model(x.astype(model.neck.weight.dtype, copy=False))
    finally:
        model.train(was_training)
    return feat.data[0] if single else feat.data


__all__ = [
    "NetworkSpec",
    "VideoNet",
    "build_network",
    "extract_feature",
    "replacement_policy",
    "backbone_spec",
    "arch_spec",
    "BasicBlock",
    "Bottleneck",
]
