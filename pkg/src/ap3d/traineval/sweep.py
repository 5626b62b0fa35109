"""Ablation sweeps: train and evaluate one small model per setting, report a CSV."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..network import STAGE_BLOCKS, NetworkSpec, arch_spec, build_network, replacement_policy
from ..tensorcore import default_dtype
from .analysis import count_flops, count_params
from .metrics import evaluate, split_query_gallery
from .synth import SynthConfig, generate_synthetic
from .train import TrainConfig, train

AXES = ("stage_placement", "block_count", "backbone", "ca_switch", "scale_s")
CSV_HEADER = ("setting", "rank1", "rank5", "rank10", "mAP", "params", "gmacs")

DEFAULT_VALUES = {
    "stage_placement": ["stage2", "stage3", "stage4", "stage5"],
    "block_count": ["1", "2", "5", "10"],
    "backbone": ["resnet18-c2d", "resnet18-p3d-c", "resnet18-ap-p3d-c",
                 "resnet34-c2d", "resnet34-p3d-c", "resnet34-ap-p3d-c"],
    "ca_switch": ["ap-i3d/ca", "ap-i3d/no-ca", "ap-p3d-c/ca", "ap-p3d-c/no-ca"],
    "scale_s": ["1", "2", "3", "4", "5", "6"],
}

# Table-3 style block counts mapped onto replacement policies
_COUNT_POLICY = {"1": ("one_block", 3), "2": ("two_blocks_stage23", None), "5": ("per2_stage23", None),
                 "10": ("all_stage23", None)}


@dataclass
class SweepConfig:
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(frames_per_tracklet=32))
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    base_width: int = 16
    kind: str = "AP_P3D_C"
    seed: int = 0


def normalize_axis(axis: str) -> str:
    axis = axis.replace("-", "_")
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {AXES}")
    return axis


def sweep_spec(axis: str, value: str, cfg: SweepConfig, num_classes: int) -> NetworkSpec:
    """Network for one sweep point.  Non-backbone axes use the tiny preset."""
    axis = normalize_axis(axis)
    tiny = arch_spec("tiny-c2d", num_classes=num_classes, base_width=cfg.base_width)
    blocks = tiny.stage_blocks
    if axis == "stage_placement":
        # stage1 is the stem, so stage2..stage5 name residual stages 1..4
        stage = int(str(value).removeprefix("stage")) - 1
        if not 1 <= stage <= 4:
            raise ValueError(f"stage_placement values are stage2..stage5, got {value!r}")
        return replace(tiny, replacement=replacement_policy("one_block", blocks, cfg.kind, stage))
    if axis == "block_count":
        if str(value) not in _COUNT_POLICY:
            raise ValueError(f"block_count values are {sorted(_COUNT_POLICY)}, got {value!r}")
        policy, stage = _COUNT_POLICY[str(value)]
        # one block per stage cannot hold 5 or 10 replacements; use the ResNet-34/50 layout
        deep = replace(tiny, stage_blocks=STAGE_BLOCKS[50])
        return replace(deep, replacement=replacement_policy(policy, deep.stage_blocks, cfg.kind, stage))
    if axis == "backbone":
        spec = arch_spec(str(value), num_classes=num_classes, base_width=cfg.base_width)
        return replace(spec, apm=tiny.apm)
    if axis == "ca_switch":
        family, _, ca = str(value).partition("/")
        if ca not in ("ca", "no-ca"):
            raise ValueError(f"ca_switch values look like 'ap-i3d/ca' or 'ap-p3d-c/no-ca', got {value!r}")
        spec = arch_spec(f"tiny-{family}", policy="per2_stage23", num_classes=num_classes, base_width=cfg.base_width)
        return replace(spec, apm=replace(spec.apm, use_contrastive_attention=ca == "ca"))
    s = float(value)
    return replace(tiny, replacement=replacement_policy("per2_stage23", blocks, cfg.kind),
                   apm=replace(tiny.apm, scale_s=s))


def run_point(spec: NetworkSpec, cfg: SweepConfig, train_set, query, gallery) -> dict:
    with default_dtype(np.float32):
        model = build_network(spec, seed=cfg.seed)
        train(model, train_set, replace(cfg.train, seed=cfg.seed))
        result = evaluate(model, query, gallery)
        h, w = cfg.synth.out_size
        macs = count_flops(model, (1, cfg.train.clip_len, 3, h, w), convention="all")
    return {**result.summary(), "params": count_params(model), "gmacs": macs / 1e9}


def ablation_sweep(axis: str, cfg: SweepConfig | None = None, values: Sequence | None = None,
                   out_csv=None) -> list[dict]:
    """One row per sweep point; rows are also written to ``out_csv`` when given."""
    cfg = cfg or SweepConfig()
    axis = normalize_axis(axis)
    values = [str(v) for v in (values if values is not None else DEFAULT_VALUES[axis])]
    train_set = generate_synthetic(cfg.synth, "train")
    query, gallery = split_query_gallery(generate_synthetic(cfg.synth, "test"))
    num_classes = cfg.synth.num_identities
    rows = []
    for v in values:
        spec = sweep_spec(axis, v, cfg, num_classes)
        rows.append({"setting": f"{axis}={v}", **run_point(spec, cfg, train_set, query, gallery)})
    if out_csv is not None:
        Path(out_csv).write_text(rows_to_csv(rows))
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([r["setting"]] + [f"{r[k]:.6f}" for k in ("rank1", "rank5", "rank10", "mAP")]
                        + [int(r["params"]), f"{r['gmacs']:.6f}"])
    return buf.getvalue()
