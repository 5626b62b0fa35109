"""PK-sampled training loop with flip augmentation and step-decayed Adam."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..network import VideoNet
from ..tensorcore import backward
from .losses import DEFAULT_MARGIN, reid_loss
from .metrics import normalize_frames
from .optim import Adam, step_lr
from .sampling import pk_batches, sample_clip
from .synth import TrackletSample


@dataclass
class TrainConfig:
    clip_len: int = 4
    frame_stride: int = 8
    persons_per_batch: int = 8
    clips_per_person: int = 4
    lr: float = 3e-4
    lr_decay: float = 0.1
    decay_every: int = 60
    epochs: int = 240
    weight_decay: float = 5e-4
    margin: float = DEFAULT_MARGIN
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def batch_size(self) -> int:
        return self.persons_per_batch * self.clips_per_person

    def validate(self) -> None:
        if min(self.clip_len, self.frame_stride, self.epochs, self.decay_every) < 1:
            raise ValueError("clip_len, frame_stride, epochs and decay_every must be >= 1")
        if self.persons_per_batch < 2 or self.clips_per_person < 2:
            raise ValueError("batch-hard mining needs >= 2 persons and >= 2 clips per person")
        if not (self.lr > 0 and 0 < self.lr_decay <= 1 and self.weight_decay >= 0 and self.margin >= 0):
            raise ValueError("lr > 0, 0 < lr_decay <= 1, weight_decay >= 0 and margin >= 0 required")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")

    def lr_at(self, epoch: int) -> float:
        return step_lr(epoch, self.lr, self.lr_decay, self.decay_every)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def full(cls, **kw) -> "TrainConfig":
        """The long schedule: 240 epochs, decay every 60."""
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Tiny-model schedule: 30 epochs, decay every 10, larger learning rate."""
        base = dict(epochs=30, decay_every=10, lr=3e-3, persons_per_batch=8, clips_per_person=4)
        base.update(kw)
        return cls(**base)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    grad_touched: set[str] = field(default_factory=set)
    seconds: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]


def label_map(dataset: Sequence[TrackletSample]) -> dict[int, int]:
    return {pid: i for i, pid in enumerate(sorted({t.person_id for t in dataset}))}


def make_batch(dataset: Sequence[TrackletSample], indices: Sequence[int], cfg: TrainConfig,
               rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    clips = []
    for i in indices:
        clip = sample_clip(dataset[i], cfg.clip_len, cfg.frame_stride, rng)
        if rng.random() < cfg.flip_prob:
            clip = clip[..., ::-1]
        clips.append(clip)
    return normalize_frames(np.stack(clips)).astype(dtype)


def train(model: VideoNet, dataset: Sequence[TrackletSample], config: TrainConfig, log_path=None,
          validate: Callable[[VideoNet], float] | None = None, validate_every: int = 0) -> TrainResult:
    """Train ``model`` in place.  One JSON line per epoch goes to ``log_path`` when given.

    ``validate`` (if given) returns a rank-1 value that is logged every
    ``validate_every`` epochs and after the last one.
    """
    config.validate()
    labels_of = label_map(dataset)
    if model.classifier is None or model.spec.num_classes != len(labels_of):
        raise ValueError(f"model classifier has {model.spec.num_classes} classes, dataset has {len(labels_of)} identities")
    if len(labels_of) < config.persons_per_batch:
        raise ValueError(f"persons_per_batch {config.persons_per_batch} exceeds {len(labels_of)} identities")

    rng = np.random.default_rng(config.seed)
    named = list(model.named_parameters())
    opt = Adam([p for _, p in named], lr=config.lr, weight_decay=config.weight_decay)
    dtype = model.neck.weight.dtype
    result = TrainResult()
    log = open(Path(log_path), "w") if log_path else None
    start = time.perf_counter()
    try:
        for epoch in range(config.epochs):
            opt.lr = config.lr_at(epoch)
            model.train()
            sums = {"loss": 0.0, "ce": 0.0, "triplet": 0.0}
            steps = 0
            for idx in pk_batches(dataset, config.persons_per_batch, config.clips_per_person, rng):
                x = make_batch(dataset, idx, config, rng, dtype)
                y = np.array([labels_of[dataset[i].person_id] for i in idx])
                opt.zero_grad()
                feature, logits = model(x)
                total, parts = reid_loss(logits, feature, y, config.margin)
                if not math.isfinite(float(total.data)):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}")
                backward(total)
                for name, p in named:
                    if name not in result.grad_touched and p.grad is not None and np.any(p.grad != 0):
                        result.grad_touched.add(name)
                opt.step()
                sums["loss"] += float(total.data)
                sums["ce"] += parts["ce"]
                sums["triplet"] += parts["triplet"]
                steps += 1
            entry = {"epoch": epoch, "lr": opt.lr, **{k: v / steps for k, v in sums.items()},
                     "seconds": round(time.perf_counter() - start, 3)}
            if validate is not None and validate_every and ((epoch + 1) % validate_every == 0 or epoch + 1 == config.epochs):
                entry["rank1"] = float(validate(model))
            result.history.append(entry)
            if log:
                log.write(json.dumps(entry) + "\n")
                log.flush()
    finally:
        if log:
            log.close()
    model.zero_grad()
    result.seconds = time.perf_counter() - start
    return result
