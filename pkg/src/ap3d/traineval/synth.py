"""Procedural identities filmed through a jittery detector.

Each identity is a fixed figure (head, patterned torso, legs, optional bag)
painted on a canvas.  A frame is a crop of the canvas around the figure whose
box is randomly shifted and rescaled, sampled through a smooth horizontal
deformation that drifts over time, then resized to the working resolution.
Those three effects mimic detector boxes that are too small, too large, and
posture changes.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..imageio import read_pgm, write_pgm


@dataclass
class Jitter:
    max_shift: float = 8.0          # canvas pixels
    scale_range: tuple[float, float] = (0.75, 1.25)
    deformation: float = 3.0        # canvas pixels
    noise_std: float = 0.05

    @classmethod
    def none(cls) -> "Jitter":
        return cls(0.0, (1.0, 1.0), 0.0, 0.0)


@dataclass
class SynthConfig:
    num_identities: int = 16
    tracklets_per_id: int = 4
    frames_per_tracklet: int = 16
    canvas: tuple[int, int] = (128, 64)
    crop: tuple[int, int] = (96, 48)
    out_size: tuple[int, int] = (64, 32)
    jitter: Jitter = field(default_factory=Jitter)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.jitter, dict):
            self.jitter = Jitter(**self.jitter)
        self.canvas, self.crop, self.out_size = tuple(self.canvas), tuple(self.crop), tuple(self.out_size)
        self.jitter.scale_range = tuple(self.jitter.scale_range)
        self.validate()

    def validate(self) -> None:
        if min(self.num_identities, self.tracklets_per_id, self.frames_per_tracklet) < 1:
            raise ValueError("identity, tracklet and frame counts must be positive")
        if min(self.out_size) < 4 or min(self.crop) < 4:
            raise ValueError(f"degenerate sizes: crop {self.crop}, out {self.out_size}")
        if self.crop[0] > self.canvas[0] or self.crop[1] > self.canvas[1]:
            raise ValueError(f"crop {self.crop} larger than canvas {self.canvas}")
        lo, hi = self.jitter.scale_range
        if not (0.5 < lo <= hi < 1.5):
            raise ValueError(f"scale range {self.jitter.scale_range} must lie inside (0.5, 1.5)")
        if self.jitter.max_shift < 0 or self.jitter.deformation < 0 or self.jitter.noise_std < 0:
            raise ValueError("jitter amplitudes must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrackletSample:
    frames: np.ndarray  # (L, 3, H, W) float32 in [0, 1]
    person_id: int
    camera_id: int
    tracklet_id: int

    def __post_init__(self):
        if self.frames.ndim != 4 or len(self.frames) < 1:
            raise ValueError(f"tracklet needs >= 1 frames shaped (L, C, H, W), got {self.frames.shape}")

    def __len__(self) -> int:
        return len(self.frames)


# identities draw clothing from a shared palette, so colour alone rarely separates them
_PALETTE = np.array([
    [0.85, 0.15, 0.15], [0.15, 0.35, 0.8], [0.9, 0.85, 0.2], [0.15, 0.6, 0.25],
    [0.95, 0.95, 0.95], [0.12, 0.12, 0.12], [0.55, 0.3, 0.6],
])

# fixed per-camera colour gains and background levels
_CAMERA_GAIN = np.array([[1.0, 1.0, 1.0], [0.9, 0.95, 1.1]])
_CAMERA_BG = np.array([[0.45, 0.47, 0.5], [0.55, 0.52, 0.48]])


def _identity_canvas(rng: np.random.Generator, canvas: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """RGB canvas of one identity (background zero) and its alpha mask."""
    h, w = canvas
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((3, h, w))
    alpha = np.zeros((h, w))
    cx = w / 2

    def paint(mask, color):
        img[:, mask] = np.asarray(color)[:, None]
        alpha[mask] = 1.0

    top, bottom = 0.16 * h, 0.86 * h
    body_h = bottom - top
    head_r = 0.07 * body_h
    neck_y = top + 2 * head_r
    waist_y = neck_y + 0.42 * body_h
    half_torso = rng.uniform(0.17, 0.24) * w

    torso = (yy >= neck_y) & (yy < waist_y) & (np.abs(xx - cx) < half_torso)
    c1, c2 = _PALETTE[rng.choice(len(_PALETTE), 2, replace=False)]
    pattern = rng.integers(4)
    period = rng.uniform(5, 10)
    if pattern == 0:
        stripe = np.zeros_like(yy, dtype=bool)
    elif pattern == 1:
        stripe = (yy // period) % 2 == 0
    elif pattern == 2:
        stripe = (xx // period) % 2 == 0
    else:
        stripe = ((yy // period) + (xx // period)) % 2 == 0
    paint(torso & ~stripe, c1)
    paint(torso & stripe, c2)

    arm = (yy >= neck_y + 2) & (yy < waist_y - 2) & (np.abs(np.abs(xx - cx) - half_torso - 3) < 3)
    paint(arm, c1 * 0.8)

    legs_color = _PALETTE[rng.integers(len(_PALETTE))] * 0.8
    gap = rng.uniform(1.5, 3.5)
    leg_w = half_torso * 0.8
    legs = (yy >= waist_y) & (yy < bottom) & (np.abs(xx - cx) > gap) & (np.abs(xx - cx) < gap + leg_w)
    paint(legs, legs_color)
    shoes = (yy >= bottom - 0.04 * body_h) & (yy < bottom) & legs
    paint(shoes, rng.uniform(0.0, 0.3, 3))

    skin = np.array([0.85, 0.68, 0.55]) * rng.uniform(0.7, 1.05)
    head = (yy - (top + head_r)) ** 2 + (xx - cx) ** 2 < head_r**2
    paint(head, skin)
    hair = head & (yy < top + head_r * rng.uniform(0.5, 1.0))
    paint(hair, rng.uniform(0.0, 0.6, 3))

    if rng.random() < 0.5:
        side = rng.choice([-1, 1])
        bx = cx + side * (half_torso + 5)
        by = rng.uniform(neck_y + 4, waist_y)
        bag = (np.abs(xx - bx) < 4) & (np.abs(yy - by) < rng.uniform(4, 8))
        paint(bag, _PALETTE[rng.integers(len(_PALETTE))])
    return img, alpha


def _render_frame(img, alpha, bg, cfg: SynthConfig, rng: np.random.Generator, phase: float) -> np.ndarray:
    ch, cw = cfg.canvas
    oh, ow = cfg.out_size
    jit = cfg.jitter
    scale = rng.uniform(*jit.scale_range)
    dy, dx = rng.uniform(-jit.max_shift, jit.max_shift, size=2)
    box_h, box_w = cfg.crop[0] * scale, cfg.crop[1] * scale
    y0 = ch / 2 - box_h / 2 + dy
    x0 = cw / 2 - box_w / 2 + dx
    ys = y0 + (np.arange(oh) + 0.5) * box_h / oh - 0.5
    xs = x0 + (np.arange(ow) + 0.5) * box_w / ow - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    if jit.deformation > 0:
        # lower body sways more than the head
        sway = jit.deformation * np.sin(2 * np.pi * gy / ch * 1.5 + phase) * (gy / ch)
        gx = gx + sway
    coords = np.stack([gy, gx])
    a = ndimage.map_coordinates(alpha, coords, order=1, mode="constant", cval=0.0)
    frame = np.empty((3, oh, ow))
    for c in range(3):
        fg = ndimage.map_coordinates(img[c], coords, order=1, mode="constant", cval=0.0)
        frame[c] = fg + (1.0 - a) * bg[c]
    if jit.noise_std > 0:
        frame = frame + rng.normal(0.0, jit.noise_std, frame.shape)
    return np.clip(frame, 0.0, 1.0)


def _workers() -> int:
    return max(1, int(os.environ.get("AP3D_THREADS", "1")))


def generate_synthetic(config: SynthConfig, split: str = "train") -> list[TrackletSample]:
    """Deterministic dataset of ``num_identities * tracklets_per_id`` tracklets.

    Identity appearance depends only on ``config.seed``; ``split`` selects an
    independent stream of jitter so "train" and "test" share identities but no
    frames.  Tracklet ``k`` of an identity is filmed by camera ``k % 2``.
    """
    config.validate()
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = np.random.SeedSequence(config.seed)
    id_seqs = root.spawn(config.num_identities)
    split_key = 0 if split == "train" else 1
    jobs = []
    for pid, seq in enumerate(id_seqs):
        for k in range(config.tracklets_per_id):
            tseq = np.random.SeedSequence(seq.entropy, spawn_key=seq.spawn_key + (1, split_key, k))
            jobs.append((pid, k, seq, tseq))

    canvases: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for pid, seq in enumerate(id_seqs):
        canvases[pid] = _identity_canvas(np.random.default_rng(np.random.SeedSequence(seq.entropy, spawn_key=seq.spawn_key + (0,))), config.canvas)

    def make(job):
        pid, k, _, tseq = job
        rng = np.random.default_rng(tseq)
        cam = k % 2
        img, alpha = canvases[pid]
        img = img * _CAMERA_GAIN[cam][:, None, None]
        phase0 = rng.uniform(0, 2 * np.pi)
        frames = np.stack([
            _render_frame(img, alpha, _CAMERA_BG[cam], config, rng, phase0 + 0.6 * f)
            for f in range(config.frames_per_tracklet)
        ]).astype(np.float32)
        return TrackletSample(frames, pid, cam, pid * config.tracklets_per_id + k)

    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        return list(pool.map(make, jobs))


# -- export / import ------------------------------------------------------------

def export_dataset(dataset: list[TrackletSample], outdir) -> Path:
    """One directory per tracklet of PGM frames plus ``manifest.json``.

    Each PGM holds the three colour channels stacked vertically (3H x W, 8 bit).
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for t in dataset:
        tdir = outdir / f"tracklet_{t.tracklet_id:05d}"
        tdir.mkdir(exist_ok=True)
        names = []
        for i, frame in enumerate(t.frames):
            name = f"{tdir.name}/frame_{i:04d}.pgm"
            stacked = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8).reshape(-1, frame.shape[-1])
            write_pgm(outdir / name, stacked)
            names.append(name)
        entries.append({"tracklet_id": t.tracklet_id, "person_id": t.person_id, "camera_id": t.camera_id,
                        "frames": names})
    c, h, w = dataset[0].frames.shape[1:] if dataset else (3, 0, 0)
    manifest = {"channels": int(c), "height": int(h), "width": int(w), "layout": "channels stacked vertically",
                "tracklets": entries}
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return outdir


def load_dataset(indir) -> list[TrackletSample]:
    indir = Path(indir)
    manifest = json.loads((indir / "manifest.json").read_text())
    c, h, w = manifest["channels"], manifest["height"], manifest["width"]
    out = []
    for e in manifest["tracklets"]:
        frames = np.stack([read_pgm(indir / f).reshape(c, h, w) for f in e["frames"]]).astype(np.float32) / 255.0
        out.append(TrackletSample(frames, e["person_id"], e["camera_id"], e["tracklet_id"]))
    return out
