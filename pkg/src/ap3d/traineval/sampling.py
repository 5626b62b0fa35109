"""Clip sampling and identity-balanced batches."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .synth import TrackletSample


def clip_indices(length: int, clip_len: int, stride: int, start: int) -> np.ndarray:
    return (start + stride * np.arange(clip_len)) % length


def sample_clip(tracklet, clip_len: int, stride: int, rng: np.random.Generator) -> np.ndarray:
    """``clip_len`` frames spaced by ``stride`` from a random start.

    Starts are drawn from ``0 .. length - clip_len * stride``; when the
    tracklet is shorter than that the start is 0 and indices wrap modulo the
    tracklet length.  ``tracklet`` is a :class:`TrackletSample` or a frame array.
    """
    frames = tracklet.frames if isinstance(tracklet, TrackletSample) else np.asarray(tracklet)
    n = len(frames)
    if n == 0:
        raise ValueError("cannot sample a clip from an empty tracklet")
    if clip_len < 1 or stride < 1:
        raise ValueError(f"clip_len and stride must be >= 1, got {clip_len}, {stride}")
    last_start = max(0, n - clip_len * stride)
    start = int(rng.integers(0, last_start + 1))
    return frames[clip_indices(n, clip_len, stride, start)]


def split_chunks(frames: np.ndarray, chunk_len: int = 32) -> list[np.ndarray]:
    """Consecutive non-overlapping chunks covering the tracklet (the last may be shorter)."""
    if len(frames) == 0:
        raise ValueError("empty tracklet")
    return [frames[i : i + chunk_len] for i in range(0, len(frames), chunk_len)]


def pk_batches(dataset: Sequence[TrackletSample], persons: int, clips_per_person: int,
               rng: np.random.Generator) -> Iterator[list[int]]:
    """One epoch of batches holding ``persons`` identities with ``clips_per_person`` tracklets each.

    Identities are shuffled and chunked; an incomplete final chunk is dropped.
    Tracklets are drawn without replacement when an identity has enough of them.
    """
    by_pid: dict[int, list[int]] = {}
    for i, t in enumerate(dataset):
        by_pid.setdefault(t.person_id, []).append(i)
    pids = sorted(by_pid)
    if len(pids) < persons:
        raise ValueError(f"dataset has {len(pids)} identities, batch needs {persons}")
    order = rng.permutation(pids)
    for b in range(len(order) // persons):
        batch = []
        for pid in order[b * persons : (b + 1) * persons]:
            pool = by_pid[int(pid)]
            batch.extend(int(i) for i in rng.choice(pool, clips_per_person, replace=len(pool) < clips_per_person))
        yield batch
