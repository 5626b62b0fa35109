"""CMC and mAP for video retrieval, plus tracklet-level feature extraction."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..network import VideoNet, extract_feature
from ..tensorcore import no_grad
from .sampling import split_chunks
from .synth import TrackletSample


@dataclass
class RetrievalResult:
    cmc: np.ndarray  # cmc[k-1] = rank-k match rate
    map: float
    num_queries: int

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def summary(self) -> dict:
        return {"rank1": self.rank(1), "rank5": self.rank(5), "rank10": self.rank(10), "mAP": self.map}


def evaluate_ranking(distmat: np.ndarray, q_pids, g_pids, q_camids, g_camids, max_rank: int = 20,
                     exclude_same_camera: bool = True) -> RetrievalResult:
    """Ranks each gallery row by increasing distance (stable on ties).

    Gallery items with the query's identity and camera are removed first when
    ``exclude_same_camera`` is set.  Queries left without a true match are skipped.
    """
    distmat = np.asarray(distmat, dtype=np.float64)
    q_pids, g_pids = np.asarray(q_pids), np.asarray(g_pids)
    q_camids, g_camids = np.asarray(q_camids), np.asarray(g_camids)
    nq, ng = distmat.shape
    if ng == 0:
        raise ValueError("gallery is empty")
    if (len(q_pids), len(g_pids)) != (nq, ng):
        raise ValueError(f"distance matrix {distmat.shape} does not match {len(q_pids)} queries x {len(g_pids)} gallery")
    cmc_sum = np.zeros(max_rank)
    aps = []
    for q in range(nq):
        order = np.argsort(distmat[q], kind="stable")
        keep = np.ones(ng, dtype=bool)
        if exclude_same_camera:
            keep = ~((g_pids[order] == q_pids[q]) & (g_camids[order] == q_camids[q]))
        matches = (g_pids[order] == q_pids[q])[keep]
        if not matches.any():
            continue
        first = int(np.argmax(matches))
        hit = np.zeros(max_rank)
        hit[min(first, max_rank):] = 1.0
        cmc_sum += hit
        ranks = np.flatnonzero(matches) + 1
        aps.append(float(np.mean(np.arange(1, len(ranks) + 1) / ranks)))
    if not aps:
        raise ValueError("no query has a valid gallery match")
    return RetrievalResult(cmc_sum / len(aps), float(np.mean(aps)), len(aps))


def cosine_distances(qf: np.ndarray, gf: np.ndarray) -> np.ndarray:
    qf, gf = np.asarray(qf, dtype=np.float64), np.asarray(gf, dtype=np.float64)
    if qf.ndim != 2 or gf.ndim != 2 or qf.shape[1] != gf.shape[1]:
        raise ValueError(f"feature dims differ: query {qf.shape}, gallery {gf.shape}")
    qn = qf / np.maximum(np.linalg.norm(qf, axis=1, keepdims=True), 1e-12)
    gn = gf / np.maximum(np.linalg.norm(gf, axis=1, keepdims=True), 1e-12)
    return 1.0 - qn @ gn.T


def normalize_frames(frames: np.ndarray) -> np.ndarray:
    """Map [0, 1] pixels to roughly zero mean, unit spread."""
    return (frames - 0.5) / 0.25


def tracklet_features(model: VideoNet, tracklets: Sequence[TrackletSample], chunk_len: int = 32,
                      workers: int | None = None) -> np.ndarray:
    """Average of the features of consecutive ``chunk_len``-frame chunks of each tracklet."""
    dtype = model.neck.weight.dtype

    def one(t: TrackletSample) -> np.ndarray:
        feats = [extract_feature(model, normalize_frames(c).astype(dtype)) for c in split_chunks(t.frames, chunk_len)]
        return np.mean(feats, axis=0)

    workers = workers or max(1, int(os.environ.get("AP3D_THREADS", "1")))
    # mode and grad switches are global, so flip them once around the pool
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            if workers == 1:
                return np.stack([one(t) for t in tracklets])
            with ThreadPoolExecutor(max_workers=workers) as pool:
                return np.stack(list(pool.map(one, tracklets)))
    finally:
        model.train(was_training)


def split_query_gallery(tracklets: Sequence[TrackletSample]) -> tuple[list[TrackletSample], list[TrackletSample]]:
    """First camera-0 tracklet of each identity is a query; everything else is gallery."""
    query, gallery, seen = [], [], set()
    for t in tracklets:
        if t.camera_id == 0 and t.person_id not in seen:
            seen.add(t.person_id)
            query.append(t)
        else:
            gallery.append(t)
    return query, gallery


def evaluate(model: VideoNet, query: Sequence[TrackletSample], gallery: Sequence[TrackletSample],
             clip_len_test: int = 32, exclude_same_camera: bool = True) -> RetrievalResult:
    if not gallery:
        raise ValueError("gallery is empty")
    qf = tracklet_features(model, query, clip_len_test)
    gf = tracklet_features(model, gallery, clip_len_test)
    dist = cosine_distances(qf, gf)
    return evaluate_ranking(
        dist,
        [t.person_id for t in query], [t.person_id for t in gallery],
        [t.camera_id for t in query], [t.camera_id for t in gallery],
        exclude_same_camera=exclude_same_camera,
    )
