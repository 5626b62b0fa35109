"""Identity classification plus batch-hard triplet loss under cosine distance."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..tensorcore import Tensor, as_tensor, cross_entropy, getitem, l2_normalize, matmul, mean, relu, transpose

DEFAULT_MARGIN = 0.3


def _check_pk(labels: np.ndarray) -> None:
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2:
        raise ValueError("batch-hard triplet needs at least two identities in the batch")
    if counts.min() < 2:
        raise ValueError(f"every identity needs >= 2 samples in the batch; counts {dict(zip(ids.tolist(), counts.tolist()))}")


def cosine_distance_matrix(features: Tensor) -> Tensor:
    f = l2_normalize(as_tensor(features), axis=1)
    return 1.0 - matmul(f, transpose(f, (1, 0)))


def batch_hard_triplet(features, labels: Sequence[int], margin: float = DEFAULT_MARGIN) -> Tensor:
    """Mean over anchors of ``relu(d(a, hardest p) - d(a, hardest n) + margin)``.

    The hardest pairs are picked on the current values; gradients then flow
    through exactly those two distances per anchor.
    """
    labels = np.asarray(labels)
    _check_pk(labels)
    dist = cosine_distance_matrix(features)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(len(labels), dtype=bool)
    d = dist.data
    hardest_pos = np.where(pos_mask, d, -np.inf).argmax(axis=1)
    hardest_neg = np.where(~same, d, np.inf).argmin(axis=1)
    rows = np.arange(len(labels))
    d_ap = getitem(dist, (rows, hardest_pos))
    d_an = getitem(dist, (rows, hardest_neg))
    return mean(relu(d_ap - d_an + margin))


def reid_loss(logits, features, labels: Sequence[int], margin: float = DEFAULT_MARGIN) -> tuple[Tensor, dict]:
    """Cross-entropy plus triplet, equally weighted.  Returns the total and its parts."""
    labels = np.asarray(labels)
    _check_pk(labels)
    ce = cross_entropy(logits, labels)
    tri = batch_hard_triplet(features, labels, margin)
    return ce + tri, {"ce": float(ce.data), "triplet": float(tri.data)}


def loss(logits, features, labels: Sequence[int], margin: float = DEFAULT_MARGIN) -> Tensor:
    return reid_loss(logits, features, labels, margin)[0]
