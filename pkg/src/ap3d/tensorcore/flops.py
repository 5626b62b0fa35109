"""Multiply-accumulate tally fed by the primitives while a forward pass runs.

Three categories are kept apart:

``conv``
    convolution layers (any kernel size, including the 1x1 embeddings);
``linear``
    fully connected layers;
``matmul``
    parameter-free products between activations (attention affinities and
    weighted sums).
"""

from __future__ import annotations

import contextlib
from collections import Counter

_ACTIVE: list[Counter] = []

CATEGORIES = ("conv", "linear", "matmul")


def record(category: str, macs: int) -> None:
    for counter in _ACTIVE:
        counter[category] += int(macs)


@contextlib.contextmanager
def count_macs():
    """Collect MACs of every primitive executed inside the block.

    >>> with count_macs() as tally:
    ...     pass
    >>> sum(tally.values())
    0
    """
    tally: Counter = Counter()
    _ACTIVE.append(tally)
    try:
        yield tally
    finally:
        _ACTIVE.remove(tally)
