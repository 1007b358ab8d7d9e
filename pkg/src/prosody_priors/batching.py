"""Padding of variable-length sequences and seeded minibatch schedules."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .core import RngStream


def pad(seqs: Sequence[np.ndarray], width: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack (N_i, C) arrays into a zero-padded (B, T, C) array plus a (B, T) mask."""
    if not seqs:
        raise ValueError("cannot pad an empty batch")
    arrs = [np.asarray(s, dtype=np.float64) for s in seqs]
    arrs = [a[:, None] if a.ndim == 1 else a for a in arrs]
    T = max(a.shape[0] for a in arrs) if width is None else width
    C = arrs[0].shape[1]
    out = np.zeros((len(arrs), T, C))
    mask = np.zeros((len(arrs), T))
    for i, a in enumerate(arrs):
        out[i, :a.shape[0]] = a
        mask[i, :a.shape[0]] = 1.0
    return out, mask


def unpad(batch: np.ndarray, mask: np.ndarray) -> list[np.ndarray]:
    lengths = mask.sum(axis=1).astype(int)
    return [batch[i, :n] for i, n in enumerate(lengths)]


def minibatches(n_items: int, batch_size: int, rng: RngStream) -> Iterator[np.ndarray]:
    """Endless stream of index batches; each epoch is a fresh permutation."""
    if n_items < 1:
        raise ValueError("no items to batch")
    batch_size = min(batch_size, n_items)
    while True:
        perm = rng.permutation(n_items)
        for start in range(0, n_items - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]


def chunks(n_items: int, size: int) -> Iterator[np.ndarray]:
    for start in range(0, n_items, size):
        yield np.arange(start, min(start + size, n_items))
