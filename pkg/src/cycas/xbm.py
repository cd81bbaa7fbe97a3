"""Cross-batch memory of past embeddings tagged with their video id."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Node


@dataclass(frozen=True)
class MemoryEntry:
    feature: np.ndarray
    video_id: int


def memory_bytes(capacity: int, dim: int, bytes_per_scalar: int = 4) -> int:
    return capacity * dim * bytes_per_scalar


class MemoryQueue:
    """Fixed-capacity FIFO of (feature, video id); oldest entries leave first.

    Backed by a ring buffer. Stored features are copies with no graph history.
    """

    def __init__(self, capacity: int, dim: int | None = None):
        if capacity < 0:
            raise ValueError(f"capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self._feats: np.ndarray | None = None
        self._vids = np.zeros(capacity, dtype=np.int64)
        self._head = 0  # slot of the oldest entry
        self._size = 0
        if dim is not None:
            self._feats = np.zeros((dim, capacity))

    def __len__(self) -> int:
        return self._size

    def _order(self) -> np.ndarray:
        return (self._head + np.arange(self._size)) % max(self.capacity, 1)

    def __iter__(self):
        feats, vids = self.snapshot()
        for j in range(feats.shape[1]):
            yield MemoryEntry(feats[:, j].copy(), int(vids[j]))

    def enqueue_batch(self, feats, video_ids: Sequence[int]) -> None:
        """Append the columns of ``feats`` (d x n) in order, evicting the oldest."""
        values = feats.value if isinstance(feats, Node) else np.asarray(feats, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != len(video_ids):
            raise ValueError(
                f"{values.shape[-1]} features but {len(video_ids)} video ids")
        if self.capacity == 0:
            return
        if self._feats is None:
            self.dim = values.shape[0]
            self._feats = np.zeros((self.dim, self.capacity))
        elif values.shape[0] != self.dim:
            raise ValueError(f"feature dim {values.shape[0]} != memory dim {self.dim}")
        vids = np.asarray(video_ids, dtype=np.int64)
        n = values.shape[1]
        if n >= self.capacity:
            self._feats[:, :] = values[:, n - self.capacity:]
            self._vids[:] = vids[n - self.capacity:]
            self._head, self._size = 0, self.capacity
            return
        tail = (self._head + self._size) % self.capacity
        slots = (tail + np.arange(n)) % self.capacity
        self._feats[:, slots] = values
        self._vids[slots] = vids
        overflow = max(0, self._size + n - self.capacity)
        self._head = (self._head + overflow) % self.capacity
        self._size = min(self.capacity, self._size + n)

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        """(features d x size, video ids), oldest first."""
        if self._size == 0:
            return np.zeros((self.dim or 0, 0)), np.zeros(0, dtype=np.int64)
        order = self._order()
        return self._feats[:, order], self._vids[order]

    def top_k_hard_negatives(self, x, video_id: int, k: int) -> list[MemoryEntry]:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        feats, vids = self.snapshot()
        if feats.shape[1] == 0:
            return []
        sims = np.asarray(x, dtype=np.float64).reshape(1, -1) @ feats
        mask = _select_top_k(sims, vids[None, :] != video_id, k)[0]
        idx = np.flatnonzero(mask)
        idx = idx[np.argsort(-sims[0, idx], kind="stable")]
        return [MemoryEntry(feats[:, j].copy(), int(vids[j])) for j in idx]


def _select_top_k(sims: np.ndarray, eligible: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest eligible entries per row.

    Among equal similarities the older (lower-index) entry wins.
    """
    n, m = sims.shape
    counts = eligible.sum(axis=1)
    if k >= m or (counts <= k).all():
        return eligible.copy()
    masked = np.where(eligible, sims, -np.inf)
    kth = -np.partition(-masked, k - 1, axis=1)[:, k - 1:k]
    above = masked > kth
    tied = (masked == kth) & eligible
    room = k - above.sum(axis=1, keepdims=True)
    take_tied = tied & (np.cumsum(tied, axis=1) <= room)
    mask = above | take_tied
    small = counts <= k
    mask[small] = eligible[small]
    return mask


def hard_negative_mask(batch: np.ndarray, batch_vids: Sequence[int], memory: MemoryQueue,
                       k: int) -> tuple[np.ndarray, np.ndarray]:
    """Similarities (N x M) between batch columns and memory, and the mask of
    the selected top-k different-video entries for each batch row."""
    feats, vids = memory.snapshot()
    n = batch.shape[1]
    if feats.shape[1] == 0:
        return np.zeros((n, 0)), np.zeros((n, 0), dtype=bool)
    sims = batch.T @ feats
    eligible = np.asarray(batch_vids, dtype=np.int64)[:, None] != vids[None, :]
    return sims, _select_top_k(sims, eligible, k)


def xbm_loss(batch_feats: Node, batch_vids: Sequence[int], memory: MemoryQueue,
             k: int = 10) -> Node:
    """Mean softplus similarity between batch features and their top-k hardest
    memory negatives. Memory features are constants; the mean runs over the
    pairs actually selected."""
    if batch_feats.shape[1] == 0:
        raise ValueError("xbm_loss needs a nonempty batch")
    zero = dm.scale(dm.sum_all(batch_feats), 0.0)
    if len(memory) == 0:
        return zero
    feats, _ = memory.snapshot()
    sims_value, mask = hard_negative_mask(batch_feats.value, batch_vids, memory, k)
    count = int(mask.sum())
    if count == 0:
        return zero
    cols = np.flatnonzero(mask.any(axis=0))
    sims = dm.matmul(dm.transpose(batch_feats), dm.constant(feats[:, cols]))
    return dm.scale(dm.masked_sum(dm.softplus(sims), mask[:, cols]), 1.0 / count)
