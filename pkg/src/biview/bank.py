"""FIFO memory bank of unit-norm latent vectors.

One bank per training run is shared by both views: after each weight update
the momentum latents of the batch are enqueued (transverse before
longitudinal per patient) and the oldest entries fall out. `negatives()`
returns an immutable snapshot in insertion order, so a loss computed from it
never observes later enqueues.
"""

from __future__ import annotations

import numpy as np

from .autograd import DTYPE
from .errors import NumericalError, ShapeError


class MemoryBank:
    """Ring buffer of capacity K over D-dim unit vectors."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ShapeError(f"MemoryBank: capacity must be >= 1, got {capacity}")
        if dim < 1:
            raise ShapeError(f"MemoryBank: dim must be >= 1, got {dim}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._buf = np.zeros((self.capacity, self.dim), dtype=DTYPE)
        self._count = 0   # occupancy
        self._next = 0    # ring write position

    @property
    def occupancy(self) -> int:
        return self._count

    def __len__(self) -> int:
        return self._count

    def enqueue_batch(self, vectors) -> "MemoryBank":
        """Append vectors in order, evicting oldest entries beyond capacity.

        Rejects batches larger than the capacity (they could never coexist)
        and vectors whose norm is not 1 +- 1e-4.
        """
        arr = np.asarray(vectors, dtype=DTYPE)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != self.dim:
            raise ShapeError(f"enqueue_batch: vectors {arr.shape} do not match bank dim ({self.dim},)")
        m = arr.shape[0]
        if m > self.capacity:
            raise ShapeError(f"enqueue_batch: batch of {m} exceeds bank capacity {self.capacity}")
        if m == 0:
            return self
        norms = np.linalg.norm(arr, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-4)
        if bad.size:
            i = int(bad[0])
            raise NumericalError(f"enqueue_batch: vector {i} has norm {float(norms[i]):.6f}, expected 1 +- 1e-4")
        first = min(m, self.capacity - self._next)
        self._buf[self._next:self._next + first] = arr[:first]
        if first < m:
            self._buf[:m - first] = arr[first:]
        self._next = (self._next + m) % self.capacity
        self._count = min(self._count + m, self.capacity)
        return self

    def negatives(self) -> np.ndarray:
        """Snapshot of current contents, oldest first; safe against later enqueues."""
        if self._count < self.capacity:
            return self._buf[:self._count].copy()
        return np.concatenate([self._buf[self._next:], self._buf[:self._next]], axis=0)

    # -- checkpoint plumbing --------------------------------------------------
    def to_array(self) -> np.ndarray:
        """Contents oldest-first, shape (occupancy, dim); used by checkpoints."""
        return self.negatives()

    @classmethod
    def from_array(cls, capacity: int, dim: int, contents: np.ndarray) -> "MemoryBank":
        bank = cls(capacity, dim)
        contents = np.asarray(contents, dtype=DTYPE)
        if contents.size:
            if contents.shape[0] > capacity:
                # an older, larger-capacity bank: keep the newest entries
                contents = contents[-capacity:]
            bank.enqueue_batch(contents)
        return bank
