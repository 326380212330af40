"""Momentum key encoder and the labeled FIFO key queue."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams

UNIT_TOL = 1e-9


class QueueContractError(ValueError):
    pass


def momentum_update(key: EncoderParams, query: EncoderParams, m: float) -> EncoderParams:
    """Return ``m * key + (1 - m) * query`` parameter-wise."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    kd, qd = key.as_dict(), query.as_dict()
    out = {}
    for name, k in kd.items():
        if k.shape != qd[name].shape:
            raise ValueError(f"{name}: key shape {k.shape} != query shape {qd[name].shape}")
        out[name] = m * k + (1.0 - m) * qd[name]
    return EncoderParams.from_dict(out)


@dataclass(frozen=True)
class QueueSnapshot:
    """Queue contents, oldest first."""

    z: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


class ContrastQueue:
    """Fixed-capacity ring of (unit key, label) pairs with insertion ids.

    Single writer; :meth:`snapshot` returns copies that stay valid after
    further pushes.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise QueueContractError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self._z = np.zeros((capacity, dim))
        self._labels = np.zeros(capacity, dtype=np.int64)
        self._ids = np.zeros(capacity, dtype=np.int64)
        self._start = 0
        self._size = 0
        self.next_id = 0

    def __len__(self) -> int:
        return self._size

    def push(self, z, labels) -> "ContrastQueue":
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        n = len(labels)
        if z.shape != (n, self.dim):
            raise QueueContractError(f"expected keys of shape ({n}, {self.dim}), got {z.shape}")
        if n > self.capacity:
            raise QueueContractError(f"batch of {n} exceeds queue capacity {self.capacity}")
        norms = np.linalg.norm(z, axis=1)
        if n and np.max(np.abs(norms - 1.0)) > UNIT_TOL:
            raise QueueContractError("queue keys must be unit vectors")
        for i in range(n):
            slot = (self._start + self._size) % self.capacity
            if self._size == self.capacity:
                self._start = (self._start + 1) % self.capacity
            else:
                self._size += 1
            self._z[slot] = z[i]
            self._labels[slot] = labels[i]
            self._ids[slot] = self.next_id
            self.next_id += 1
        return self

    def snapshot(self) -> QueueSnapshot:
        idx = (self._start + np.arange(self._size)) % self.capacity
        return QueueSnapshot(self._z[idx], self._labels[idx], self._ids[idx])


def queue_push(queue: ContrastQueue, z, labels) -> ContrastQueue:
    return queue.push(z, labels)


def partition_by_label(snapshot: QueueSnapshot, label: int) -> tuple[np.ndarray, np.ndarray]:
    """Positions of same-label and other-label entries, each in queue order."""
    same = snapshot.labels == label
    return np.flatnonzero(same), np.flatnonzero(~same)
