from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np


@dataclass(frozen=True, eq=False)
class SparseVector:
    """Strictly increasing term ids paired with strictly positive weights."""

    ids: np.ndarray
    weights: np.ndarray
    dim: int

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if ids.shape != weights.shape:
            raise ValueError("ids and weights differ in length")
        if ids.size:
            if np.any(np.diff(ids) <= 0):
                raise ValueError("term ids must be strictly increasing")
            if ids[0] < 0 or ids[-1] >= self.dim:
                raise ValueError("term id out of range")
            if not np.all(weights > 0):
                raise ValueError("weights must be strictly positive")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]] | Mapping[int, float], dim: int) -> "SparseVector":
        items = sorted(pairs.items() if isinstance(pairs, Mapping) else pairs)
        ids = [t for t, _ in items]
        weights = [w for _, w in items]
        return cls(np.array(ids, dtype=np.int64), np.array(weights, dtype=np.float64), dim)

    @classmethod
    def empty(cls, dim: int) -> "SparseVector":
        return cls(np.zeros(0, np.int64), np.zeros(0), dim)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.ids.tolist(), self.weights.tolist()))

    @property
    def nnz(self) -> int:
        return int(self.ids.size)

    def support(self) -> set[int]:
        return set(self.ids.tolist())

    def as_dict(self) -> dict[int, float]:
        return dict(self.entries)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.ids] = self.weights
        return out

    def scale(self, alpha: float) -> "SparseVector":
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        return SparseVector(self.ids, self.weights * alpha, self.dim)

    def dot(self, other: "SparseVector") -> float:
        common, ia, ib = np.intersect1d(self.ids, other.ids, assume_unique=True, return_indices=True)
        if common.size == 0:
            return 0.0
        return float(np.dot(self.weights[ia], other.weights[ib]))

    def __eq__(self, other):
        if not isinstance(other, SparseVector):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.weights, other.weights)
        )

    def __repr__(self):
        return f"SparseVector({self.entries}, dim={self.dim})"
