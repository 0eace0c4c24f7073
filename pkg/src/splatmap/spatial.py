"""Uniform hash grid over 3D points: exact fixed-radius and nearest queries.

Cell size must be >= the query radius so that scanning the 27-neighborhood
of the query cell is exhaustive. Exactness (vs. approximate trees) keeps the
dedup and correspondence paths brute-force verifiable.
"""

from __future__ import annotations

import numpy as np


class HashGrid3D:
    def __init__(self, cell_size: float):
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.cell_size = float(cell_size)
        self.cells: dict[tuple, list[int]] = {}
        self.points = np.zeros((0, 3), dtype=np.float64)

    def __len__(self) -> int:
        return len(self.points)

    def _key(self, p) -> tuple:
        return tuple(np.floor(np.asarray(p, dtype=np.float64) / self.cell_size).astype(np.int64))

    @classmethod
    def build(cls, points: np.ndarray, cell_size: float) -> "HashGrid3D":
        grid = cls(cell_size)
        grid.insert(points)
        return grid

    def insert(self, points: np.ndarray) -> None:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        base = len(self.points)
        keys = np.floor(points / self.cell_size).astype(np.int64)
        for i, k in enumerate(map(tuple, keys)):
            self.cells.setdefault(k, []).append(base + i)
        self.points = np.vstack([self.points, points]) if base else points.copy()

    def _neighborhood(self, p) -> np.ndarray:
        kx, ky, kz = self._key(p)
        idx: list[int] = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    idx.extend(self.cells.get((kx + dx, ky + dy, kz + dz), ()))
        return np.array(idx, dtype=np.int64)

    def any_within(self, p: np.ndarray, radius: float) -> bool:
        """True if any stored point lies within radius of p (radius <= cell_size)."""
        idx = self._neighborhood(p)
        if idx.size == 0:
            return False
        d2 = np.sum((self.points[idx] - np.asarray(p, dtype=np.float64)) ** 2, axis=1)
        return bool(np.any(d2 <= radius * radius))

    def nearest_within(self, p: np.ndarray, radius: float):
        """Index and distance of the nearest stored point within radius, or None.

        Exact for radius <= cell_size. Ties broken by lowest index.
        """
        idx = self._neighborhood(p)
        if idx.size == 0:
            return None
        idx = np.sort(idx)
        d2 = np.sum((self.points[idx] - np.asarray(p, dtype=np.float64)) ** 2, axis=1)
        j = int(np.argmin(d2))
        if d2[j] > radius * radius:
            return None
        return int(idx[j]), float(np.sqrt(d2[j]))

    def nearest_within_batch(self, queries: np.ndarray, radius: float) -> np.ndarray:
        """Nearest-index per query (-1 where none within radius)."""
        out = np.full(len(queries), -1, dtype=np.int64)
        for i, p in enumerate(np.asarray(queries, dtype=np.float64).reshape(-1, 3)):
            hit = self.nearest_within(p, radius)
            if hit is not None:
                out[i] = hit[0]
        return out
