"""Exact radius and nearest-neighbour queries over 3D points.

A cKDTree proposes candidates; every candidate is then re-ranked with the
canonical squared distance ``(dx*dx + dy*dy) + dz*dz`` and ties are broken by
the smaller point index. Results therefore agree bit for bit with a linear
scan that uses the same distance expression, regardless of how the tree
orders near-equal distances internally.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

# Relative slack added to tree query radii; candidates are re-filtered exactly.
_SLACK = 1e-9


def squared_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)
    return (d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]) + d[..., 2] * d[..., 2]


def _inflate(r):
    return r * (1.0 + _SLACK) + 1e-12


class SpatialIndex:
    """Read-only index over a fixed (n, 3) coordinate array."""

    def __init__(self, xyz: np.ndarray, workers: int = 1):
        xyz = np.ascontiguousarray(xyz, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3 or len(xyz) == 0:
            raise ValueError("spatial index needs a non-empty (n, 3) array")
        self.xyz = xyz
        self.workers = workers
        self._tree = cKDTree(xyz)

    def __len__(self) -> int:
        return len(self.xyz)

    def radius_query(self, point, r: float) -> np.ndarray:
        """Indices of all points with distance <= r, ascending by index."""
        point = np.asarray(point, dtype=np.float64)
        cand = np.asarray(self._tree.query_ball_point(point, _inflate(r)), dtype=np.int64)
        cand.sort()
        return cand[squared_distance(point, self.xyz[cand]) <= r * r]

    def knn(self, point, k: int):
        """The k nearest points as (indices, distances), ordered by (distance, index)."""
        idx, d2 = self._knn_exact(np.asarray(point, dtype=np.float64)[None, :], k, exclude=None)
        return idx[0], np.sqrt(d2[0])

    def knn_many(self, points: np.ndarray, k: int, exclude: np.ndarray | None = None):
        """Vectorised k-NN. ``exclude[i]`` (an index into this cloud) is skipped for query i."""
        return self._knn_exact(np.asarray(points, dtype=np.float64), k, exclude)

    def _knn_exact(self, points, k, exclude):
        n = len(self.xyz)
        need = k + (exclude is not None)
        if need > n:
            raise ValueError(f"asked for {k} neighbours but only {n - (exclude is not None)} available")
        kq = min(n, need + 3)
        _, cand = self._tree.query(points, k=kq, workers=self.workers)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(points), kq)
        d2 = squared_distance(points[:, None, :], self.xyz[cand])
        if exclude is not None:
            d2 = np.where(cand == np.asarray(exclude)[:, None], np.inf, d2)
        order = np.lexsort((cand, d2), axis=-1)
        cand = np.take_along_axis(cand, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        # A tie reaching the last retrieved slot may hide an unretrieved point with a
        # smaller index (or one the tree ranked differently by an ulp): redo exactly.
        if kq < n:
            boundary = d2[:, k - 1] >= d2[:, kq - 1 - (exclude is not None)] * (1.0 - 1e-12)
            for i in np.flatnonzero(boundary):
                ex = None if exclude is None else exclude[i]
                cand[i, :k], d2[i, :k] = self._knn_by_ball(points[i], k, d2[i, k - 1], ex)
        return cand[:, :k].copy(), d2[:, :k].copy()

    def _knn_by_ball(self, point, k, d2_kth, exclude):
        idx = np.asarray(self._tree.query_ball_point(point, _inflate(np.sqrt(d2_kth))), dtype=np.int64)
        if exclude is not None:
            idx = idx[idx != exclude]
        d2 = squared_distance(point, self.xyz[idx])
        order = np.lexsort((idx, d2))[:k]
        return idx[order], d2[order]

    def nearest_within(self, points: np.ndarray, r: float):
        """Nearest point within distance r for each query, or -1 when none exists.

        Returns (indices, squared distances); ties go to the smaller index.
        """
        points = np.asarray(points, dtype=np.float64)
        m = len(points)
        out = np.full(m, -1, dtype=np.int64)
        out_d2 = np.full(m, np.inf)
        if m == 0:
            return out, out_d2
        kq = min(2, len(self.xyz))
        _, cand = self._tree.query(points, k=kq, distance_upper_bound=_inflate(r), workers=self.workers)
        cand = np.asarray(cand, dtype=np.int64).reshape(m, kq)
        n = len(self.xyz)
        valid = cand < n
        safe = np.where(valid, cand, 0)
        d2 = np.where(valid, squared_distance(points[:, None, :], self.xyz[safe]), np.inf)
        first = d2[:, 0]
        ambiguous = np.zeros(m, dtype=bool)
        if kq == 2:
            ambiguous = valid[:, 1] & (d2[:, 1] <= first * (1.0 + 1e-12))
        hit = valid[:, 0] & (first <= r * r) & ~ambiguous
        out[hit] = cand[hit, 0]
        out_d2[hit] = first[hit]
        for i in np.flatnonzero(ambiguous):
            bound = min(np.sqrt(min(d2[i, 0], d2[i, 1])), r)
            idx = np.asarray(self._tree.query_ball_point(points[i], _inflate(bound)), dtype=np.int64)
            dd = squared_distance(points[i], self.xyz[idx])
            keep = dd <= r * r
            if keep.any():
                idx, dd = idx[keep], dd[keep]
                j = np.lexsort((idx, dd))[0]
                out[i], out_d2[i] = idx[j], dd[j]
        return out, out_d2


def build_spatial_index(cloud, workers: int = 1) -> SpatialIndex:
    xyz = cloud.xyz if hasattr(cloud, "xyz") else cloud
    return SpatialIndex(xyz, workers=workers)
