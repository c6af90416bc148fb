"""Exact k-nearest-neighbour queries with index tie-breaking.

A scipy kd-tree proposes candidates; distances are then recomputed as
``sum((p - q)**2)`` and ordered by (squared distance, index).  When the
candidate list cannot certify that no point outside it ties or beats the
k-th distance, the row falls back to a ball query, so results always equal a
sorted brute-force scan.
"""
from __future__ import annotations

import os

import numpy as np
from scipy.spatial import cKDTree

_PAD = 4
_MARGIN = 1e-9


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("REORG_THREADS", "1")))
    except ValueError:
        return 1


def _sort_rows(cand: np.ndarray, d2: np.ndarray):
    """Order each row by (d2, index); lexsort only where equal distances occur."""
    order = np.argsort(d2, axis=1, kind="stable")
    cand = np.take_along_axis(cand, order, 1)
    d2 = np.take_along_axis(d2, order, 1)
    tied = np.flatnonzero((d2[:, 1:] == d2[:, :-1]).any(axis=1))
    if len(tied):
        o = np.lexsort((cand[tied], d2[tied]), axis=-1)
        cand[tied] = np.take_along_axis(cand[tied], o, 1)
        d2[tied] = np.take_along_axis(d2[tied], o, 1)
    return cand, d2


class PointIndex:
    """Immutable snapshot of points (any dimension) plus a balanced kd-tree."""

    def __init__(self, points):
        pts = np.array(points, dtype=np.float64)
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError("PointIndex needs a non-empty (M, dim) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("PointIndex coordinates must be finite")
        pts.flags.writeable = False
        self.points = pts
        self._tree = cKDTree(pts, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def _d2(self, queries: np.ndarray, cand: np.ndarray) -> np.ndarray:
        return ((self.points[cand] - queries[:, None, :]) ** 2).sum(-1)

    def knn_batch(self, queries, k: int, exclude=None, workers: int | None = None):
        """k nearest neighbours of every query row.

        ``exclude`` optionally gives, per query, a point index to omit (the
        query's own index when querying member points).  Returns ``(idx, d2)``
        of shape (Q, k), sorted by (squared distance, index).
        """
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if q.shape[1] != self.dim:
            raise ValueError(f"query dimension {q.shape[1]} != index dimension {self.dim}")
        m = len(self.points)
        ex = None if exclude is None else np.broadcast_to(np.asarray(exclude, dtype=np.int64), (len(q),))
        avail = m - (1 if ex is not None else 0)
        if not 1 <= k <= avail:
            raise ValueError(f"k={k} out of range: 1 <= k <= {avail}")
        if len(q) == 0:
            return np.zeros((0, k), np.int64), np.zeros((0, k))
        workers = default_workers() if workers is None else workers

        kk = min(k + (ex is not None) + _PAD, m)
        _, cand = self._tree.query(q, kk, workers=workers)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(q), kk)
        d2 = self._d2(q, cand)
        if ex is not None:
            d2 = np.where(cand == ex[:, None], np.inf, d2)
        cand, d2 = _sort_rows(cand, d2)
        idx, dist = cand[:, :k].copy(), d2[:, :k].copy()

        if kk < m:
            kth = dist[:, -1]
            finite = np.where(np.isfinite(d2), d2, -np.inf)
            far = finite.max(axis=1)
            unsure = ~(kth < far * (1.0 - _MARGIN))
            for r in np.flatnonzero(unsure):
                radius = np.sqrt(kth[r]) * (1.0 + _MARGIN) + 1e-300
                ball = np.asarray(self._tree.query_ball_point(q[r], radius), dtype=np.int64)
                bd2 = ((self.points[ball] - q[r]) ** 2).sum(-1)
                if ex is not None:
                    keep = ball != ex[r]
                    ball, bd2 = ball[keep], bd2[keep]
                o = np.lexsort((ball, bd2))[:k]
                idx[r], dist[r] = ball[o], bd2[o]
        return idx, dist

    def knn(self, query, k: int, exclude: int | None = None):
        """Single-query form: ordered list of (index, squared distance)."""
        idx, d2 = self.knn_batch(np.asarray(query, dtype=np.float64)[None], k,
                                 None if exclude is None else [exclude])
        return [(int(i), float(d)) for i, d in zip(idx[0], d2[0])]

    def nearest_batch(self, queries, workers: int | None = None) -> np.ndarray:
        return self.knn_batch(queries, 1, workers=workers)[0][:, 0]

    def nearest(self, query) -> int:
        return int(self.nearest_batch(np.asarray(query, dtype=np.float64)[None])[0])

    def within(self, query, radius: float) -> np.ndarray:
        """Indices with Euclidean distance <= radius, ascending."""
        out = self._tree.query_ball_point(np.asarray(query, dtype=np.float64), radius)
        return np.sort(np.asarray(out, dtype=np.int64))


def build(points) -> PointIndex:
    return PointIndex(points)
