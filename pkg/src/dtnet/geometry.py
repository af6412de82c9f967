"""Point-set geometry: sampling, neighborhoods and feature interpolation.

All kernels are brute force (O(Q*N) distance matrices). Coordinates are plain
arrays; they never need gradients. Every function takes either a single cloud
(``[N, 3]``) or a batch (``[B, N, 3]``) and returns results with the matching
leading shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "CountError",
    "PointCloud",
    "NeighborList",
    "square_distance",
    "farthest_point_sample",
    "ball_query",
    "knn",
    "interpolation_weights",
    "interpolate_features",
    "group_and_reduce",
]


class CountError(ValueError):
    """A requested sample or neighbor count exceeds what the cloud holds."""


@dataclass
class PointCloud:
    coords: np.ndarray
    features: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[0] < 1:
            raise ValueError(f"coords must be [N, D] with N >= 1, got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords must be finite")
        n = self.coords.shape[0]
        if self.features is not None:
            self.features = np.asarray(self.features)
            if self.features.shape[0] != n:
                raise ValueError("features must have one row per point")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ValueError("labels must have one entry per point")

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass
class NeighborList:
    """Per-query source indices, ``[..., Q, K]``; ``distances`` only for knn."""

    indices: np.ndarray
    distances: np.ndarray | None = None

    @property
    def num_queries(self) -> int:
        return self.indices.shape[-2]

    @property
    def k(self) -> int:
        return self.indices.shape[-1]


def _batched(*arrays):
    single = np.asarray(arrays[0]).ndim == 2
    out = [np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64) for a in arrays]
    if single:
        out = [a[None] for a in out]
    return single, out


def square_distance(queries: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """``[..., Q, N]`` squared Euclidean distances, computed from differences."""
    diff = queries[..., :, None, :] - sources[..., None, :, :]
    return np.einsum("...d,...d->...", diff, diff)


def farthest_point_sample(coords, n_samples: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min subset of ``n_samples`` indices starting at ``seed_index``.

    Ties go to the lowest index.
    """
    single, (xyz,) = _batched(coords)
    B, N, _ = xyz.shape
    if not 1 <= n_samples <= N:
        raise CountError(f"cannot sample {n_samples} of {N} points")
    if not 0 <= seed_index < N:
        raise IndexError(f"seed_index {seed_index} outside [0, {N})")
    rows = np.arange(B)
    picked = np.empty((B, n_samples), dtype=np.int64)
    nearest = np.full((B, N), np.inf)
    current = np.full(B, seed_index, dtype=np.int64)
    for i in range(n_samples):
        picked[:, i] = current
        d = ((xyz - xyz[rows, current][:, None, :]) ** 2).sum(-1)
        np.minimum(nearest, d, out=nearest)
        current = np.argmax(nearest, axis=1)
    return picked[0] if single else picked


def ball_query(queries, sources, radius: float, max_neighbors: int) -> NeighborList:
    """Up to ``max_neighbors`` sources strictly inside ``radius``, ascending.

    Short lists are padded with their first entry; a query with nothing in
    range gets its nearest source instead.
    """
    if radius <= 0 or max_neighbors < 1:
        raise ValueError("radius must be > 0 and max_neighbors >= 1")
    single, (q, s) = _batched(queries, sources)
    N = s.shape[1]
    d2 = square_distance(q, s)
    inside = d2 < radius * radius
    cand = np.where(inside, np.arange(N), N)
    K = min(max_neighbors, N)
    # smallest K candidate indices, ascending
    cand = np.sort(np.partition(cand, K - 1, axis=-1)[..., :K], axis=-1) if K < N else np.sort(cand, axis=-1)
    first = cand[..., :1]
    empty = first[..., 0] == N
    if np.any(empty):
        first = first.copy()
        first[empty, 0] = np.argmin(d2, axis=-1)[empty]
    cand = np.where(cand == N, first, cand)
    if max_neighbors > K:
        cand = np.concatenate([cand, np.repeat(first, max_neighbors - K, axis=-1)], axis=-1)
    return NeighborList(cand[0] if single else cand)


def knn(queries, sources, k: int) -> NeighborList:
    """The ``k`` nearest sources per query (ties to the lower index)."""
    single, (q, s) = _batched(queries, sources)
    N = s.shape[1]
    if not 1 <= k <= N:
        raise CountError(f"knn needs 1 <= k <= {N}, got {k}")
    d2 = square_distance(q, s)
    idx = np.argsort(d2, axis=-1, kind="stable")[..., :k]
    dist = np.sqrt(np.take_along_axis(d2, idx, axis=-1))
    if single:
        idx, dist = idx[0], dist[0]
    return NeighborList(idx, dist)


def interpolation_weights(queries, sources, k: int = 3, eps: float = 1e-8) -> np.ndarray:
    """Dense ``[..., Q, N]`` matrix of normalized inverse-squared-distance weights."""
    single, (q, s) = _batched(queries, sources)
    nb = knn(q, s, k)
    w = 1.0 / (nb.distances**2 + eps)
    w /= w.sum(axis=-1, keepdims=True)
    B, Q, _ = q.shape
    dense = np.zeros((B, Q, s.shape[1]))
    np.put_along_axis(dense, nb.indices, w, axis=-1)
    return dense[0] if single else dense


def interpolate_features(queries, sources, feats, k: int = 3, eps: float = 1e-8) -> Tensor:
    """Carry ``feats[..., N, C]`` from ``sources`` to ``queries`` by kNN averaging.

    Differentiable with respect to ``feats``.
    """
    feats = T.as_tensor(feats)
    w = interpolation_weights(queries, sources, k, eps).astype(feats.dtype)
    return T.matmul(Tensor(w), feats)


def group_and_reduce(
    neighbors: NeighborList,
    feats,
    coords,
    query_coords,
    mlp: Callable[[Tensor], Tensor] | None = None,
) -> Tensor:
    """Gather each query's neighbors, run ``mlp`` per neighbor, max over them.

    Each neighbor contributes ``[its features | its coords - query coords]``.
    ``feats`` may be ``None`` (relative coordinates only).
    """
    single, (xyz, qxyz) = _batched(coords, query_coords)
    idx = neighbors.indices[None] if single else neighbors.indices
    B, N, _ = xyz.shape
    if idx.shape[:2] != qxyz.shape[:2]:
        raise T.DimensionError(f"neighbor list {idx.shape} does not match queries {qxyz.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= N):
        raise IndexError("neighbor index out of range")
    rows = np.arange(B)[:, None, None]
    rel = xyz[rows, idx] - qxyz[:, :, None, :]
    if feats is None:
        dtype = T.get_default_dtype()
        grouped = Tensor(rel.astype(dtype))
    else:
        feats = T.as_tensor(feats)
        f = T.reshape(feats, (1,) + feats.shape) if single else feats
        g = T.gather_rows(f, idx)
        grouped = T.concat_lastdim(g, Tensor(rel.astype(g.dtype)))
    if mlp is not None:
        grouped = mlp(grouped)
    out = T.max_axis(grouped, axis=-2)
    if single:
        out = T.reshape(out, out.shape[1:])
    return out
