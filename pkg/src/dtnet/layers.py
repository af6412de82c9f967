"""Composite layers: down-sampling (FDS), global pooling, up-sampling (FUS), FC head."""

from __future__ import annotations

import math

import numpy as np

from . import geometry as G
from . import tensor as T
from .module import Module
from .tensor import Tensor

__all__ = [
    "Linear",
    "BatchNorm",
    "SharedMLP",
    "FdsLayer",
    "GlobalPoolLayer",
    "FusLayer",
    "FcHead",
    "fds_forward",
    "global_pool_stage",
    "fus_forward",
    "fc_head_forward",
]


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(c_in)
        dtype = T.get_default_dtype()
        self.W = Tensor(rng.uniform(-bound, bound, (c_in, c_out)).astype(dtype), requires_grad=True)
        self.b = Tensor(rng.uniform(-bound, bound, c_out).astype(dtype), requires_grad=True) if bias else None

    def forward(self, x) -> Tensor:
        return T.linear(x, self.W, self.b)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        dtype = T.get_default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x) -> Tensor:
        return T.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class SharedMLP(Module):
    """Pointwise linear -> batchnorm -> ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        # the bias is absorbed by batchnorm's shift
        self.linear = Linear(c_in, c_out, rng, bias=False)
        self.bn = BatchNorm(c_out)

    def forward(self, x) -> Tensor:
        return T.relu(self.bn(self.linear(x)))


class FdsLayer(Module):
    """Farthest-point sampling, ball grouping, shared MLP and max pooling."""

    def __init__(self, n_samples: int, radius: float, max_neighbors: int, c_in: int, c_out: int, rng):
        super().__init__()
        if radius <= 0 or max_neighbors < 1 or n_samples < 1:
            raise ValueError("FDS needs n_samples >= 1, radius > 0, max_neighbors >= 1")
        self.n_samples = n_samples
        self.radius = radius
        self.max_neighbors = max_neighbors
        self.c_in = c_in
        self.c_out = c_out
        self.mlp = SharedMLP(c_in + 3, c_out, rng)

    def forward(self, coords, feats):
        return fds_forward(coords, feats, self)


def fds_forward(coords, feats, layer: FdsLayer) -> tuple[np.ndarray, Tensor]:
    """Returns the sampled center coordinates and their aggregated features."""
    coords = np.asarray(coords)
    N = coords.shape[-2]
    if layer.n_samples > N:
        raise G.CountError(f"FDS wants {layer.n_samples} centers from {N} points")
    centers_idx = G.farthest_point_sample(coords, layer.n_samples)
    centers = np.take_along_axis(coords, centers_idx[..., None], axis=-2)
    nb = G.ball_query(centers, coords, layer.radius, layer.max_neighbors)
    return centers, G.group_and_reduce(nb, feats, coords, centers, layer.mlp)


class GlobalPoolLayer(Module):
    """One group holding every point, centered on the centroid."""

    def __init__(self, c_in: int, c_out: int, rng):
        super().__init__()
        self.c_in = c_in
        self.c_out = c_out
        self.mlp = SharedMLP(c_in + 3, c_out, rng)

    def forward(self, coords, feats):
        return global_pool_stage(coords, feats, self)


def global_pool_stage(coords, feats, layer: GlobalPoolLayer) -> tuple[np.ndarray, Tensor]:
    coords = np.asarray(coords, dtype=np.float64)
    N = coords.shape[-2]
    centroid = coords.mean(axis=-2, keepdims=True)
    idx = np.broadcast_to(np.arange(N), coords.shape[:-2] + (1, N))
    nb = G.NeighborList(np.ascontiguousarray(idx))
    return centroid, G.group_and_reduce(nb, feats, coords, centroid, layer.mlp)


class FusLayer(Module):
    """kNN interpolation onto the finer level, skip concat, shared MLP."""

    def __init__(self, c_skip: int, c_coarse: int, c_out: int, rng, k: int = 3):
        super().__init__()
        self.k = k
        self.c_skip = c_skip
        self.c_coarse = c_coarse
        self.c_out = c_out
        self.mlp = SharedMLP(c_skip + c_coarse, c_out, rng)

    def forward(self, fine_coords, skip_feats, coarse_coords, coarse_feats):
        return fus_forward(fine_coords, skip_feats, coarse_coords, coarse_feats, self)


def fus_forward(fine_coords, skip_feats, coarse_coords, coarse_feats, layer: FusLayer) -> Tensor:
    nc = np.asarray(coarse_coords).shape[-2]
    if nc < layer.k:
        raise G.CountError(f"FUS interpolates from {layer.k} neighbors but the coarse level has {nc}")
    up = G.interpolate_features(fine_coords, coarse_coords, coarse_feats, k=layer.k)
    x = up if skip_feats is None else T.concat_lastdim(T.as_tensor(skip_feats), up)
    return layer.mlp(x)


class FcHead(Module):
    """``Linear+BN+ReLU(+dropout)`` stages, then a bare linear to the logits."""

    def __init__(self, c_in: int, widths: list[int], n_classes: int, rng, dropout: float = 0.4):
        super().__init__()
        self.stages = []
        c = c_in
        for w in widths:
            self.stages.append(SharedMLP(c, w, rng))
            c = w
        self.out = Linear(c, n_classes, rng)
        self.dropout = dropout
        self.n_classes = n_classes

    def forward(self, x, rng=None):
        return fc_head_forward(x, self, rng)


def fc_head_forward(x, head: FcHead, rng: np.random.Generator | None = None) -> Tensor:
    x = T.as_tensor(x)
    for stage in head.stages:
        x = stage(x)
        if head.training and head.dropout > 0:
            x = T.dropout(x, head.dropout, rng if rng is not None else np.random.default_rng())
    return head.out(x)
