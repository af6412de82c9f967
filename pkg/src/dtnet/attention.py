"""Point-wise and channel-wise multi-head self-attention and their sum.

For a feature map ``F[N, C]`` split into ``M`` heads of width ``d = C / M``:

* point-wise:   ``S = softmax(Q K^T / sqrt(d))`` is ``[N, N]``, head output ``S V``
* channel-wise: ``U = softmax(q^T k / sqrt(d))`` is ``[d, d]``, head output ``v U``

Each branch concatenates its heads along channels and adds ``F`` back. The
dual block returns the elementwise sum of both branches.

The per-head projections ``W^m`` of shape ``[C, d]`` are stored side by side as
one ``[C, C]`` matrix (head ``m`` owns columns ``m*d:(m+1)*d``), which lets all
heads run in one batched matmul. ``F @ [W^1 ... W^M]`` equals
``[F W^1 ... F W^M]`` exactly, so nothing about the per-head math changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .module import Module
from .tensor import Tensor

__all__ = [
    "AttentionConfig",
    "HeadWeights",
    "DpctLayer",
    "point_wise_attention",
    "channel_wise_attention",
    "dpct_forward",
]


@dataclass(frozen=True)
class AttentionConfig:
    C: int
    M: int

    def __post_init__(self):
        if self.M < 1 or self.C < 1 or self.C % self.M:
            raise ValueError(f"channels {self.C} must split evenly into {self.M} heads")

    @property
    def d_c(self) -> int:
        return self.C // self.M


class HeadWeights(Module):
    """Query/key/value projections for all heads of one branch."""

    def __init__(self, config: AttentionConfig, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.config = config
        bound = math.sqrt(1.0 / config.C)
        dtype = T.get_default_dtype()
        shape = (config.C, config.C)
        self.W_Q = Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)
        self.W_K = Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)
        self.W_V = Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)

    def head(self, m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Views of head ``m``'s ``[C, d_c]`` query, key and value matrices."""
        d = self.config.d_c
        cols = slice(m * d, (m + 1) * d)
        return self.W_Q.data[:, cols], self.W_K.data[:, cols], self.W_V.data[:, cols]

    def set_head(self, m: int, W_Q=None, W_K=None, W_V=None) -> None:
        d = self.config.d_c
        cols = slice(m * d, (m + 1) * d)
        for param, value in ((self.W_Q, W_Q), (self.W_K, W_K), (self.W_V, W_V)):
            if value is not None:
                param.data[:, cols] = value


def _split_heads(x: Tensor, M: int) -> Tensor:
    # [..., N, C] -> [..., M, N, d]
    *lead, N, C = x.shape
    x = T.reshape(x, (*lead, N, M, C // M))
    k = len(lead)
    axes = list(range(k)) + [k + 1, k, k + 2]
    return T.permute(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    # [..., M, N, d] -> [..., N, C]
    *lead, M, N, d = x.shape
    k = len(lead)
    axes = list(range(k)) + [k + 1, k, k + 2]
    return T.reshape(T.permute(x, axes), (*lead, N, M * d))


def _check(F: Tensor, heads: HeadWeights, config: AttentionConfig) -> AttentionConfig:
    config = config if config is not None else heads.config
    if F.ndim < 2 or F.shape[-1] != config.C:
        raise T.DimensionError(f"features {F.shape} do not have {config.C} channels")
    return config


def _projections(F: Tensor, heads: HeadWeights, M: int):
    return (
        _split_heads(T.linear(F, heads.W_Q), M),
        _split_heads(T.linear(F, heads.W_K), M),
        _split_heads(T.linear(F, heads.W_V), M),
    )


def point_attention_maps(F, heads: HeadWeights, config: AttentionConfig | None = None) -> Tensor:
    """``S`` for every head, shape ``[..., M, N, N]``; rows sum to one."""
    F = T.as_tensor(F)
    config = _check(F, heads, config)
    Q, K, _ = _projections(F, heads, config.M)
    return T.softmax_lastdim(T.scale(T.matmul(Q, T.transpose_last2(K)), 1.0 / math.sqrt(config.d_c)))


def channel_attention_maps(F, heads: HeadWeights, config: AttentionConfig | None = None) -> Tensor:
    """``U`` for every head, shape ``[..., M, d, d]``; rows sum to one."""
    F = T.as_tensor(F)
    config = _check(F, heads, config)
    q, k, _ = _projections(F, heads, config.M)
    return T.softmax_lastdim(T.scale(T.matmul(T.transpose_last2(q), k), 1.0 / math.sqrt(config.d_c)))


def point_wise_attention(F, heads: HeadWeights, config: AttentionConfig | None = None) -> Tensor:
    F = T.as_tensor(F)
    config = _check(F, heads, config)
    Q, K, V = _projections(F, heads, config.M)
    # scaling Q ([N, d]) is cheaper than scaling the [N, N] logits
    S = T.softmax_lastdim(T.matmul(T.scale(Q, 1.0 / math.sqrt(config.d_c)), T.transpose_last2(K)))
    return T.add(_merge_heads(T.matmul(S, V)), F)


def channel_wise_attention(F, heads: HeadWeights, config: AttentionConfig | None = None) -> Tensor:
    F = T.as_tensor(F)
    config = _check(F, heads, config)
    q, k, v = _projections(F, heads, config.M)
    U = T.softmax_lastdim(T.matmul(T.transpose_last2(T.scale(q, 1.0 / math.sqrt(config.d_c))), k))
    return T.add(_merge_heads(T.matmul(v, U)), F)


class DpctLayer(Module):
    """Dual attention block; either branch can be switched off for ablations.

    With both branches off the layer is the identity.
    """

    def __init__(
        self,
        C: int,
        M: int,
        rng: np.random.Generator | None = None,
        point_wise: bool = True,
        channel_wise: bool = True,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.config = AttentionConfig(C, M)
        self.pw_heads = HeadWeights(self.config, rng) if point_wise else None
        self.cw_heads = HeadWeights(self.config, rng) if channel_wise else None

    def forward(self, F) -> Tensor:
        return dpct_forward(F, self)


def dpct_forward(F, layer: DpctLayer) -> Tensor:
    F = T.as_tensor(F)
    outs = []
    if layer.pw_heads is not None:
        outs.append(point_wise_attention(F, layer.pw_heads, layer.config))
    if layer.cw_heads is not None:
        outs.append(channel_wise_attention(F, layer.cw_heads, layer.config))
    if not outs:
        return F
    return outs[0] if len(outs) == 1 else T.add(outs[0], outs[1])
