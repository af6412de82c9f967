"""Dense tensors with reverse-mode automatic differentiation.

Every op in this module builds its output eagerly with numpy and, when any
input requires a gradient, attaches a closure that maps the output adjoint to
input adjoints. Each recorded op receives a monotonically increasing sequence
number, so the execution order of a graph can be recovered exactly; ``backward``
replays the adjoints in reverse of that order.

Shapes follow one rule: leading batch dimensions may broadcast in ``matmul``
(for example ``[B, N, C] @ [C, D]``); every other binary op requires exactly
matching shapes.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Iterable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "RankError",
    "DegenerateBatchError",
    "GraphConsumedError",
    "NonFiniteError",
    "as_tensor",
    "backward",
    "precision",
    "get_default_dtype",
    "checked",
    "no_grad",
    "matmul",
    "softmax_lastdim",
    "linear",
    "batchnorm",
    "relu",
    "add",
    "concat_lastdim",
    "split_lastdim",
    "transpose_last2",
    "permute",
    "reshape",
    "scale",
    "sum",
    "mean",
    "max_axis",
    "gather_rows",
    "dropout",
    "dropout_rows",
    "cross_entropy",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class RankError(ValueError):
    """A tensor has the wrong rank for the requested operation."""


class DegenerateBatchError(ValueError):
    """Batch statistics were requested from a single row."""


class GraphConsumedError(RuntimeError):
    """``backward`` was called twice on the same graph."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf while checked mode was on."""


_state = threading.local()
_seq = itertools.count()


def _get(name, default):
    return getattr(_state, name, default)


def get_default_dtype() -> np.dtype:
    return np.dtype(_get("dtype", np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors (e.g. ``np.float64``)."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def checked(enabled: bool = True) -> Iterator[None]:
    """Raise :class:`NonFiniteError` as soon as any op produces NaN/Inf."""
    prev = _get("checked", False)
    _state.checked = enabled
    try:
        yield
    finally:
        _state.checked = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _get("grad_enabled", True)
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A numpy array that can take part in gradient recording.

    Leaves are created directly (``Tensor(array, requires_grad=True)``);
    interior nodes come out of the ops below and carry a backward closure.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_consumed", "op")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(get_default_dtype())
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = -1
        self._consumed = False
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return scale(self, float(other))
        return NotImplemented

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self) -> Tensor:
        return transpose_last2(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _get("checked", False) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out.op = op
    out.requires_grad = _get("grad_enabled", True) and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_seq)
    else:
        out._parents = ()
        out._backward = None
        out._seq = -1
    return out


class Tape:
    """The ops that produced a value, in the order they were executed."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def of(cls, root: Tensor) -> Tape:
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def ops(self) -> list[str]:
        return [t.op for t in self.nodes]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    The graph is released afterwards; a second call on the same ``loss`` raises
    :class:`GraphConsumedError`.
    """
    if loss.ndim != 0:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    tape = Tape.of(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._backward is None:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
    for node in tape.nodes:
        node._backward = None
        node._parents = ()
        node._consumed = True


# ---------------------------------------------------------------------------
# ops


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out leading dims that were broadcast by matmul."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _same_shape(op: str, *xs: Tensor) -> None:
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise DimensionError(f"{op}: shapes differ {[x.shape for x in xs]}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise RankError("matmul operands need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: batch extents {a.shape} x {b.shape}") from exc

    def bw(g):
        ga = _reduce_to(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _reduce_to(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def softmax_lastdim(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: x {x.shape} vs W {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} vs W {W.shape}")
    x2 = x.data.reshape(-1, W.shape[0])
    out = x2 @ W.data
    if b is not None:
        out += b.data
    out = out.reshape(x.shape[:-1] + (W.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gW, gb

    parents = (x, W) if b is None else (x, W, b)
    return _make(out, parents, bw, "linear")


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over all leading dims of ``x[..., C]``.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate).
    """
    x = as_tensor(x)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batchnorm: gamma/beta {gamma.shape} for {C} channels")
    x2 = x.data.reshape(-1, C)
    n = x2.shape[0]
    if training:
        if n < 2:
            raise DegenerateBatchError("batchnorm in train mode needs at least 2 rows")
        mu = x2.mean(axis=0)
        var = x2.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x2 - mu) * inv
    out = (xhat * gamma.data + beta.data).astype(x.dtype, copy=False).reshape(x.shape)

    def bw(g):
        g2 = g.reshape(-1, C)
        gg = (g2 * xhat).sum(axis=0) if gamma.requires_grad else None
        gbeta = g2.sum(axis=0) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g2 * gamma.data
            if training:
                gx = inv / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
            else:
                gx = gxhat * inv
            gx = gx.astype(x.dtype, copy=False).reshape(x.shape)
        return gx, gg, gbeta

    return _make(out, (x, gamma, beta), bw, "batchnorm")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.dtype.type(c), (x,), lambda g: (g * c,), "scale")


def concat_lastdim(*xs: Tensor) -> Tensor:
    if len(xs) == 1 and isinstance(xs[0], (list, tuple)):
        xs = tuple(xs[0])
    xs = tuple(as_tensor(x) for x in xs)
    lead = {x.shape[:-1] for x in xs}
    if len(lead) != 1:
        raise DimensionError(f"concat_lastdim: leading shapes differ {[x.shape for x in xs]}")
    out = np.concatenate([x.data for x in xs], axis=-1)
    bounds = np.cumsum([0] + [x.shape[-1] for x in xs])

    def bw(g):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return _make(out, xs, bw, "concat")


def _slice_lastdim(x: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _make(x.data[..., start:stop].copy(), (x,), bw, "slice")


def split_lastdim(x: Tensor, sizes: Iterable[int]) -> list[Tensor]:
    x = as_tensor(x)
    sizes = list(sizes)
    if builtin_sum(sizes) != x.shape[-1]:
        raise DimensionError(f"split_lastdim: sizes {sizes} do not cover {x.shape[-1]}")
    out, start = [], 0
    for s in sizes:
        out.append(_slice_lastdim(x, start, start + s))
        start += s
    return out


def transpose_last2(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 2:
        raise RankError("transpose_last2 needs rank >= 2")
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "permute")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: {x.shape} -> {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


builtin_sum = sum


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def max_axis(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; the adjoint goes to the first maximal entry."""
    x = as_tensor(x)
    axis = axis % x.ndim
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (x,), bw, "max")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick rows of ``x[B, N, C]`` with ``idx[B, ...]`` -> ``[B, ..., C]``.

    An unbatched ``x[N, C]`` with ``idx[...]`` is accepted too.
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    ix = idx[None] if unbatched else idx
    if xd.ndim != 3 or ix.shape[0] != xd.shape[0]:
        raise DimensionError(f"gather_rows: x {x.shape} vs idx {idx.shape}")
    B, N, C = xd.shape
    if ix.size and (ix.min() < 0 or ix.max() >= N):
        raise IndexError("gather_rows: index out of range")
    flat = (ix.reshape(B, -1) + (np.arange(B) * N)[:, None]).ravel()
    out = xd.reshape(B * N, C)[flat].reshape(idx.shape + (C,))

    def bw(g):
        m = flat.size
        scatter = sp.csr_matrix((np.ones(m, dtype=g.dtype), (flat, np.arange(m))), shape=(B * N, m))
        return (np.asarray(scatter @ g.reshape(m, C)).reshape(x.shape),)

    return _make(out, (x,), bw, "gather")


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted elementwise dropout; identity when ``p == 0`` or not training."""
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def dropout_rows(x: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Zero whole rows (vectors along the last dim) with probability ``p``."""
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape[:-1] + (1,)) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout_rows")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``logits[..., K]`` against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    K = logits.shape[-1]
    z = logits.data.reshape(-1, K)
    lab = labels.ravel()
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = lab.size
    loss = np.asarray(-logp[np.arange(n), lab].mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), lab] -= 1.0
        return ((p * (g / n)).reshape(logits.shape),)

    return _make(loss, (logits,), bw, "cross_entropy")
