# %% [markdown]
# # Reverse-mode autodiff on numpy
#
# Every operation in `dtnet.tensor` records its inputs and a closure for the
# adjoint. Calling `backward` on a scalar walks that record in reverse and
# leaves gradients on the leaves.

# %%
import numpy as np

from dtnet import tensor as T
from dtnet.tensor import Tensor

rng = np.random.default_rng(0)

# %% [markdown]
# A two-layer computation: `sum(relu(x @ W) @ v)`.

# %%
with T.precision(np.float64):
    x = Tensor(rng.normal(size=(4, 3)))
    W = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    v = Tensor(rng.normal(size=(5, 1)), requires_grad=True)
    loss = T.sum(T.matmul(T.relu(T.matmul(x, W)), v))

print("recorded ops:", T.Tape.of(loss).ops())
T.backward(loss)
print("dL/dv =", v.grad.ravel())

# %% [markdown]
# The adjoint for `v` is just the column sums of `relu(x @ W)`; check it by hand.

# %%
hidden = np.maximum(x.data @ W.data, 0)
print("by hand =", hidden.sum(axis=0))

# %% [markdown]
# Graphs are single use. A second `backward` on the same loss is refused
# instead of silently double-counting.

# %%
try:
    T.backward(loss)
except T.GraphConsumedError as exc:
    print("second backward:", exc)

# %% [markdown]
# Finite differences agree with the tape for batchnorm, which is the most
# involved adjoint in the engine.

# %%
with T.precision(np.float64):
    xb = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    gamma = Tensor(np.ones(3), requires_grad=True)
    beta = Tensor(np.zeros(3), requires_grad=True)
    weights = rng.normal(size=(6, 3))

    def f():
        out = T.batchnorm(xb, gamma, beta, np.zeros(3), np.ones(3), training=True)
        return T.sum(T.matmul(T.reshape(out, (6, 1, 3)), Tensor(weights.reshape(6, 3, 1))))

    T.backward(f())
    h = 1e-5
    numeric = np.zeros_like(xb.data)
    for idx in np.ndindex(xb.shape):
        old = xb.data[idx]
        xb.data[idx] = old + h
        up = f().item()
        xb.data[idx] = old - h
        down = f().item()
        xb.data[idx] = old
        numeric[idx] = (up - down) / (2 * h)

print("max |tape - numeric| =", np.abs(xb.grad - numeric).max())
