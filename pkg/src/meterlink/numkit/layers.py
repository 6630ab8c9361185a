"""Layer-level building blocks composed from tensor primitives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "sigmoid")


def linear(x, W, bias=None) -> Tensor:
    """``x @ W + bias`` with ``W`` of shape (in, out); ``x`` may carry leading batch axes."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight {W.shape}")
    if x.ndim == 1:
        x = x.reshape(1, -1)
    y = T.matmul(x, W)
    return y if bias is None else y + bias


def activation(x, kind: str) -> Tensor:
    if kind == "relu":
        return T.relu(x)
    if kind == "leaky_relu":
        return T.leaky_relu(x, 0.01)
    if kind == "tanh":
        return T.tanh(x)
    if kind == "sigmoid":
        return T.sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean norm; zero vectors are an error."""
    x = as_tensor(x)
    sq = T.tsum(x * x, axis=axis, keepdims=True)
    if np.any(sq.data == 0):
        raise ValueError("cannot normalize a zero vector")
    return x / T.sqrt(sq)


def euclidean(a, b, eps: float = 1e-12) -> Tensor:
    """Row-wise Euclidean distance; ``eps`` keeps the gradient finite at zero distance."""
    d = as_tensor(a) - as_tensor(b)
    return T.sqrt(T.tsum(d * d, axis=-1) + eps)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, **kw) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), **kw)


def batchnorm1d(x, gamma, beta, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel normalization of ``x`` (N, C, L).

    Train mode uses biased batch statistics and folds the unbiased variance
    into the running estimates; eval mode uses the running estimates.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"batchnorm1d expects (N, C, L), got {x.shape}")
    g = as_tensor(gamma).reshape(1, -1, 1)
    b = as_tensor(beta).reshape(1, -1, 1)
    if not train:
        rm = state.running_mean.reshape(1, -1, 1)
        rs = np.sqrt(state.running_var.reshape(1, -1, 1) + state.eps)
        return (x - rm) / rs * g + b
    n = x.shape[0] * x.shape[2]
    if x.shape[0] < 2:
        raise ValueError("batchnorm1d in train mode needs a batch of at least 2 samples")
    mean = x.data.mean(axis=(0, 2), keepdims=True)
    centred = x.data - mean
    var = (centred * centred).mean(axis=(0, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = centred * inv
    gd, bd = g.data, b.data

    def back(grad):
        dxhat = grad * gd
        s1 = dxhat.sum(axis=(0, 2), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
        dx = inv * (dxhat - s1 / n - xhat * s2 / n)
        return dx, (grad * xhat).sum(axis=(0, 2), keepdims=True), grad.sum(axis=(0, 2), keepdims=True)

    out = T._make(xhat * gd + bd, (x, g, b), back)
    m = state.momentum
    state.running_mean = (1 - m) * state.running_mean + m * mean.reshape(-1)
    state.running_var = (1 - m) * state.running_var + m * var.reshape(-1) * n / (n - 1)
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    mean = x.mean(axis=-1, keepdims=True)
    c = x - mean
    var = (c * c).mean(axis=-1, keepdims=True)
    return c / T.sqrt(var + eps) * gamma + beta
