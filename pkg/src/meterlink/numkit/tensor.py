"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient; outside a tape every op is a plain numpy call, which
is how models run in evaluation mode.

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad  # 2 * x
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[tuple["Tensor", tuple, Callable]] = []
        self.spent = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", parents: tuple, backward: Callable) -> None:
        if self.spent:
            raise RuntimeError("tape already consumed by backward(); call reset() first")
        self.nodes.append((out, parents, backward))
        out._tape = self

    def reset(self) -> None:
        for out, _, _ in self.nodes:
            out._tape = None
        self.nodes = []
        self.spent = False

    def backward(self, output: "Tensor") -> None:
        """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if self.spent:
            raise RuntimeError("stale tape: backward() already ran; call reset() first")
        if output.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {output.shape}")
        if output._tape is not self:
            raise ValueError("output was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for out, parents, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._tape is self:
                    k = id(p)
                    grads[k] = grads[k] + pg if k in grads else pg
                elif p.grad is None:
                    p.grad = np.array(pg, dtype=np.float64)
                else:
                    p.grad = p.grad + pg
        self.spent = True


def recording() -> bool:
    return bool(_ACTIVE)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: Tape | None = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{rg})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # arithmetic -------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # reductions and shape -----------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: tuple, backward: Callable) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires and _ACTIVE:
        _ACTIVE[-1].record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data >= 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data >= 0, 1.0, slope)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# reductions, shape, indexing


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), back)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic(idx)

    def back(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=axis),
        tuple(ts),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim
    return _make(out, tuple(ts), lambda g: tuple(np.moveaxis(g, ax, 0)))


# ---------------------------------------------------------------------------
# linear algebra and layer primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape),
            _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape),
        ),
    )


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def conv1d(x, w, b=None, left_pad: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation of ``x`` (N, C_in, L) with kernels ``w`` (C_out, C_in, k).

    ``x`` is zero-padded on the left by ``left_pad``; ``left_pad = dilation*(k-1)``
    gives the causal form. A 2-D ``x`` is treated as a single sample.
    """
    x, w = as_tensor(x), as_tensor(w)
    single = x.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    N, C, L = x.shape
    O, Cw, k = w.shape
    if Cw != C:
        raise ValueError(f"conv1d channel mismatch: input {C}, kernel {Cw}")
    span = dilation * (k - 1) + 1
    Lp = L + left_pad
    if span > Lp:
        raise ValueError(f"kernel span {span} exceeds padded input length {Lp}")
    Lo = Lp - span + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (left_pad, 0))) if left_pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, span, axis=2)[:, :, :, ::dilation]
    cols = win.transpose(0, 2, 1, 3).reshape(N * Lo, C * k)
    wm = w.data.reshape(O, C * k)
    y = np.ascontiguousarray((cols @ wm.T).reshape(N, Lo, O).transpose(0, 2, 1))
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        y = y + b.data[None, :, None]
        parents = (x, w, b)

    def back(g):
        gm = g.transpose(0, 2, 1).reshape(N * Lo, O)
        gw = (gm.T @ cols).reshape(O, C, k)
        gcols = (gm @ wm).reshape(N, Lo, C, k)
        gxp = np.zeros((N, C, Lp))
        for j in range(k):
            s = j * dilation
            gxp[:, :, s:s + Lo] += gcols[:, :, :, j].transpose(0, 2, 1)
        grads = [gxp[:, :, left_pad:], gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    out = _make(y, parents, back)
    return reshape(out, out.shape[1:]) if single else out


def maxpool1d(x, k: int) -> Tensor:
    """Non-overlapping max pooling over the last axis; the remainder is dropped.

    Gradient goes to the first maximal element of each window.
    """
    x = as_tensor(x)
    L = x.shape[-1]
    if L < k:
        raise ValueError(f"pool size {k} exceeds length {L}")
    Lo = L // k
    lead = x.shape[:-1]
    xr = x.data[..., :Lo * k].reshape(lead + (Lo, k))
    y = xr.max(axis=-1)

    def back(g):
        gr = np.zeros(lead + (Lo, k))
        if k == 2:
            first = xr[..., 0] >= xr[..., 1]
            gr[..., 0] = np.where(first, g, 0.0)
            gr[..., 1] = np.where(first, 0.0, g)
        else:
            np.put_along_axis(gr, xr.argmax(axis=-1)[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape)
        gx[..., :Lo * k] = gr.reshape(lead + (Lo * k,))
        return (gx,)

    return _make(y, (x,), back)
