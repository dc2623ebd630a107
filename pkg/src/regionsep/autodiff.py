"""Dense real tensors with reverse-mode automatic differentiation.

Just enough of an autograd engine to express and train the separator:
elementwise kernels, batched matmul, 1D convolution and its transpose,
chunking / overlap-add, softmax and multi-head attention. Tensors wrap
numpy arrays; every differentiable op records a backward closure on the
output node, and ``Tensor.backward`` replays the recorded graph in
reverse topological order, visiting each node exactly once and summing
gradient contributions over shared subexpressions.

float64 is the default dtype so that finite-difference gradient checks
are meaningful; pass float32 data for cheaper storage during training.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ConfigError",
    "no_grad",
    "tensor",
    "stack",
    "concat",
    "matmul",
    "linear",
    "relu",
    "prelu",
    "sigmoid",
    "tanh",
    "softmax",
    "layer_norm",
    "conv1d",
    "conv1d_transpose",
    "chunk",
    "chunk_count",
    "overlap_add",
    "multi_head_attention",
    "numerical_gradient",
    "gradient_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigError(ValueError):
    """Raised for invalid structural parameters (head counts, chunk sizes...)."""


# When False, ops do not record backward closures. Toggled by `no_grad`.
_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional real array participating in a reverse-mode tape.

    `data` is a row-major numpy array; `grad` (same shape) is populated by
    `backward`. Tensors are treated as immutable after creation, except
    that optimizers may assign fresh `data` arrays to leaf parameters.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Optional[Callable] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents if _grad_enabled else ()
        self._backward = _backward if _grad_enabled else None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph machinery -----------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy so that shared gradient buffers are never aliased
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Reverse-mode sweep from this node over the recorded graph."""
        if grad is None:
            if self.size != 1:
                raise ShapeError(
                    f"backward() without an explicit gradient requires a scalar "
                    f"output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        # topological order: every node's parents precede it
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_ = [(self, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack_.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_as_tensor(other), power(self, -1.0))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method aliases --------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary_operands(a, b):
    """Coerce python scalars to the tensor operand's dtype (weak promotion),
    so float32 graphs are not silently promoted by constants like eps."""
    if isinstance(a, Tensor) and isinstance(b, (bool, int, float)):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    elif isinstance(b, Tensor) and isinstance(a, (bool, int, float)):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    return _as_tensor(a), _as_tensor(b)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, recording the closure only when grads can flow."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs,
                  _parents=tuple(parents) if needs else (),
                  _backward=backward if needs else None)


# -- elementwise and reduction ops ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data ** exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _make(out_data, (a,), backward)


def texp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def tlog(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(out_data, (a,), backward)


def tsqrt(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            gex = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gex, a.shape))

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, int):
        count = a.shape[axis]
    else:
        count = int(np.prod([a.shape[ax] for ax in axis]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0.0))

    return _make(out_data, (a,), backward)


def prelu(a, slope: Tensor) -> Tensor:
    """max(0, x) + slope * min(0, x); `slope` is a learned scalar tensor."""
    a, slope = _as_tensor(a), _as_tensor(slope)
    neg = np.minimum(a.data, 0.0)
    out_data = np.maximum(a.data, 0.0) + slope.data * neg

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.where(a.data > 0.0, 1.0, slope.data))
        if slope.requires_grad:
            slope._accumulate(_unbroadcast(g * neg, slope.shape))

    return _make(out_data, (a, slope), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def ttanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


tanh = ttanh


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient is zero outside the interval."""
    a = _as_tensor(a)
    out_data = np.clip(a.data, lo, hi)

    def backward(g):
        a._accumulate(g * ((a.data >= lo) & (a.data <= hi)))

    return _make(out_data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return _make(out_data, (a,), backward)


# -- structural ops --------------------------------------------------------------


def reshape(a, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def transpose(a, axes: tuple) -> Tensor:
    a = _as_tensor(a)
    out_data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(np.transpose(g, inverse))

    return _make(out_data, (a,), backward)


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data[index]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, index, g)
        a._accumulate(buf)

    return _make(out_data, (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        slabs = np.split(g, len(tensors), axis=axis)
        for t, slab in zip(tensors, slabs):
            if t.requires_grad:
                t._accumulate(np.squeeze(slab, axis=axis))

    return _make(out_data, tuple(tensors), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, slab in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(slab)

    return _make(out_data, tuple(tensors), backward)


# -- linear algebra ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product. Inner dims must agree; batch dims broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map on the last axis: x @ weight + bias, weight is (in, out)."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def layer_norm(x, gamma, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the feature (last) axis, then apply learned affine."""
    x = _as_tensor(x)
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gamma), bias)


# -- signal ops ---------------------------------------------------------------------


def conv1d(x, kernels, stride: int = 1) -> Tensor:
    """Valid cross-correlation of x(C,T) with kernels(F,C,W) -> (F,N).

    N = floor((T - W) / stride) + 1; no padding.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.ndim != 2 or kernels.ndim != 3:
        raise ShapeError(f"conv1d expects x(C,T), kernels(F,C,W); got {x.shape}, {kernels.shape}")
    C, T = x.shape
    F, Ck, W = kernels.shape
    if Ck != C:
        raise ShapeError(f"conv1d channel mismatch: x has {C} channels, kernels expect {Ck}")
    if stride < 1:
        raise ConfigError(f"conv1d stride must be >= 1, got {stride}")
    if T < W:
        raise ShapeError(f"conv1d input too short: T={T} < kernel width W={W}")
    n_frames = (T - W) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, W, axis=1)[:, ::stride]
    out_data = np.einsum("fcw,cnw->fn", kernels.data, windows, optimize=True)

    def backward(g):
        if kernels.requires_grad:
            kernels._accumulate(np.einsum("fn,cnw->fcw", g, windows, optimize=True))
        if x.requires_grad:
            contrib = np.einsum("fn,fcw->cnw", g, kernels.data, optimize=True)
            gx = np.zeros_like(x.data)
            base = stride * np.arange(n_frames)
            for w in range(W):
                gx[:, base + w] += contrib[:, :, w]
            x._accumulate(gx)

    return _make(out_data, (x, kernels), backward)


def conv1d_transpose(x, kernels, stride: int = 1) -> Tensor:
    """Overlap-added synthesis adjoint to conv1d: x(F,N) -> (C, (N-1)*stride + W)."""
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.ndim != 2 or kernels.ndim != 3:
        raise ShapeError(
            f"conv1d_transpose expects x(F,N), kernels(F,C,W); got {x.shape}, {kernels.shape}")
    F, N = x.shape
    Fk, C, W = kernels.shape
    if Fk != F:
        raise ShapeError(f"conv1d_transpose filter mismatch: x has {F}, kernels {Fk}")
    if stride < 1:
        raise ConfigError(f"conv1d_transpose stride must be >= 1, got {stride}")
    T = (N - 1) * stride + W
    contrib = np.einsum("fn,fcw->cnw", x.data, kernels.data, optimize=True)
    out_data = np.zeros((C, T), dtype=contrib.dtype)
    base = stride * np.arange(N)
    for w in range(W):
        out_data[:, base + w] += contrib[:, :, w]

    def backward(g):
        gwin = np.lib.stride_tricks.sliding_window_view(g, W, axis=1)[:, ::stride]
        if x.requires_grad:
            x._accumulate(np.einsum("cnw,fcw->fn", gwin, kernels.data, optimize=True))
        if kernels.requires_grad:
            kernels._accumulate(np.einsum("fn,cnw->fcw", x.data, gwin, optimize=True))

    return _make(out_data, (x, kernels), backward)


def chunk_count(n_frames: int, chunk_size: int) -> int:
    """Number of 50%-overlapped chunks covering n_frames (tail zero-padded)."""
    hop = chunk_size // 2
    return int(math.ceil(max(n_frames - chunk_size, 0) / hop)) + 1


def _chunk_indices(n_frames: int, chunk_size: int):
    hop = chunk_size // 2
    q = chunk_count(n_frames, chunk_size)
    padded = (q - 1) * hop + chunk_size
    idx = hop * np.arange(q)[:, None] + np.arange(chunk_size)[None, :]
    return q, padded, idx


def chunk(x, chunk_size: int) -> Tensor:
    """Segment the frame axis of x(...,N,F) into (...,Q,K,F) with 50% overlap.

    The tail is zero-padded so the last chunk is full. chunk_size must be even.
    """
    x = _as_tensor(x)
    if chunk_size <= 0:
        raise ConfigError(f"chunk size must be positive, got {chunk_size}")
    if chunk_size % 2 != 0:
        raise ConfigError(f"chunk size must be even for 50% overlap, got {chunk_size}")
    if x.ndim < 2:
        raise ShapeError(f"chunk expects (...,N,F), got {x.shape}")
    n_frames = x.shape[-2]
    q, padded, idx = _chunk_indices(n_frames, chunk_size)
    pad = [(0, 0)] * x.ndim
    pad[-2] = (0, padded - n_frames)
    xp = np.pad(x.data, pad)
    out_data = xp[..., idx, :]

    def backward(g):
        # 50% overlap: even and odd chunks each tile disjoint frame ranges,
        # so two plain fancy-index adds realize the scatter without collisions
        buf = np.zeros(x.shape[:-2] + (padded, x.shape[-1]), dtype=g.dtype)
        for par in (0, 1):
            rows = idx[par::2].reshape(-1)
            slab = g[..., par::2, :, :]
            buf[..., rows, :] += slab.reshape(slab.shape[:-3] + (rows.size, slab.shape[-1]))
        x._accumulate(buf[..., :n_frames, :])

    return _make(out_data, (x,), backward)


def overlap_add(c, n_frames: int) -> Tensor:
    """Invert `chunk`: sum 50%-overlapped chunks (...,Q,K,F) back to (...,N,F)."""
    c = _as_tensor(c)
    if c.ndim < 3:
        raise ShapeError(f"overlap_add expects (...,Q,K,F), got {c.shape}")
    q, chunk_size = c.shape[-3], c.shape[-2]
    if chunk_size % 2 != 0:
        raise ConfigError(f"chunk size must be even for 50% overlap, got {chunk_size}")
    q_expected, padded, idx = _chunk_indices(n_frames, chunk_size)
    if q != q_expected:
        raise ShapeError(
            f"overlap_add geometry mismatch: {q} chunks of size {chunk_size} "
            f"cannot come from {n_frames} frames (expected {q_expected} chunks)")
    out = np.zeros(c.shape[:-3] + (padded, c.shape[-1]), dtype=c.data.dtype)
    for par in (0, 1):
        rows = idx[par::2].reshape(-1)
        slab = c.data[..., par::2, :, :]
        out[..., rows, :] += slab.reshape(slab.shape[:-3] + (rows.size, slab.shape[-1]))
    out_data = out[..., :n_frames, :]

    def backward(g):
        pad = [(0, 0)] * g.ndim
        pad[-2] = (0, padded - n_frames)
        gp = np.pad(g, pad)
        c._accumulate(gp[..., idx, :])

    return _make(out_data, (c,), backward)


# -- attention ------------------------------------------------------------------------


def multi_head_attention(x_q, x_k, x_v, wq, bq, wk, bk, wv, bv, wo, bo, heads: int):
    """Scaled dot-product attention with `heads` heads on (..., L, F) inputs.

    Queries/keys/values are projected with (F,F) weights, split into heads,
    attended with softmax(Q K^T / sqrt(F/heads)), concatenated and projected.
    Returns (output (...,L,F), attention weights (...,heads,L,L)); every
    attention row sums to one.
    """
    x_q, x_k, x_v = _as_tensor(x_q), _as_tensor(x_k), _as_tensor(x_v)
    feat = x_q.shape[-1]
    if feat % heads != 0:
        raise ConfigError(f"feature dim {feat} is not divisible by {heads} heads")
    d_head = feat // heads
    L_q, L_k = x_q.shape[-2], x_k.shape[-2]
    batch = x_q.shape[:-2]

    def split_heads(t, L):
        t = reshape(t, batch + (L, heads, d_head))
        return swap_last3(t)

    def swap_last3(t):
        axes = list(range(t.ndim))
        axes[-3], axes[-2] = axes[-2], axes[-3]
        return transpose(t, tuple(axes))

    q = split_heads(linear(x_q, wq, bq), L_q)          # (..., H, Lq, dh)
    k = split_heads(linear(x_k, wk, bk), L_k)
    v = split_heads(linear(x_v, wv, bv), L_k)

    scores = matmul(q, swap_axes_last(k)) * (1.0 / math.sqrt(d_head))
    attn = softmax(scores, axis=-1)                    # (..., H, Lq, Lk)
    context = matmul(attn, v)                          # (..., H, Lq, dh)
    context = reshape(swap_last3(context), batch + (L_q, feat))
    return linear(context, wo, bo), attn


def swap_axes_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, tuple(axes))


# -- finite-difference oracle -----------------------------------------------------------


def numerical_gradient(f: Callable[[], Tensor], param: Tensor,
                       step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar f() w.r.t. param.data."""
    param.data = np.ascontiguousarray(param.data)  # in-place flat writes below
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f().data)
        flat[i] = orig - step
        lo = float(f().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                   step: float = 1e-5, sample: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> float:
    """Max normwise relative error between analytic and numeric gradients.

    `f` rebuilds the scalar loss from the (mutated in place) params. When
    `sample` is given, only that many randomly chosen coordinates per
    parameter are compared, which keeps end-to-end checks affordable.
    """
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.zero_grad()
    out = f()
    out.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if sample is not None and p.data.size > sample:
            if rng is None:
                rng = np.random.default_rng(0)
            picks = rng.choice(p.data.size, size=sample, replace=False)
            num = np.zeros(len(picks))
            ana = analytic.reshape(-1)[picks]
            flat = p.data.reshape(-1)
            for j, i in enumerate(picks):
                orig = flat[i]
                flat[i] = orig + step
                hi = float(f().data)
                flat[i] = orig - step
                lo = float(f().data)
                flat[i] = orig
                num[j] = (hi - lo) / (2.0 * step)
        else:
            num = numerical_gradient(f, p, step=step).reshape(-1)
            ana = analytic.reshape(-1)
        # floor keeps the metric meaningful when the true gradient is ~0
        # (e.g. parameters that cancel inside a softmax); below the floor the
        # comparison degrades gracefully to absolute error, which is all the
        # finite-difference oracle can resolve there anyway
        denom = max(float(np.linalg.norm(num)), float(np.linalg.norm(ana)), 1.0)
        err = float(np.linalg.norm(ana - num)) / denom
        worst = max(worst, err)
    return worst
