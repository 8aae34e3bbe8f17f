"""Shape and network ops on Tensor with recorded backward rules.

Layout convention is NCHW throughout. conv2d uses the cross-correlation
convention (no kernel flip), matching the usual deep-learning definition.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import InvalidValueError, ShapeError, UsageError
from .tensor import Tensor, record, result_requires_grad, unbroadcast


def _require(cond: bool, msg: str, exc=ShapeError) -> None:
    if not cond:
        raise exc(msg)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.ndim == 2 and b.ndim == 2,
             f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    _require(a.shape[1] == b.shape[0],
             f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=result_requires_grad(a, b))

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return record("matmul", (a, b), out, bwd)


def _conv_extent(size: int, kernel: int, stride: int, padding: int, axis: str) -> int:
    span = size + 2 * padding - kernel
    _require(span >= 0,
             f"conv2d kernel {kernel} exceeds padded input extent {size + 2 * padding} on {axis}")
    _require(span % stride == 0,
             f"conv2d output extent is not integral on {axis}: "
             f"({size} + 2*{padding} - {kernel}) is not divisible by stride {stride}")
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    _require(x.ndim == 4, f"conv2d input must be [B,C,H,W], got {x.shape}")
    _require(w.ndim == 4, f"conv2d weight must be [O,C,kh,kw], got {w.shape}")
    _require(x.shape[1] == w.shape[1],
             f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}")
    _require(isinstance(stride, int) and stride >= 1, f"conv2d stride must be >= 1, got {stride}",
             UsageError)
    _require(isinstance(padding, int) and padding >= 0,
             f"conv2d padding must be >= 0, got {padding}", UsageError)
    bsz, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    if bias is not None:
        _require(bias.shape == (cout,),
                 f"conv2d bias must have shape ({cout},), got {bias.shape}")
    oh = _conv_extent(h, kh, stride, padding, "height")
    ow = _conv_extent(wid, kw, stride, padding, "width")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    cols2d = cols.reshape(bsz, cin * kh * kw, oh * ow)
    w2d = w.data.reshape(cout, cin * kh * kw)
    out_data = (w2d @ cols2d).reshape(bsz, cout, oh, ow)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]

    inputs = (x, w) if bias is None else (x, w, bias)
    out = Tensor(out_data, requires_grad=result_requires_grad(*inputs))

    def bwd(g):
        g2d = g.reshape(bsz, cout, oh * ow)
        dw = np.einsum("bol,bkl->ok", g2d, cols2d).reshape(w.shape)
        dcols = (w2d.T @ g2d).reshape(bsz, cin, kh, kw, oh, ow)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
        dx = dxp[:, :, padding:padding + h, padding:padding + wid] if padding else dxp
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return record("conv2d", inputs, out, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    _require(x.ndim == 4, f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    _, _, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True),
                 requires_grad=result_requires_grad(x))

    def bwd(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return record("global_avg_pool", (x,), out, bwd)


def channel_pool(x: Tensor, kind: str) -> Tensor:
    """Pool over the channel axis to a single channel ('avg' or 'max')."""
    _require(x.ndim == 4, f"channel_pool expects [B,C,H,W], got {x.shape}")
    if kind == "avg":
        out = Tensor(x.data.mean(axis=1, keepdims=True),
                     requires_grad=result_requires_grad(x))
        c = x.shape[1]

        def bwd(g):
            return (np.broadcast_to(g / c, x.shape).copy(),)

        return record("channel_pool_avg", (x,), out, bwd)
    if kind == "max":
        idx = np.argmax(x.data, axis=1)[:, None]  # first max wins on ties
        out = Tensor(np.take_along_axis(x.data, idx, axis=1),
                     requires_grad=result_requires_grad(x))

        def bwd(g):
            dx = np.zeros_like(x.data)
            np.put_along_axis(dx, idx, g, axis=1)
            return (dx,)

        return record("channel_pool_max", (x,), out, bwd)
    raise UsageError(f"channel_pool kind must be 'avg' or 'max', got {kind!r}")


def softmax(x: Tensor, axis: int) -> Tensor:
    _require(-x.ndim <= axis < x.ndim, f"softmax axis {axis} invalid for shape {x.shape}")
    if not np.isfinite(x.data).all():
        raise InvalidValueError("softmax input contains non-finite values")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, requires_grad=result_requires_grad(x))

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", (x,), out, bwd)


def _lerp_axis(in_size: int, out_size: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center sampling: src = (dst + 0.5) * in/out - 0.5, clamped."""
    dst = np.arange(out_size, dtype=np.float64)
    src = (dst + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    w = (src - i0).astype(dtype)
    return i0, i1, w


def _lerp_matrix(in_size: int, out_size: int, dtype) -> np.ndarray:
    i0, i1, w = _lerp_axis(in_size, out_size, np.float64)
    m = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - w)
    np.add.at(m, (rows, i1), w)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _require(x.ndim == 4, f"bilinear_resize expects [B,C,H,W], got {x.shape}")
    _require(out_h >= 1 and out_w >= 1,
             f"bilinear_resize target must be positive, got ({out_h}, {out_w})", UsageError)
    _, _, h, w = x.shape
    if (out_h, out_w) == (h, w):
        out = Tensor(x.data.copy(), requires_grad=result_requires_grad(x))
        return record("bilinear_resize", (x,), out, lambda g: (g,))

    dtype = x.data.dtype
    if out_h != h:
        r0, r1, rw = _lerp_axis(h, out_h, dtype)
        a = x.data[:, :, r0, :]
        tmp = a + rw[None, None, :, None] * (x.data[:, :, r1, :] - a)
    else:
        tmp = x.data
    if out_w != w:
        c0, c1, cw = _lerp_axis(w, out_w, dtype)
        a = tmp[:, :, :, c0]
        out_data = a + cw[None, None, None, :] * (tmp[:, :, :, c1] - a)
    else:
        out_data = tmp.copy()
    out = Tensor(out_data, requires_grad=result_requires_grad(x))

    def bwd(g):
        if out_w != w:
            rx = _lerp_matrix(w, out_w, g.dtype)  # [out_w, w]
            g = g @ rx
        if out_h != h:
            ry = _lerp_matrix(h, out_h, g.dtype)  # [out_h, h]
            g = np.matmul(ry.T[None, None], g)
        return (g,)

    return record("bilinear_resize", (x,), out, bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), requires_grad=result_requires_grad(x))

    def bwd(g):
        return (g * (x.data > 0),)  # subgradient 0 at the kink

    return record("relu", (x,), out, bwd)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y, requires_grad=result_requires_grad(x))

    def bwd(g):
        return (g * y * (1.0 - y),)

    return record("sigmoid", (x,), out, bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    _require(len(tensors) > 0, "concat needs at least one tensor", UsageError)
    ndim = tensors[0].ndim
    _require(-ndim <= axis < ndim, f"concat axis {axis} invalid for rank {ndim}")
    axis = axis % ndim
    for t in tensors[1:]:
        same = t.ndim == ndim and all(
            t.shape[d] == tensors[0].shape[d] for d in range(ndim) if d != axis)
        _require(same, "concat operands differ off-axis: "
                       f"{[tuple(t.shape) for t in tensors]}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 requires_grad=result_requires_grad(*tensors))
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g):
        pieces = []
        start = 0
        for s in sizes:
            sl = [slice(None)] * ndim
            sl[axis] = slice(start, start + s)
            pieces.append(g[tuple(sl)])
            start += s
        return tuple(pieces)

    return record("concat", tuple(tensors), out, bwd)


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = []
    for a in axis:
        _require(-ndim <= a < ndim, f"reduce axis {a} invalid for rank {ndim}")
        axes.append(a % ndim)
    _require(len(set(axes)) == len(axes), f"duplicate reduce axes {axis}")
    return tuple(sorted(axes))


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...],
                    keepdims: bool) -> np.ndarray:
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
    return np.broadcast_to(g.reshape(kept), shape).copy()


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims),
                 requires_grad=result_requires_grad(x))

    def bwd(g):
        return (_expand_reduced(g, x.shape, axes, keepdims),)

    return record("reduce_sum", (x,), out, bwd)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims),
                 requires_grad=result_requires_grad(x))

    def bwd(g):
        return (_expand_reduced(g / n, x.shape, axes, keepdims),)

    return record("reduce_mean", (x,), out, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape).copy()  # copy: outputs never alias inputs
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    out = Tensor(data, requires_grad=result_requires_grad(x))

    def bwd(g):
        return (g.reshape(x.shape),)

    return record("reshape", (x,), out, bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries along `axis` starting at `start`."""
    _require(-x.ndim <= axis < x.ndim, f"narrow axis {axis} invalid for shape {x.shape}")
    axis = axis % x.ndim
    _require(0 <= start and start + length <= x.shape[axis] and length >= 1,
             f"narrow range [{start}, {start + length}) out of bounds for axis of "
             f"extent {x.shape[axis]}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    out = Tensor(x.data[tuple(sl)].copy(), requires_grad=result_requires_grad(x))

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[tuple(sl)] = g
        return (dx,)

    return record("narrow", (x,), out, bwd)


def absolute(x: Tensor) -> Tensor:
    out = Tensor(np.abs(x.data), requires_grad=result_requires_grad(x))

    def bwd(g):
        return (g * np.sign(x.data),)  # subgradient 0 at zero

    return record("absolute", (x,), out, bwd)


def reciprocal(x: Tensor) -> Tensor:
    if (x.data == 0).any():
        raise InvalidValueError("reciprocal input contains zeros")
    y = 1.0 / x.data
    out = Tensor(y, requires_grad=result_requires_grad(x))

    def bwd(g):
        return (-g * y * y,)

    return record("reciprocal", (x,), out, bwd)


def sqrt(x: Tensor) -> Tensor:
    if (x.data < 0).any():
        raise InvalidValueError("sqrt input must be non-negative")
    y = np.sqrt(x.data)
    out = Tensor(y, requires_grad=result_requires_grad(x))

    def bwd(g):
        return (g * 0.5 / y,)

    return record("sqrt", (x,), out, bwd)


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise InvalidValueError("log input must be strictly positive")
    out = Tensor(np.log(x.data), requires_grad=result_requires_grad(x))

    def bwd(g):
        return (g / x.data,)

    return record("log", (x,), out, bwd)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    _require(lo < hi, f"clip needs lo < hi, got [{lo}, {hi}]", UsageError)
    out = Tensor(np.clip(x.data, lo, hi), requires_grad=result_requires_grad(x))

    def bwd(g):
        inside = (x.data > lo) & (x.data < hi)  # subgradient 0 at/beyond bounds
        return (g * inside,)

    return record("clip", (x,), out, bwd)
