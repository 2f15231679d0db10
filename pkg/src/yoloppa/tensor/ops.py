"""Differentiable kernels over :class:`Tensor`.

Binary ops accept equal shapes or a Python scalar; anything else must be
expanded explicitly with :func:`expand`.  Each kernel returns its result
through :func:`make_result`, which rejects non-finite outputs and records the
adjoint on the tape.
"""

from __future__ import annotations

import numbers
from typing import Optional, Sequence

import numpy as np

from . import profile
from .core import Tensor, TensorError, make_result

Scalar = numbers.Real


def _check_tensor(x, op: str) -> Tensor:
    if not isinstance(x, Tensor):
        raise TensorError(f"{op}: expected Tensor, got {type(x).__name__}")
    return x


def _same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise TensorError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise TensorError(f"{op}: precision mismatch {a.dtype} vs {b.dtype}")


def _is_scalar(x) -> bool:
    return isinstance(x, numbers.Real) and not isinstance(x, bool)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return make_result("add", a.data + a.dtype.type(b), (a,), lambda g: (g,))
    _same(a, b, "add")
    return make_result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return make_result("sub", a.data - a.dtype.type(b), (a,), lambda g: (g,))
    _same(a, b, "sub")
    return make_result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, b)
    _same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        if b == 0:
            raise TensorError("div: division by zero scalar")
        return scale(a, 1.0 / b)
    _same(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise TensorError("div: zero in denominator")
    out = ad / bd

    def backward(g):
        gb = g / bd
        return gb, -gb * out

    return make_result("div", out, (a, b), backward)


def scale(a: Tensor, c: Scalar) -> Tensor:
    c = a.dtype.type(c)
    return make_result("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    profile.record("act", elementwise=x.size)
    return make_result("relu", x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    profile.record("act", elementwise=x.size)
    return make_result("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    profile.record("act", elementwise=x.size)
    return make_result("silu", xd * s, (x,), lambda g: (g * s * (1 + xd * (1 - s)),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported as NonFiniteError below
        out = np.exp(x.data)
    return make_result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise TensorError("log: input has non-positive entries")
    return make_result("log", np.log(xd), (x,), lambda g: (g / xd,))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    s = _sigmoid(xd)
    return make_result("softplus", out, (x,), lambda g: (g * s,))


def atan(x: Tensor) -> Tensor:
    xd = x.data
    return make_result("atan", np.arctan(xd), (x,), lambda g: (g / (1 + xd * xd),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_result("square", xd * xd, (x,), lambda g: (2 * g * xd,))


def clip(x: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is 1 strictly inside, 0 at or beyond a bound."""
    xd = x.data
    out = np.clip(xd, lo, hi)
    mask = np.ones_like(xd, dtype=bool)
    if lo is not None:
        mask &= xd > lo
    if hi is not None:
        mask &= xd < hi
    return make_result("clip", out, (x,), lambda g: (g * mask,))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _same(a, b, "maximum")
    pick = a.data >= b.data
    out = np.where(pick, a.data, b.data)
    return make_result("maximum", out, (a, b), lambda g: (g * pick, g * ~pick))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _same(a, b, "minimum")
    pick = a.data <= b.data
    out = np.where(pick, a.data, b.data)
    return make_result("minimum", out, (a, b), lambda g: (g * pick, g * ~pick))


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, silu, sigmoid, exp, log, neg, scale."""
    table = {
        "add": add, "sub": sub, "mul": mul, "scale": scale,
        "relu": relu, "silu": silu, "sigmoid": sigmoid, "exp": exp, "log": log,
        "neg": neg, "softplus": softplus, "atan": atan, "square": square,
    }
    try:
        fn = table[kind]
    except KeyError:
        raise TensorError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("add", "sub", "mul", "scale"):
        if b is None:
            raise TensorError(f"{kind} needs a second operand")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise TensorError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=axes, keepdims=keepdims))
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result("sum", out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axes, keepdims), 1.0 / count)


def max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along one axis; the gradient goes to the first maximal index."""
    ax = _norm_axes(axis, x.ndim)[0]
    idx = np.expand_dims(x.data.argmax(axis=ax), ax)
    out = np.take_along_axis(x.data, idx, ax)
    if not keepdims:
        out = out.squeeze(ax)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, g, ax)
        return (gx,)

    return make_result("max", np.ascontiguousarray(out), (x,), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if shape.count(-1) == 1:
        known = int(np.prod([s for s in shape if s != -1]))
        if known == 0 or x.size % known:
            raise TensorError(f"reshape: cannot infer -1 for {x.shape} -> {shape}")
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != x.size:
        raise TensorError(f"reshape: element count mismatch {x.shape} -> {shape}")
    src = x.shape
    return make_result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise TensorError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_result("transpose", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of size-1 axes (no implicit broadcasting elsewhere)."""
    shape = tuple(shape)
    if len(shape) != x.ndim:
        raise TensorError(f"expand: rank mismatch {x.shape} -> {shape}")
    axes = []
    for i, (s, t) in enumerate(zip(x.shape, shape)):
        if s != t:
            if s != 1:
                raise TensorError(f"expand: axis {i} has extent {s}, cannot expand to {t}")
            axes.append(i)
    axes = tuple(axes)
    out = np.broadcast_to(x.data, shape)
    return make_result("expand", out, (x,), lambda g: (g.sum(axis=axes, keepdims=True),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise TensorError("concat: empty sequence")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise TensorError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {ax}")
        if t.dtype != ref.dtype:
            raise TensorError(f"concat: precision mismatch {ref.dtype} vs {t.dtype}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            parts.append(np.ascontiguousarray(g[tuple(sl)]))
        return parts

    return make_result("concat", out, tuple(tensors), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.ndim
    extent = x.shape[ax]
    if not 0 <= start < stop <= extent:
        raise TensorError(f"slice: need 0 <= {start} < {stop} <= {extent} on axis {ax} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)
    shape, dt = x.shape, x.dtype

    def backward(g):
        gx = np.zeros(shape, dtype=dt)
        gx[sl] = g
        return (gx,)

    return make_result("slice", np.ascontiguousarray(x.data[sl]), (x,), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    return slice_axis(x, 1, start, stop)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather entries along ``axis``; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % x.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[ax]):
        raise TensorError(f"take: index out of range for extent {x.shape[ax]}")
    out = np.take(x.data, idx, axis=ax)
    shape, dt = x.shape, x.dtype

    def backward(g):
        gx = np.zeros(shape, dtype=dt)
        moved = np.moveaxis(gx, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (gx,)

    return make_result("take", out, (x,), backward)


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int, value: float = 0.0) -> Tensor:
    if min(top, bottom, left, right) < 0:
        raise TensorError("pad2d: negative padding")
    n, c, h, w = x.shape
    out = np.full((n, c, h + top + bottom, w + left + right), value, dtype=x.dtype)
    out[:, :, top:top + h, left:left + w] = x.data
    return make_result(
        "pad2d", out, (x,),
        lambda g: (np.ascontiguousarray(g[:, :, top:top + h, left:left + w]),),
    )


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h×w`` window."""
    if h > x.shape[2] or w > x.shape[3]:
        raise TensorError(f"crop2d: {h}x{w} exceeds {x.shape}")
    if (h, w) == x.shape[2:]:
        return x
    return slice_axis(slice_axis(x, 2, 0, h), 3, 0, w)


def upsample_nearest(x: Tensor, factor) -> Tensor:
    fh, fw = (factor, factor) if isinstance(factor, int) else tuple(factor)
    if fh < 1 or fw < 1:
        raise TensorError(f"upsample_nearest: factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    out = np.broadcast_to(
        x.data[:, :, :, None, :, None], (n, c, h, fh, w, fw)
    ).reshape(n, c, h * fh, w * fw)

    def backward(g):
        return (g.reshape(n, c, h, fh, w, fw).sum(axis=(3, 5)),)

    return make_result("upsample", out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra, convolution, pooling
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    din, dout = w.shape
    if x.shape[-1] != din:
        raise TensorError(f"linear: input {x.shape} does not end in Din={din} of weight {w.shape}")
    if b is not None and b.shape != (dout,):
        raise TensorError(f"linear: bias {b.shape} does not match Dout={dout}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    out = x2 @ w.data
    if b is not None:
        out += b.data
    rows = x2.shape[0]
    profile.record("linear", macs=rows * din * dout)
    wd = w.data

    def backward(g):
        g2 = g.reshape(-1, dout)
        gx = (g2 @ wd.T).reshape(*lead, din)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_result("linear", out.reshape(*lead, dout), parents, backward)


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    if x.ndim != 4 or w.ndim != 4:
        raise TensorError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise TensorError(f"conv2d: input {x.shape} has {c} channels but weight {w.shape} expects {ci}")
    if kh < 1 or stride < 1 or pad < 0:
        raise TensorError(f"conv2d: invalid k={kh} stride={stride} pad={pad}")
    if x.dtype != w.dtype:
        raise TensorError(f"conv2d: precision mismatch {x.dtype} vs {w.dtype}")
    ho, wo = conv_out_size(h, kh, stride, pad), conv_out_size(wd, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise TensorError(f"conv2d: empty output {ho}x{wo} for input {x.shape}, k={kh}, pad={pad}")
    if b is not None and b.shape != (co,):
        raise TensorError(f"conv2d: bias {b.shape} does not match {co} output channels")
    profile.record("conv", macs=n * co * ci * kh * kw * ho * wo, k=kh, cin=ci, cout=co, hw=(ho, wo))

    w2 = w.data.reshape(co, ci * kh * kw)
    dt = x.dtype
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        xm = x.data.reshape(n, c, h * wd)
        out = np.matmul(w2, xm)
        if b is not None:
            out += b.data[None, :, None]

        def backward(g):
            g3 = g.reshape(n, co, h * wd)
            gx = np.matmul(w2.T, g3).reshape(n, c, h, wd)
            gw = np.tensordot(g3, xm, axes=([0, 2], [0, 2])).reshape(w.shape)
            res = [gx, gw]
            if b is not None:
                res.append(g3.sum(axis=(0, 2)))
            return res

        parents = (x, w, b) if b is not None else (x, w)
        return make_result("conv2d", out.reshape(n, co, h, wd), parents, backward)

    if pad:
        xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dt)
        xp[:, :, pad:pad + h, pad:pad + wd] = x.data
    else:
        xp = x.data
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=dt)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + hs:stride, j:j + ws:stride].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(c * kh * kw, n * ho * wo)
    out = (w2 @ cols2).reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if b is not None:
        out += b.data[None, :, None, None]
    xp_shape = xp.shape

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * ho * wo)
        gw = (g2 @ cols2.T).reshape(w.shape)
        gcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
        gxp = np.zeros(xp_shape, dtype=dt)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + hs:stride, j:j + ws:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
        gx = np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd]) if pad else gxp
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return res

    parents = (x, w, b) if b is not None else (x, w)
    return make_result("conv2d", out, parents, backward)


def pool2d(x: Tensor, kind: str, k: int, stride: Optional[int] = None, pad: int = 0) -> Tensor:
    """Max or average pooling; max ties route the gradient to the first window index."""
    stride = k if stride is None else stride
    if kind not in ("max", "avg"):
        raise TensorError(f"pool2d: kind must be 'max' or 'avg', got {kind!r}")
    if k < 1 or stride < 1 or not 0 <= pad < k:
        raise TensorError(f"pool2d: invalid k={k} stride={stride} pad={pad}")
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    if ho <= 0 or wo <= 0:
        raise TensorError(f"pool2d: empty output for input {x.shape} with k={k}")
    dt = x.dtype
    fill = -np.inf if kind == "max" else 0.0
    if pad:
        xp = np.full((n, c, h + 2 * pad, w + 2 * pad), fill, dtype=dt)
        xp[:, :, pad:pad + h, pad:pad + w] = x.data
    else:
        xp = x.data
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    views = [xp[:, :, i:i + hs:stride, j:j + ws:stride] for i in range(k) for j in range(k)]
    profile.record("pool", elementwise=n * c * ho * wo * k * k)
    xp_shape = xp.shape

    if kind == "avg":
        out = views[0].copy()
        for v in views[1:]:
            out += v
        out *= dt.type(1.0 / (k * k))

        def backward(g):
            gxp = np.zeros(xp_shape, dtype=dt)
            gs = g * dt.type(1.0 / (k * k))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += gs
            return (np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + w]),)

        return make_result("avgpool", out, (x,), backward)

    out = views[0].copy()
    arg = np.zeros(out.shape, dtype=np.int32)
    for q, v in enumerate(views[1:], start=1):
        better = v > out
        out = np.where(better, v, out)
        arg[better] = q

    def backward(g):
        gxp = np.zeros(xp_shape, dtype=dt)
        for q in range(k * k):
            i, j = divmod(q, k)
            sel = arg == q
            if sel.any():
                gxp[:, :, i:i + hs:stride, j:j + ws:stride] += g * sel
        return (np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + w]),)

    return make_result("maxpool", out, (x,), backward)


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1 or out_h > h or out_w > w or h % out_h or w % out_w:
        raise TensorError(
            f"adaptive_avg_pool: {h}x{w} is not evenly divisible into {out_h}x{out_w} windows"
        )
    fh, fw = h // out_h, w // out_w
    out = x.data.reshape(n, c, out_h, fh, out_w, fw).mean(axis=(3, 5))
    inv = x.dtype.type(1.0 / (fh * fw))

    def backward(g):
        gx = np.broadcast_to((g * inv)[:, :, :, None, :, None], (n, c, out_h, fh, out_w, fw))
        return (gx.reshape(n, c, h, w).copy(),)

    return make_result("adaptive_avg_pool", out, (x,), backward)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axes(axis, x.ndim)[0]
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return make_result("softmax", s, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axes(axis, x.ndim)[0]
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=ax, keepdims=True),)

    return make_result("log_softmax", out, (x,), backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Batch normalisation over N, H, W.

    In training mode the running buffers are updated in place; the running
    variance tracks the unbiased batch variance.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise TensorError(f"batchnorm2d: affine shapes {gamma.shape}/{beta.shape} vs {c} channels")
    m = n * h * w
    xd = x.data
    dt = x.dtype
    profile.record("bn", elementwise=2 * x.size)
    g4 = gamma.data.reshape(1, c, 1, 1)
    if training:
        if m < 2:
            raise TensorError("batchnorm2d: training mode needs N*H*W >= 2")
        mu = xd.mean(axis=(0, 2, 3))
        xc = xd - mu.reshape(1, c, 1, 1)
        var = (xc * xc).mean(axis=(0, 2, 3))
        invstd = (1.0 / np.sqrt(var + eps)).astype(dt)
        xhat = xc * invstd.reshape(1, c, 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
        out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

        def backward(g):
            gbeta = g.sum(axis=(0, 2, 3))
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            dxhat = g * g4
            s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            gx = (invstd.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
            return gx, ggamma, gbeta

        return make_result("batchnorm2d", out, (x, gamma, beta), backward)

    invstd = (1.0 / np.sqrt(running_var + eps)).astype(dt)
    xhat = (xd - running_mean.astype(dt).reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    def backward_eval(g):
        return (
            g * (g4 * invstd.reshape(1, c, 1, 1)),
            (g * xhat).sum(axis=(0, 2, 3)),
            g.sum(axis=(0, 2, 3)),
        )

    return make_result("batchnorm2d", out, (x, gamma, beta), backward_eval)
