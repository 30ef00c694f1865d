"""Differentiable operations on :class:`~duat.tensor.Tensor`.

Each public op is registered in :data:`OPS` so the gradient checker can
prove it covers all of them.
"""
from __future__ import annotations

import functools
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .tensor import ShapeError, Tensor, add_macs, as_tensor, make_result

logger = logging.getLogger(__name__)

OPS: Dict[str, Callable] = {}


def register(name: str):
    def deco(fn):
        OPS[name] = fn
        return fn
    return deco


# ---------------------------------------------------------------- broadcasting

def _broadcast_ok(small: Tuple[int, ...], big: Tuple[int, ...]) -> bool:
    n, c, _, _ = big
    return small in ((1, c, 1, 1), (n, c, 1, 1), (1, 1, 1, 1))


def _result_shape(a: Tensor, b: Tensor) -> Tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if _broadcast_ok(b.shape, a.shape):
        return a.shape
    if _broadcast_ok(a.shape, b.shape):
        return b.shape
    raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}; only (1|n, c, 1, 1) and scalar operands broadcast")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _binary(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return a, b, _result_shape(a, b)


# ---------------------------------------------------------------- elementwise

@register("add")
def add(a, b) -> Tensor:
    a, b, _ = _binary(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return make_result(a.data + b.data, (a, b), bw, "add")


@register("sub")
def sub(a, b) -> Tensor:
    a, b, _ = _binary(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return make_result(a.data - b.data, (a, b), bw, "sub")


@register("mul")
def mul(a, b) -> Tensor:
    a, b, _ = _binary(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)
    return make_result(ad * bd, (a, b), bw, "mul")


@register("div")
def div(a, b) -> Tensor:
    a, b, _ = _binary(a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):  # finiteness is checked by the engine
        out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)
    return make_result(out, (a, b), bw, "div")


@register("neg")
def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


@register("reverse")
def reverse(a) -> Tensor:
    """``1 - a``: the complement of a gate activation."""
    a = as_tensor(a)
    return make_result(1.0 - a.data, (a,), lambda g: (-g,), "reverse")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "reverse": reverse}


def elementwise(kind: str, a, b=None) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    if kind in ("neg", "reverse"):
        if b is not None:
            raise ValueError(f"{kind} is unary")
        return fn(a)
    if b is None:
        raise ValueError(f"{kind} is binary")
    return fn(a, b)


# ---------------------------------------------------------------- activations

@register("relu")
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,), "relu")


@register("sigmoid")
def sigmoid(x: Tensor) -> Tensor:
    s = special.expit(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@register("gelu")
def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd * _SQRT_HALF))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)
    return make_result((xd * cdf).astype(xd.dtype, copy=False), (x,), bw, "gelu")


@register("bce_with_logits")
def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` against ``target``.

    The target is treated as a constant.
    """
    target = as_tensor(target)
    if target.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} vs target {target.shape}")
    s, t = logits.data, target.data
    out = np.maximum(s, 0) - s * t + np.log1p(np.exp(-np.abs(s)))

    def bw(g):
        return (g * (special.expit(s) - t),)
    return make_result(out, (logits,), bw, "bce_with_logits")


# ---------------------------------------------------------------- reductions and shape

@register("sum")
def reduce_sum(x: Tensor, axis: Optional[Sequence[int]] = None) -> Tensor:
    """Sum over ``axis`` (all axes when None), keeping four dimensions."""
    axis = (0, 1, 2, 3) if axis is None else tuple(axis)
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g, shape),)
    return make_result(x.data.sum(axis=axis, keepdims=True), (x,), bw, "sum")


def mean(x: Tensor, axis: Optional[Sequence[int]] = None) -> Tensor:
    axis = (0, 1, 2, 3) if axis is None else tuple(axis)
    count = int(np.prod([x.shape[a] for a in axis]))
    return mul(reduce_sum(x, axis), 1.0 / count)


@register("reshape")
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError("reshape target must be 4-D")
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


@register("transpose")
def transpose(x: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(perm)
    inv = tuple(np.argsort(perm))
    return make_result(x.data.transpose(perm), (x,), lambda g: (g.transpose(inv),), "transpose")


@register("split_channels")
def split_channels(x: Tensor, k: int) -> Tuple[Tensor, Tensor]:
    c = x.shape[1]
    if not 0 < k < c:
        raise ShapeError(f"split point {k} outside (0, {c})")
    shape = x.shape

    def bw_lo(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, :k] = g
        return (full,)

    def bw_hi(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, k:] = g
        return (full,)
    lo = make_result(x.data[:, :k], (x,), bw_lo, "split_channels")
    hi = make_result(x.data[:, k:], (x,), bw_hi, "split_channels")
    return lo, hi


@register("concat_channels")
def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("nothing to concatenate")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat needs matching n,h,w: {xs[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))
    return make_result(np.concatenate([t.data for t in xs], axis=1), xs, bw, "concat_channels")


# ---------------------------------------------------------------- linear algebra

@register("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes: (n,m,p,k)@(n,m,k,q)."""
    if a.shape[:2] != b.shape[:2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} vs {b.shape}")
    if a.shape[3] != b.shape[2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    add_macs(ad.shape[0] * ad.shape[1] * ad.shape[2] * ad.shape[3] * bd.shape[3])

    def bw(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g
    return make_result(ad @ bd, (a, b), bw, "matmul")


def matmul_spatial(a: Tensor, b: Tensor) -> Tensor:
    """Product of (n,1,p,k) and (n,1,k,q) maps, i.e. a batch of matrices."""
    if a.shape[1] != 1 or b.shape[1] != 1:
        raise ShapeError("matmul_spatial expects (n, 1, rows, cols) operands")
    return matmul(a, b)


@register("softmax")
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return make_result(y, (x,), bw, "softmax")


# ---------------------------------------------------------------- convolution

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


@register("conv2d")
def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation; ``weight`` is (c_out, c_in/groups, kh, kw), bias (1,c_out,1,1)."""
    n, c, h, w = x.shape
    co, cg, kh, kw = weight.shape
    if c % groups or co % groups or cg != c // groups:
        raise ShapeError(f"conv2d channel/group mismatch: x {x.shape}, weight {weight.shape}, groups {groups}")
    if bias is not None and bias.shape != (1, co, 1, 1):
        raise ShapeError(f"conv2d bias must be (1,{co},1,1), got {bias.shape}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d output would be empty")
    add_macs(n * kh * kw * cg * co * ho * wo)

    xd, wd = x.data, weight.data
    if groups == 1 and kh == kw == 1 and stride == 1 and padding == 0:
        impl = _conv_pointwise
    elif groups == 1 and kh == kw == stride and padding == 0 and h % stride == 0 and w % stride == 0:
        impl = _conv_patchify
    elif groups == c and co == c:
        impl = _conv_depthwise
    else:
        impl = _conv_general
    out, bw_impl = impl(xd, wd, stride, padding, groups, ho, wo)
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx, gw = bw_impl(g)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, bw, "conv2d")


def _conv_pointwise(xd, wd, stride, padding, groups, ho, wo):
    n, c, h, w = xd.shape
    w2 = wd[:, :, 0, 0]
    xf = xd.reshape(n, c, h * w)
    out = (w2 @ xf).reshape(n, -1, h, w)

    def bw(g):
        gf = g.reshape(n, -1, h * w)
        gw = np.einsum("nop,ncp->oc", gf, xf, optimize=True)[:, :, None, None]
        gx = (w2.T @ gf).reshape(n, c, h, w)
        return gx, gw
    return out, bw


def _conv_patchify(xd, wd, stride, padding, groups, ho, wo):
    # kernel == stride, no padding: windows tile the input exactly
    n, c, h, w = xd.shape
    co, _, k, _ = wd.shape
    cols = xd.reshape(n, c, ho, k, wo, k).transpose(0, 2, 4, 1, 3, 5).reshape(n * ho * wo, c * k * k)
    w2 = wd.reshape(co, c * k * k)
    out = (cols @ w2.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)

    def bw(g):
        gf = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        gw = (gf.T @ cols).reshape(wd.shape)
        gx = (gf @ w2).reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 4, 2, 5).reshape(n, c, h, w)
        return gx, gw
    return np.ascontiguousarray(out), bw


def _strided(a, i, j, stride, ho, wo):
    return a[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def _pad(xd, padding):
    if not padding:
        return xd
    return np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _conv_depthwise(xd, wd, stride, padding, groups, ho, wo):
    n, c, h, w = xd.shape
    _, _, kh, kw = wd.shape
    k = kh * kw
    xp = _pad(xd, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # per-channel im2col: (c, k, n*ho*wo)
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c, k, n * ho * wo)
    wk = wd.reshape(c, 1, k)
    out = np.ascontiguousarray((wk @ cols).reshape(c, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        gc = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c, 1, n * ho * wo)
        gw = (cols @ gc.reshape(c, n * ho * wo, 1)).reshape(wd.shape)
        gcols = (wd.reshape(c, k, 1) * gc).reshape(c, kh, kw, n, ho, wo)
        gxp = np.zeros((c, n) + xp.shape[2:], dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                _strided(gxp, i, j, stride, ho, wo)[...] += gcols[:, i, j]
        return _crop(gxp.transpose(1, 0, 2, 3), padding, h, w), gw
    return out, bw


def _crop(a, padding, h, w):
    return a[:, :, padding:padding + h, padding:padding + w] if padding else a


def _conv_general(xd, wd, stride, padding, groups, ho, wo):
    n, c, h, w = xd.shape
    co, cg, kh, kw = wd.shape
    og = co // groups
    xp = _pad(xd, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # im2col per group: (n*ho*wo, cg*kh*kw)
    cols = [np.ascontiguousarray(win[:, gi * cg:(gi + 1) * cg].transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cg * kh * kw)
            for gi in range(groups)]
    wmats = [wd[gi * og:(gi + 1) * og].reshape(og, cg * kh * kw) for gi in range(groups)]
    outs = [(cols[gi] @ wmats[gi].T).reshape(n, ho, wo, og) for gi in range(groups)]
    out = np.concatenate(outs, axis=3) if groups > 1 else outs[0]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gw = np.empty_like(wd)
        for gi in range(groups):
            gf = g[:, gi * og:(gi + 1) * og].transpose(0, 2, 3, 1).reshape(n * ho * wo, og)
            gw[gi * og:(gi + 1) * og] = (gf.T @ cols[gi]).reshape(og, cg, kh, kw)
            gcols = (gf @ wmats[gi]).reshape(n, ho, wo, cg, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            sub = gxp[:, gi * cg:(gi + 1) * cg]
            for i in range(kh):
                for j in range(kw):
                    _strided(sub, i, j, stride, ho, wo)[...] += gcols[..., i, j]
        return _crop(gxp, padding, h, w), gw
    return out, bw


# ---------------------------------------------------------------- resampling

@functools.lru_cache(maxsize=256)
def bilinear_matrix(in_size: int, out_size: int, dtype_name: str = "float64") -> np.ndarray:
    """Row-stochastic (out, in) interpolation matrix, align-corners-false."""
    m = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for i in range(out_size):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m = m.astype(dtype_name)
    m.setflags(write=False)
    return m


@register("resize_bilinear")
def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeError("resize target must be at least 1x1")
    _, _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    dt = x.dtype.name
    ry = bilinear_matrix(h, out_h, dt)
    rx = bilinear_matrix(w, out_w, dt)
    out = ry @ x.data @ rx.T

    def bw(g):
        return (ry.T @ g @ rx,)
    return make_result(out, (x,), bw, "resize_bilinear")


# ---------------------------------------------------------------- normalization

def _standardize_backward(g, xhat, inv, axes, count):
    s1 = g.sum(axis=axes, keepdims=True)
    s2 = (g * xhat).sum(axis=axes, keepdims=True)
    return inv / count * (count * g - s1 - xhat * s2)


@register("layer_norm")
def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis at every (n, h, w) position."""
    c = x.shape[1]
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * scale.data + shift.data

    def bw(g):
        gs = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gb = g.sum(axis=(0, 2, 3), keepdims=True)
        gx = _standardize_backward(g * scale.data, xhat, inv, (1,), c)
        return gx, gs, gb
    return make_result(out, (x, scale, shift), bw, "layer_norm")


@register("batch_norm")
def batch_norm(x: Tensor, scale: Tensor, shift: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel standardization; updates the running buffers in place when training."""
    n, c, h, w = x.shape
    xd = x.data
    if training:
        count = n * h * w
        if count < 2:
            raise ShapeError("batch_norm in training mode needs batch*h*w >= 2")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        var = xd.var(axis=(0, 2, 3), keepdims=True)
        if (var < 1e-12).any():
            logger.debug("batch_norm: degenerate variance in %d channel(s)", int((var < 1e-12).sum()))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c) * count / (count - 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu) * inv
        out = xhat * scale.data + shift.data

        def bw(g):
            gs = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gb = g.sum(axis=(0, 2, 3), keepdims=True)
            gx = _standardize_backward(g * scale.data, xhat, inv, (0, 2, 3), count)
            return gx, gs, gb
    else:
        mu = running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        inv = 1.0 / np.sqrt(running_var.reshape(1, c, 1, 1).astype(xd.dtype) + eps)
        xhat = (xd - mu) * inv
        out = xhat * scale.data + shift.data

        def bw(g):
            gs = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gb = g.sum(axis=(0, 2, 3), keepdims=True)
            return g * scale.data * inv, gs, gb
    return make_result(out.astype(xd.dtype, copy=False), (x, scale, shift), bw, "batch_norm")


def differentiable_ops() -> List[str]:
    return sorted(OPS)
