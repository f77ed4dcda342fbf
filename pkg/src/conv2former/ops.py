"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects and registers a
backward rule on the active tape. Feature maps are NCHW.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from . import _kernels
from .errors import ConfigError, DimensionError
from .tensor import FAULTS, Tensor, make_result, report_macs

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _rank(x: Tensor, n: int, op: str) -> None:
    if x.ndim != n:
        raise DimensionError(f"{op}: expected rank {n}, got shape {x.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data

    def back(g):
        ga, gb = g * bd, g * ad
        if "hadamard" in FAULTS:
            ga = ga * 1.01
        return ga, gb

    return make_result(ad * bd, (a, b), back, "hadamard")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return make_result(a.data * a.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),), "scale")


def transpose(a: Tensor) -> Tensor:
    _rank(a, 2, "transpose")
    return make_result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return make_result(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),), "reshape")


def total(a: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = a.shape
    return make_result(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    return scale(total(a), 1.0 / n)


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_result(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / x.dtype.type(_SQRT2)))

    def back(g):
        pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT_2PI)
        return (g * (cdf + x * pdf),)

    return make_result(x * cdf, (a,), back, "gelu")


# ---------------------------------------------------------------- matrices


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _rank(a, 2, "matmul")
    _rank(b, 2, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    report_macs("matmul", a.shape[0] * a.shape[1] * b.shape[1])
    return make_result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Rows of x mapped by w (out*in) plus bias: x @ w.T + b."""
    _rank(x, 2, "linear")
    if w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise DimensionError(f"linear: x {x.shape}, w {w.shape}, b {b.shape}")
    xd, wd = x.data, w.data
    report_macs("linear", x.shape[0] * w.shape[0] * w.shape[1])
    return make_result(xd @ wd.T + b.data, (x, w, b),
                       lambda g: (g @ wd, g.T @ xd, g.sum(0)), "linear")


def softmax_rows(a: Tensor) -> Tensor:
    _rank(a, 2, "softmax_rows")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return make_result(y, (a,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),), "softmax_rows")


def log_softmax_rows(a: Tensor) -> Tensor:
    _rank(a, 2, "log_softmax_rows")
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return make_result(y, (a,), lambda g: (g - p * g.sum(axis=1, keepdims=True),), "log_softmax_rows")


# ---------------------------------------------------------------- feature maps


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Per-channel k*k cross-correlation, stride 1, zero 'same' padding."""
    _rank(x, 4, "depthwise_conv2d")
    n, c, h, w = x.shape
    if kernel.ndim != 3 or kernel.shape[0] != c or kernel.shape[1] != kernel.shape[2]:
        raise DimensionError(f"depthwise_conv2d: kernel {kernel.shape} for {c} channels")
    k = kernel.shape[1]
    if k % 2 == 0:
        raise ConfigError(f"depthwise kernel size must be odd, got {k}")
    if bias.shape != (c,):
        raise DimensionError(f"depthwise_conv2d: bias {bias.shape} for {c} channels")
    xd, kd = x.data, kernel.data
    report_macs("depthwise_conv2d", n * c * k * k * h * w)
    out = _kernels.dw_forward(xd, kd) + bias.data[None, :, None, None]

    def back(g):
        gx = _kernels.dw_grad_input(g, kd) if x.requires_grad else None
        gk = _kernels.dw_grad_kernel(xd, g, k) if kernel.requires_grad else None
        return gx, gk, g.sum(axis=(0, 2, 3))

    return make_result(out, (x, kernel, bias), back, "depthwise_conv2d")


def pointwise_linear(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel channel mixing (1*1 convolution). w: C_out*C_in."""
    _rank(x, 4, "pointwise_linear")
    n, c, h, wd = x.shape
    if w.ndim != 2 or w.shape[1] != c or bias.shape != (w.shape[0],):
        raise DimensionError(f"pointwise_linear: x {x.shape}, w {w.shape}, bias {bias.shape}")
    xd, ww = x.data, w.data
    report_macs("pointwise_linear", n * w.shape[0] * c * h * wd)
    out = np.einsum("oc,nchw->nohw", ww, xd, optimize=True) + bias.data[None, :, None, None]

    def back(g):
        gx = np.einsum("oc,nohw->nchw", ww, g, optimize=True)
        gw = np.einsum("nohw,nchw->oc", g, xd, optimize=True)
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, (x, w, bias), back, "pointwise_linear")


def conv2d(x: Tensor, w: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense convolution (cross-correlation). w: C_out*C_in*kh*kw."""
    _rank(x, 4, "conv2d")
    n, c, h, wd = x.shape
    if w.ndim != 4 or w.shape[1] != c or bias.shape != (w.shape[0],):
        raise DimensionError(f"conv2d: x {x.shape}, w {w.shape}, bias {bias.shape}")
    co, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError(f"conv2d: spatial {h}x{wd} smaller than kernel {kh}x{kw}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xd, wwd = x.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    report_macs("conv2d", n * co * c * kh * kw * ho * wo)
    out = np.einsum("nchwij,ocij->nohw", cols, wwd, optimize=True) + bias.data[None, :, None, None]

    def back(g):
        gw = np.einsum("nohw,nchwij->ocij", g, cols, optimize=True)
        gcols = np.einsum("nohw,ocij->nchwij", g, wwd, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[..., i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result(out, (x, w, bias), back, "conv2d")


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over C at every (n, h, w), then per-channel affine."""
    _rank(x, 4, "layer_norm_channels")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm_channels: gamma {gamma.shape}, beta {beta.shape} for {c} channels")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def back(g):
        dxhat = g * gd
        gx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result(out, (x, gamma, beta), back, "layer_norm_channels")


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """x * s broadcast over channels (layer scale)."""
    _rank(x, 4, "channel_scale")
    if s.shape != (x.shape[1],):
        raise DimensionError(f"channel_scale: scale {s.shape} for {x.shape[1]} channels")
    xd, sd = x.data, s.data[None, :, None, None]
    return make_result(xd * sd, (x, s), lambda g: (g * sd, (g * xd).sum(axis=(0, 2, 3))), "channel_scale")


def sample_scale(x: Tensor, factors: np.ndarray) -> Tensor:
    """Multiply sample i of x by the constant factors[i]."""
    f = np.asarray(factors, dtype=x.dtype).reshape((-1,) + (1,) * (x.ndim - 1))
    if f.shape[0] != x.shape[0]:
        raise DimensionError(f"sample_scale: {f.shape[0]} factors for batch {x.shape[0]}")
    return make_result(x.data * f, (x,), lambda g: (g * f,), "sample_scale")


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC mean over spatial positions."""
    _rank(x, 4, "global_avg_pool")
    n, c, h, w = x.shape
    inv = x.dtype.type(1.0 / (h * w))
    return make_result(x.data.mean(axis=(2, 3)), (x,),
                       lambda g: (np.broadcast_to(g[:, :, None, None] * inv, x.shape).copy(),), "global_avg_pool")


def l1_normalize_channels(a: Tensor, eps: float = 1e-12) -> Tensor:
    """a / (sum_c |a| + eps) at every (n, h, w)."""
    _rank(a, 4, "l1_normalize_channels")
    ad = a.data
    s = np.abs(ad).sum(axis=1, keepdims=True) + ad.dtype.type(eps)
    out = ad / s

    def back(g):
        return (g / s - np.sign(ad) * (g * ad).sum(axis=1, keepdims=True) / (s * s),)

    return make_result(out, (a,), back, "l1_normalize_channels")


def minmax_normalize_maps(a: Tensor, eps: float = 1e-8) -> Tensor:
    """(a - min + eps) / (max - min + eps) per (n, c) map.

    The max lands exactly on 1 and the min on eps/(range+eps) > 0; a constant
    map becomes all ones.
    """
    _rank(a, 4, "minmax_normalize_maps")
    n, c, h, w = a.shape
    flat = a.data.reshape(n, c, h * w)
    e = flat.dtype.type(eps)
    lo_idx = flat.argmin(axis=2)
    hi_idx = flat.argmax(axis=2)
    lo = np.take_along_axis(flat, lo_idx[..., None], axis=2)
    hi = np.take_along_axis(flat, hi_idx[..., None], axis=2)
    num = (flat - lo) + e
    den = (hi - lo) + e
    out = (num / den).reshape(a.shape)

    def back(g):
        gf = g.reshape(n, c, h * w)
        ga = gf / den
        g_lo = (gf * (num / (den * den) - 1.0 / den)).sum(axis=2)
        g_hi = -(gf * num / (den * den)).sum(axis=2)
        np.add.at(ga, (np.arange(n)[:, None], np.arange(c)[None, :], lo_idx), g_lo)
        np.add.at(ga, (np.arange(n)[:, None], np.arange(c)[None, :], hi_idx), g_hi)
        return (ga.reshape(a.shape),)

    return make_result(out, (a,), back, "minmax_normalize_maps")
