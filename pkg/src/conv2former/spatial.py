"""Spatial encoders: convolutional modulation and the self-attention baseline."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .rng import Rng
from .tensor import Tensor, current_tape, make_result, report_macs

KERNEL_SIZES = (5, 7, 9, 11, 15, 21)


class FusionStrategy(str, enum.Enum):
    """How the convolutional weights A are combined with the value V."""

    Hadamard = "Hadamard"
    ElementwiseSum = "ElementwiseSum"
    SigmoidHadamard = "SigmoidHadamard"
    L1NormHadamard = "L1NormHadamard"
    LinearNormHadamard = "LinearNormHadamard"

    @classmethod
    def parse(cls, value) -> "FusionStrategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown fusion strategy {value!r}; expected one of {valid}") from None


def param(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class ConvModParams:
    """Learnable values of one convolutional modulation layer.

    ``a_gelu`` inserts a GELU between ``w1`` and the depthwise conv;
    ``w_out`` is ``None`` when the output projection is disabled.
    """

    w1: Tensor
    b1: Tensor
    dw_kernel: Tensor
    dw_bias: Tensor
    w2: Tensor
    b2: Tensor
    w_out: Tensor | None
    b_out: Tensor | None
    a_gelu: bool = True

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.dw_kernel.shape[1]

    @classmethod
    def init(cls, channels: int, kernel_size: int, rng: Rng | None, dtype=np.float32,
             a_gelu: bool = True, output_projection: bool = True, std: float = 0.02) -> "ConvModParams":
        if kernel_size % 2 == 0 or kernel_size < 1:
            raise ConfigError(f"kernel size must be a positive odd integer, got {kernel_size}")
        c, k = channels, kernel_size

        def w(*shape):
            if rng is None:
                return param(np.zeros(shape, dtype))
            return param(rng.trunc_normal(shape, std=std, dtype=dtype))

        def z(*shape):
            return param(np.zeros(shape, dtype))

        return cls(
            w1=w(c, c), b1=z(c),
            dw_kernel=w(c, k, k), dw_bias=z(c),
            w2=w(c, c), b2=z(c),
            w_out=w(c, c) if output_projection else None,
            b_out=z(c) if output_projection else None,
            a_gelu=a_gelu,
        )


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    scale_mode: str = "inverse-sqrt-C"

    @property
    def channels(self) -> int:
        return self.wq.shape[1]

    def score_scale(self) -> float:
        if self.scale_mode == "none":
            return 1.0
        if self.scale_mode == "inverse-sqrt-C":
            return 1.0 / np.sqrt(self.channels)
        raise ConfigError(f"unknown scale_mode {self.scale_mode!r}")

    @classmethod
    def init(cls, channels: int, rng: Rng, dtype=np.float32, scale_mode: str = "inverse-sqrt-C",
             std: float = 0.02) -> "AttentionParams":
        c = channels
        ws = [param(rng.trunc_normal((c, c), std=std, dtype=dtype)) for _ in range(3)]
        bs = [param(np.zeros(c, dtype)) for _ in range(3)]
        return cls(ws[0], bs[0], ws[1], bs[1], ws[2], bs[2], scale_mode)


def fusion_apply(a: Tensor, v: Tensor, strategy: FusionStrategy = FusionStrategy.Hadamard) -> Tensor:
    if a.shape != v.shape:
        raise DimensionError(f"fusion: A {a.shape} and V {v.shape} differ")
    strategy = FusionStrategy.parse(strategy)
    if strategy is FusionStrategy.Hadamard:
        return ops.hadamard(a, v)
    if strategy is FusionStrategy.ElementwiseSum:
        return ops.add(a, v)
    if strategy is FusionStrategy.SigmoidHadamard:
        return ops.hadamard(ops.sigmoid(a), v)
    if strategy is FusionStrategy.L1NormHadamard:
        return ops.hadamard(ops.l1_normalize_channels(a), v)
    return ops.hadamard(ops.minmax_normalize_maps(a), v)


def modulation_weights(x: Tensor, p: ConvModParams) -> Tensor:
    """The A branch: w1, optional GELU, then the k*k depthwise conv."""
    a = ops.pointwise_linear(x, p.w1, p.b1)
    if p.a_gelu:
        a = ops.gelu(a)
    return ops.depthwise_conv2d(a, p.dw_kernel, p.dw_bias)


def conv_mod_forward(x: Tensor, p: ConvModParams,
                     strategy: FusionStrategy = FusionStrategy.Hadamard) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise DimensionError(f"conv_mod_forward: input {x.shape} for {p.channels} channels")
    a = modulation_weights(x, p)
    v = ops.pointwise_linear(x, p.w2, p.b2)
    z = fusion_apply(a, v, strategy)
    if p.w_out is None:
        return z
    return ops.pointwise_linear(z, p.w_out, p.b_out)


def feature_map_to_tokens(x: Tensor) -> Tensor:
    """1*C*H*W feature map -> (H*W)*C token matrix."""
    if x.ndim != 4 or x.shape[0] != 1:
        raise DimensionError(f"expected a single 1xCxHxW map, got {x.shape}")
    _, c, h, w = x.shape
    return ops.transpose(ops.reshape(x, (c, h * w)))


def self_attention_forward(x: Tensor, p: AttentionParams, chunk: int | None = None) -> Tensor:
    """Single-head softmax attention over the rows of x.

    ``chunk`` bounds the number of query rows scored at once; it is only
    honoured when no tape is recording, so large token counts can be run
    for timing without materialising the full N*N score matrix.
    """
    if x.ndim != 2 or x.shape[1] != p.channels:
        raise DimensionError(f"self_attention_forward: tokens {x.shape} for {p.channels} channels")
    q = ops.linear(x, p.wq, p.bq)
    k = ops.linear(x, p.wk, p.bk)
    v = ops.linear(x, p.wv, p.bv)
    s = p.score_scale()
    n = x.shape[0]
    if chunk is None or chunk >= n or current_tape() is not None:
        scores = ops.matmul(q, ops.transpose(k))
        if s != 1.0:
            scores = ops.scale(scores, s)
        return ops.matmul(ops.softmax_rows(scores), v)
    # untaped inference path: fused, in place, one chunk of query rows at a time
    qs = q.data * q.dtype.type(s)
    kt = np.ascontiguousarray(k.data.T)
    out = np.empty_like(v.data)
    for start in range(0, n, chunk):
        sc = qs[start : start + chunk] @ kt
        sc -= sc.max(axis=1, keepdims=True)
        np.exp(sc, out=sc)
        sc /= sc.sum(axis=1, keepdims=True)
        np.matmul(sc, v.data, out=out[start : start + chunk])
    report_macs("matmul", 2 * n * n * x.shape[1])
    return make_result(out, (q, k, v), None, "self_attention")
