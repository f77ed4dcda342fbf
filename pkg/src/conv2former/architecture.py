"""Pyramid and isotropic model families built from modulation blocks."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .rng import Rng
from .spatial import ConvModParams, FusionStrategy, conv_mod_forward, param
from .tensor import Tensor

# (channels, depths, peak drop-path rate)
PYRAMID_VARIANTS = {
    "N": ([64, 128, 256, 512], [2, 2, 8, 2], 0.1),
    "T": ([72, 144, 288, 576], [3, 3, 12, 3], 0.15),
    "S": ([72, 144, 288, 576], [4, 4, 32, 4], 0.3),
    "B": ([96, 192, 384, 768], [4, 4, 34, 4], 0.7),
    "L": ([128, 256, 512, 1024], [4, 4, 48, 4], 0.1),
}
ISOTROPIC_VARIANTS = {
    "IS": ([320], [18], 0.1),
    "IB": ([624], [18], 0.1),
}
ISOTROPIC_DEPTH = 18
VARIANTS = tuple(PYRAMID_VARIANTS) + tuple(ISOTROPIC_VARIANTS) + ("custom",)
PATCH_EMBED_STYLES = ("single-conv", "three-conv")


@dataclass
class ModelConfig:
    variant: str = "custom"
    channels: list[int] = field(default_factory=lambda: [8, 16, 32, 64])
    depths: list[int] = field(default_factory=lambda: [1, 1, 2, 1])
    kernel_size: int = 11
    ffn_ratio: float = 4.0
    fusion: FusionStrategy = FusionStrategy.Hadamard
    drop_path_rate: float = 0.0
    layer_scale_init: float = 1e-6
    num_classes: int = 1000
    patch_embed_style: str = "single-conv"
    a_branch_gelu: bool = True
    output_projection: bool = True
    in_channels: int = 3

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        self.depths = [int(d) for d in self.depths]
        self.fusion = FusionStrategy.parse(self.fusion)

    @classmethod
    def from_variant(cls, variant: str, **overrides) -> "ModelConfig":
        table = {**PYRAMID_VARIANTS, **ISOTROPIC_VARIANTS}
        if variant not in table:
            raise ConfigError(f"unknown variant {variant!r}; valid variants: {', '.join(VARIANTS[:-1])}")
        channels, depths, dpr = table[variant]
        kw = dict(variant=variant, channels=list(channels), depths=list(depths), drop_path_rate=dpr)
        kw.update(overrides)
        return cls(**kw)

    @property
    def isotropic(self) -> bool:
        return len(self.channels) == 1

    @property
    def total_stride(self) -> int:
        return 16 if self.isotropic else 32

    @property
    def num_blocks(self) -> int:
        return sum(self.depths)

    def ffn_hidden(self, c: int) -> int:
        return int(round(c * self.ffn_ratio))

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; valid variants: {', '.join(VARIANTS)}")
        table = {**PYRAMID_VARIANTS, **ISOTROPIC_VARIANTS}
        if self.variant in table:
            channels, depths, _ = table[self.variant]
            if self.channels != channels or self.depths != depths:
                raise ConfigError(f"variant {self.variant} requires channels {channels} and depths {depths}")
        if len(self.channels) != len(self.depths) or len(self.channels) not in (1, 4):
            raise ConfigError("channels and depths must both have 4 entries (pyramid) or 1 (isotropic)")
        if any(c < 1 for c in self.channels) or any(d < 1 for d in self.depths):
            raise ConfigError("channel widths and depths must be positive")
        if self.isotropic and self.variant != "custom" and self.depths[0] != ISOTROPIC_DEPTH:
            raise ConfigError(f"isotropic variants have exactly {ISOTROPIC_DEPTH} blocks")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if not self.ffn_ratio > 0:
            raise ConfigError("ffn_ratio must be positive")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError(f"drop_path_rate must lie in [0, 1), got {self.drop_path_rate}")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("num_classes and in_channels must be positive")
        if self.patch_embed_style not in PATCH_EMBED_STYLES:
            raise ConfigError(f"patch_embed_style must be one of {PATCH_EMBED_STYLES}")
        if self.patch_embed_style == "three-conv" and not self.isotropic:
            raise ConfigError("three-conv patch embedding is only defined for isotropic models")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fusion"] = self.fusion.value
        return d


# ---------------------------------------------------------------- parameters


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor
    stride: int
    padding: int = 0


@dataclass
class PatchEmbed:
    """Strided convs (GELU between consecutive convs) followed by a channel norm."""

    convs: list[ConvLayer]
    norm_gamma: Tensor
    norm_beta: Tensor

    @property
    def stride(self) -> int:
        return int(np.prod([c.stride for c in self.convs]))


@dataclass
class FFNParams:
    fc1_w: Tensor
    fc1_b: Tensor
    dw3_kernel: Tensor
    dw3_bias: Tensor
    fc2_w: Tensor
    fc2_b: Tensor


@dataclass
class BlockParams:
    norm1_gamma: Tensor
    norm1_beta: Tensor
    mod: ConvModParams
    ls1: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor
    ffn: FFNParams
    ls2: Tensor
    drop_path_p: float = 0.0
    fusion: FusionStrategy = FusionStrategy.Hadamard


@dataclass
class Stage:
    downsample: PatchEmbed | None
    blocks: list[BlockParams]


@dataclass
class Model:
    config: ModelConfig
    stem: PatchEmbed
    stages: list[Stage]
    final_norm_gamma: Tensor
    final_norm_beta: Tensor
    head_w: Tensor
    head_b: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(_walk(self, ""))

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(obj, prefix: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}" if prefix else str(i))
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, ModelConfig):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)


def layer_name(param_name: str) -> str:
    """Group key of a parameter: one entry per block, patch embed, norm or head."""
    parts = param_name.split(".")
    if parts[0] == "stages":
        return ".".join(parts[:4]) if parts[2] == "blocks" else ".".join(parts[:3])
    if parts[0] in ("head_w", "head_b"):
        return "head"
    if parts[0].startswith("final_norm"):
        return "final_norm"
    return parts[0]


# ---------------------------------------------------------------- construction


class _Init:
    def __init__(self, rng: Rng | None, dtype):
        self.rng = rng
        self.dtype = dtype

    def weight(self, *shape) -> Tensor:
        if self.rng is None:
            return param(np.zeros(shape, self.dtype))
        return param(self.rng.trunc_normal(shape, std=0.02, dtype=self.dtype))

    def zeros(self, *shape) -> Tensor:
        return param(np.zeros(shape, self.dtype))

    def full(self, n: int, value: float) -> Tensor:
        return param(np.full(n, value, self.dtype))


def _patch_embed(init: _Init, cin: int, cout: int, kernel: int, stride: int) -> PatchEmbed:
    conv = ConvLayer(init.weight(cout, cin, kernel, kernel), init.zeros(cout), stride)
    return PatchEmbed([conv], init.full(cout, 1.0), init.zeros(cout))


def _three_conv_embed(init: _Init, cin: int, cout: int) -> PatchEmbed:
    mid = max(cout // 2, 1)
    convs = [
        ConvLayer(init.weight(mid, cin, 3, 3), init.zeros(mid), 2, 1),
        ConvLayer(init.weight(mid, mid, 3, 3), init.zeros(mid), 2, 1),
        ConvLayer(init.weight(mid, mid, 3, 3), init.zeros(mid), 2, 1),
        ConvLayer(init.weight(cout, mid, 2, 2), init.zeros(cout), 2, 0),
    ]
    return PatchEmbed(convs, init.full(cout, 1.0), init.zeros(cout))


def _block(init: _Init, cfg: ModelConfig, c: int, drop_p: float) -> BlockParams:
    hidden = cfg.ffn_hidden(c)
    mod = ConvModParams(
        w1=init.weight(c, c), b1=init.zeros(c),
        dw_kernel=init.weight(c, cfg.kernel_size, cfg.kernel_size), dw_bias=init.zeros(c),
        w2=init.weight(c, c), b2=init.zeros(c),
        w_out=init.weight(c, c) if cfg.output_projection else None,
        b_out=init.zeros(c) if cfg.output_projection else None,
        a_gelu=cfg.a_branch_gelu,
    )
    ffn = FFNParams(
        fc1_w=init.weight(hidden, c), fc1_b=init.zeros(hidden),
        dw3_kernel=init.weight(hidden, 3, 3), dw3_bias=init.zeros(hidden),
        fc2_w=init.weight(c, hidden), fc2_b=init.zeros(c),
    )
    return BlockParams(
        norm1_gamma=init.full(c, 1.0), norm1_beta=init.zeros(c), mod=mod,
        ls1=init.full(c, cfg.layer_scale_init),
        norm2_gamma=init.full(c, 1.0), norm2_beta=init.zeros(c), ffn=ffn,
        ls2=init.full(c, cfg.layer_scale_init),
        drop_path_p=drop_p, fusion=cfg.fusion,
    )


def build_model(cfg: ModelConfig, rng: Rng | None, dtype=np.float32) -> Model:
    """Allocate and initialise a model; ``rng=None`` leaves weights at zero."""
    cfg.validate()
    init = _Init(rng, dtype)
    chans = cfg.channels
    if cfg.isotropic:
        if cfg.patch_embed_style == "three-conv":
            stem = _three_conv_embed(init, cfg.in_channels, chans[0])
        else:
            stem = _patch_embed(init, cfg.in_channels, chans[0], 16, 16)
    else:
        stem = _patch_embed(init, cfg.in_channels, chans[0], 4, 4)
    rates = np.linspace(0.0, cfg.drop_path_rate, cfg.num_blocks) if cfg.num_blocks > 1 else [0.0]
    stages, b = [], 0
    for i, (c, depth) in enumerate(zip(chans, cfg.depths)):
        down = _patch_embed(init, chans[i - 1], c, 2, 2) if i > 0 else None
        blocks = []
        for _ in range(depth):
            blocks.append(_block(init, cfg, c, float(rates[b])))
            b += 1
        stages.append(Stage(down, blocks))
    c_last = chans[-1]
    return Model(
        config=cfg, stem=stem, stages=stages,
        final_norm_gamma=init.full(c_last, 1.0), final_norm_beta=init.zeros(c_last),
        head_w=init.weight(cfg.num_classes, c_last), head_b=init.zeros(cfg.num_classes),
    )


# ---------------------------------------------------------------- forward


def patch_embed_forward(x: Tensor, pe: PatchEmbed) -> Tensor:
    h, w = x.shape[2], x.shape[3]
    if h % pe.stride or w % pe.stride:
        raise DimensionError(f"patch embed: spatial {h}x{w} not divisible by stride {pe.stride}")
    for i, conv in enumerate(pe.convs):
        if i > 0:
            x = ops.gelu(x)
        x = ops.conv2d(x, conv.weight, conv.bias, conv.stride, conv.padding)
    return ops.layer_norm_channels(x, pe.norm_gamma, pe.norm_beta)


def drop_path(x: Tensor, p: float, training: bool, rng: Rng | None, keep: np.ndarray | None = None) -> Tensor:
    """Per-sample residual-branch dropout, rescaled by 1/(1-p) when kept.

    ``keep`` overrides the sampled Bernoulli mask (one bool per sample).
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"drop path probability must lie in [0, 1), got {p}")
    if not training or (p == 0.0 and keep is None):
        return x
    if keep is None:
        if rng is None:
            raise ConfigError("training-mode drop path needs an rng")
        keep = rng.random(x.shape[0]) < (1.0 - p)
    keep = np.asarray(keep, dtype=bool)
    return ops.sample_scale(x, keep / (1.0 - p))


def ffn_forward(x: Tensor, p: FFNParams) -> Tensor:
    h = ops.pointwise_linear(x, p.fc1_w, p.fc1_b)
    h = ops.depthwise_conv2d(h, p.dw3_kernel, p.dw3_bias)
    h = ops.gelu(h)
    return ops.pointwise_linear(h, p.fc2_w, p.fc2_b)


def block_forward(x: Tensor, p: BlockParams, training: bool = False, rng: Rng | None = None) -> Tensor:
    h = ops.layer_norm_channels(x, p.norm1_gamma, p.norm1_beta)
    h = conv_mod_forward(h, p.mod, p.fusion)
    h = drop_path(ops.channel_scale(h, p.ls1), p.drop_path_p, training, rng)
    x = ops.add(x, h)
    h = ops.layer_norm_channels(x, p.norm2_gamma, p.norm2_beta)
    h = ffn_forward(h, p.ffn)
    h = drop_path(ops.channel_scale(h, p.ls2), p.drop_path_p, training, rng)
    return ops.add(x, h)


def forward_features(m: Model, x: Tensor, training: bool = False, rng: Rng | None = None) -> list[Tensor]:
    """Feature maps at the end of each stage."""
    cfg = m.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected N x {cfg.in_channels} x H x W input, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if h % cfg.total_stride or w % cfg.total_stride:
        raise DimensionError(f"input {h}x{w} not divisible by total stride {cfg.total_stride}")
    x = patch_embed_forward(x, m.stem)
    feats = []
    for stage in m.stages:
        if stage.downsample is not None:
            x = patch_embed_forward(x, stage.downsample)
        for blk in stage.blocks:
            x = block_forward(x, blk, training, rng)
        feats.append(x)
    return feats


def model_forward(m: Model, x: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
    """Logits of shape N x num_classes."""
    x = forward_features(m, x, training, rng)[-1]
    pooled = ops.global_avg_pool(x)
    n, c = pooled.shape
    normed = ops.layer_norm_channels(ops.reshape(pooled, (n, c, 1, 1)), m.final_norm_gamma, m.final_norm_beta)
    return ops.linear(ops.reshape(normed, (n, c)), m.head_w, m.head_b)
