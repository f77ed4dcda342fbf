"""Parameter/MAC accounting, complexity scaling and receptive-field probes.

MACs count one multiply-accumulate as 1. Norms, activations, pooling and
elementwise products are not counted. Depthwise convs count the full k*k
window at every output position (zero-padded taps included).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .architecture import (
    Model,
    ModelConfig,
    block_forward,
    build_model,
    layer_name,
)
from .errors import DimensionError
from .rng import Rng
from .spatial import (
    AttentionParams,
    ConvModParams,
    conv_mod_forward,
    feature_map_to_tokens,
    self_attention_forward,
)
from .tensor import Tape, Tensor, backward, count_macs as _mac_counter


@dataclass
class FlopReport:
    entries: list[tuple[str, int, int]] = field(default_factory=list)
    resolution: tuple[int, int] | None = None

    @property
    def total_params(self) -> int:
        return sum(e[1] for e in self.entries)

    @property
    def total_macs(self) -> int:
        return sum(e[2] for e in self.entries)

    @property
    def totals(self) -> tuple[int, int]:
        return self.total_params, self.total_macs

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("layer,params,macs\n")
        for name, p, m in self.entries:
            buf.write(f"{name},{p},{m}\n")
        buf.write(f"TOTAL,{self.total_params},{self.total_macs}\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


# ---------------------------------------------------------------- analytic plan


def _embed_entry(cin: int, cout: int, k: int, ho: int, wo: int) -> tuple[int, int]:
    return cout * cin * k * k + cout + 2 * cout, cout * cin * k * k * ho * wo


def _block_entry(cfg: ModelConfig, c: int, hw: int) -> tuple[int, int]:
    k, hid = cfg.kernel_size, cfg.ffn_hidden(c)
    n_pw = 3 if cfg.output_projection else 2
    params = (
        2 * c  # norm1
        + n_pw * (c * c + c) + c * k * k + c  # modulation
        + 2 * c  # layer scales
        + 2 * c  # norm2
        + hid * c + hid + 9 * hid + hid + c * hid + c  # ffn
    )
    macs = (n_pw * c * c + c * k * k + 2 * hid * c + 9 * hid) * hw
    return params, macs


def _plan(cfg: ModelConfig, h: int, w: int) -> list[tuple[str, int, int]]:
    cfg.validate()
    if h % cfg.total_stride or w % cfg.total_stride:
        raise DimensionError(f"resolution {h}x{w} not divisible by total stride {cfg.total_stride}")
    chans, cin = cfg.channels, cfg.in_channels
    out = []
    if cfg.isotropic and cfg.patch_embed_style == "three-conv":
        mid = max(chans[0] // 2, 1)
        p = m = 0
        hh, ww = h, w
        for ci, co, k in ((cin, mid, 3), (mid, mid, 3), (mid, mid, 3), (mid, chans[0], 2)):
            hh, ww = hh // 2, ww // 2
            p += co * ci * k * k + co
            m += co * ci * k * k * hh * ww
        out.append(("stem", p + 2 * chans[0], m))
        hh, ww = h // 16, w // 16
    else:
        s = 16 if cfg.isotropic else 4
        hh, ww = h // s, w // s
        out.append(("stem", *_embed_entry(cin, chans[0], s, hh, ww)))
    for i, (c, depth) in enumerate(zip(chans, cfg.depths)):
        if i > 0:
            hh, ww = hh // 2, ww // 2
            out.append((f"stages.{i}.downsample", *_embed_entry(chans[i - 1], c, 2, hh, ww)))
        for j in range(depth):
            out.append((f"stages.{i}.blocks.{j}", *_block_entry(cfg, c, hh * ww)))
    c = chans[-1]
    out.append(("final_norm", 2 * c, 0))
    out.append(("head", c * cfg.num_classes + cfg.num_classes, c * cfg.num_classes))
    return out


def count_params(m: Model | ModelConfig) -> FlopReport:
    """Learnable scalars per layer.

    A built :class:`Model` is counted from its actual tensors; a bare
    :class:`ModelConfig` is counted analytically without allocating weights.
    """
    if isinstance(m, ModelConfig):
        plan = _plan(m, m.total_stride, m.total_stride)
        return FlopReport([(name, p, 0) for name, p, _ in plan])
    grouped: dict[str, int] = {}
    for name, t in m.named_parameters().items():
        key = layer_name(name)
        grouped[key] = grouped.get(key, 0) + t.size
    return FlopReport([(k, v, 0) for k, v in grouped.items()])


def count_macs(m: Model | ModelConfig, h: int, w: int, batch: int = 1) -> FlopReport:
    cfg = m.config if isinstance(m, Model) else m
    plan = _plan(cfg, h, w)
    return FlopReport([(name, p, batch * mc) for name, p, mc in plan], resolution=(h, w))


# ---------------------------------------------------------------- complexity


def modulation_macs(c: int, tokens: int, k: int = 11, output_projection: bool = True) -> int:
    n_pw = 3 if output_projection else 2
    return n_pw * c * c * tokens + c * k * k * tokens


def attention_quadratic_macs(c: int, tokens: int) -> int:
    """Score matrix QK^T plus the AV product."""
    return 2 * tokens * tokens * c


def attention_macs(c: int, tokens: int) -> int:
    return 3 * c * c * tokens + attention_quadratic_macs(c, tokens)


@dataclass
class ComplexityRow:
    resolution: int
    tokens: int
    modulation_macs: int
    attention_macs: int
    attention_quadratic_macs: int


def complexity_compare(c: int, resolutions: Sequence[int], k: int = 11) -> list[ComplexityRow]:
    """Analytic MACs of one modulation layer and one attention layer per square resolution."""
    rows = []
    for r in resolutions:
        n = int(r) * int(r)
        rows.append(ComplexityRow(int(r), n, modulation_macs(c, n, k), attention_macs(c, n),
                                  attention_quadratic_macs(c, n)))
    return rows


def fit_loglog_slope(tokens: Sequence[float], macs: Sequence[float]) -> float:
    slope, _ = np.polyfit(np.log(np.asarray(tokens, float)), np.log(np.asarray(macs, float)), 1)
    return float(slope)


def crossover_resolution(c: int, k: int = 11, limit: int = 4096) -> int:
    """Smallest square side at which attention costs more MACs than modulation."""
    for r in range(1, limit + 1):
        n = r * r
        if attention_macs(c, n) > modulation_macs(c, n, k):
            return r
    raise ValueError("no crossover below limit")


def executed_macs(op: str, c: int, resolution: int, k: int = 11, seed: int = 0) -> int:
    """Run one layer and return the MACs its ops reported while executing."""
    rng = Rng(seed)
    x = Tensor(rng.normal((1, c, resolution, resolution)), dtype=np.float64)
    with _mac_counter() as counter:
        if op == "modulation":
            conv_mod_forward(x, ConvModParams.init(c, k, rng, np.float64))
        elif op == "attention":
            self_attention_forward(feature_map_to_tokens(x), AttentionParams.init(c, rng, np.float64))
        else:
            raise ValueError(f"unknown op {op!r}")
    return counter.total


# ---------------------------------------------------------------- receptive field


@dataclass
class RfProbe:
    layer: str
    position: tuple[int, int]
    support: np.ndarray

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(top, left, bottom, right), inclusive."""
        rows = np.flatnonzero(self.support.any(axis=1))
        cols = np.flatnonzero(self.support.any(axis=0))
        if rows.size == 0:
            return (0, 0, -1, -1)
        return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])

    @property
    def height(self) -> int:
        t, _, b, _ = self.bbox
        return b - t + 1

    @property
    def width(self) -> int:
        _, l, _, r = self.bbox
        return r - l + 1

    @property
    def is_rectangle(self) -> bool:
        t, l, b, r = self.bbox
        return bool(self.support[t : b + 1, l : r + 1].all()) and int(self.support.sum()) == self.height * self.width

    def ascii(self) -> str:
        lines = []
        for i, row in enumerate(self.support):
            chars = ["#" if v else "." for v in row]
            if i == self.position[0]:
                chars[self.position[1]] = "X" if row[self.position[1]] else "o"
            lines.append("".join(chars))
        return "\n".join(lines)


def receptive_field_probe(fn: Callable[[Tensor], Tensor], input_shape: tuple[int, int, int, int],
                          position: tuple[int, int], layer: str = "custom", seed: int = 0) -> RfProbe:
    """Backpropagate a one-hot spatial mask at ``position`` and mark inputs with nonzero gradient."""
    rng = Rng(seed)
    x = Tensor(rng.normal(input_shape), dtype=np.float64, requires_grad=True)
    with Tape() as tape:
        out = fn(x)
        if out.ndim != 4:
            raise DimensionError("receptive field probes need an NCHW output")
        mask = np.zeros(out.shape, np.float64)
        mask[:, :, position[0], position[1]] = 1.0
        loss = ops.total(ops.hadamard(out, Tensor(mask)))
    backward(tape, loss)
    support = np.abs(x.grad).sum(axis=(0, 1)) > 0
    return RfProbe(layer, tuple(position), support)


PROBE_LAYERS = ("modulation", "modulation2", "block")


def probe_layer(kind: str, kernel_size: int = 11, channels: int = 4, size: int | None = None,
                position: tuple[int, int] | None = None, seed: int = 0) -> RfProbe:
    """Receptive field of one modulation layer, two stacked ones, or one full block."""
    if kind not in PROBE_LAYERS:
        raise ValueError(f"unknown layer selector {kind!r}; expected one of {PROBE_LAYERS}")
    k = kernel_size
    if size is None:
        size = max(31, 2 * k + 3)
    if position is None:
        position = (size // 2, size // 2)
    rng = Rng(seed)
    if kind == "block":
        cfg = ModelConfig(channels=[channels], depths=[1], kernel_size=k, num_classes=1, layer_scale_init=1.0)
        blk = build_model(cfg, rng, dtype=np.float64).stages[0].blocks[0]
        fn = lambda x: block_forward(x, blk)
    else:
        layers = [ConvModParams.init(channels, k, rng, np.float64)
                  for _ in range(2 if kind == "modulation2" else 1)]

        def fn(x):
            for p in layers:
                x = conv_mod_forward(x, p)
            return x

    return receptive_field_probe(fn, (1, channels, size, size), position, layer=f"{kind}(k={k})", seed=seed + 1)
