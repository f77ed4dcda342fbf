"""AdamW, cosine schedule, smoothed cross-entropy and the synthetic task."""

from __future__ import annotations

import dataclasses
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ops
from .architecture import Model, ModelConfig, build_model, model_forward
from .errors import ConfigError, ContractError
from .rng import Rng
from .spatial import FusionStrategy
from .tensor import Tape, Tensor, backward

HISTORY_HEADER = "step,lr,loss,train_acc,val_acc"


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr_base: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **hyper)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], s: OptimState, lr_t: float,
               decay_mask: Sequence[bool] | None = None) -> None:
    """One in-place AdamW update with bias correction and decoupled weight decay."""
    if not (len(params) == len(grads) == len(s.m) == len(s.v)):
        raise ContractError("params, grads and optimizer state differ in length")
    s.t += 1
    b1, b2 = s.betas
    c1 = 1.0 - b1 ** s.t
    c2 = 1.0 - b2 ** s.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or s.m[i].shape != p.shape:
            raise ContractError(f"shape mismatch for parameter {i}: {p.shape} vs grad {g.shape}")
        dt = p.dtype.type
        s.m[i] = dt(b1) * s.m[i] + dt(1.0 - b1) * g
        s.v[i] = dt(b2) * s.v[i] + dt(1.0 - b2) * g * g
        if decay_mask is None or decay_mask[i]:
            p.data *= dt(1.0 - lr_t * s.weight_decay)
        m_hat = s.m[i] / dt(c1)
        v_hat = s.v[i] / dt(c2)
        p.data -= dt(lr_t) * m_hat / (np.sqrt(v_hat) + dt(s.eps))


def cosine_lr(step: int, total: int, warmup: int, lr_max: float) -> float:
    if not 0 <= warmup < total:
        raise ContractError(f"need 0 <= warmup < total, got warmup={warmup}, total={total}")
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return lr_max * step / warmup
    progress = (step - warmup) / (total - warmup)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def cross_entropy_smoothed(logits: Tensor, labels, eps: float = 0.1) -> Tensor:
    """Mean over the batch of -sum(target * log_softmax(logits))."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    target = np.full((n, k), eps / k, dtype=logits.dtype)
    target[np.arange(n), labels] += 1.0 - eps
    logp = ops.log_softmax_rows(logits)
    return ops.scale(ops.total(ops.hadamard(logp, Tensor(target))), -1.0 / n)


# ---------------------------------------------------------------- data


@dataclass(eq=False)
class SynthDataset:
    """Class-conditioned oriented bars with additive noise.

    Class ``c`` draws ``1 + (c // 5) % 3`` parallel bars at angle ``pi * (c % 5) / 5``;
    offset, thickness and colour are jittered per image. Classes are exactly
    balanced in both splits.
    """

    num_classes: int = 10
    image_size: int = 32
    train_size: int = 500
    val_size: int = 200
    noise: float = 1.0
    seed: int = 0
    x_train: np.ndarray = field(init=False, repr=False)
    y_train: np.ndarray = field(init=False, repr=False)
    x_val: np.ndarray = field(init=False, repr=False)
    y_val: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_classes < 1 or self.train_size % self.num_classes or self.val_size % self.num_classes:
            raise ConfigError("split sizes must be positive multiples of num_classes")
        rng = Rng(self.seed)
        self.x_train, self.y_train = self._split(rng.spawn(1), self.train_size)
        self.x_val, self.y_val = self._split(rng.spawn(2), self.val_size)

    def config(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.init}

    def _split(self, rng: Rng, size: int) -> tuple[np.ndarray, np.ndarray]:
        k, s = self.num_classes, self.image_size
        labels = np.repeat(np.arange(k), size // k)[rng.permutation(size)]
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) - (s - 1) / 2.0
        images = np.empty((size, 3, s, s), dtype=np.float32)
        for i, c in enumerate(labels):
            theta = math.pi * (c % 5) / 5 + rng.uniform(low=-0.08, high=0.08)
            bars = 1 + (c // 5) % 3
            dist = -xx * math.sin(theta) + yy * math.cos(theta) + rng.uniform(low=-3.0, high=3.0)
            width = rng.uniform(low=1.0, high=2.0)
            gap = 5.0
            img = np.zeros((s, s))
            for b in range(bars):
                off = (b - (bars - 1) / 2.0) * gap
                img = np.maximum(img, np.exp(-0.5 * ((dist - off) / width) ** 2))
            colour = rng.uniform(size=3, low=0.5, high=1.0)
            images[i] = colour[:, None, None] * img[None] + rng.normal((3, s, s), std=self.noise)
        return images, labels.astype(np.int64)


# ---------------------------------------------------------------- loop


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr_base: float = 1e-3
    epochs: int = 10
    warmup_steps: int | None = None
    label_smoothing: float = 0.1
    weight_decay: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.lr_base < 0 or self.weight_decay < 0:
            raise ConfigError("lr_base and weight_decay must be non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")

    @property
    def lr(self) -> float:
        """Peak learning rate after linear batch-size scaling."""
        return self.lr_base * self.batch_size / 1024

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EpochRecord:
    step: int
    lr: float
    loss: float
    train_acc: float
    val_acc: float


def evaluate(m: Model, x: np.ndarray, y: np.ndarray, smoothing: float = 0.0,
             batch_size: int = 256) -> tuple[float, float]:
    """Eval-mode (mean loss, accuracy) over a split, in fixed order."""
    loss_sum, correct = 0.0, 0
    dtype = m.head_w.dtype
    for start in range(0, len(x), batch_size):
        xb = Tensor(x[start : start + batch_size], dtype=dtype)
        yb = y[start : start + batch_size]
        logits = model_forward(m, xb)
        loss_sum += cross_entropy_smoothed(logits, yb, smoothing).item() * len(yb)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return loss_sum / len(x), correct / len(x)


def history_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    buf.write(HISTORY_HEADER + "\n")
    for r in history:
        buf.write(f"{r.step},{r.lr!r},{r.loss!r},{r.train_acc!r},{r.val_acc!r}\n")
    return buf.getvalue()


def train_loop(m: Model, cfg: TrainConfig, data: SynthDataset) -> list[EpochRecord]:
    """Train in place; one history record per epoch.

    The recorded loss and accuracies come from an eval-mode pass over each
    split at the end of the epoch.
    """
    cfg.validate()
    if m.config.num_classes != data.num_classes or m.config.in_channels != data.x_train.shape[1]:
        raise ConfigError("model head/input channels do not match the dataset")
    rng = Rng(cfg.seed).spawn(7)
    names, params = zip(*m.named_parameters().items())
    decay_mask = [p.ndim >= 2 for p in params]
    state = OptimState.for_params(params, lr_base=cfg.lr_base, weight_decay=cfg.weight_decay)
    n = len(data.x_train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else int(0.05 * total)
    warmup = min(warmup, total - 1)
    dtype = m.head_w.dtype
    history, step, lr = [], 0, 0.0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = Tensor(data.x_train[idx], dtype=dtype)
            lr = cosine_lr(step, total, warmup, cfg.lr)
            m.zero_grad()
            with Tape() as tape:
                loss = cross_entropy_smoothed(model_forward(m, xb, training=True, rng=rng),
                                              data.y_train[idx], cfg.label_smoothing)
            backward(tape, loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            adamw_step(params, grads, state, lr, decay_mask)
            step += 1
        tr_loss, tr_acc = evaluate(m, data.x_train, data.y_train, cfg.label_smoothing)
        _, va_acc = evaluate(m, data.x_val, data.y_val, cfg.label_smoothing)
        history.append(EpochRecord(step, lr, tr_loss, tr_acc, va_acc))
    return history


# ---------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    strategy: FusionStrategy
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))


def ablate_fusion(base: ModelConfig, strategies: Sequence[FusionStrategy | str], seeds: Sequence[int],
                  train_cfg: TrainConfig, data: SynthDataset, dtype=np.float32) -> list[AblationRow]:
    """Final val accuracy per fusion strategy and seed, all else held fixed."""
    if len(seeds) < 3:
        raise ConfigError("ablation needs at least 3 seeds")
    rows = []
    for strat in strategies:
        strat = FusionStrategy.parse(strat)
        accs = []
        for seed in seeds:
            cfg = dataclasses.replace(base, fusion=strat)
            model = build_model(cfg, Rng(seed), dtype)
            hist = train_loop(model, dataclasses.replace(train_cfg, seed=seed), data)
            accs.append(hist[-1].val_acc)
        rows.append(AblationRow(strat, accs))
    return rows
