"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 IO error.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import PROBE_LAYERS, complexity_compare, count_macs, probe_layer
from .architecture import VARIANTS, ModelConfig, build_model
from .checkpoint import checkpoint_save
from .config import RunConfig, model_config_from_dict
from .errors import Conv2FormerError
from .gradcheck import run_suite
from .rng import Rng
from .spatial import (
    AttentionParams,
    ConvModParams,
    FusionStrategy,
    conv_mod_forward,
    feature_map_to_tokens,
    self_attention_forward,
)
from .tensor import Tensor, inject_fault
from .training import ablate_fusion, history_csv, train_loop

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
_DTYPES = {"f32": np.float32, "f64": np.float64}


class UsageError(Exception):
    pass


class OutputError(Exception):
    pass


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="64-bit seed (default 0)")
    p.add_argument("--dtype", choices=("f32", "f64"), default=d(None), help="numeric precision")
    p.add_argument("--config", default=d(None), help="RunConfig JSON path")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conv2former", parents=[_global_flags(False)],
                                     description="Convolutional modulation networks on a small autodiff engine.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    flags = _global_flags(True)

    p = sub.add_parser("summarize", parents=[flags], help="per-layer parameter and MAC table")
    p.add_argument("--variant", help=f"one of {', '.join(VARIANTS[:-1])}")
    p.add_argument("--resolution", nargs=2, type=int, metavar=("H", "W"), default=[224, 224])
    p.add_argument("--csv", help="also write the report as CSV")

    p = sub.add_parser("gradcheck", parents=[flags], help="finite-difference check of every op")
    p.add_argument("--inject-bug", metavar="OP", help="test hook: perturb the backward rule of OP (e.g. hadamard)")
    p.add_argument("--no-model", action="store_true", help="skip the end-to-end model check")

    p = sub.add_parser("bench", parents=[flags], help="analytic MACs and wall-clock per resolution")
    p.add_argument("--op", choices=("modulation", "attention"), default="modulation")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--resolutions", type=int, nargs="+", default=[56, 112, 224])
    p.add_argument("--kernel", type=int, default=11)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--csv", help="write CSV here instead of stdout")

    p = sub.add_parser("train", parents=[flags], help="train on the synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("ablate", parents=[flags], help="fusion-strategy ablation over seeds")
    p.add_argument("--strategies", nargs="+", default=[s.value for s in FusionStrategy])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--csv", help="write the table as CSV")

    p = sub.add_parser("probe-rf", parents=[flags], help="receptive-field support of one layer")
    p.add_argument("--variant", help="take kernel size and stage-1 width from a named variant")
    p.add_argument("--layer", choices=PROBE_LAYERS, default="modulation")
    p.add_argument("--kernel", type=int, help="override kernel size")
    p.add_argument("--position", nargs=2, type=int, metavar=("H", "W"))
    p.add_argument("--size", type=int, help="input side length")
    p.add_argument("--channels", type=int, help="override channel width (default min(stage-1 width, 8))")
    return parser


# ---------------------------------------------------------------- helpers


def _read_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return RunConfig.loads(text)


def _model_config(args) -> ModelConfig:
    if getattr(args, "variant", None):
        if args.variant == "custom":
            raise UsageError(f"variant 'custom' needs --config; valid variants: {', '.join(VARIANTS[:-1])}")
        return ModelConfig.from_variant(args.variant)
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror or exc}") from None
        except ValueError as exc:
            raise UsageError(f"invalid JSON in {args.config}: {exc}") from None
        if isinstance(raw, dict) and "model" in raw:
            return RunConfig.from_dict(raw).model
        return model_config_from_dict(raw)
    raise UsageError("give --variant or --config")


def _write(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from None


# ---------------------------------------------------------------- commands


def cmd_summarize(args) -> int:
    cfg = _model_config(args)
    h, w = args.resolution
    report = count_macs(cfg, h, w)
    name = cfg.variant if cfg.variant != "custom" else "custom"
    print(f"model {name}  channels={cfg.channels} depths={cfg.depths} kernel={cfg.kernel_size}  input {h}x{w}")
    print(f"{'layer':<24}{'params':>14}{'MACs':>18}")
    for layer, p, m in report.entries:
        print(f"{layer:<24}{p:>14,}{m:>18,}")
    blocks = sum(1 for e in report.entries if ".blocks." in e[0])
    print(f"{'TOTAL':<24}{report.total_params:>14,}{report.total_macs:>18,}")
    print(f"blocks: {blocks}  params: {report.total_params / 1e6:.2f}M  MACs: {report.total_macs / 1e9:.2f}G")
    if args.csv:
        _write(args.csv, report.to_csv())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dtype = args.dtype or "f64"
    if args.inject_bug:
        with inject_fault(args.inject_bug):
            results = run_suite(args.seed, dtype, include_model=not args.no_model)
    else:
        results = run_suite(args.seed, dtype, include_model=not args.no_model)
    print(f"gradcheck seed={args.seed} dtype={dtype}")
    for r in results:
        print(f"{r.name:<34}{r.error:12.3e}  < {r.threshold:.0e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_VERIFY


def bench_op(op: str, channels: int, resolutions, kernel: int = 11, reps: int = 5, seed: int = 0,
             dtype=np.float32) -> list[tuple[int, int, float]]:
    """(resolution, analytic MACs, median wall ms) per square resolution."""
    rows = []
    analytic = {r.resolution: r for r in complexity_compare(channels, resolutions, kernel)}
    rng = Rng(seed)
    mod = ConvModParams.init(channels, kernel, rng, dtype)
    att = AttentionParams.init(channels, rng, dtype)
    for res in resolutions:
        x = Tensor(rng.normal((1, channels, res, res)), dtype=dtype)
        if op == "modulation":
            fn = lambda: conv_mod_forward(x, mod)
            macs = analytic[res].modulation_macs
        else:
            tokens = feature_map_to_tokens(x)
            fn = lambda: self_attention_forward(tokens, att, chunk=1024)
            macs = analytic[res].attention_macs
        fn()  # warm-up (numba compile, allocator)
        times = []
        for _ in range(max(reps, 1)):
            t0 = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t0) * 1e3)
        rows.append((res, macs, statistics.median(times)))
    return rows


def cmd_bench(args) -> int:
    rows = bench_op(args.op, args.channels, args.resolutions, args.kernel, args.reps, args.seed,
                    _DTYPES[args.dtype or "f32"])
    text = "resolution,macs,wall_ms\n" + "".join(f"{r},{m},{t:.3f}\n" for r, m, t in rows)
    if args.csv:
        _write(args.csv, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args) -> int:
    if not args.config:
        raise UsageError("train needs --config")
    run = _read_run_config(args.config)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create {out}: {exc.strerror or exc}") from None
    if not os.access(out, os.W_OK):
        raise OutputError(f"output directory {out} is not writable")
    dtype = _DTYPES[args.dtype or "f32"]
    data = run.dataset()
    model = build_model(run.model, Rng(run.train.seed), dtype)
    history = train_loop(model, run.train, data)
    _write(out / "metrics.csv", history_csv(history))
    _write(out / "config.json", run.dumps())
    try:
        checkpoint_save(model, out / "model.c2fw")
    except OSError as exc:
        raise OutputError(f"cannot write checkpoint: {exc.strerror or exc}") from None
    last = history[-1]
    print(f"trained {last.step} steps: loss={last.loss:.4f} train_acc={last.train_acc:.4f} "
          f"val_acc={last.val_acc:.4f}")
    print(f"wrote {out / 'model.c2fw'} and {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = _read_run_config(args.config) if args.config else RunConfig()
    train = run.train
    if args.epochs:
        train.epochs = args.epochs
    data = run.dataset()
    rows = ablate_fusion(run.model, args.strategies, args.seeds, train, data,
                         _DTYPES[args.dtype or "f32"])
    lines = ["strategy,mean_val_acc,std_val_acc," + ",".join(f"seed{s}" for s in args.seeds)]
    for r in rows:
        lines.append(f"{r.strategy.value},{r.mean:.6f},{r.std:.6f}," + ",".join(f"{a:.6f}" for a in r.accuracies))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    by = {r.strategy: r for r in rows}
    if FusionStrategy.Hadamard in by and FusionStrategy.ElementwiseSum in by:
        h, s = by[FusionStrategy.Hadamard].mean, by[FusionStrategy.ElementwiseSum].mean
        verdict = "holds" if h >= s else "does NOT hold"
        print(f"finding: Hadamard ({h:.4f}) >= ElementwiseSum ({s:.4f}) {verdict} on this task")
    if args.csv:
        _write(args.csv, text)
    return EXIT_OK


def cmd_probe_rf(args) -> int:
    if args.variant or args.config:
        cfg = _model_config(args)
        kernel, width = cfg.kernel_size, cfg.channels[0]
    else:
        kernel, width = 11, 8
    if args.kernel:
        kernel = args.kernel
    channels = args.channels or min(width, 8)
    pos = tuple(args.position) if args.position else None
    probe = probe_layer(args.layer, kernel, channels, args.size, pos, args.seed)
    print(probe.ascii())
    t, l, b, r = probe.bbox
    print(f"layer {probe.layer} position {probe.position}")
    print(f"bbox rows {t}..{b} cols {l}..{r}  size {probe.height}x{probe.width}")
    return EXIT_OK


COMMANDS = {
    "summarize": cmd_summarize,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "probe-rf": cmd_probe_rf,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not 0 <= args.seed < 2**64:
        parser.error("--seed must fit in an unsigned 64-bit integer")
    try:
        return COMMANDS[args.command](args)
    except OutputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, Conv2FormerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
