"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line; the lines are printed together at the
end of the session (see ``pytest_terminal_summary`` in conftest.py).
Tolerances below are pinned and must not be loosened.
"""

import time

import numpy as np
import pytest

from conv2former.analysis import complexity_compare, count_macs, count_params, fit_loglog_slope, probe_layer
from conv2former.architecture import ModelConfig, build_model, model_forward
from conv2former.checkpoint import checkpoint_load, checkpoint_save, decode, encode
from conv2former.cli import bench_op
from conv2former.errors import FormatError
from conv2former.gradcheck import run_suite
from conv2former.rng import Rng
from conv2former.spatial import FusionStrategy, fusion_apply
from conv2former import ops
from conv2former.tensor import Tensor
from conv2former.training import SynthDataset, TrainConfig, ablate_fusion, history_csv, train_loop

RESULTS: list[str] = []

PARAM_TARGETS_M = {"N": 15, "T": 27, "S": 50, "B": 90, "L": 199, "IS": 23, "IB": 86}
PARAM_TOL = 0.10
MAC_TARGETS_G = {"N": 2.2, "T": 4.4, "S": 8.7, "B": 15.9}
MAC_TOL = 0.15
OP_GRAD_TOL = 1e-5
E2E_GRAD_TOL = 1e-4
GRAD_SEEDS = range(10)
RF_KERNELS = (5, 7, 9, 15, 21)
SLOPE_TOL = 0.01
SWEEP = (56, 112, 224)
BENCH_CHANNELS = 16
L1_TOL = 1e-5
TRAIN_ACC_MIN = 0.95
# pinned learning budget for the tiny config: 20 epochs of 16 steps
TINY_MODEL = dict(channels=[8, 16, 32, 64], depths=[1, 1, 2, 1], kernel_size=11, num_classes=10)
TINY_TRAIN = dict(batch_size=32, lr_base=0.064, epochs=20, seed=0)
STEP_BUDGET = 320
ABLATION_SEEDS = (0, 1, 2, 3, 4)
ABLATION_EPOCHS = 10


def record(n: int, ok: bool, detail: str, soft: bool = False) -> None:
    tag = "PASS" if ok else ("SOFT-FAIL" if soft else "FAIL")
    line = f"[{tag}] criterion {n}: {detail}"
    RESULTS.append(line)
    print(line)


def test_1_config_fidelity():
    t0 = time.perf_counter()
    table = {
        "N": ([64, 128, 256, 512], [2, 2, 8, 2]),
        "T": ([72, 144, 288, 576], [3, 3, 12, 3]),
        "S": ([72, 144, 288, 576], [4, 4, 32, 4]),
        "B": ([96, 192, 384, 768], [4, 4, 34, 4]),
        "L": ([128, 256, 512, 1024], [4, 4, 48, 4]),
    }
    ok = all((ModelConfig.from_variant(k).channels, ModelConfig.from_variant(k).depths) == v
             for k, v in table.items())
    ok &= all(ModelConfig.from_variant(k).num_blocks == 18 for k in ("IS", "IB"))
    dt = time.perf_counter() - t0
    ok &= dt < 1.0
    record(1, ok, f"5 pyramid variants exact, IS/IB 18 blocks ({dt:.3f}s)")
    assert ok


def test_2_parameter_accounting():
    t0 = time.perf_counter()
    got = {k: count_params(ModelConfig.from_variant(k)).total_params / 1e6 for k in PARAM_TARGETS_M}
    dt = time.perf_counter() - t0
    ok = all(abs(got[k] - t) <= PARAM_TOL * t for k, t in PARAM_TARGETS_M.items()) and dt < 1.0
    record(2, ok, " ".join(f"{k}={got[k]:.2f}M/{t}M" for k, t in PARAM_TARGETS_M.items()) + f" ({dt:.3f}s)")
    assert ok


def test_3_mac_accounting():
    t0 = time.perf_counter()
    got = {k: count_macs(ModelConfig.from_variant(k), 224, 224).total_macs / 1e9 for k in MAC_TARGETS_G}
    dt = time.perf_counter() - t0
    ok = all(abs(got[k] - t) <= MAC_TOL * t for k, t in MAC_TARGETS_G.items()) and dt < 1.0
    record(3, ok, " ".join(f"{k}={got[k]:.2f}G/{t}G" for k, t in MAC_TARGETS_G.items()) + f" ({dt:.3f}s)")
    assert ok


def test_4_gradient_correctness():
    t0 = time.perf_counter()
    op_worst, e2e_worst, n_ops = 0.0, 0.0, 0
    for seed in GRAD_SEEDS:
        for r in run_suite(seed, "f64", include_model=True):
            if r.name == "model_end_to_end":
                e2e_worst = max(e2e_worst, r.error)
            else:
                op_worst = max(op_worst, r.error)
                n_ops += 1
    dt = time.perf_counter() - t0
    ok = op_worst < OP_GRAD_TOL and e2e_worst < E2E_GRAD_TOL and dt < 300
    record(4, ok, f"{n_ops // len(GRAD_SEEDS)} op checks x {len(GRAD_SEEDS)} seeds, worst op {op_worst:.2e} "
                  f"< {OP_GRAD_TOL:.0e}, worst end-to-end {e2e_worst:.2e} < {E2E_GRAD_TOL:.0e} ({dt:.1f}s)")
    assert ok


def test_5_locality():
    t0 = time.perf_counter()
    found = {}
    ok = True
    for k in (11,) + RF_KERNELS:
        for kind, side in (("modulation", k), ("modulation2", 2 * k - 1), ("block", k + 2)):
            p = probe_layer(kind, k, channels=2)
            found[(kind, k)] = (p.height, p.width)
            ok &= p.is_rectangle and (p.height, p.width) == (side, side)
    dt = time.perf_counter() - t0
    ok &= dt < 60
    record(5, ok, f"k=11: {found[('modulation', 11)]}, {found[('modulation2', 11)]}, {found[('block', 11)]}; "
                  f"k in {RF_KERNELS} exact ({dt:.1f}s)")
    assert ok


def test_6_complexity_scaling():
    t0 = time.perf_counter()
    rows = complexity_compare(64, SWEEP)
    n = [r.tokens for r in rows]
    s_mod = fit_loglog_slope(n, [r.modulation_macs for r in rows])
    s_att = fit_loglog_slope(n, [r.attention_quadratic_macs for r in rows])
    mod = bench_op("modulation", BENCH_CHANNELS, SWEEP, 11, reps=5)
    att = bench_op("attention", BENCH_CHANNELS, SWEEP, 11, reps=5)
    ratios = [a[2] / m[2] for a, m in zip(att, mod)]
    increasing = all(b > a for a, b in zip(ratios, ratios[1:]))
    dt = time.perf_counter() - t0
    ok = abs(s_mod - 1.0) <= SLOPE_TOL and abs(s_att - 2.0) <= SLOPE_TOL and increasing and dt < 120
    record(6, ok, f"slopes modulation {s_mod:.4f}, attention {s_att:.4f}; wall ratio attention/modulation "
                  f"{' < '.join(f'{r:.1f}' for r in ratios)} ({dt:.1f}s)")
    assert ok


def test_7_fusion_strategies():
    t0 = time.perf_counter()
    rng = Rng(0)
    v = Tensor(rng.normal((2, 6, 5, 5)), dtype=np.float64)
    a = Tensor(rng.normal((2, 6, 5, 5), std=3.0), dtype=np.float64)
    ones, zeros = Tensor(np.ones(v.shape)), Tensor(np.zeros(v.shape))
    ok = len(FusionStrategy) == 5
    ok &= np.array_equal(fusion_apply(ones, v, "Hadamard").data, v.data)
    ok &= np.array_equal(fusion_apply(zeros, v, "ElementwiseSum").data, v.data)
    ok &= np.array_equal(fusion_apply(zeros, v, "SigmoidHadamard").data, 0.5 * v.data)
    l1 = ops.l1_normalize_channels(a).data
    l1_err = float(np.abs(np.abs(l1).sum(axis=1) - 1).max())
    ok &= l1_err <= L1_TOL
    ln = ops.minmax_normalize_maps(a).data
    ok &= bool((ln > 0).all() and (ln <= 1).all())
    ok &= bool((ln.reshape(2, 6, -1).max(axis=2) == 1.0).all())
    for s in FusionStrategy:
        ok &= fusion_apply(a, v, s).shape == v.shape
    dt = time.perf_counter() - t0
    ok &= dt < 60
    record(7, ok, f"5 strategies, identities exact, L1 sum error {l1_err:.1e}, "
                  f"LinearNorm range ({ln.min():.2e}, {ln.max():.0f}] ({dt:.2f}s)")
    assert ok


def test_8_learning():
    t0 = time.perf_counter()
    data = SynthDataset()
    hists, models = [], []
    for _ in range(2):
        m = build_model(ModelConfig(**TINY_MODEL), Rng(TINY_TRAIN["seed"]))
        hists.append(train_loop(m, TrainConfig(**TINY_TRAIN), data))
        models.append(m)
    last = hists[0][-1]
    same = history_csv(hists[0]) == history_csv(hists[1]) and all(
        np.array_equal(a.data, b.data) for a, b in zip(models[0].parameters(), models[1].parameters()))
    dt = time.perf_counter() - t0
    ok = last.step == STEP_BUDGET and last.train_acc >= TRAIN_ACC_MIN and same and dt < 600
    record(8, ok, f"{last.step} steps: train_acc {last.train_acc:.3f} >= {TRAIN_ACC_MIN}, val_acc "
                  f"{last.val_acc:.3f}, rerun bitwise identical: {same} ({dt:.1f}s)")
    assert ok


def test_9_ablation_direction():
    t0 = time.perf_counter()
    data = SynthDataset()
    train = TrainConfig(**{**TINY_TRAIN, "epochs": ABLATION_EPOCHS})
    rows = ablate_fusion(ModelConfig(**TINY_MODEL), ["Hadamard", "ElementwiseSum"], ABLATION_SEEDS, train, data)
    h, s = rows[0], rows[1]
    dt = time.perf_counter() - t0
    holds = h.mean >= s.mean and dt < 1800
    record(9, holds, f"mean val acc Hadamard {h.mean:.4f} (sd {h.std:.4f}) vs ElementwiseSum {s.mean:.4f} "
                     f"(sd {s.std:.4f}) over {len(ABLATION_SEEDS)} seeds ({dt:.1f}s)", soft=True)
    # soft criterion: the outcome is reported, never asserted


def test_10_checkpoint_round_trip(tmp_path):
    t0 = time.perf_counter()
    m = build_model(ModelConfig(**TINY_MODEL), Rng(3))
    path = tmp_path / "m.c2fw"
    checkpoint_save(m, path)
    loaded = checkpoint_load(path)
    x = Tensor(Rng(1).normal((4, 3, 32, 32)))
    bitwise = np.array_equal(model_forward(m, x).data, model_forward(loaded, x).data)
    blob = encode(m)
    rejected = 0
    corruptions = [b"X" + blob[1:], blob[:4] + b"\x02" + blob[5:], blob[:-3], blob + b"\0", blob[:10]]
    for bad in corruptions:
        try:
            decode(bad)
        except FormatError:
            rejected += 1
    dt = time.perf_counter() - t0
    ok = bitwise and rejected == len(corruptions) and dt < 60
    record(10, ok, f"eval logits bitwise identical: {bitwise}; {rejected}/{len(corruptions)} corrupt files "
                   f"rejected with FormatError ({dt:.2f}s)")
    assert ok
