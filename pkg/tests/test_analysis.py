import csv
import io

import numpy as np
import pytest

from conv2former.analysis import (
    attention_macs,
    attention_quadratic_macs,
    complexity_compare,
    count_macs,
    count_params,
    crossover_resolution,
    executed_macs,
    fit_loglog_slope,
    modulation_macs,
    probe_layer,
)
from conv2former.architecture import ModelConfig, build_model
from conv2former.errors import DimensionError
from conv2former.rng import Rng
from conv2former.spatial import KERNEL_SIZES
from conv2former.tensor import Tensor, count_macs as mac_counter

from conftest import TINY

# reference totals with their tolerance bands
PARAMS_M = {"N": 15, "T": 27, "S": 50, "B": 90, "L": 199, "IS": 23, "IB": 86}
MACS_G = {"N": 2.2, "T": 4.4, "S": 8.7, "B": 15.9}


@pytest.mark.parametrize("name", list(PARAMS_M))
def test_params_within_ten_percent(name):
    total = count_params(ModelConfig.from_variant(name)).total_params
    assert abs(total / 1e6 - PARAMS_M[name]) <= 0.10 * PARAMS_M[name]


@pytest.mark.parametrize("name", list(MACS_G))
def test_macs_within_fifteen_percent(name):
    total = count_macs(ModelConfig.from_variant(name), 224, 224).total_macs
    assert abs(total / 1e9 - MACS_G[name]) <= 0.15 * MACS_G[name]


def test_frozen_calibration_totals():
    # exact outputs of the calibrated accounting, frozen as regression values
    assert count_params(ModelConfig.from_variant("N")).total_params == 13_801_256
    assert count_macs(ModelConfig.from_variant("N"), 224, 224).total_macs == 2_230_785_024


@pytest.mark.parametrize("cfg", [
    ModelConfig(**TINY),
    ModelConfig(**TINY, output_projection=False, ffn_ratio=3.0),
    ModelConfig(channels=[12], depths=[2], num_classes=5),
    ModelConfig(channels=[12], depths=[2], num_classes=5, patch_embed_style="three-conv"),
])
def test_analytic_params_equal_allocated(cfg):
    built = count_params(build_model(cfg, None))
    analytic = count_params(cfg)
    assert built.total_params == analytic.total_params
    assert [e[:2] for e in built.entries] == [e[:2] for e in analytic.entries]


@pytest.mark.parametrize("cfg", [ModelConfig(**TINY), ModelConfig(channels=[8], depths=[2], num_classes=3,
                                                                   patch_embed_style="three-conv")])
def test_analytic_macs_equal_executed(cfg):
    m = build_model(cfg, Rng(0))
    with mac_counter() as c:
        from conv2former.architecture import model_forward

        model_forward(m, Tensor(np.ones((2, 3, 64, 64))))
    assert c.total == count_macs(cfg, 64, 64, batch=2).total_macs


def test_block_count_in_report():
    rep = count_macs(ModelConfig.from_variant("N"), 224, 224)
    assert sum(".blocks." in name for name, _, _ in rep.entries) == 14


def test_csv_shape():
    rep = count_macs(ModelConfig(**TINY), 64, 64)
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == ["layer", "params", "macs"]
    assert rows[-1] == ["TOTAL", str(rep.total_params), str(rep.total_macs)]
    assert sum(int(r[1]) for r in rows[1:-1]) == rep.total_params


def test_indivisible_resolution_rejected():
    with pytest.raises(DimensionError):
        count_macs(ModelConfig.from_variant("T"), 225, 224)


def test_macs_scale_with_resolution():
    a = count_macs(ModelConfig(**TINY), 64, 64).total_macs
    b = count_macs(ModelConfig(**TINY), 128, 128).total_macs
    head = 64 * 10
    assert b - head == 4 * (a - head)


# ---------------------------------------------------------------- complexity


def test_loglog_slopes():
    rows = complexity_compare(64, [56, 112, 224])
    n = [r.tokens for r in rows]
    assert abs(fit_loglog_slope(n, [r.modulation_macs for r in rows]) - 1.0) <= 0.01
    assert abs(fit_loglog_slope(n, [r.attention_quadratic_macs for r in rows]) - 2.0) <= 0.01


def test_doubling_ratios():
    rows = complexity_compare(32, [56, 112, 224])
    for a, b in zip(rows, rows[1:]):
        assert b.modulation_macs == 4 * a.modulation_macs
        assert b.attention_quadratic_macs == 16 * a.attention_quadratic_macs


def test_executed_macs_match_formulas():
    for c, r, k in [(4, 6, 5), (8, 5, 11)]:
        assert executed_macs("modulation", c, r, k) == modulation_macs(c, r * r, k)
        assert executed_macs("attention", c, r) == attention_macs(c, r * r)


def test_crossover():
    c, k = 64, 11
    r = crossover_resolution(c, k)
    assert attention_macs(c, r * r) > modulation_macs(c, r * r, k)
    assert attention_macs(c, (r - 1) ** 2) <= modulation_macs(c, (r - 1) ** 2, k)
    assert attention_quadratic_macs(c, 1) == 2 * c


# ---------------------------------------------------------------- receptive field


@pytest.mark.parametrize("k", KERNEL_SIZES)
def test_probe_sizes_per_kernel(k):
    one = probe_layer("modulation", k, channels=2)
    two = probe_layer("modulation2", k, channels=2)
    blk = probe_layer("block", k, channels=2)
    assert one.is_rectangle and (one.height, one.width) == (k, k)
    assert two.is_rectangle and (two.height, two.width) == (2 * k - 1, 2 * k - 1)
    assert blk.is_rectangle and (blk.height, blk.width) == (k + 2, k + 2)


def test_probe_clipped_at_corner():
    p = probe_layer("modulation", 11, size=31, position=(0, 0))
    assert p.bbox == (0, 0, 5, 5)


def test_probe_ascii_marks_position():
    p = probe_layer("modulation", 5, size=9)
    lines = p.ascii().splitlines()
    assert len(lines) == 9 and lines[4][4] == "X"
    assert sum(line.count("#") for line in lines) == 24
