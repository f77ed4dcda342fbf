import numpy as np
import pytest

from conv2former import ops
from conv2former.architecture import (
    ISOTROPIC_VARIANTS,
    PYRAMID_VARIANTS,
    ModelConfig,
    block_forward,
    build_model,
    drop_path,
    ffn_forward,
    forward_features,
    layer_name,
    model_forward,
)
from conv2former.errors import ConfigError, DimensionError
from conv2former.gradcheck import model_gradcheck
from conv2former.rng import Rng
from conv2former.spatial import conv_mod_forward
from conv2former.tensor import Tensor

from conftest import TINY

TABLE = {
    "N": ([64, 128, 256, 512], [2, 2, 8, 2]),
    "T": ([72, 144, 288, 576], [3, 3, 12, 3]),
    "S": ([72, 144, 288, 576], [4, 4, 32, 4]),
    "B": ([96, 192, 384, 768], [4, 4, 34, 4]),
    "L": ([128, 256, 512, 1024], [4, 4, 48, 4]),
}


@pytest.mark.parametrize("name", list(TABLE))
def test_pyramid_variants_expand_exactly(name):
    cfg = ModelConfig.from_variant(name)
    assert (cfg.channels, cfg.depths) == TABLE[name]
    cfg.validate()


@pytest.mark.parametrize("name", list(ISOTROPIC_VARIANTS))
def test_isotropic_variants_have_18_blocks(name):
    cfg = ModelConfig.from_variant(name)
    assert cfg.num_blocks == 18 and cfg.isotropic and cfg.total_stride == 16


def test_variant_tables_match_reference():
    assert {k: (c, d) for k, (c, d, _) in PYRAMID_VARIANTS.items()} == TABLE


def test_unknown_variant_lists_valid_names():
    with pytest.raises(ConfigError, match="N, T, S, B, L, IS, IB"):
        ModelConfig.from_variant("XL")


@pytest.mark.parametrize("bad", [
    dict(kernel_size=4), dict(channels=[8, 16]), dict(depths=[1, 0, 1, 1]),
    dict(drop_path_rate=1.0), dict(patch_embed_style="three-conv"), dict(fusion="nope"),
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        build_model(ModelConfig(**{**TINY, **bad}), Rng(0))


def test_named_variant_with_altered_depths_rejected():
    cfg = ModelConfig.from_variant("N")
    cfg.depths = [2, 2, 6, 2]
    with pytest.raises(ConfigError):
        cfg.validate()


def test_stage_resolutions_and_logit_shape():
    m = build_model(ModelConfig(**TINY), Rng(0))
    x = Tensor(Rng(1).normal((2, 3, 64, 64)))
    feats = forward_features(m, x)
    assert [f.shape for f in feats] == [(2, 8, 16, 16), (2, 16, 8, 8), (2, 32, 4, 4), (2, 64, 2, 2)]
    logits = model_forward(m, x)
    assert logits.shape == (2, 10) and np.isfinite(logits.data).all()


def test_isotropic_resolution_is_constant():
    for style in ("single-conv", "three-conv"):
        cfg = ModelConfig(channels=[12], depths=[3], num_classes=4, patch_embed_style=style)
        feats = forward_features(build_model(cfg, Rng(0)), Tensor(np.ones((1, 3, 32, 32))))
        assert [f.shape for f in feats] == [(1, 12, 2, 2)]


def test_indivisible_input_rejected():
    m = build_model(ModelConfig(**TINY), Rng(0))
    with pytest.raises(DimensionError):
        model_forward(m, Tensor(np.zeros((1, 3, 48, 64))))
    with pytest.raises(DimensionError):
        model_forward(m, Tensor(np.zeros((1, 4, 64, 64))))


def test_block_starts_near_identity():
    cfg = ModelConfig(channels=[16], depths=[1], num_classes=2)
    blk = build_model(cfg, Rng(0), np.float64).stages[0].blocks[0]
    x = Tensor(Rng(1).normal((2, 16, 12, 12)), dtype=np.float64)
    assert np.abs(block_forward(x, blk).data - x.data).max() < 1e-3


def test_block_matches_composition(rng):
    cfg = ModelConfig(channels=[6], depths=[1], kernel_size=5, num_classes=2, layer_scale_init=0.7)
    blk = build_model(cfg, Rng(2), np.float64).stages[0].blocks[0]
    for t in (blk.ls1, blk.ls2, blk.norm1_beta, blk.norm2_gamma):
        t.data = rng.normal(size=t.shape)
    x = rng.normal(size=(2, 6, 7, 7))

    def ln(v, g, b):
        mu = v.mean(axis=1, keepdims=True)
        var = v.var(axis=1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-6) * g.data[None, :, None, None] + b.data[None, :, None, None]

    h = conv_mod_forward(Tensor(ln(x, blk.norm1_gamma, blk.norm1_beta)), blk.mod).data
    y = x + blk.ls1.data[None, :, None, None] * h
    h = ffn_forward(Tensor(ln(y, blk.norm2_gamma, blk.norm2_beta)), blk.ffn).data
    y = y + blk.ls2.data[None, :, None, None] * h
    np.testing.assert_allclose(block_forward(Tensor(x), blk).data, y, atol=1e-12)


def test_ffn_matches_composition(rng):
    cfg = ModelConfig(channels=[4], depths=[1], num_classes=2, ffn_ratio=2.0)
    f = build_model(cfg, Rng(3), np.float64).stages[0].blocks[0].ffn
    x = rng.normal(size=(1, 4, 5, 5))
    h = np.einsum("oc,nchw->nohw", f.fc1_w.data, x) + f.fc1_b.data[None, :, None, None]
    h = ops.depthwise_conv2d(Tensor(h), f.dw3_kernel, f.dw3_bias).data
    h = ops.gelu(Tensor(h)).data
    y = np.einsum("oc,nchw->nohw", f.fc2_w.data, h) + f.fc2_b.data[None, :, None, None]
    np.testing.assert_allclose(ffn_forward(Tensor(x), f).data, y, atol=1e-12)


def test_eval_mode_is_deterministic():
    m = build_model(ModelConfig(**TINY, drop_path_rate=0.5), Rng(0))
    x = Tensor(Rng(1).normal((2, 3, 32, 32)))
    np.testing.assert_array_equal(model_forward(m, x).data, model_forward(m, x).data)


def test_drop_path_linspace_over_depth():
    m = build_model(ModelConfig(**TINY, drop_path_rate=0.4), Rng(0))
    rates = [b.drop_path_p for s in m.stages for b in s.blocks]
    np.testing.assert_allclose(rates, np.linspace(0, 0.4, 5))


def test_drop_path_is_unbiased():
    x = Tensor(np.ones((100_000, 1, 1, 1)), dtype=np.float64)
    out = drop_path(x, 0.3, True, Rng(5)).data
    assert abs(out.mean() - 1.0) < 0.01
    assert set(np.unique(out).round(12)) == {0.0, round(1 / 0.7, 12)}


def test_drop_path_respects_mask_and_eval():
    x = Tensor(np.ones((3, 2, 1, 1)), dtype=np.float64)
    np.testing.assert_array_equal(drop_path(x, 0.5, False, None).data, x.data)
    out = drop_path(x, 0.5, True, None, keep=[True, False, True]).data
    np.testing.assert_array_equal(out[:, 0, 0, 0], [2.0, 0.0, 2.0])
    with pytest.raises(ConfigError):
        drop_path(x, 1.0, True, Rng(0))


def test_zero_weights_when_no_rng():
    m = build_model(ModelConfig(**TINY), None)
    assert all(not p.data.any() for n, p in m.named_parameters().items() if "gamma" not in n and "ls" not in n)


def test_parameter_names_group_into_layers():
    m = build_model(ModelConfig(**TINY), Rng(0))
    groups = {layer_name(n) for n in m.named_parameters()}
    assert {"stem", "stages.1.downsample", "stages.2.blocks.1", "final_norm", "head"} <= groups
    assert len(groups) == 1 + 3 + 5 + 2


def test_end_to_end_gradient_one_percent_of_parameters():
    assert model_gradcheck(0, np.float64, sample_per_tensor=0.01, image=64) < 1e-4
