import math

import numpy as np
import pytest

from pixelhand.errors import ConfigError, ParseError
from pixelhand.fusion import (
    BlockWeights,
    FusionConfig,
    FusionWeights,
    bff_block,
    build_pyramid,
    cascade,
    check_weights,
    head,
    hff_block,
    highlight_mask,
    infer_config,
    load_weights,
    make_random_weights,
    save_weights,
)
from pixelhand.tensor import (
    ConvKernel,
    Tensor,
    concat_channels,
    conv2d,
    elementwise,
    sigmoid,
    upsample2x,
)


def small_config(**kw):
    defaults = dict(in_channels=(3, 4, 5, 6), fused_channels=(4, 5, 6, 6))
    defaults.update(kw)
    return FusionConfig(**defaults)


def random_pyramid(rng, channels, base=16):
    return [
        Tensor(rng.normal(size=(c, base >> s, base >> s)))
        for s, c in enumerate(channels)
    ]


def zero_mask_weights(weights):
    """Copy of block weights whose mask conv always outputs zero."""
    blocks = tuple(
        BlockWeights(
            ConvKernel(np.zeros_like(b.mask.weights), np.zeros_like(b.mask.bias)),
            b.reduce,
            b.fuse,
        )
        for b in weights.blocks
    )
    return FusionWeights(blocks, weights.heads)


def test_config_validation():
    small_config()
    with pytest.raises(ConfigError):
        small_config(in_channels=(3, 4, 5))
    with pytest.raises(ConfigError):
        small_config(fused_channels=(4, 5, 6, 7))  # top level must pass through
    with pytest.raises(ConfigError):
        small_config(block="xff")


def test_hff_block_matches_op_composition():
    rng = np.random.default_rng(0)
    config = small_config()
    weights = make_random_weights(config, seed=1)
    f1 = Tensor(rng.normal(size=(4, 8, 8)))
    f2_fused = Tensor(rng.normal(size=(6, 4, 4)))
    b = weights.blocks[1]
    got = hff_block(f1, f2_fused, b)
    u = upsample2x(f2_fused)
    mask = elementwise(1.0, sigmoid(conv2d(u, b.mask)), "sub")
    masked = elementwise(f1, mask, "mul")
    want = conv2d(conv2d(concat_channels(masked, u), b.reduce), b.fuse)
    assert np.array_equal(got.data, want.data)


def test_hff_zero_mask_conv_halves_features():
    rng = np.random.default_rng(2)
    config = small_config()
    weights = zero_mask_weights(make_random_weights(config, seed=3))
    f2_fused = Tensor(rng.normal(size=(6, 4, 4)))
    u = upsample2x(f2_fused)
    mask = highlight_mask(u, weights.blocks[1])
    assert np.all(mask.data == 0.5)
    raw = highlight_mask(u, weights.blocks[1], mask_sigmoid=False)
    assert np.all(raw.data == 1.0)


def test_hff_equals_bff_when_mask_neutralized():
    rng = np.random.default_rng(4)
    config = small_config(mask_sigmoid=False)
    weights = zero_mask_weights(make_random_weights(config, seed=5))
    feats = random_pyramid(rng, config.in_channels)
    hff_out = cascade(feats, config, weights)
    bff_out = cascade(feats, small_config(block="bff"), weights)
    for a, b in zip(hff_out, bff_out):
        assert np.array_equal(a.data, b.data)


def test_hff_and_bff_differ_with_live_mask():
    rng = np.random.default_rng(6)
    config = small_config()
    weights = make_random_weights(config, seed=7)
    feats = random_pyramid(rng, config.in_channels)
    hff_out = cascade(feats, config, weights)
    bff_out = cascade(feats, small_config(block="bff"), weights)
    assert not np.allclose(hff_out[0].data, bff_out[0].data)


def test_zero_fine_features_pass_only_coarse_information():
    rng = np.random.default_rng(8)
    config = small_config()
    weights = make_random_weights(config, seed=9)
    f1 = Tensor.zeros(4, 8, 8)
    f2_fused = Tensor(rng.normal(size=(6, 4, 4)))
    got = hff_block(f1, f2_fused, weights.blocks[1])
    want = bff_block(f1, f2_fused, weights.blocks[1])
    assert np.array_equal(got.data, want.data)


@pytest.mark.parametrize("seed", range(5))
def test_mask_bias_increase_shrinks_masked_magnitude(seed):
    rng = np.random.default_rng(seed)
    config = small_config()
    weights = make_random_weights(config, seed=seed + 100)
    b = weights.blocks[0]
    u = upsample2x(Tensor(rng.normal(size=(5, 4, 4))))
    f0 = Tensor(rng.normal(size=(3, 8, 8)))
    raised = BlockWeights(ConvKernel(b.mask.weights, b.mask.bias + 0.5), b.reduce, b.fuse)
    lo = elementwise(f0, highlight_mask(u, b), "mul")
    hi = elementwise(f0, highlight_mask(u, raised), "mul")
    nonzero = f0.data != 0
    assert np.all(np.abs(hi.data)[nonzero] < np.abs(lo.data)[nonzero])


def test_cascade_shapes_and_top_passthrough():
    rng = np.random.default_rng(10)
    for in_ch, fused_ch, base in [
        ((3, 4, 5, 6), (4, 5, 6, 6), 16),
        ((1, 1, 1, 1), (2, 3, 4, 1), 32),
        ((8, 8, 8, 8), (8, 8, 8, 8), 16),
    ]:
        config = FusionConfig(in_ch, fused_ch)
        weights = make_random_weights(config, seed=11)
        feats = random_pyramid(rng, in_ch, base=base)
        fused = cascade(feats, config, weights)
        assert len(fused) == 4
        assert fused[3] is feats[3]
        for s in range(4):
            assert fused[s].shape == (fused_ch[s], base >> s, base >> s)


def test_cascade_rejects_bad_pyramid():
    config = small_config()
    weights = make_random_weights(config)
    feats = [
        Tensor.zeros(3, 16, 16),
        Tensor.zeros(4, 8, 8),
        Tensor.zeros(5, 5, 5),  # not half of the previous level
        Tensor.zeros(6, 2, 2),
    ]
    with pytest.raises(ConfigError):
        cascade(feats, config, weights)
    with pytest.raises(ConfigError):
        cascade(feats[:3], config, weights)


def test_strict_single_conv_changes_result():
    rng = np.random.default_rng(12)
    config = small_config()
    strict = small_config(strict_single_conv=True)
    feats = random_pyramid(rng, config.in_channels)
    w_default = make_random_weights(config, seed=13)
    w_strict = make_random_weights(strict, seed=13)
    out_default = cascade(feats, config, w_default)
    out_strict = cascade(feats, strict, w_strict)
    assert out_default[0].shape == out_strict[0].shape
    assert not np.allclose(out_default[0].data, out_strict[0].data)


def test_head_zero_weights_constants():
    config = small_config()
    weights = make_random_weights(config, seed=14)
    hw = weights.heads[0]
    zero = type(hw)(
        ConvKernel(np.zeros_like(hw.merge.weights), np.zeros_like(hw.merge.bias)),
        ConvKernel(np.zeros_like(hw.score.weights), np.zeros_like(hw.score.bias)),
        ConvKernel(np.zeros_like(hw.rotation.weights), np.zeros_like(hw.rotation.bias)),
        ConvKernel(np.zeros_like(hw.distance.weights), np.zeros_like(hw.distance.bias)),
    )
    maps = head(Tensor.zeros(4, 4, 4), zero, 16, 16)
    assert np.all(maps.score.data == 0.5)
    assert np.all(maps.rotation.data == 0.0)
    assert np.allclose(maps.distance.data, math.log(2.0))


def test_head_output_ranges_on_random_weights():
    rng = np.random.default_rng(15)
    config = small_config()
    weights = make_random_weights(config, seed=16)
    fused = Tensor(rng.normal(size=(4, 8, 8)) * 10)
    maps = head(fused, weights.heads[0], 32, 32)
    assert maps.score.shape == (1, 32, 32)
    assert maps.rotation.shape == (1, 32, 32)
    assert maps.distance.shape == (4, 32, 32)
    assert maps.score.data.min() >= 0.0 and maps.score.data.max() <= 1.0
    assert np.abs(maps.rotation.data).max() < math.pi / 2
    assert maps.distance.data.min() >= 0.0


def test_head_rejects_non_power_of_two_factor():
    config = small_config()
    weights = make_random_weights(config, seed=17)
    with pytest.raises(ConfigError):
        head(Tensor.zeros(4, 4, 4), weights.heads[0], 12, 12)
    with pytest.raises(ConfigError):
        head(Tensor.zeros(4, 4, 4), weights.heads[0], 16, 32)


def test_forward_is_deterministic():
    rng = np.random.default_rng(18)
    config = small_config()
    weights = make_random_weights(config, seed=19)
    feats = random_pyramid(rng, config.in_channels)
    a = cascade(feats, config, weights)
    b = cascade(feats, config, weights)
    for x, y in zip(a, b):
        assert np.array_equal(x.data, y.data)


def test_weights_round_trip(tmp_path):
    config = FusionConfig((3, 4, 5, 6), (4, 5, 6, 6), head_channels=7)
    weights = make_random_weights(config, seed=20)
    path = tmp_path / "w.pww"
    save_weights(weights, path)
    back = load_weights(path)
    for ours, theirs in zip(weights.blocks, back.blocks):
        assert np.array_equal(ours.mask.weights, theirs.mask.weights)
        assert np.array_equal(ours.reduce.bias, theirs.reduce.bias)
        assert np.array_equal(ours.fuse.weights, theirs.fuse.weights)
    for ours, theirs in zip(weights.heads, back.heads):
        assert np.array_equal(ours.distance.weights, theirs.distance.weights)
    inferred = infer_config(back)
    assert inferred.in_channels == config.in_channels
    assert inferred.fused_channels == config.fused_channels
    assert inferred.head_channels == 7
    check_weights(inferred, back)


def test_load_weights_rejects_garbage(tmp_path):
    path = tmp_path / "bad.pww"
    path.write_bytes(b"not a weights file at all\n")
    with pytest.raises(ParseError):
        load_weights(path)


def test_load_weights_rejects_truncation(tmp_path):
    config = small_config()
    weights = make_random_weights(config, seed=21)
    path = tmp_path / "w.pww"
    save_weights(weights, path)
    data = path.read_bytes()
    (tmp_path / "cut.pww").write_bytes(data[: len(data) - 64])
    with pytest.raises(ParseError):
        load_weights(tmp_path / "cut.pww")


def test_check_weights_flags_shape_mismatch():
    config = small_config()
    weights = make_random_weights(config, seed=22)
    other = make_random_weights(FusionConfig((4, 4, 5, 6), (4, 5, 6, 6)), seed=22)
    with pytest.raises(ConfigError):
        check_weights(config, other)


def test_build_pyramid_shapes_and_means():
    rng = np.random.default_rng(23)
    img = Tensor(rng.uniform(size=(2, 64, 32)))
    levels = build_pyramid(img)
    assert [lv.shape for lv in levels] == [
        (2, 16, 8),
        (2, 8, 4),
        (2, 4, 2),
        (2, 2, 1),
    ]
    # first level entries are plain 4x4 block means
    want = img.data[:, :4, :4].mean(axis=(1, 2))
    np.testing.assert_allclose(levels[0].data[:, 0, 0], want, atol=1e-12)
    # pooling preserves the overall mean at every level
    for lv in levels:
        np.testing.assert_allclose(lv.data.mean(), img.data.mean(), atol=1e-12)


def test_build_pyramid_requires_divisibility():
    with pytest.raises(ConfigError):
        build_pyramid(Tensor.zeros(1, 48, 64))
