import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from segbench import autodiff as ad
from segbench.autodiff import Tensor
from segbench.errors import ConfigError, FormatError, ShapeError
from segbench.layers import zero_output_projections
from segbench.models import (
    ARCHS,
    ModelConfig,
    build_cnn,
    build_model,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)

rng = np.random.default_rng(0)
SMALL = {
    "cnn": dict(features=4, depth=1),
    "unet": dict(features=4, depth=2),
    "vit": dict(features=8, depth=1, patch=8, heads=2),
    "vssm": dict(features=8, depth=1, patch=8, state_dim=2),
}


def small(arch, seed=0, **kw):
    return build_model(ModelConfig(arch, **{**SMALL[arch], **kw}), seed)


def test_cnn_param_count_by_hand():
    model = build_model(ModelConfig("cnn", features=8, depth=2))
    assert model.count_params() == 80 + 2 * (3 * 3 * 8 * 8 + 8) + 73 == 1321


def test_cnn_param_growth_with_width():
    f8 = build_model(ModelConfig("cnn", features=8, depth=3)).blocks[0].count_params()
    f16 = build_model(ModelConfig("cnn", features=16, depth=3)).blocks[0].count_params()
    assert 3.9 < f16 / f8 < 4.0


@pytest.mark.parametrize("arch", ARCHS)
def test_forward_shape_and_range(arch):
    out = small(arch).predict(rng.normal(size=(2, 1, 32, 32)))
    assert out.shape == (2, 1, 32, 32)
    assert np.all(np.isfinite(out)) and np.all(out > 0) and np.all(out < 1)


@pytest.mark.parametrize("arch", ARCHS)
def test_identical_images_identical_outputs(arch):
    img = rng.normal(size=(1, 1, 32, 32))
    out = small(arch).predict(np.concatenate([img, img]))
    assert_array_equal(out[0], out[1])


@pytest.mark.parametrize("arch", ARCHS)
def test_params_strictly_increase_with_depth(arch):
    counts = [small(arch, depth=d).count_params() for d in range(4)]
    assert all(b > a for a, b in zip(counts, counts[1:]))


def test_cnn_receptive_field():
    depth = 2
    model = build_model(ModelConfig("cnn", features=4, depth=depth), seed=3)
    for conv in [model.inp, *model.blocks, model.out]:
        conv.bias.data[...] = 0.5  # keep relus open so the full field is visible
    x = rng.uniform(size=(1, 1, 31, 31))
    y = x.copy()
    y[0, 0, 15, 15] += 1.0
    changed = np.argwhere(np.abs(model.predict(y) - model.predict(x))[0, 0] > 0)
    extent = changed.max(axis=0) - changed.min(axis=0) + 1
    assert_array_equal(extent, [3 + 2 * (depth + 1)] * 2)


def test_cnn_translation_equivariance_with_circular_padding():
    model = build_model(ModelConfig("cnn", features=4, depth=2, pad_mode="circular"), seed=1)
    x = rng.normal(size=(1, 1, 16, 16))
    shifted = np.roll(x, (3, -5), axis=(2, 3))
    assert_allclose(model.predict(shifted), np.roll(model.predict(x), (3, -5), axis=(2, 3)), atol=1e-14)


def test_unet_bottleneck_and_decoder_widths():
    model = build_model(ModelConfig("unet", features=8, depth=3))
    bottleneck, skips = model.encode(Tensor(rng.normal(size=(1, 1, 64, 64))))
    assert bottleneck.shape == (1, 64, 8, 8)
    assert [s.shape[1] for s in skips] == [8, 16, 32]
    for i in range(1, 4):
        # the decoder sees skip + upsampled channels, twice its output width
        assert model.decoders[i].conv1.hyper["cin"] == 2 * model.decoders[i].conv1.hyper["cout"]
    assert model.predict(rng.normal(size=(2, 1, 64, 64))).shape == (2, 1, 64, 64)


def test_unet_depth_zero_is_plain_conv_net():
    model = build_model(ModelConfig("unet", features=4, depth=0), seed=2)
    x = rng.normal(size=(2, 1, 16, 16))
    b = model.bottleneck
    h = ad.relu(ad.conv2d(Tensor(x), b.conv1.weight, b.conv1.bias, pad=1))
    h = ad.relu(ad.conv2d(h, b.conv2.weight, b.conv2.bias, pad=1))
    ref = ad.sigmoid(ad.conv2d(h, model.head.weight, model.head.bias)).data
    assert_array_equal(model.predict(x), ref)


def test_vit_token_trace():
    model = small("vit", depth=2)
    tokens = model.tokens(Tensor(rng.normal(size=(2, 1, 32, 32))))
    assert tokens.shape == (2, 16, 8)


def test_vssm_matches_vit_token_trace():
    x = Tensor(rng.normal(size=(2, 1, 32, 32)))
    assert small("vssm", depth=2).tokens(x).shape == small("vit", depth=2).tokens(x).shape


@pytest.mark.parametrize("arch", ["vit", "vssm"])
def test_zeroed_blocks_leave_embed_expand_path(arch):
    model = small(arch, depth=2, seed=4)
    for block in model.blocks:
        zero_output_projections(block)
    reference = small(arch, depth=0, seed=4)
    reference.embed.proj.weight.data[...] = model.embed.proj.weight.data
    reference.embed.proj.bias.data[...] = model.embed.proj.bias.data
    reference.expand.proj.weight.data[...] = model.expand.proj.weight.data
    reference.expand.proj.bias.data[...] = model.expand.proj.bias.data
    x = rng.normal(size=(1, 1, 32, 32))
    assert_allclose(model.predict(x), reference.predict(x), atol=1e-15)


@pytest.mark.parametrize("arch", ["vit", "vssm"])
def test_depth_zero_constant_expansion_gives_blocky_output(arch):
    model = small(arch, depth=0)
    model.expand.proj.weight.data[...] = np.tile(rng.normal(size=(8, 1)), (1, 64))
    out = model.predict(rng.normal(size=(1, 1, 32, 32)))[0, 0]
    blocks = out.reshape(4, 8, 4, 8)
    assert_allclose(blocks, blocks[:, :1, :, :1] * np.ones_like(blocks), atol=1e-15)
    assert np.unique(np.round(out, 12)).size == 16


def test_vssm_memoryless_scan_is_per_patch():
    model = small("vssm", depth=1, seed=2)
    model.blocks[0].scan.log_rate.data[...] = 50.0
    x = rng.normal(size=(1, 1, 32, 32))
    y = x.copy()
    y[0, 0, :8, :8] += rng.normal(size=(8, 8))  # only patch (0, 0) changes
    diff = np.abs(model.predict(y) - model.predict(x))[0, 0]
    assert diff[:8, :8].max() > 0
    diff[:8, :8] = 0
    assert diff.max() == 0


def test_shape_rejections():
    with pytest.raises(ShapeError):
        small("vit")(Tensor(np.zeros((1, 1, 36, 36))))
    with pytest.raises(ShapeError):
        small("unet")(Tensor(np.zeros((1, 1, 34, 34))))
    with pytest.raises(ShapeError):
        small("cnn")(Tensor(np.zeros((1, 2, 32, 32))))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig("resnet").validate()
    with pytest.raises(ConfigError):
        ModelConfig("vit", features=6, heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig("cnn", depth=-1).validate()
    with pytest.raises(ConfigError):
        build_cnn(ModelConfig("unet"))
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"arch": "cnn", "width": 3})


@pytest.mark.parametrize("arch", ARCHS)
def test_checkpoint_roundtrip_bit_identical(arch, tmp_path):
    model = small(arch, seed=9)
    x = rng.normal(size=(2, 1, 32, 32))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, extra={"base_seed": 5})
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    assert_array_equal(loaded.predict(x), model.predict(x))
    for name, arr in model.state_dict().items():
        assert loaded.state_dict()[name].tobytes() == arr.tobytes()


def test_checkpoint_rejects_foreign_and_truncated(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(FormatError):
        read_checkpoint(bad)
    good = tmp_path / "good.ckpt"
    save_checkpoint(small("cnn"), good)
    good.write_bytes(good.read_bytes()[:-16])
    with pytest.raises(FormatError):
        read_checkpoint(good)
