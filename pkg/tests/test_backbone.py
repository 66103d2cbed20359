import numpy as np
import pytest

from ggnet import tensor as T
from ggnet.backbone import EncoderConfig, aspp, batch_norm, encode, init_backbone
from ggnet.errors import ConfigError
from ggnet.params import ParamTable
from ggnet.tensor import Tensor, backward

SMALL = EncoderConfig(stage_channels=[4, 4, 8, 8], aspp_out_channels=8)


def build(cfg=SMALL, seed=0):
    table = ParamTable(np.float64)
    init_backbone(table, cfg, np.random.default_rng(seed))
    return table


def image(n=None, size=32, seed=1):
    shape = (1, size, size) if n is None else (n, 1, size, size)
    return Tensor(np.random.default_rng(seed).random(shape))


def test_pyramid_strides_and_channels():
    pyr = encode(image(size=64), SMALL, build())
    assert [f.shape for f in pyr.stages] == [(4, 32, 32), (4, 16, 16), (8, 8, 8), (8, 4, 4)]
    assert pyr.x_aspp.shape == (8, 4, 4)


def test_batched_shapes():
    pyr = encode(image(n=3), SMALL, build())
    assert pyr.f1.shape == (3, 4, 16, 16)
    assert pyr.x_aspp.shape == (3, 8, 2, 2)


def test_indivisible_extent_rejected():
    with pytest.raises(ConfigError, match="divisible by 16"):
        encode(Tensor(np.zeros((1, 24, 32))), SMALL, build())


def test_stage_count_enforced():
    with pytest.raises(ConfigError):
        EncoderConfig(stage_channels=[4, 8, 16])
    with pytest.raises(ConfigError):
        EncoderConfig(aspp_dilations=[0])


def test_zero_image_gives_zero_pyramid():
    # all biases start at zero, and batch norm maps a zero map to zero
    pyr = encode(Tensor(np.zeros((2, 1, 32, 32))), SMALL, build(), training=True)
    for f in pyr.stages + [pyr.x_aspp]:
        assert not f.data.any()


def test_deterministic():
    a = encode(image(), SMALL, build(seed=3))
    b = encode(image(), SMALL, build(seed=3))
    for fa, fb in zip(a.stages + [a.x_aspp], b.stages + [b.x_aspp]):
        np.testing.assert_array_equal(fa.data, fb.data)


def test_stage_outputs_rectified():
    pyr = encode(image(n=2), SMALL, build(), training=True)
    for f in pyr.stages:
        assert f.data.min() >= 0.0


def test_batch_norm_training_statistics():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(3.0, 2.0, size=(4, 3, 5, 5)))
    buffers = {"k.running_mean": np.zeros(3), "k.running_var": np.ones(3)}
    out = batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), buffers, "k", training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, rtol=1e-4)
    expect_mean = 0.1 * x.data.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(buffers["k.running_mean"], expect_mean, rtol=1e-12)
    expect_var = 0.9 + 0.1 * x.data.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(buffers["k.running_var"], expect_var, rtol=1e-12)


def test_batch_norm_inference_uses_running_stats():
    x = Tensor(np.full((1, 2, 3, 3), 5.0))
    buffers = {"k.running_mean": np.array([1.0, 5.0]), "k.running_var": np.array([4.0, 1.0])}
    out = batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), buffers, "k", training=False, eps=0.0)
    np.testing.assert_allclose(out.data[0, 0], 2.0)
    np.testing.assert_allclose(out.data[0, 1], 0.0)


def test_batch_norm_gradcheck():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 2, 3, 3))
    g = rng.normal(size=2)
    b = rng.normal(size=2)
    w = rng.normal(size=(2, 2, 3, 3))

    def f(x, g, b):
        buf = {"k.running_mean": np.zeros(2), "k.running_var": np.ones(2)}
        return (batch_norm(x, g, b, buf, "k", training=True) * Tensor(w)).sum()

    assert T.gradcheck(f, [x, g, b]) < 1e-3


def test_aspp_constant_when_dilation_reaches_past_the_map():
    # every off-centre tap of each dilated kernel lands in the zero padding, so a
    # spatially constant input yields a spatially constant output
    cfg = EncoderConfig(stage_channels=[2, 2, 2, 3], aspp_dilations=[4, 8], aspp_out_channels=4)
    table = build(cfg)
    x = Tensor(np.broadcast_to(np.array([0.3, -1.2, 2.0])[:, None, None], (3, 4, 4)).copy())
    out = aspp(x, cfg, table).data
    assert out.shape == (4, 4, 4)
    np.testing.assert_allclose(out, out[:, :1, :1] * np.ones((1, 4, 4)), rtol=0, atol=1e-14)


def test_aspp_single_dilation_matches_hand_assembly():
    cfg = EncoderConfig(stage_channels=[2, 2, 2, 3], aspp_dilations=[1], aspp_out_channels=2)
    table = build(cfg)
    x = Tensor(np.random.default_rng(5).normal(size=(3, 4, 4)))
    branch = T.relu(T.conv2d(x, table["aspp.branch0.w"], table["aspp.branch0.b"], padding=1))
    pooled = T.relu(T.conv2d(T.mean(x, (1, 2), keepdims=True), table["aspp.pool.w"], table["aspp.pool.b"]))
    pooled = pooled.expand((2, 4, 4))
    expect = T.relu(T.conv2d(T.concat([branch, pooled], axis=0), table["aspp.fuse.w"], table["aspp.fuse.b"]))
    np.testing.assert_allclose(aspp(x, cfg, table).data, expect.data, rtol=1e-14, atol=1e-14)


def test_every_parameter_receives_gradient():
    table = build()
    pyr = encode(image(n=2), SMALL, table, training=True)
    rng = np.random.default_rng(9)
    loss = None
    for f in pyr.stages + [pyr.x_aspp]:
        term = (f * Tensor(rng.normal(size=f.shape))).sum()
        loss = term if loss is None else loss + term
    backward(loss)
    for name, t in table.items():
        assert t.grad is not None and np.abs(t.grad).sum() > 0, name


def test_training_mode_updates_running_stats_only_when_training():
    table = build()
    before = {k: v.copy() for k, v in table.buffers.items()}
    encode(image(n=2), SMALL, table, training=False)
    for k in before:
        np.testing.assert_array_equal(before[k], table.buffers[k])
    encode(image(n=2), SMALL, table, training=True)
    assert any(not np.array_equal(before[k], table.buffers[k]) for k in before)
