import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ggnet import tensor as T
from ggnet.backbone import EncoderConfig, encode, init_backbone
from ggnet.errors import ConfigError, ShapeError
from ggnet.ggb import (
    ChannelGGBParams,
    GuidanceMap,
    SpatialGGBParams,
    build_mlif,
    channel_attention,
    channel_ggb,
    channel_statistics,
    init_channel_ggb,
    init_mlif,
    init_spatial_ggb,
    mlif_concat,
    spatial_attention,
    spatial_ggb,
)
from ggnet.params import ParamTable
from ggnet.tensor import Tensor


def spatial_params(c, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    return SpatialGGBParams(*(Tensor(rng.normal(0, scale, size=(c, c, 1, 1))) for _ in range(5)))


def channel_params(c, r, seed=0):
    rng = np.random.default_rng(seed)
    return ChannelGGBParams(
        Tensor(rng.normal(size=(c // r, c))), Tensor(rng.normal(size=(c, c // r))), reduction=r
    )


def rand(shape, seed, scale=1.0):
    return Tensor(np.random.default_rng(seed).normal(0, scale, size=shape))


# -- scalar loop transcription ------------------------------------------------


def softmax_row(vals):
    top = max(vals)
    e = [math.exp(v - top) for v in vals]
    s = sum(e)
    return [v / s for v in e]


def project(w, x):  # 1×1 conv as loops: w c×c, x c×h×w -> list over positions of channel vectors
    c, h, wd = x.shape
    return [[sum(w[o, i] * x[i, r // wd, r % wd] for i in range(c)) for o in range(c)] for r in range(h * wd)]


def spatial_oracle(x, g, p, guided=True):
    c, h, w = x.shape
    n = h * w
    W = {k: getattr(p, k).data[:, :, 0, 0] for k in ("w_theta", "w_phi", "w_mu", "w_eta", "w_rho")}
    theta, phi, mu = project(W["w_theta"], x), project(W["w_phi"], x), project(W["w_mu"], x)
    dot = lambda a, b: sum(ai * bi for ai, bi in zip(a, b))
    s_x = [softmax_row([dot(phi[i], theta[j]) for j in range(n)]) for i in range(n)]
    if guided:
        eta, rho = project(W["w_eta"], g), project(W["w_rho"], g)
        s_g = [softmax_row([dot(eta[i], rho[j]) for j in range(n)]) for i in range(n)]
        s_m = [softmax_row([s_x[i][j] * s_g[i][j] for j in range(n)]) for i in range(n)]
    else:
        s_m = s_x
    y = np.zeros((c, h, w))
    for i in range(n):
        for ch in range(c):
            y[ch, i // w, i % w] = sum(s_m[i][j] * mu[j][ch] for j in range(n)) + x[ch, i // w, i % w]
    return y, s_m


def channel_oracle(y, g, p, guided=True):
    c, h, w = y.shape
    yf = y.reshape(c, h * w)
    dot = lambda a, b: sum(ai * bi for ai, bi in zip(a, b))
    s_z = [softmax_row([dot(yf[i], yf[j]) for j in range(c)]) for i in range(c)]
    if guided:
        gf = g.reshape(c, h * w)
        beta = [sum(row) / (h * w) for row in gf]
        w1, w2 = p.w_fc1.data, p.w_fc2.data
        hidden = [max(0.0, dot(w1[k], beta)) for k in range(w1.shape[0])]
        v = [1.0 / (1.0 + math.exp(-dot(w2[ch], hidden))) for ch in range(c)]
        gh = [[v[ch] * val for val in gf[ch]] for ch in range(c)]
        s_gh = [softmax_row([dot(gh[i], gh[j]) for j in range(c)]) for i in range(c)]
        s_q = [softmax_row([s_z[i][j] * s_gh[i][j] for j in range(c)]) for i in range(c)]
    else:
        s_q = s_z
    z = np.array([[sum(s_q[i][j] * yf[j][k] for j in range(c)) + yf[i][k] for k in range(h * w)] for i in range(c)])
    return z.reshape(c, h, w), s_q


# -- spatial block -------------------------------------------------------------


def test_spatial_zero_mu_is_identity_bitwise():
    x, g = rand((3, 4, 4), 1), rand((3, 4, 4), 2)
    p = spatial_params(3)
    p.w_mu = Tensor(np.zeros((3, 3, 1, 1)))
    np.testing.assert_array_equal(spatial_ggb(x, g, p).data, x.data)


def test_spatial_single_position_adds_projection():
    # one position: every softmax is [1], so Y = mu(X) + X
    x, g = rand((3, 1, 1), 1), rand((3, 1, 1), 2)
    p = spatial_params(3)
    expect = p.w_mu.data[:, :, 0, 0] @ x.data[:, 0, 0] + x.data[:, 0, 0]
    np.testing.assert_allclose(spatial_ggb(x, g, p).data[:, 0, 0], expect, rtol=1e-14)


def test_spatial_scalar_channel_two_by_two():
    x, g = rand((1, 2, 2), 3), rand((1, 2, 2), 4)
    p = spatial_params(1, seed=5, scale=1.0)
    expect, _ = spatial_oracle(x.data, g.data, p)
    np.testing.assert_allclose(spatial_ggb(x, g, p).data, expect, rtol=1e-13, atol=1e-14)


@pytest.mark.parametrize("guided", [True, False])
def test_spatial_matches_loop_transcription(guided):
    x, g = rand((3, 2, 3), 6), rand((3, 2, 3), 7)
    p = spatial_params(3, seed=8)
    expect, s_m = spatial_oracle(x.data, g.data, p, guided)
    np.testing.assert_allclose(spatial_ggb(x, g, p, guided).data, expect, rtol=1e-12, atol=1e-13)
    got = spatial_attention(x, g, p, guided)["s_m"].data[0]
    np.testing.assert_allclose(got, np.array(s_m), rtol=1e-12, atol=1e-14)


def test_spatial_batched_equals_per_sample():
    x, g = rand((2, 3, 2, 2), 9), rand((2, 3, 2, 2), 10)
    p = spatial_params(3)
    both = spatial_ggb(x, g, p).data
    for i in range(2):
        np.testing.assert_allclose(both[i], spatial_ggb(x[i], g[i], p).data, rtol=1e-14, atol=1e-15)


def test_spatial_shape_mismatch():
    with pytest.raises(ShapeError):
        spatial_ggb(rand((3, 2, 2), 1), rand((3, 2, 4), 2), spatial_params(3))


def test_unguided_ignores_guidance():
    x = rand((3, 2, 2), 1)
    p = spatial_params(3)
    a = spatial_ggb(x, None, p, guided=False)
    b = spatial_ggb(x, rand((3, 2, 2), 5), p, guided=False)
    np.testing.assert_array_equal(a.data, b.data)


# -- channel block ---------------------------------------------------------------


def test_channel_single_channel_doubles_bitwise():
    y, g = rand((1, 3, 3), 1), rand((1, 3, 3), 2)
    np.testing.assert_array_equal(channel_ggb(y, g, channel_params(1, 1)).data, 2 * y.data)


def test_channel_statistics_of_constant():
    g = Tensor(np.broadcast_to(np.array([1.5, -2.0])[:, None, None], (2, 3, 4)).copy())
    np.testing.assert_allclose(channel_statistics(g).data, [1.5, -2.0], rtol=1e-15)


@pytest.mark.parametrize("guided", [True, False])
def test_channel_matches_loop_transcription(guided):
    y, g = rand((4, 2, 2), 11, 0.5), rand((4, 2, 2), 12, 0.5)
    p = channel_params(4, 2, seed=13)
    expect, s_q = channel_oracle(y.data, g.data, p, guided)
    np.testing.assert_allclose(channel_ggb(y, g, p, guided).data, expect, rtol=1e-12, atol=1e-13)
    got = channel_attention(y, g, p, guided)["s_q"].data[0]
    np.testing.assert_allclose(got, np.array(s_q), rtol=1e-12, atol=1e-14)


def test_channel_two_channels():
    y, g = rand((2, 1, 3), 14), rand((2, 1, 3), 15)
    p = channel_params(2, 2, seed=16)
    expect, _ = channel_oracle(y.data, g.data, p)
    np.testing.assert_allclose(channel_ggb(y, g, p).data, expect, rtol=1e-12)


def test_channel_coefficients_in_open_unit_interval():
    maps = channel_attention(rand((8, 3, 3), 1), rand((8, 3, 3), 2, 3.0), channel_params(8, 4))
    v = maps["v"].data
    assert v.shape == (1, 8)
    assert np.all((v > 0) & (v < 1))


def test_reduction_must_divide_channels():
    with pytest.raises(ConfigError):
        init_channel_ggb(ParamTable(), 6, 4, np.random.default_rng(0))


# -- shared properties -----------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(
    c=st.integers(1, 4),
    h=st.integers(1, 3),
    w=st.integers(1, 3),
    seed=st.integers(0, 2**16),
    scale=st.floats(0.1, 5.0),
)
def test_all_attention_rows_are_distributions(c, h, w, seed, scale):
    x, g = rand((c, h, w), seed, scale), rand((c, h, w), seed + 1, scale)
    maps = spatial_attention(x, g, spatial_params(c, seed))
    maps.update(channel_attention(x, g, channel_params(c, 1, seed)))
    for name in ("s_x", "s_g", "s_m", "s_z", "s_ghat", "s_q"):
        m = maps[name].data
        assert m.min() >= 0
        np.testing.assert_allclose(m.sum(axis=-1), 1.0, atol=1e-6, err_msg=name)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_spatial_block_commutes_with_position_permutation(seed):
    # attention over positions has no positional encoding
    rng = np.random.default_rng(seed)
    c, h, w = 2, 2, 3
    x, g = rng.normal(size=(c, h, w)), rng.normal(size=(c, h, w))
    perm = rng.permutation(h * w)
    permute = lambda a: a.reshape(c, h * w)[:, perm].reshape(c, h, w)
    p = spatial_params(c, seed % 1000)
    a = permute(spatial_ggb(Tensor(x), Tensor(g), p).data)
    b = spatial_ggb(Tensor(permute(x)), Tensor(permute(g)), p).data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_channel_block_commutes_with_channel_permutation_when_unguided(seed):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(3, 2, 2))
    perm = rng.permutation(3)
    p = channel_params(3, 1)
    a = channel_ggb(Tensor(y), None, p, guided=False).data[perm]
    b = channel_ggb(Tensor(y[perm]), None, p, guided=False).data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)


def test_gradcheck_spatial():
    rng = np.random.default_rng(0)
    p = spatial_params(2, scale=0.7)
    weights = [getattr(p, k).data for k in ("w_theta", "w_phi", "w_mu", "w_eta", "w_rho")]
    out_w = rng.normal(size=(2, 2, 2))

    def f(x, g, *ws):
        return (spatial_ggb(x, g, SpatialGGBParams(*ws)) * Tensor(out_w)).sum()

    assert T.gradcheck(f, [rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 2, 2)), *weights]) < 1e-3


def test_gradcheck_channel():
    rng = np.random.default_rng(1)
    p = channel_params(4, 2)
    out_w = rng.normal(size=(4, 2, 2))

    def f(y, g, w1, w2):
        return (channel_ggb(y, g, ChannelGGBParams(w1, w2, 2)) * Tensor(out_w)).sum()

    args = [rng.normal(0, 0.5, size=(4, 2, 2)), rng.normal(0, 0.5, size=(4, 2, 2)), p.w_fc1.data, p.w_fc2.data]
    assert T.gradcheck(f, args) < 1e-3


# -- guidance construction -----------------------------------------------------------


def pyramid(seed=0, n=None):
    cfg = EncoderConfig(stage_channels=[2, 3, 4, 5], aspp_out_channels=6)
    table = ParamTable()
    rng = np.random.default_rng(seed)
    init_backbone(table, cfg, rng)
    init_mlif(table, cfg.stage_channels, cfg.aspp_out_channels, rng)
    shape = (1, 32, 32) if n is None else (n, 1, 32, 32)
    img = Tensor(np.random.default_rng(99).random(shape))
    return encode(img, cfg, table), table


def test_mlif_concat_channels_and_extent():
    pyr, _ = pyramid()
    assert mlif_concat(pyr).shape == (2 + 3 + 4 + 5, 8, 8)


def test_guidance_matches_feature_shape():
    for n in (None, 2):
        pyr, table = pyramid(n=n)
        g = build_mlif(pyr, table)
        assert isinstance(g, GuidanceMap)
        assert g.g.shape == pyr.x_aspp.shape


def test_guidance_deterministic():
    a = build_mlif(*pyramid(seed=4)).g.data
    b = build_mlif(*pyramid(seed=4)).g.data
    np.testing.assert_array_equal(a, b)


def test_init_registers_expected_names():
    table = ParamTable()
    rng = np.random.default_rng(0)
    init_spatial_ggb(table, 8, rng)
    init_channel_ggb(table, 8, 4, rng)
    assert sorted(table) == sorted(
        ["sggb.theta", "sggb.phi", "sggb.mu", "sggb.eta", "sggb.rho", "cggb.fc1", "cggb.fc2"]
    )
    assert table["cggb.fc1"].shape == (2, 8)
    assert SpatialGGBParams.from_table(table).w_mu.shape == (8, 8, 1, 1)
