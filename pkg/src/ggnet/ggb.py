"""Global guidance blocks: guided non-local attention over positions and channels.

The guidance map is built from all four encoder stages (multi-layer
integrated features), so shallow boundary detail can steer the long-range
attention computed on the deep ASPP features.  Both blocks accept
c×h×w or n×c×h×w inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid
from .errors import ConfigError, ShapeError
from .params import ParamTable, he_normal
from .tensor import Tensor


@dataclass
class GuidanceMap:
    g: Tensor


@dataclass
class SpatialGGBParams:
    w_theta: Tensor
    w_phi: Tensor
    w_mu: Tensor
    w_eta: Tensor | None = None  # guidance embeddings; absent for a plain non-local block
    w_rho: Tensor | None = None

    @classmethod
    def from_table(cls, table: ParamTable, prefix: str = "sggb") -> "SpatialGGBParams":
        get = lambda k: table[f"{prefix}.{k}"] if f"{prefix}.{k}" in table else None
        return cls(*(get(k) for k in ("theta", "phi", "mu", "eta", "rho")))


@dataclass
class ChannelGGBParams:
    w_fc1: Tensor | None  # (c/r)×c; None for a plain non-local block
    w_fc2: Tensor | None  # c×(c/r)
    reduction: int = 4

    @classmethod
    def from_table(cls, table: ParamTable, reduction: int, prefix: str = "cggb") -> "ChannelGGBParams":
        if f"{prefix}.fc1" not in table:
            return cls(None, None, reduction)
        return cls(table[f"{prefix}.fc1"], table[f"{prefix}.fc2"], reduction)


def init_mlif(table: ParamTable, stage_channels: list[int], out_channels: int, rng) -> None:
    table.add("mlif.proj.w", he_normal(rng, (out_channels, sum(stage_channels), 1, 1)))
    table.add("mlif.proj.b", np.zeros(out_channels))


def init_spatial_ggb(table: ParamTable, c: int, rng, prefix: str = "sggb", guided: bool = True) -> None:
    # small embeddings keep the unscaled dot-product similarities out of saturation at init
    for k in ("theta", "phi", "eta", "rho") if guided else ("theta", "phi"):
        table.add(f"{prefix}.{k}", rng.normal(0.0, 1.0 / c, size=(c, c, 1, 1)))
    table.add(f"{prefix}.mu", he_normal(rng, (c, c, 1, 1)) * 0.1)


def init_channel_ggb(table: ParamTable, c: int, reduction: int, rng, prefix: str = "cggb") -> None:
    """The excitation FCs; only the guided channel block has parameters."""
    if reduction <= 0 or c % reduction:
        raise ConfigError(f"channel reduction {reduction} must divide channel count {c}")
    table.add(f"{prefix}.fc1", he_normal(rng, (c // reduction, c)))
    table.add(f"{prefix}.fc2", he_normal(rng, (c, c // reduction)))


def _as4d(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected c×h×w or n×c×h×w, got {x.shape}")


def _channel_axis(x: Tensor) -> int:
    return x.ndim - 3


def mlif_concat(pyr: FeaturePyramid) -> Tensor:
    """Resize f1..f4 to f2's spatial extent and stack them on the channel axis."""
    size = pyr.f2.shape[-2:]
    return T.concat([T.resize_bilinear(f, size) for f in pyr.stages], axis=_channel_axis(pyr.f2))


def build_mlif(pyr: FeaturePyramid, params: ParamTable, target: Tensor | None = None) -> GuidanceMap:
    """Guidance map matched to ``target`` (default: the pyramid's ASPP output).

    The concatenated features live at f2's resolution; they are resized to the
    target's extent and projected to its channel count by a 1×1 conv.
    """
    target = pyr.x_aspp if target is None else target
    cat = mlif_concat(pyr)
    cat = T.resize_bilinear(cat, target.shape[-2:])
    g = T.conv2d(cat, params["mlif.proj.w"], params["mlif.proj.b"])
    return GuidanceMap(g)


def _unwrap(g) -> Tensor:
    return g.g if isinstance(g, GuidanceMap) else g


def _check_pair(x: Tensor, g: Tensor, name: str) -> None:
    if x.shape != g.shape:
        raise ShapeError(f"{name}: feature {x.shape} and guidance {g.shape} must have equal shapes")


def spatial_attention(x: Tensor, g, p: SpatialGGBParams, guided: bool = True) -> dict[str, Tensor]:
    """The hw×hw similarity maps S_x, S_g and the guided map S_M (n×hw×hw).

    With ``guided=False`` this is a plain non-local block and ``g`` is ignored.
    """
    if guided:
        g = _unwrap(g)
        _check_pair(x, g, "spatial_ggb")
    x4, _ = _as4d(x)
    n, c, h, w = x4.shape

    def positions(t):  # n×c×h×w -> n×hw×c
        return t.reshape(n, c, h * w).transpose(0, 2, 1)

    theta = positions(T.conv2d(x4, p.w_theta))
    phi = positions(T.conv2d(x4, p.w_phi))
    s_x = T.softmax(phi @ theta.transpose(0, 2, 1), axis=-1)
    maps = {"s_x": s_x}
    if guided:
        g4, _ = _as4d(g)
        eta = positions(T.conv2d(g4, p.w_eta))
        rho = positions(T.conv2d(g4, p.w_rho))
        s_g = T.softmax(eta @ rho.transpose(0, 2, 1), axis=-1)
        maps["s_g"] = s_g
        maps["s_m"] = T.softmax(s_x * s_g, axis=-1)
    else:
        maps["s_m"] = s_x
    return maps


def spatial_ggb(x: Tensor, g, p: SpatialGGBParams, guided: bool = True) -> Tensor:
    """Y = S_M · μ(X) + X, aggregating over all positions."""
    x4, squeeze = _as4d(x)
    n, c, h, w = x4.shape
    s_m = spatial_attention(x, g, p, guided)["s_m"]
    mu = T.conv2d(x4, p.w_mu).reshape(n, c, h * w).transpose(0, 2, 1)
    y = (s_m @ mu).transpose(0, 2, 1).reshape(n, c, h, w) + x4
    return y.reshape(y.shape[1:]) if squeeze else y


def channel_statistics(g: Tensor) -> Tensor:
    """Global average per channel (n×c, or c for unbatched input)."""
    return T.mean(g, axis=(-2, -1))


def channel_coefficients(beta: Tensor, p: ChannelGGBParams) -> Tensor:
    """Squeeze-excitation gate: sigmoid(W2 · relu(W1 · beta))."""
    b2 = beta.reshape(1, beta.shape[0]) if beta.ndim == 1 else beta
    hidden = T.relu(b2 @ p.w_fc1.transpose(1, 0))
    v = T.sigmoid(hidden @ p.w_fc2.transpose(1, 0))
    return v.reshape(v.shape[1:]) if beta.ndim == 1 else v


def channel_attention(y: Tensor, g, p: ChannelGGBParams, guided: bool = True) -> dict[str, Tensor]:
    """The c×c maps S_Z, S_Ĝ and the guided map S_Q, plus β and V_λ."""
    if guided:
        g = _unwrap(g)
        _check_pair(y, g, "channel_ggb")
    y4, _ = _as4d(y)
    n, c, h, w = y4.shape
    yr = y4.reshape(n, c, h * w)
    s_z = T.softmax(yr @ yr.transpose(0, 2, 1), axis=-1)
    maps = {"s_z": s_z}
    if guided:
        g4, _ = _as4d(g)
        beta = channel_statistics(g4)
        v = channel_coefficients(beta, p)
        g_hat = g4 * v.reshape(n, c, 1, 1).expand(g4.shape)
        gr = g_hat.reshape(n, c, h * w)
        s_gh = T.softmax(gr @ gr.transpose(0, 2, 1), axis=-1)
        maps.update(beta=beta, v=v, s_ghat=s_gh, s_q=T.softmax(s_z * s_gh, axis=-1))
    else:
        maps["s_q"] = s_z
    return maps


def channel_ggb(y: Tensor, g, p: ChannelGGBParams, guided: bool = True) -> Tensor:
    """Z = S_Q · Ŷ + Y with Ŷ the c×hw view of Y."""
    y4, squeeze = _as4d(y)
    n, c, h, w = y4.shape
    s_q = channel_attention(y, g, p, guided)["s_q"]
    z = (s_q @ y4.reshape(n, c, h * w)).reshape(n, c, h, w) + y4
    return z.reshape(z.shape[1:]) if squeeze else z
