"""Small trainable encoder: four stride-2 stages plus an ASPP head.

Stands in for a pretrained ResNeXt.  Each stage is
conv3x3 -> ReLU -> conv3x3 -> ReLU -> stride-2 conv3x3 -> batch-norm -> ReLU,
so the pyramid sits at strides 2, 4, 8 and 16 and every stage output is
normalised (the boundary heads read them directly).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .params import ParamTable, conv_params
from .tensor import Tensor

N_STAGES = 4


@dataclass
class EncoderConfig:
    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    input_channels: int = 1
    aspp_dilations: list[int] = field(default_factory=lambda: [1, 2, 4])
    aspp_out_channels: int = 128
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.stage_channels = [int(c) for c in self.stage_channels]
        self.aspp_dilations = [int(d) for d in self.aspp_dilations]
        if len(self.stage_channels) != N_STAGES:
            raise ConfigError(f"encoder needs exactly {N_STAGES} stages, got {self.stage_channels}")
        if any(c <= 0 for c in self.stage_channels) or self.input_channels <= 0:
            raise ConfigError("channel counts must be positive")
        if not self.aspp_dilations or any(d <= 0 for d in self.aspp_dilations):
            raise ConfigError(f"ASPP dilations must be positive, got {self.aspp_dilations}")
        if self.aspp_out_channels <= 0:
            raise ConfigError("aspp_out_channels must be positive")


@dataclass
class FeaturePyramid:
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor
    x_aspp: Tensor | None = None

    @property
    def stages(self) -> list[Tensor]:
        return [self.f1, self.f2, self.f3, self.f4]


def init_backbone(table: ParamTable, cfg: EncoderConfig, rng: np.random.Generator) -> None:
    c_prev = cfg.input_channels
    for i, c in enumerate(cfg.stage_channels, start=1):
        conv_params(table, f"enc.s{i}.conv1", rng, c_prev, c, 3)
        table.add(f"enc.s{i}.bn.gamma", np.ones(c))
        table.add(f"enc.s{i}.bn.beta", np.zeros(c))
        table.add_buffer(f"enc.s{i}.bn.running_mean", np.zeros(c))
        table.add_buffer(f"enc.s{i}.bn.running_var", np.ones(c))
        conv_params(table, f"enc.s{i}.conv2", rng, c, c, 3)
        conv_params(table, f"enc.s{i}.down", rng, c, c, 3)
        c_prev = c
    c4, a = cfg.stage_channels[-1], cfg.aspp_out_channels
    for j, _ in enumerate(cfg.aspp_dilations):
        conv_params(table, f"aspp.branch{j}", rng, c4, a, 3)
    conv_params(table, "aspp.pool", rng, c4, a, 1)
    conv_params(table, "aspp.fuse", rng, a * (len(cfg.aspp_dilations) + 1), a, 1)


def _conv(x: Tensor, params: ParamTable, prefix: str, **kw) -> Tensor:
    bias = params[f"{prefix}.b"] if f"{prefix}.b" in params else None
    return T.conv2d(x, params[f"{prefix}.w"], bias, **kw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    buffers: dict[str, np.ndarray],
    key: str,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation of an n×c×h×w tensor.

    Training uses batch statistics and folds them into the running
    estimates in ``buffers``; inference uses the running estimates.
    """
    n, c, h, w = x.shape
    shape = x.shape
    axes = (0, 2, 3)
    if training:
        mu = T.mean(x, axes, keepdims=True)
        xc = x - mu.expand(shape)
        var = T.mean(xc * xc, axes, keepdims=True)
        xhat = xc * ((var + eps) ** -0.5).expand(shape)
        count = n * h * w
        unbiased = var.data.reshape(c) * (count / max(count - 1, 1))
        rm, rv = f"{key}.running_mean", f"{key}.running_var"
        buffers[rm] = (1 - momentum) * buffers[rm] + momentum * mu.data.reshape(c)
        buffers[rv] = (1 - momentum) * buffers[rv] + momentum * unbiased
    else:
        mean_ = buffers[f"{key}.running_mean"].reshape(1, c, 1, 1)
        inv = 1.0 / np.sqrt(buffers[f"{key}.running_var"].reshape(1, c, 1, 1) + eps)
        xhat = (x - Tensor(np.broadcast_to(mean_, shape).astype(x.dtype))) * Tensor(
            np.broadcast_to(inv, shape).astype(x.dtype)
        )
    return xhat * gamma.reshape(1, c, 1, 1).expand(shape) + beta.reshape(1, c, 1, 1).expand(shape)


def _as4d(x: Tensor) -> tuple[Tensor, bool]:
    return (x.reshape((1,) + x.shape), True) if x.ndim == 3 else (x, False)


def encode(
    image: Tensor,
    cfg: EncoderConfig,
    params: ParamTable,
    training: bool = False,
    with_aspp: bool = True,
) -> FeaturePyramid:
    """Run the four encoder stages (and ASPP) on a 1×h×w or n×1×h×w image."""
    x, squeeze = _as4d(image)
    h, w = x.shape[-2:]
    if h % 16 or w % 16:
        raise ConfigError(f"input extents {h}×{w} must be divisible by 16")
    if x.shape[1] != cfg.input_channels:
        raise ConfigError(f"expected {cfg.input_channels} input channel(s), got {x.shape[1]}")
    feats = []
    for i in range(1, N_STAGES + 1):
        x = T.relu(_conv(x, params, f"enc.s{i}.conv1", padding=1))
        x = T.relu(_conv(x, params, f"enc.s{i}.conv2", padding=1))
        x = _conv(x, params, f"enc.s{i}.down", stride=2, padding=1)
        x = batch_norm(
            x,
            params[f"enc.s{i}.bn.gamma"],
            params[f"enc.s{i}.bn.beta"],
            params.buffers,
            f"enc.s{i}.bn",
            training,
            cfg.bn_momentum,
            cfg.bn_eps,
        )
        x = T.relu(x)
        feats.append(x)
    x_aspp = aspp(feats[-1], cfg, params) if with_aspp else None
    if squeeze:
        feats = [f.reshape(f.shape[1:]) for f in feats]
        x_aspp = x_aspp.reshape(x_aspp.shape[1:]) if x_aspp is not None else None
    return FeaturePyramid(*feats, x_aspp=x_aspp)


def aspp(f4: Tensor, cfg: EncoderConfig, params: ParamTable) -> Tensor:
    """Dilated 3×3 branches plus a global-average branch, fused by a 1×1 conv."""
    x, squeeze = _as4d(f4)
    n, c, h, w = x.shape
    branches = [
        T.relu(_conv(x, params, f"aspp.branch{j}", padding=d, dilation=d))
        for j, d in enumerate(cfg.aspp_dilations)
    ]
    pooled = T.mean(x, (2, 3), keepdims=True)
    pooled = T.relu(_conv(pooled, params, "aspp.pool"))
    branches.append(T.resize_bilinear(pooled, (h, w)))
    out = T.relu(_conv(T.concat(branches, axis=1), params, "aspp.fuse"))
    return out.reshape(out.shape[1:]) if squeeze else out
