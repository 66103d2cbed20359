"""Full network: encoder, ASPP, guided non-local blocks, BD heads and decoder.

The decoder follows the DeepLabV3+ pattern: the refined stride-16 features
are upsampled to the stride-4 stage, fused with a projection of that stage,
mapped to one logit channel and bilinearly upsampled 4× to the input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .backbone import EncoderConfig, FeaturePyramid, encode, init_backbone
from .bd import BDOutput, bd_forward, init_bd_head, layer_targets
from .data import SegSample, augment
from .errors import ConfigError, NumericalError
from .ggb import (
    ChannelGGBParams,
    GuidanceMap,
    SpatialGGBParams,
    build_mlif,
    channel_ggb,
    init_channel_ggb,
    init_mlif,
    init_spatial_ggb,
    spatial_ggb,
)
from .losses import LossWeights, dice_bce, total_loss
from .params import ParamTable, conv_params
from .tensor import Tensor


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    reduction: int = 4
    low_channels: int = 16
    decoder_channels: int = 32
    use_ggb: bool = True
    use_guidance: bool = True
    use_bd: bool = True

    def variant(self) -> str:
        if not self.use_ggb:
            return "baseline" + ("+bd" if self.use_bd else "")
        name = "ggb" if self.use_guidance else "nlb"
        return f"baseline+{name}" + ("+bd" if self.use_bd else "")


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 4
    epochs: int = 60
    lr_decay: float = 0.1
    lr_step: int = 50
    augment: bool = True
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError(f"invalid optimiser settings in {self}")
        if self.batch <= 0 or self.epochs < 0 or self.lr_step <= 0 or self.lr_decay <= 0:
            raise ConfigError(f"invalid schedule in {self}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_step)


class GGNetParams:
    """Every trainable tensor in one named table, plus optimiser state."""

    def __init__(self, cfg: ModelConfig, table: ParamTable):
        self.cfg = cfg
        self.table = table
        self.momentum: dict[str, np.ndarray] = {k: np.zeros_like(t.data) for k, t in table.items()}
        self.epoch = 0
        self.step = 0

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, dtype="float64") -> "GGNetParams":
        rng = np.random.default_rng(seed)
        table = ParamTable(dtype)
        enc = cfg.encoder
        init_backbone(table, enc, rng)
        c = enc.aspp_out_channels
        if cfg.use_ggb:
            if cfg.use_guidance:
                init_mlif(table, enc.stage_channels, c, rng)
            init_spatial_ggb(table, c, rng, guided=cfg.use_guidance)
            if cfg.use_guidance:
                init_channel_ggb(table, c, cfg.reduction, rng)
        if cfg.use_bd:
            for i, ci in enumerate(enc.stage_channels, start=1):
                init_bd_head(table, i, ci, rng)
        conv_params(table, "dec.low", rng, enc.stage_channels[1], cfg.low_channels, 1)
        conv_params(table, "dec.fuse", rng, c + cfg.low_channels, cfg.decoder_channels, 3)
        conv_params(table, "dec.out", rng, cfg.decoder_channels, 1, 1)
        return cls(cfg, table)

    @property
    def dtype(self):
        return self.table.dtype

    def count(self) -> int:
        return self.table.count()


@dataclass
class ForwardOutput:
    prob: Tensor  # n×1×h×w
    logits: Tensor
    bd: list[BDOutput]
    pyramid: FeaturePyramid
    guidance: GuidanceMap | None
    y: Tensor | None
    z: Tensor


def forward(params: GGNetParams, images: Tensor, training: bool = False) -> ForwardOutput:
    """Segment a batch (n×1×h×w) or a single 1×h×w image."""
    cfg, table = params.cfg, params.table
    squeeze = images.ndim == 3
    x_in = images.reshape((1,) + images.shape) if squeeze else images
    if x_in.dtype != params.dtype:
        x_in = Tensor(x_in.data.astype(params.dtype))
    pyr = encode(x_in, cfg.encoder, table, training=training)
    x = pyr.x_aspp
    guidance, y = None, None
    if cfg.use_ggb:
        guidance = build_mlif(pyr, table) if cfg.use_guidance else None
        y = spatial_ggb(x, guidance, SpatialGGBParams.from_table(table), guided=cfg.use_guidance)
        z = channel_ggb(
            y, guidance, ChannelGGBParams.from_table(table, cfg.reduction), guided=cfg.use_guidance
        )
    else:
        z = x
    bd = []
    if cfg.use_bd:
        bd = [bd_forward(f, table[f"bd{i}.w"], table[f"bd{i}.b"]) for i, f in enumerate(pyr.stages, start=1)]

    f2 = pyr.f2
    low = T.relu(T.conv2d(f2, table["dec.low.w"], table["dec.low.b"]))
    up = T.resize_bilinear(z, f2.shape[-2:])
    fused = T.relu(T.conv2d(T.concat([up, low], axis=1), table["dec.fuse.w"], table["dec.fuse.b"], padding=1))
    logits = T.conv2d(fused, table["dec.out.w"], table["dec.out.b"])
    logits = T.resize_bilinear(logits, x_in.shape[-2:])
    prob = T.sigmoid(logits)
    if squeeze:
        prob, logits = prob[0], logits[0]
    return ForwardOutput(prob, logits, bd, pyr, guidance, y, z)


# ---------------------------------------------------------------------------
# objective and optimisation


def batch_loss(
    out: ForwardOutput,
    samples: Sequence[SegSample],
    cfg: ModelConfig,
    weights: LossWeights = LossWeights(),
    parts: dict | None = None,
) -> Tensor:
    """Mean over samples of the composite loss (final segmentation only without BD)."""
    dtype = out.prob.dtype
    bd_probs = [b.prob for b in out.bd]
    bd_preds = [b.boundary_pred for b in out.bd]
    total = None
    for i, s in enumerate(samples):
        sample_parts = {} if parts is not None else None
        final_mask = s.mask[None].astype(dtype)
        if cfg.use_bd:
            per_layer, masks, bounds = [], [], []
            for p, d in zip(bd_probs, bd_preds):
                m, b = layer_targets(s.mask, p.shape[-2:])
                per_layer.append((p[i], d[i]))
                masks.append(m[None])
                bounds.append(b[None])
            loss = total_loss(per_layer, out.prob[i], masks, bounds, final_mask, weights, sample_parts)
        else:
            loss = dice_bce(out.prob[i], final_mask)
            if sample_parts is not None:
                sample_parts["final_seg"] = loss.item()
        if parts is not None:
            for k, v in sample_parts.items():
                parts[k] = parts.get(k, 0.0) + v / len(samples)
        total = loss if total is None else total + loss
    return total * (1.0 / len(samples))


def sgd_update(params: GGNetParams, lr: float, momentum: float, weight_decay: float) -> None:
    """Heavy-ball SGD with decoupled weight decay."""
    for name, t in params.table.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        v = params.momentum[name]
        v *= momentum
        v += g
        t.data = t.data - lr * v - (lr * weight_decay) * t.data


def _stack(samples: Sequence[SegSample], dtype) -> Tensor:
    return Tensor(np.stack([s.image for s in samples]).astype(dtype))


def train_step(
    batch: Sequence[SegSample],
    params: GGNetParams,
    cfg: TrainConfig,
    lr: float | None = None,
    weights: LossWeights = LossWeights(),
) -> float:
    """One forward/backward/update; returns the loss before the update."""
    if not batch:
        raise ValueError("train_step needs a nonempty batch")
    lr = cfg.lr if lr is None else lr
    out = forward(params, _stack(batch, params.dtype), training=True)
    parts: dict[str, float] = {}
    loss = batch_loss(out, batch, params.cfg, weights, parts)
    value = loss.item()
    if not math.isfinite(value):
        bad = [k for k, v in parts.items() if not math.isfinite(v)] or ["total"]
        raise NumericalError(
            f"non-finite loss {value} at epoch {params.epoch}, step {params.step}; offending terms: {', '.join(bad)}"
        )
    params.table.zero_grad()
    T.backward(loss)
    sgd_update(params, lr, cfg.momentum, cfg.weight_decay)
    params.step += 1
    return value


def train(
    params: GGNetParams,
    samples: Sequence[SegSample],
    cfg: TrainConfig,
    weights: LossWeights = LossWeights(),
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> list[float]:
    """Train from ``params.epoch`` up to ``cfg.epochs``; returns mean loss per epoch run.

    Shuffling and augmentation draw from a generator seeded by (seed, epoch),
    so a run resumed from a checkpoint replays the uninterrupted trajectory.
    """
    history = []
    n = len(samples)
    if n == 0:
        raise ValueError("no training samples")
    while params.epoch < cfg.epochs:
        epoch = params.epoch
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        lr = cfg.lr_at(epoch)
        losses = []
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            batch = [augment(samples[j], rng) if cfg.augment else samples[j] for j in idx]
            losses.append(train_step(batch, params, cfg, lr, weights) * len(batch))
        mean_loss = float(np.sum(losses) / n)
        history.append(mean_loss)
        params.epoch = epoch + 1
        if on_epoch is not None:
            on_epoch(epoch, lr, mean_loss)
    return history


# ---------------------------------------------------------------------------
# inference


def predict_proba(params: GGNetParams, images: np.ndarray, batch: int = 16) -> np.ndarray:
    """Foreground probabilities for an n×1×h×w stack (inference-mode normalisation)."""
    outs = []
    with T.no_grad():
        for start in range(0, len(images), batch):
            chunk = Tensor(np.asarray(images[start:start + batch], dtype=params.dtype))
            outs.append(forward(params, chunk, training=False).prob.data)
    return np.concatenate(outs, axis=0)


def infer(params: GGNetParams, image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary mask (h×w) for a 1×h×w image; strictly-greater thresholding."""
    prob = predict_proba(params, np.asarray(image)[None])[0, 0]
    return (prob > threshold).astype(np.uint8)
