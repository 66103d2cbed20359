"""Composite objective: deep-supervised segmentation plus boundary terms."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

PROB_CLAMP = 1e-7


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 10.0
    n_layer: int = 4

    def __post_init__(self):
        # zero weights are allowed for ablations; negative ones are not
        if self.lambda1 < 0 or self.lambda2 < 0 or self.n_layer <= 0:
            raise ConfigError(f"invalid loss weights {self}")


def _const(g, like: Tensor) -> Tensor:
    arr = g.data if isinstance(g, Tensor) else np.asarray(g)
    if arr.shape != like.shape:
        raise ShapeError(f"prediction {like.shape} and target {arr.shape} differ")
    return Tensor(arr.astype(like.dtype))


def dice_term(p: Tensor, g) -> Tensor:
    g = _const(g, p)
    inter = (p * g).sum()
    denom = (p * p).sum() + (g * g).sum()
    if denom.item() == 0.0:
        # p and g both identically zero: a perfect (empty) prediction
        return p.sum() * 0.0
    return 1.0 - 2.0 * inter / denom


def bce(p: Tensor, g) -> Tensor:
    g = _const(g, p)
    pc = T.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = g * T.log(pc) + (1.0 - g) * T.log(1.0 - pc)
    return -ll.mean()


def dice_bce(p: Tensor, g) -> Tensor:
    """Dice loss plus binary cross-entropy between probabilities ``p`` and a binary mask."""
    return dice_term(p, g) + bce(p, g)


def boundary_mse(d: Tensor, b) -> Tensor:
    """Squared error against the boundary target, normalised by pixel count."""
    b = _const(b, d)
    diff = d - b
    return (diff * diff).sum() * (1.0 / d.size)


def total_loss(
    per_layer: Sequence[tuple[Tensor, Tensor]],
    final_seg: Tensor,
    layer_masks: Sequence[np.ndarray],
    layer_boundaries: Sequence[np.ndarray],
    final_mask: np.ndarray,
    w: LossWeights = LossWeights(),
    parts: dict | None = None,
) -> Tensor:
    """Sum over layers of λ1·seg + λ2·boundary, plus the final segmentation loss.

    ``per_layer`` holds (segmentation probability, boundary prediction) per
    stage.  If ``parts`` is given it receives each term's value by name.
    """
    if not (len(per_layer) == len(layer_masks) == len(layer_boundaries) == w.n_layer):
        raise ConfigError(
            f"expected {w.n_layer} layer outputs and targets, got "
            f"{len(per_layer)}/{len(layer_masks)}/{len(layer_boundaries)}"
        )
    total = dice_bce(final_seg, final_mask)
    if parts is not None:
        parts["final_seg"] = total.item()
    for i, ((seg, bnd), m, b) in enumerate(zip(per_layer, layer_masks, layer_boundaries), start=1):
        l_seg = dice_bce(seg, m)
        l_bnd = boundary_mse(bnd, b)
        if parts is not None:
            parts[f"seg{i}"] = l_seg.item()
            parts[f"boundary{i}"] = l_bnd.item()
        total = total + w.lambda1 * l_seg + w.lambda2 * l_bnd
    return total
