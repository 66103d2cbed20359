"""Boundary-detection heads on the shallow stages and boundary ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParamTable, he_normal
from .tensor import Tensor


@dataclass
class BDOutput:
    boundary: Tensor  # E = F_phi - maxpool(F_phi), nonpositive
    seg: Tensor  # segmentation logits F_phi + E

    @property
    def boundary_pred(self) -> Tensor:
        """E negated, so it is compared against {0,1} boundary targets on the same side."""
        return -self.boundary

    @property
    def prob(self) -> Tensor:
        return T.sigmoid(self.seg)


def init_bd_head(table: ParamTable, layer: int, c_in: int, rng) -> None:
    table.add(f"bd{layer}.w", he_normal(rng, (1, c_in, 1, 1)))
    table.add(f"bd{layer}.b", np.zeros(1))


def bd_from_projection(f_phi: Tensor) -> BDOutput:
    edge = f_phi - T.maxpool2d(f_phi, kernel=3, stride=1, padding=1)
    return BDOutput(boundary=edge, seg=f_phi + edge)


def bd_forward(f_i: Tensor, weight: Tensor, bias: Tensor | None = None) -> BDOutput:
    """Project ``f_i`` to one channel and read the boundary off a one-pixel max shift."""
    return bd_from_projection(T.conv2d(f_i, weight, bias))


def boundary_gt(mask: np.ndarray) -> np.ndarray:
    """Inner 4-neighbour boundary of a binary mask (image border counts as background).

    Operates on the last two axes, so stacks of masks are handled too.
    """
    m = np.asarray(mask).astype(bool)
    pad = [(0, 0)] * (m.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(m, pad, constant_values=False)
    interior = p[..., :-2, 1:-1] & p[..., 2:, 1:-1] & p[..., 1:-1, :-2] & p[..., 1:-1, 2:]
    return (m & ~interior).astype(np.uint8)


def resize_nearest(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resampling on half-pixel centres (last two axes)."""
    m = np.asarray(mask)
    h, w = m.shape[-2:]
    rows = np.minimum(((np.arange(size[0]) + 0.5) * h / size[0]).astype(int), h - 1)
    cols = np.minimum(((np.arange(size[1]) + 0.5) * w / size[1]).astype(int), w - 1)
    return m[..., rows[:, None], cols[None, :]]


def layer_targets(mask: np.ndarray, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """(mask, boundary) pair at a stage's resolution.

    The boundary is re-derived from the resampled mask instead of resampling
    the one-pixel boundary itself, which would break it into dots.
    """
    small = (resize_nearest(mask, size) > 0).astype(np.uint8)
    return small, boundary_gt(small)
