"""Synthetic ultrasound phantoms, PNG dataset I/O, folds and augmentation.

A phantom is a hypoechoic elliptical lesion (optionally with an irregular,
lobulated outline) on a brighter background, with a blurred boundary,
multiplicative gamma speckle and an optional posterior acoustic shadow.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .bd import boundary_gt
from .errors import ConfigError, DataError, FormatError


@dataclass
class PhantomParams:
    size: int = 64
    lesion_count: int = 1
    axis_range: tuple[float, float] = (8.0, 24.0)  # semi-axes, px
    lesion_intensity: float = 0.35
    background_intensity: float = 0.6
    speckle: float = 0.25
    shadow_prob: float = 0.3
    blur: float = 1.5
    irregularity: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.axis_range
        if not 0 < lo <= hi:
            raise ConfigError(f"degenerate ellipse axis range {self.axis_range}")
        if self.size < 1 or self.lesion_count < 1:
            raise ConfigError("size and lesion_count must be positive")
        if 2 * hi * (1 + self.irregularity) > self.size - 3:
            raise ConfigError(f"axes up to {hi} px (±{self.irregularity:.0%}) do not fit a {self.size} px image")
        for v in (self.lesion_intensity, self.background_intensity):
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"intensity {v} outside [0, 1]")
        if self.speckle < 0 or self.blur < 0 or not 0 <= self.shadow_prob <= 1 or self.irregularity < 0:
            raise ConfigError(f"invalid noise parameters in {self}")


@dataclass
class SegSample:
    image: np.ndarray  # 1×h×w float in [0, 1]
    mask: np.ndarray  # h×w uint8 {0, 1}
    boundary: np.ndarray  # h×w uint8, boundary_gt(mask)
    id: str

    @classmethod
    def from_mask(cls, image: np.ndarray, mask: np.ndarray, sid: str) -> "SegSample":
        mask = (np.asarray(mask) > 0).astype(np.uint8)
        return cls(np.asarray(image, dtype=np.float64), mask, boundary_gt(mask), sid)


def _lesion_mask(rng: np.random.Generator, p: PhantomParams) -> tuple[np.ndarray, tuple[float, float], float]:
    n = p.size
    a, b = rng.uniform(*p.axis_range, size=2)
    theta = rng.uniform(0.0, np.pi)
    # low-frequency radial perturbation, scaled so its peak is at most `irregularity`
    orders = np.arange(2, 5)
    amps = rng.uniform(0.0, 1.0, size=orders.size)
    phases = rng.uniform(0.0, 2 * np.pi, size=orders.size)
    amps = amps / amps.sum() * p.irregularity
    grow = 1.0 + p.irregularity
    ext_x = np.sqrt((a * np.cos(theta)) ** 2 + (b * np.sin(theta)) ** 2) * grow
    ext_y = np.sqrt((a * np.sin(theta)) ** 2 + (b * np.cos(theta)) ** 2) * grow
    cx = rng.uniform(ext_x + 1, n - 2 - ext_x)
    cy = rng.uniform(ext_y + 1, n - 2 - ext_y)

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    rho = np.hypot(u / a, v / b)
    phi = np.arctan2(v / b, u / a)
    radius = 1.0 + (amps[:, None, None] * np.cos(orders[:, None, None] * phi + phases[:, None, None])).sum(0)
    return rho <= radius, (cx, cy), max(ext_x, ext_y)


def generate_phantom(params: PhantomParams, sid: str | None = None) -> SegSample:
    """Deterministic phantom for ``params.seed``."""
    params.validate()
    rng = np.random.default_rng(params.seed)
    n = params.size
    mask = np.zeros((n, n), dtype=bool)
    centres = []
    for _ in range(params.lesion_count):
        m, centre, reach = _lesion_mask(rng, params)
        mask |= m
        centres.append((centre, reach))

    soft = mask.astype(np.float64)
    if params.blur > 0:
        soft = ndimage.gaussian_filter(soft, params.blur, mode="nearest")
    image = params.background_intensity + (params.lesion_intensity - params.background_intensity) * soft

    shadow_draw = rng.random()
    if params.shadow_prob > 0 and shadow_draw < params.shadow_prob:
        (cx, cy), reach = centres[0]
        xx = np.arange(n)
        half = 0.6 * reach
        band = ((xx >= cx - half) & (xx <= cx + half)).astype(np.float64)
        band = ndimage.gaussian_filter1d(band, 2.0, mode="nearest")
        depth = np.clip((np.arange(n) - cy) / max(reach, 1.0), 0.0, 1.0)
        strength = rng.uniform(0.3, 0.6)
        image = image * (1.0 - strength * depth[:, None] * band[None, :])

    if params.speckle > 0:
        k = 1.0 / params.speckle**2
        image = image * rng.gamma(k, 1.0 / k, size=(n, n))

    image = np.clip(image, 0.0, 1.0)
    return SegSample.from_mask(image[None], mask, sid or f"phantom_{params.seed:06d}")


def generate_dataset(params: PhantomParams, count: int, seed: int | None = None) -> list[SegSample]:
    """``count`` phantoms whose seeds derive from (seed, index)."""
    base = params.seed if seed is None else seed
    out = []
    for i in range(count):
        child = int(np.random.SeedSequence([base, i]).generate_state(1, dtype=np.uint32)[0])
        out.append(generate_phantom(replace(params, seed=child), sid=f"s{base}_{i:05d}"))
    return out


# ---------------------------------------------------------------------------
# on-disk layout: root/images/<stem>.png, root/masks/<stem>.png, root/manifest.txt


def save_dataset(samples: Sequence[SegSample], root: str | Path) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = np.rint(np.clip(s.image[0], 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(img).save(root / "images" / f"{s.id}.png")
        Image.fromarray((s.mask > 0).astype(np.uint8) * 255).save(root / "masks" / f"{s.id}.png")
    with open(root / "manifest.txt", "w") as fh:
        fh.writelines(f"{s.id}\n" for s in samples)


def _read_gray(path: Path, stem: str) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise FormatError(f"{path}: expected 8-bit grayscale PNG for {stem!r}, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8)


def load_dataset(root: str | Path) -> list[SegSample]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise DataError(f"{manifest} not found")
    stems = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    samples = []
    for stem in stems:
        ipath, mpath = root / "images" / f"{stem}.png", root / "masks" / f"{stem}.png"
        for path in (ipath, mpath):
            if not path.is_file():
                raise DataError(f"missing {path.parent.name[:-1]} for stem {stem!r}: {path}")
        img = _read_gray(ipath, stem)
        mask = _read_gray(mpath, stem)
        if img.shape != mask.shape:
            raise DataError(f"image {img.shape} and mask {mask.shape} differ for stem {stem!r}")
        samples.append(SegSample.from_mask(img[None].astype(np.float64) / 255.0, mask >= 128, stem))
    return samples


# ---------------------------------------------------------------------------
# folds and augmentation


def kfold_split(ids: Sequence[str], k: int, seed: int = 0) -> list[int]:
    """Fold index for each id; folds differ in size by at most one."""
    n = len(ids)
    if not 1 <= k <= n:
        raise ConfigError(f"cannot split {n} ids into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = [0] * n
    for rank, idx in enumerate(perm):
        folds[idx] = rank % k
    return folds


def hflip(sample: SegSample) -> SegSample:
    return SegSample.from_mask(sample.image[:, :, ::-1].copy(), sample.mask[:, ::-1], sample.id)


def rot90(sample: SegSample, k: int) -> SegSample:
    return SegSample.from_mask(
        np.rot90(sample.image, k, axes=(1, 2)).copy(), np.rot90(sample.mask, k).copy(), sample.id
    )


def augment(sample: SegSample, rng: np.random.Generator) -> SegSample:
    """Horizontal flip with probability 0.5, then a uniformly drawn multiple of 90°."""
    flip = rng.random() < 0.5
    k = int(rng.integers(4))
    out = hflip(sample) if flip else sample
    return rot90(out, k) if k else out
