"""Preprocessing, patch sampling, augmentation and synthetic CT phantoms."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .io import LabelVolume, Volume

log = logging.getLogger(__name__)

TARGET_SPACING = (2.47, 1.90, 1.90)
CLIP_PERCENTILES = (0.5, 99.5)
PATCH_SIZE = (128, 128, 128)
FOREGROUND_FRACTION = 1.0 / 3.0


# Resampling -----------------------------------------------------------------


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out)
    return np.linspace(0.0, n_in - 1.0, n_out)


def _linear_axis(a: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    n = a.shape[axis]
    lo = np.clip(np.floor(coords).astype(np.int64), 0, max(n - 2, 0))
    hi = np.minimum(lo + 1, n - 1)
    frac = (coords - lo).astype(a.dtype)
    shape = [1] * a.ndim
    shape[axis] = -1
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1 - frac) + np.take(a, hi, axis=axis) * frac


def _nearest_axis(a: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    idx = np.clip(np.floor(coords + 0.5).astype(np.int64), 0, a.shape[axis] - 1)
    return np.take(a, idx, axis=axis)


def resize(a: np.ndarray, shape: Sequence[int], order: int) -> np.ndarray:
    """Separable trilinear (``order=1``) or nearest (``order=0``) resize, corners aligned."""
    out = a
    for axis, n_out in enumerate(shape):
        if out.shape[axis] == n_out:
            continue
        coords = _axis_coords(out.shape[axis], n_out)
        out = _linear_axis(out, coords, axis) if order == 1 else _nearest_axis(out, coords, axis)
    return out


def spacing_shape(shape, spacing, target) -> Tuple[int, int, int]:
    return tuple(max(1, int(round(n * s / t))) for n, s, t in zip(shape, spacing, target))  # type: ignore[return-value]


def resample_to_spacing(v: Volume, target=TARGET_SPACING) -> Volume:
    shape = spacing_shape(v.shape, v.spacing, target)
    return Volume(resize(v.voxels, shape, order=1).astype(np.float32), tuple(target), v.intensity_unit)


def resample_labels(l: LabelVolume, shape, spacing) -> LabelVolume:
    return LabelVolume(resize(l.labels, shape, order=0), tuple(spacing))


def percentile_clip(x: np.ndarray, lo=CLIP_PERCENTILES[0], hi=CLIP_PERCENTILES[1]) -> np.ndarray:
    a, b = np.percentile(x, [lo, hi])
    return np.clip(x, a, b)


def preprocess(v: Volume, target=TARGET_SPACING) -> Volume:
    """Percentile clip, z-score, then trilinear resampling to ``target`` spacing."""
    if v.intensity_unit != "HU":
        raise ValueError("preprocess expects a volume in HU")
    x = percentile_clip(v.voxels.astype(np.float64))
    std = x.std()
    if std == 0:
        raise ValueError("volume is constant after clipping; cannot z-score")
    x = (x - x.mean()) / std
    return resample_to_spacing(Volume(x.astype(np.float32), v.spacing, "normalized"), target)


def preprocess_pair(v: Volume, l: LabelVolume, target=TARGET_SPACING) -> Tuple[Volume, LabelVolume]:
    if v.shape != l.shape:
        raise ValueError(f"image {v.shape} and labels {l.shape} differ in shape")
    pv = preprocess(v, target)
    return pv, resample_labels(l, pv.shape, target)


# Patch sampling ---------------------------------------------------------------


@dataclass
class PatchPair:
    image: np.ndarray  # (1, D, H, W) float32
    label: np.ndarray  # (D, H, W) uint8
    provenance: str = "random"


def _pad_to(a: np.ndarray, size) -> np.ndarray:
    pads = []
    for n, p in zip(a.shape, size):
        extra = max(0, p - n)
        pads.append((extra // 2, extra - extra // 2))
    if not any(sum(p) for p in pads):
        return a
    return np.pad(a, pads, mode="reflect" if min(a.shape) > 1 else "edge")


def sample_patch(
    rng: np.random.Generator,
    v: Volume,
    l: LabelVolume,
    size=PATCH_SIZE,
    foreground_fraction: float = FOREGROUND_FRACTION,
    num_classes: int = 3,
) -> PatchPair:
    """Crop one training patch.

    With probability ``foreground_fraction`` the patch is centred on a random
    voxel of a uniformly chosen foreground class present in the volume (clamped
    to the bounds); otherwise its origin is uniform.
    """
    size = tuple(int(s) for s in size)
    img = _pad_to(v.voxels, size)
    lab = _pad_to(l.labels, size)
    want_fg = rng.random() < foreground_fraction
    provenance = "random"
    origin = None
    if want_fg:
        present = [c for c in range(1, num_classes) if np.any(lab == c)]
        if present:
            cls = present[rng.integers(len(present))]
            where = np.flatnonzero(lab == cls)
            center = np.unravel_index(where[rng.integers(len(where))], lab.shape)
            origin = [int(np.clip(c - s // 2, 0, n - s)) for c, s, n in zip(center, size, lab.shape)]
            provenance = "foreground_guaranteed"
        else:
            log.debug("no foreground class present; falling back to a random patch")
    if origin is None:
        origin = [int(rng.integers(0, n - s + 1)) for s, n in zip(size, lab.shape)]
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    return PatchPair(img[sl][None].astype(np.float32), lab[sl].astype(np.uint8), provenance)


# Augmentation -----------------------------------------------------------------


@dataclass
class AugmentConfig:
    p_flip: float = 0.5
    p_rotate: float = 0.5
    p_scale: float = 0.5
    p_elastic: float = 0.5
    max_rotation_deg: float = 15.0
    scale_range: Tuple[float, float] = (0.85, 1.15)
    elastic_grid: int = 4
    elastic_amplitude: float = 2.0

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_flip=0.0, p_rotate=0.0, p_scale=0.0, p_elastic=0.0)


def augment(rng: np.random.Generator, p: PatchPair, cfg: Optional[AugmentConfig] = None) -> PatchPair:
    """Random flips, axial rotation, isotropic scaling and elastic warping.

    One geometric transform is built and applied to both image (trilinear) and
    labels (nearest neighbour).
    """
    cfg = cfg or AugmentConfig()
    img, lab = p.image[0], p.label
    for axis in range(3):
        if rng.random() < cfg.p_flip:
            img, lab = np.flip(img, axis), np.flip(lab, axis)

    shape = lab.shape
    matrix = np.eye(3)
    warp = False
    if rng.random() < cfg.p_rotate:
        t = np.deg2rad(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
        c, s = np.cos(t), np.sin(t)
        # Rotation about the axial (first) axis acts on the in-plane axes.
        matrix = np.array([[1, 0, 0], [0, c, -s], [0, s, c]]) @ matrix
        warp = True
    if rng.random() < cfg.p_scale:
        matrix = matrix / rng.uniform(*cfg.scale_range)
        warp = True
    displacement = None
    if rng.random() < cfg.p_elastic:
        g = cfg.elastic_grid
        coarse = rng.uniform(-cfg.elastic_amplitude, cfg.elastic_amplitude, (3, g, g, g))
        displacement = np.stack([resize(coarse[k], shape, order=1) for k in range(3)])
        warp = True

    if warp:
        center = (np.asarray(shape, dtype=np.float64) - 1) / 2
        grid = np.indices(shape, dtype=np.float64).reshape(3, -1) - center[:, None]
        coords = matrix @ grid + center[:, None]
        if displacement is not None:
            coords += displacement.reshape(3, -1)
        coords = coords.reshape((3,) + shape)
        img = ndimage.map_coordinates(img, coords, order=1, mode="nearest")
        lab = ndimage.map_coordinates(lab, coords, order=0, mode="nearest")
    return PatchPair(
        np.ascontiguousarray(img, dtype=np.float32)[None],
        np.ascontiguousarray(lab, dtype=np.uint8),
        p.provenance,
    )


# Synthetic phantoms -----------------------------------------------------------

BACKGROUND_HU = -100.0
LIVER_HU = 60.0
TUMOR_HU = 30.0
NOISE_HU = 10.0
LIVER_FRACTION = (0.10, 0.30)
TUMOR_RADIUS_FRACTION = (0.05, 0.15)


def _ellipsoid(shape, center, semi_axes) -> np.ndarray:
    zz, yy, xx = np.indices(shape, dtype=np.float64)
    return (
        ((zz - center[0]) / semi_axes[0]) ** 2
        + ((yy - center[1]) / semi_axes[1]) ** 2
        + ((xx - center[2]) / semi_axes[2]) ** 2
    ) <= 1.0


def synth_phantom(
    seed,
    shape=(64, 64, 64),
    n_tumors: int = 2,
    spacing=TARGET_SPACING,
    max_retries: int = 200,
) -> Tuple[Volume, LabelVolume]:
    """Ellipsoidal "liver" with spherical "tumors" inside it, in HU with noise.

    The liver occupies 10-30% of the voxels; each tumor radius is 5-15% of the
    liver's largest axis length and every tumor voxel lies inside the liver.
    Tumors that cannot be placed within ``max_retries`` attempts are dropped
    with a warning that reports how many were placed.
    """
    shape = tuple(int(n) for n in shape)
    if min(shape) < 32:
        raise ValueError(f"phantom shape must be at least 32^3, got {shape}")
    if n_tumors < 0:
        raise ValueError("n_tumors must be >= 0")
    rng = np.random.default_rng(seed)
    dims = np.asarray(shape, dtype=np.float64)
    n_vox = float(np.prod(dims))

    for _ in range(max_retries):
        target = rng.uniform(0.13, 0.27)
        ratios = rng.uniform(0.8, 1.2, 3)
        # Ellipsoid volume (4/3) pi abc = target * n_vox with axes proportional to ratios * dims.
        k = (target * n_vox / ((4.0 / 3.0) * np.pi * np.prod(ratios * dims))) ** (1.0 / 3.0)
        semi = k * ratios * dims
        if np.any(semi * 2 + 2 > dims):
            continue
        center = np.array([rng.uniform(s + 0.5, n - s - 1.5) for s, n in zip(semi, dims)])
        liver = _ellipsoid(shape, center, semi)
        frac = liver.mean()
        if LIVER_FRACTION[0] <= frac <= LIVER_FRACTION[1]:
            break
    else:
        raise RuntimeError("could not place a liver ellipsoid")

    labels = liver.astype(np.uint8)
    extent = 2 * semi.max()
    placed = 0
    for _ in range(n_tumors):
        for _ in range(max_retries):
            r = rng.uniform(*TUMOR_RADIUS_FRACTION) * extent
            c = np.array([rng.uniform(cc - s, cc + s) for cc, s in zip(center, semi)])
            ball = _ellipsoid(shape, c, (r, r, r))
            # Strictly inside: a one-voxel margin of liver surrounds every tumor.
            margin = ndimage.binary_dilation(ball)
            if ball.any() and np.all(liver[margin]) and not np.any(labels[margin] == 2):
                labels[ball] = 2
                placed += 1
                break
    if placed < n_tumors:
        log.warning("placed %d of %d requested tumors", placed, n_tumors)

    hu = np.choose(labels, [BACKGROUND_HU, LIVER_HU, TUMOR_HU]).astype(np.float64)
    hu += rng.normal(0.0, NOISE_HU, shape)
    return Volume(hu.astype(np.float32), spacing, "HU"), LabelVolume(labels, spacing)
