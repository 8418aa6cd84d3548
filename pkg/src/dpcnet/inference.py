"""Sliding-window whole-volume prediction."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import List, Sequence, Tuple

import numpy as np

from .io import LabelVolume, Volume
from .model import Model, dpcnet_forward
from .tensor import Tensor, no_grad


@dataclass
class WindowPlan:
    origins: List[Tuple[int, int, int]]
    patch_size: Tuple[int, int, int]
    padded_shape: Tuple[int, int, int]
    pad: Tuple[Tuple[int, int], ...]  # (before, after) per axis


def axis_origins(n: int, p: int) -> List[int]:
    """Window starts along one axis: stride p/2, last window clamped to the end."""
    if n <= p:
        return [0]
    stride = p // 2
    out = [0]
    while out[-1] + p < n:
        out.append(min(out[-1] + stride, n - p))
    return out


def plan_windows(vol_shape: Sequence[int], patch_size: Sequence[int]) -> WindowPlan:
    patch = tuple(int(p) for p in patch_size)
    if any(p % 2 for p in patch):
        raise ValueError(f"patch size {patch} must be even on every axis")
    pad = tuple(((max(0, p - n)) // 2, max(0, p - n) - (max(0, p - n)) // 2) for n, p in zip(vol_shape, patch))
    padded = tuple(n + a + b for n, (a, b) in zip(vol_shape, pad))
    per_axis = [axis_origins(n, p) for n, p in zip(padded, patch)]
    return WindowPlan([tuple(o) for o in product(*per_axis)], patch, padded, pad)  # type: ignore[misc]


def hit_counts(plan: WindowPlan) -> np.ndarray:
    counts = np.zeros(plan.padded_shape, dtype=np.int32)
    for o in plan.origins:
        counts[tuple(slice(a, a + p) for a, p in zip(o, plan.patch_size))] += 1
    return counts


def _pad(x: np.ndarray, pad) -> np.ndarray:
    if not any(a or b for a, b in pad):
        return x
    return np.pad(x, pad, mode="reflect" if min(x.shape) > 1 else "edge")


def predict_volume(
    model: Model,
    v: Volume,
    patch_size: Sequence[int] = (128, 128, 128),
) -> Tuple[LabelVolume, np.ndarray]:
    """Label map and averaged class probabilities (C, D, H, W) for a preprocessed volume.

    Overlapping window probabilities are summed in float64 and divided by the
    per-voxel hit count; argmax ties resolve to the lower class index.
    """
    plan = plan_windows(v.shape, patch_size)
    img = _pad(v.voxels, plan.pad)
    C = model.config.num_classes
    acc = np.zeros((C,) + plan.padded_shape, dtype=np.float64)
    dtype = next(iter(model.params.values())).dtype
    with no_grad():
        for o in plan.origins:
            sl = tuple(slice(a, a + p) for a, p in zip(o, plan.patch_size))
            patch = Tensor(img[sl][None].astype(dtype))
            acc[(slice(None),) + sl] += dpcnet_forward(model, patch).final_probs.data
    acc /= hit_counts(plan)[None]
    crop = tuple(slice(a, a + n) for (a, _), n in zip(plan.pad, v.shape))
    probs = acc[(slice(None),) + crop]
    labels = np.argmax(probs, axis=0).astype(np.uint8)
    return LabelVolume(labels, v.spacing), probs.astype(np.float32)
