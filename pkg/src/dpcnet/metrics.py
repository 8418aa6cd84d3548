"""Volumetric segmentation metrics: DSC, RVD, ASSD, HD95 and lesion-wise detection."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

CSV_COLUMNS = ("volume_id", "class", "dsc", "rvd", "assd_mm", "hd95_mm", "lesion_precision", "lesion_recall")


class UndefinedMetricError(ValueError):
    """A metric has no defined value for the given masks."""


def _pair(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dsc(a, b) -> float:
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def rvd(a, b) -> float:
    a, b = _pair(a, b)
    nb = int(b.sum())
    if nb == 0:
        raise UndefinedMetricError("RVD is undefined for an empty ground truth")
    return (int(a.sum()) - nb) / nb


_SIX = ndimage.generate_binary_structure(3, 1)


def surface_mask(m) -> np.ndarray:
    """Mask voxels with at least one 6-neighbour outside the mask (or the grid)."""
    m = np.asarray(m, dtype=bool)
    inner = ndimage.binary_erosion(m, structure=_SIX, border_value=0)
    return m & ~inner


def extract_surface(m, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Surface voxel coordinates in mm, shape (n, 3)."""
    idx = np.argwhere(surface_mask(m))
    return idx.astype(np.float64) * np.asarray(spacing, dtype=np.float64)


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return cKDTree(dst).query(src, k=1)[0]


def _surfaces(a, b, spacing):
    a, b = _pair(a, b)
    sa, sb = extract_surface(a, spacing), extract_surface(b, spacing)
    if len(sa) == 0 or len(sb) == 0:
        raise UndefinedMetricError("surface distance is undefined for an empty mask")
    return sa, sb


def assd(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    sa, sb = _surfaces(a, b, spacing)
    da, db = _directed(sa, sb), _directed(sb, sa)
    return float((da.sum() + db.sum()) / (len(sa) + len(sb)))


def hd95(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    sa, sb = _surfaces(a, b, spacing)
    return float(max(np.percentile(_directed(sa, sb), 95), np.percentile(_directed(sb, sa), 95)))


def hausdorff(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    sa, sb = _surfaces(a, b, spacing)
    return float(max(_directed(sa, sb).max(), _directed(sb, sa).max()))


@dataclass
class LesionPRF:
    precision: float
    recall: float
    matches: List[Tuple[int, int, float]]  # (pred component, gt component, IoU)
    n_pred: int
    n_gt: int
    # True when the metric had no components and was defined as 1.0.
    precision_empty: bool = False
    recall_empty: bool = False


_TWENTY_SIX = np.ones((3, 3, 3), dtype=bool)


def lesion_prf(pred, gt, cls: int, overlap: float = 0.5) -> LesionPRF:
    """Lesion detection precision/recall with greedy IoU matching.

    Lesions are 26-connected components of ``cls``; pairs are matched in
    descending IoU order, each component at most once, when IoU > ``overlap``.
    """
    p, g = _pair(np.asarray(pred) == cls, np.asarray(gt) == cls)
    lp, n_pred = ndimage.label(p, structure=_TWENTY_SIX)
    lg, n_gt = ndimage.label(g, structure=_TWENTY_SIX)
    pairs = []
    if n_pred and n_gt:
        both = (lp > 0) & (lg > 0)
        inter = np.zeros((n_pred + 1, n_gt + 1), dtype=np.int64)
        np.add.at(inter, (lp[both], lg[both]), 1)
        size_p = np.bincount(lp.ravel(), minlength=n_pred + 1)
        size_g = np.bincount(lg.ravel(), minlength=n_gt + 1)
        for i, j in zip(*np.nonzero(inter)):
            iou = inter[i, j] / (size_p[i] + size_g[j] - inter[i, j])
            pairs.append((float(iou), int(i), int(j)))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_p, used_g, matches = set(), set(), []
    for iou, i, j in pairs:
        if iou <= overlap:
            break
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        matches.append((i, j, iou))
    precision = len(matches) / n_pred if n_pred else 1.0
    recall = len(matches) / n_gt if n_gt else 1.0
    return LesionPRF(precision, recall, matches, n_pred, n_gt, n_pred == 0, n_gt == 0)


@dataclass
class MetricsRow:
    volume_id: str
    cls: int
    dsc: Optional[float]
    rvd: Optional[float]
    assd_mm: Optional[float]
    hd95_mm: Optional[float]
    lesion_precision: Optional[float]
    lesion_recall: Optional[float]


def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


def evaluate_class(volume_id: str, pred: np.ndarray, gt: np.ndarray, cls: int, spacing) -> MetricsRow:
    a, b = pred == cls, gt == cls
    lesions = lesion_prf(pred, gt, cls)
    return MetricsRow(
        volume_id,
        cls,
        dsc(a, b),
        _safe(rvd, a, b),
        _safe(assd, a, b, spacing),
        _safe(hd95, a, b, spacing),
        lesions.precision,
        lesions.recall,
    )


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(path, rows: Iterable[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(
                [r.volume_id, r.cls]
                + [_fmt(x) for x in (r.dsc, r.rvd, r.assd_mm, r.hd95_mm, r.lesion_precision, r.lesion_recall)]
            )
