"""Hybrid cross-entropy + Dice loss with deep supervision."""

from __future__ import annotations

from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import ops
from .tensor import Function, Tensor

PROB_FLOOR = 1e-12
DICE_SMOOTH = 1e-5


def _check_pair(name, probs, target):
    if probs.shape != target.shape:
        raise ValueError(f"{name}: prediction shape {probs.shape} != target shape {target.shape}")


class CrossEntropy(Function):
    name = "cross_entropy"

    def forward(self, p, g):
        _check_pair(self.name, p, g)
        self.n = int(np.prod(p.shape[1:]))
        self.clamped = np.maximum(p, PROB_FLOOR)
        self.p, self.g = p, g
        return np.asarray(-(g * np.log(self.clamped)).sum() / self.n, dtype=p.dtype)

    def backward(self, grad):
        gp = np.where(self.p > PROB_FLOOR, -self.g / (self.n * self.clamped), 0.0)
        return (grad * gp.astype(self.p.dtype), None)


class DiceLoss(Function):
    name = "dice_loss"

    def forward(self, p, g):
        _check_pair(self.name, p, g)
        num = 2.0 * (g * p).sum() + DICE_SMOOTH
        den = (g * g).sum() + (p * p).sum() + DICE_SMOOTH
        self.p, self.g, self.num, self.den = p, g, num, den
        return np.asarray(1.0 - num / den, dtype=p.dtype)

    def backward(self, grad):
        num, den = self.num, self.den
        gp = -(2.0 * self.g * den - num * 2.0 * self.p) / (den * den)
        return (grad * gp, None)


def _target(probs: Tensor, target) -> Tensor:
    if isinstance(target, Tensor):
        return target
    return Tensor(np.asarray(target, dtype=probs.dtype))


def cross_entropy(probs: Tensor, target) -> Tensor:
    """Voxel-averaged -sum_c g log p over a (C, ...) probability tensor."""
    return CrossEntropy.apply(probs, _target(probs, target))


def dice_loss(probs: Tensor, target) -> Tensor:
    """One global soft Dice fraction over all classes and voxels."""
    return DiceLoss.apply(probs, _target(probs, target))


def hybrid_loss(probs: Tensor, target) -> Tensor:
    t = _target(probs, target)
    return ops.add(cross_entropy(probs, t), dice_loss(probs, t))


def supervision_weight(i: int, L: int) -> float:
    """Deep-supervision weight 1 / (2^i * L) for level ``i`` of ``L``."""
    if not 0 <= i < L:
        raise ValueError(f"level {i} out of range for {L} levels")
    return 1.0 / (2**i * L)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    return (np.arange(num_classes).reshape((-1,) + (1,) * labels.ndim) == labels[None]).astype(dtype)


def make_targets(labels: np.ndarray, levels: int, num_classes: int, dtype=np.float32) -> List[np.ndarray]:
    """One-hot targets per level, level ``i`` taken by nearest-neighbour striding of 2**i."""
    out = []
    for i in range(levels):
        s = 2**i
        out.append(one_hot(labels[::s, ::s, ::s], num_classes, dtype))
    return out


FAMILY_RANGES = {"pfe": lambda L: range(0, L), "spa": lambda L: range(1, L), "sem": lambda L: range(0, L - 1)}


def total_loss(
    heads: Mapping[str, Optional[Mapping[int, Tensor]]],
    targets: Sequence,
    levels: Optional[int] = None,
) -> Tensor:
    """Weighted sum of hybrid losses over every supervised head.

    ``heads`` maps a family (``"pfe"``, ``"spa"``, ``"sem"``) to ``{level: logits}``.
    A family may be absent or empty (disabled), but a present family must cover
    its whole level range. Each head is soft-maxed over channels and compared
    with the target of its own level.
    """
    L = len(targets) if levels is None else levels
    terms = []
    for family, levels_of in FAMILY_RANGES.items():
        fam = heads.get(family)
        if not fam:
            continue
        for i in levels_of(L):
            if i not in fam:
                raise ValueError(f"total_loss: missing {family} head for level {i}")
            probs = ops.softmax_channel(fam[i])
            terms.append(ops.scale(hybrid_loss(probs, targets[i]), supervision_weight(i, L)))
    if not terms:
        raise ValueError("total_loss: no heads supplied")
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return total


def per_head_losses(heads: Mapping[str, Optional[Mapping[int, Tensor]]], targets: Sequence) -> Dict[str, Dict[int, float]]:
    """Unweighted hybrid loss value of every head, for logging."""
    out: Dict[str, Dict[int, float]] = {}
    for family, fam in heads.items():
        if not fam:
            continue
        out[family] = {i: hybrid_loss(ops.softmax_channel(t), targets[i]).item() for i, t in fam.items()}
    return out
