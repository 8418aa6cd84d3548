"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import losses, ops
from .model import ModelConfig, build, dpcnet_forward
from .tensor import Function, Tensor, backward, no_grad

OP_TOL = 1e-5
E2E_TOL = 1e-4
STEP = 1e-5
# The full network is piecewise smooth (LeakyReLU kinks); a smaller step keeps
# the stencil from straddling a kink, and the noise floor absorbs the extra rounding.
E2E_STEP = 1e-6


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst: Optional[Tuple[int, int]] = None  # (input index, flat coordinate)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = STEP,
    tol: float = OP_TOL,
    coords: Optional[Sequence[Tuple[int, int]]] = None,
    noise_floor: bool = False,
) -> GradCheckReport:
    """Compare backward() of a scalar ``fn(*inputs)`` against central differences.

    The relative error of a coordinate is |a - n| / max(|a|, |n|, floor) with
    floor = 1e-12. Every coordinate of every input is checked unless ``coords``
    lists ``(input index, flat index)`` pairs.

    With ``noise_floor`` the floor is raised to the rounding resolution of the
    difference quotient, 8 ulp(f) / (2h), divided by ``tol``: coordinates whose
    true derivative is below what float64 differences can resolve then pass iff
    the discrepancy is within that resolution.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step {h} outside [1e-6, 1e-4]")
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check needs float64 inputs")
    f0 = fn(*inputs)
    analytic = backward(f0, inputs)
    floor = 1e-12
    if noise_floor:
        floor = max(floor, 8 * np.spacing(abs(f0.item())) / (2 * h) / tol)
    if coords is None:
        coords = [(k, j) for k, t in enumerate(inputs) for j in range(t.data.size)]
    worst, worst_at = 0.0, None
    with no_grad():
        for k, j in coords:
            flat = inputs[k].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = fn(*inputs).item()
            flat[j] = orig - h
            fm = fn(*inputs).item()
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            ana = float(analytic[k].reshape(-1)[j])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            if err > worst or worst_at is None:
                worst, worst_at = err, (k, j)
    return GradCheckReport(max_rel_err=worst, passed=worst < tol, n_checked=len(coords), worst=worst_at)


def _weighted_sum(out: Tensor, weights: Tensor) -> Tensor:
    return ops.sum_all(ops.mul_broadcast(out, weights))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _p(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def op_cases(rng: np.random.Generator) -> Dict[str, Tuple[Callable[..., Tensor], List[Tensor]]]:
    """One randomized scalar test function per registered differentiable op."""
    n = rng.standard_normal
    cases: Dict[str, Tuple[Callable[..., Tensor], List[Tensor]]] = {}

    def unary(name, op, shape, out_shape, x=None):
        r = Tensor(n(out_shape))
        cases[name] = (lambda a: _weighted_sum(op(a), r), [_p(n(shape) if x is None else x)])

    r_conv = Tensor(n((3, 3, 2, 3)))
    cases["conv3d"] = (
        lambda x, w, b: _weighted_sum(ops.conv3d(x, w, b, stride=(1, 2, 1), padding=(1, 0, 1)), r_conv),
        [_p(n((2, 3, 4, 3))), _p(n((3, 2, 3, 2, 3))), _p(n(3))],
    )
    r_tr = Tensor(n((2, 4, 4, 6)))
    cases["conv3d_transpose"] = (
        lambda x, w: _weighted_sum(ops.conv3d_transpose(x, w), r_tr),
        [_p(n((3, 2, 2, 3))), _p(n((3, 2, 2, 2, 2)))],
    )
    r_in = Tensor(n((2, 3, 3, 2)))
    cases["instance_norm"] = (
        lambda x, g, b: _weighted_sum(ops.instance_norm(x, g, b), r_in),
        [_p(n((2, 3, 3, 2))), _p(1.0 + 0.3 * n(2)), _p(n(2))],
    )
    unary("leaky_relu", ops.leaky_relu, None, (2, 3, 2, 2), x=_away_from_zero(rng, (2, 3, 2, 2)))
    unary("sigmoid", ops.sigmoid, (2, 3, 2, 2), (2, 3, 2, 2))
    unary("softmax_channel", ops.softmax_channel, (3, 2, 2, 2), (3, 2, 2, 2))
    r_lin = Tensor(n(3))
    cases["linear"] = (
        lambda x, w, b: _weighted_sum(ops.linear(x, w, b), r_lin),
        [_p(n(4)), _p(n((3, 4))), _p(n(3))],
    )
    unary("channel_mean", lambda a: ops.squeeze_channel(a)[0], (3, 2, 2, 2), (1, 2, 2, 2))
    unary("channel_max", lambda a: ops.squeeze_channel(a)[1], (3, 2, 2, 2), (1, 2, 2, 2))
    unary("spatial_mean", lambda a: ops.squeeze_spatial(a)[0], (3, 2, 2, 2), (3,))
    unary("spatial_max", lambda a: ops.squeeze_spatial(a)[1], (3, 2, 2, 2), (3,))
    unary("upsample_nearest", lambda a: ops.resample2x(a, "up_nearest"), (2, 2, 1, 2), (2, 4, 2, 4))
    unary("downsample_avg", lambda a: ops.resample2x(a, "down_avg"), (2, 4, 2, 4), (2, 2, 1, 2))
    r_cat = Tensor(n((5, 2, 2, 2)))
    cases["concat"] = (
        lambda a, b: _weighted_sum(ops.concat([a, b], axis=0), r_cat),
        [_p(n((2, 2, 2, 2))), _p(n((3, 2, 2, 2)))],
    )
    r_mul = Tensor(n((3, 2, 2, 2)))
    cases["mul_broadcast"] = (
        lambda a, b: _weighted_sum(ops.mul_broadcast(a, b), r_mul),
        [_p(n((3, 2, 2, 2))), _p(n((1, 2, 1, 2)))],
    )
    r_add = Tensor(n((3, 2, 2, 2)))
    cases["add"] = (
        lambda a, b: _weighted_sum(ops.add(a, b), r_add),
        [_p(n((3, 2, 2, 2))), _p(n((3, 1, 1, 1)))],
    )
    unary("scale", lambda a: ops.scale(a, -1.7), (2, 3), (2, 3))
    cases["sum"] = (lambda a: ops.scale(ops.sum_all(a), 0.5), [_p(n((2, 3, 2)))])
    unary("reshape", lambda a: ops.reshape(a, (3, 1, 2, 2)), (3, 4), (3, 1, 2, 2))

    tgt = losses.one_hot(rng.integers(0, 3, (2, 3, 2)), 3, np.float64)
    p0 = _p(rng.uniform(0.05, 1.0, (3, 2, 3, 2)))
    cases["cross_entropy"] = (lambda p: losses.cross_entropy(p, tgt), [p0])
    p1 = _p(rng.uniform(0.0, 1.0, (3, 2, 3, 2)))
    cases["dice_loss"] = (lambda p: losses.dice_loss(p, tgt), [p1])
    return cases


E2E_NAME = "dpcnet_total_loss"


def end_to_end_case(seed: int = 0, size: int = 16, fraction: float = 0.01):
    """Tiny DPC-Net total loss on a ``size``^3 patch; samples ``fraction`` of parameters."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(levels=3, base_channels=8, num_classes=3)
    model = build(cfg, seed=seed, dtype=np.float64)
    # Small random shifts/biases so no parameter sits exactly at a symmetric point.
    for name, t in model.named_parameters():
        if not name.endswith(".weight"):
            t.data += 0.1 * rng.standard_normal(t.shape)
    patch = Tensor(rng.standard_normal((1, size, size, size)))
    labels = rng.integers(0, 3, (size, size, size))
    targets = losses.make_targets(labels, cfg.levels, cfg.num_classes, np.float64)
    params = model.parameters()

    def fn(*_):
        return losses.total_loss(dpcnet_forward(model, patch).heads(), targets)

    sizes = [p.data.size for p in params]
    total = sum(sizes)
    picks = rng.choice(total, size=max(1, int(round(fraction * total))), replace=False)
    offsets = np.cumsum([0] + sizes)
    coords = []
    for flat in np.sort(picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        coords.append((k, int(flat - offsets[k])))
    return fn, params, coords


@dataclass
class SuiteEntry:
    name: str
    report: GradCheckReport
    tol: float


def run_suite(seed: int = 0, h: float = STEP, e2e: bool = True, e2e_h: float = E2E_STEP) -> List[SuiteEntry]:
    rng = np.random.default_rng(seed)
    cases = op_cases(rng)
    missing = sorted(set(Function.registry) - set(cases))
    if missing:
        raise RuntimeError(f"no gradient check registered for: {', '.join(missing)}")
    results = []
    for name in sorted(cases):
        fn, inputs = cases[name]
        results.append(SuiteEntry(name, grad_check(fn, inputs, h=h, tol=OP_TOL), OP_TOL))
    if e2e:
        fn, params, coords = end_to_end_case(seed)
        results.append(SuiteEntry(E2E_NAME, grad_check(fn, params, h=e2e_h, tol=E2E_TOL, coords=coords, noise_floor=True), E2E_TOL))
    return results
