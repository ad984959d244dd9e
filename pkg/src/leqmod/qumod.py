"""Multiscale quantification-consistent loss over sliding sub-volumes.

Every scale slides a cube of edge ``s`` with stride ``t`` over the patch
and penalises the absolute difference of sub-volume means and maxima
between the denoised and the reference patch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError
from .volume import axis_origins

DEFAULT_MU = (0.03, 0.07, 0.15, 0.75)
DEFAULT_DIVISORS = (2, 4, 8, 16)


@dataclass(frozen=True)
class Scale:
    level: int
    sub_size: int
    stride: int
    origins: tuple[int, ...]  # per-axis window starts, shared by all three axes
    weight: float

    @property
    def count(self) -> int:
        return len(self.origins) ** 3


@dataclass(frozen=True)
class ParcellationPlan:
    patch_size: int
    scales: tuple[Scale, ...] = field(default_factory=tuple)

    def describe(self) -> str:
        lines = [f"patch_size={self.patch_size}"]
        for sc in self.scales:
            lines.append(f"scale={sc.level} sub_size={sc.sub_size} stride={sc.stride} "
                         f"per_axis={len(sc.origins)} N={sc.count} mu={sc.weight:.6g}")
        return "\n".join(lines)


def make_scale(level: int, patch_size: int, sub_size: int, stride: int, weight: float) -> Scale:
    return Scale(level, sub_size, stride, tuple(axis_origins(patch_size, sub_size, stride)), float(weight))


def build_parcellation(patch_size: int, weights=DEFAULT_MU, divisors=DEFAULT_DIVISORS) -> ParcellationPlan:
    """Sub-volume edges patch/2, /4, /8, /16 (floored) with half-edge strides.

    Scales whose edge falls below 2 voxels are dropped and the remaining
    weights renormalised to their original total.
    """
    if patch_size < 4:
        raise ConfigError(f"patch_size must be >= 4 for a parcellation, got {patch_size}")
    if len(weights) != len(divisors):
        raise ConfigError("one weight per parcellation scale is required")
    kept = []
    for level, (mu, div) in enumerate(zip(weights, divisors), start=1):
        s = max(1, patch_size // div)
        if s < 2:
            continue
        kept.append((level, s, max(1, s // 2), float(mu)))
    total = float(sum(weights))
    kept_total = sum(k[3] for k in kept)
    scale = total / kept_total if kept_total > 0 else 0.0
    return ParcellationPlan(patch_size, tuple(
        make_scale(level, patch_size, s, t, mu * scale) for level, s, t, mu in kept))


@dataclass
class QuLossResult:
    value: float
    grad: np.ndarray
    per_scale: list[float]


def _check(v_den, v_hc, plan):
    v_den = np.asarray(v_den, dtype=np.float64)
    v_hc = np.asarray(v_hc, dtype=np.float64)
    p = plan.patch_size
    if v_den.shape != (p, p, p) or v_hc.shape != (p, p, p):
        raise DimensionError(f"patches {v_den.shape} / {v_hc.shape} do not match plan size {p}")
    return v_den, v_hc


def _box_means(arr: np.ndarray, origins: np.ndarray, s: int) -> np.ndarray:
    sat = np.zeros(tuple(n + 1 for n in arr.shape))
    sat[1:, 1:, 1:] = arr.cumsum(0).cumsum(1).cumsum(2)
    a, b = origins, origins + s
    x0, y0, z0 = np.ix_(a, a, a)
    x1, y1, z1 = np.ix_(b, b, b)
    total = (sat[x1, y1, z1] - sat[x0, y1, z1] - sat[x1, y0, z1] - sat[x1, y1, z0]
             + sat[x0, y0, z1] + sat[x0, y1, z0] + sat[x1, y0, z0] - sat[x0, y0, z0])
    return total / float(s ** 3)


def _reduce_axis(values, index, axis, origins, s):
    """Max over windows along one axis, carrying the flat index of the argmax."""
    win = sliding_window_view(values, s, axis=axis).take(origins, axis=axis)
    if index is None:
        return win.max(axis=-1), None
    pick = np.expand_dims(win.argmax(axis=-1), -1)
    out = np.take_along_axis(win, pick, -1)[..., 0]
    iw = sliding_window_view(index, s, axis=axis).take(origins, axis=axis)
    return out, np.take_along_axis(iw, pick, -1)[..., 0]


def _box_max(arr: np.ndarray, origins: np.ndarray, s: int, with_index: bool = True):
    """Window maxima and the flat C-order index of the first argmax in x-fastest scan order.

    Reducing x, then y, then z with first-occurrence ties selects the
    argmax with the smallest (z, y, x).
    """
    index = np.arange(arr.size).reshape(arr.shape) if with_index else None
    vals = arr
    for axis in range(3):
        vals, index = _reduce_axis(vals, index, axis, origins, s)
    return vals, index


def _scatter_boxes(shape, origins, s, coef):
    """Add ``coef[i, j, k]`` to every voxel of the window at (o_i, o_j, o_k)."""
    n = shape[0]
    diff = np.zeros((n + 1, n + 1, n + 1))
    a, b = origins, origins + s
    for xs, sx in ((a, 1.0), (b, -1.0)):
        for ys, sy in ((a, 1.0), (b, -1.0)):
            for zs, sz in ((a, 1.0), (b, -1.0)):
                ix = np.ix_(xs, ys, zs)
                np.add.at(diff, tuple(np.broadcast_arrays(*ix)), sx * sy * sz * coef)
    return diff.cumsum(0).cumsum(1).cumsum(2)[:n, :n, :n]


def qu_loss(v_den, v_hc, plan: ParcellationPlan) -> QuLossResult:
    """Sum over scales of mu/N * sum_n (|d mean| + |d max|), with subgradient.

    The max term's gradient goes to the first argmax (x-fastest scan order)
    of the denoised sub-volume. sign(0) is taken as 0.
    """
    v_den, v_hc = _check(v_den, v_hc, plan)
    grad = np.zeros_like(v_den)
    per_scale = []
    for sc in plan.scales:
        o = np.asarray(sc.origins)
        s = sc.sub_size
        c = sc.weight / sc.count
        d_mean = _box_means(v_den, o, s) - _box_means(v_hc, o, s)
        max_den, arg = _box_max(v_den, o, s)
        max_hc, _ = _box_max(v_hc, o, s, with_index=False)
        d_max = max_den - max_hc
        per_scale.append(float(c * (np.abs(d_mean).sum() + np.abs(d_max).sum())))
        grad += _scatter_boxes(v_den.shape, o, s, c * np.sign(d_mean) / s ** 3)
        np.add.at(grad.reshape(-1), arg.ravel(), (c * np.sign(d_max)).ravel())
    return QuLossResult(float(sum(per_scale)), grad, per_scale)


def qu_loss_bruteforce(v_den, v_hc, plan: ParcellationPlan) -> float:
    """Literal loop over every scale and sub-volume; test oracle for :func:`qu_loss`."""
    v_den, v_hc = _check(v_den, v_hc, plan)
    total = 0.0
    for sc in plan.scales:
        s = sc.sub_size
        acc = 0.0
        for x in sc.origins:
            for y in sc.origins:
                for z in sc.origins:
                    a = v_den[x:x + s, y:y + s, z:z + s]
                    b = v_hc[x:x + s, y:y + s, z:z + s]
                    acc += abs(a.sum() / a.size - b.sum() / b.size) + abs(a.max() - b.max())
        total += sc.weight / sc.count * acc
    return total
