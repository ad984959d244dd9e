"""Lesion probability providers, thresholding and lesion instances.

Two providers share one call signature, ``provider(volume, subject)``:

* :class:`OracleProvider` reads the phantom truth and ignores the image.
* :class:`HeuristicProvider` scores hot spots in the image itself, which
  makes it usable as an observer on denoised images.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import DimensionError, DomainError
from .phantom import FWHM_TO_SIGMA, Subject
from .volume import Volume

STRUCTURE_26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class LesionInstance:
    label: int
    voxels: np.ndarray  # (k, 3) integer voxel coordinates, lexicographically sorted
    volume_mm3: float
    suv_mean: Optional[float] = None
    suv_max: Optional[float] = None

    @property
    def size(self) -> int:
        return len(self.voxels)


def _clamp(prob: np.ndarray) -> np.ndarray:
    return np.clip(prob, 0.0, 1.0)


def oracle_probmap(subject: Subject, blur_fwhm: float = 0.0, voxel_size=None) -> np.ndarray:
    """Phantom truth probabilities, optionally Gaussian-blurred (FWHM in mm)."""
    prob = np.asarray(subject.oracle_prob, dtype=np.float64)
    if blur_fwhm <= 0:
        return prob.copy()
    vs = voxel_size or subject.hc.voxel_size
    sigma = [blur_fwhm * FWHM_TO_SIGMA / v for v in vs]
    return _clamp(ndimage.gaussian_filter(prob, sigma=sigma, mode="constant", truncate=3.0))


@dataclass
class HeuristicConfig:
    fwhm: float = 4.0  # mm
    z0: float = 4.0
    tau: float = 1.0
    min_voxels: int = 3
    eps: float = 1e-6


def heuristic_probmap(volume: Volume, config: HeuristicConfig = HeuristicConfig()) -> np.ndarray:
    """Robust z-score of the smoothed image mapped through a logistic.

    Connected components of ``prob > 0.5`` with fewer than ``min_voxels``
    voxels are zeroed.
    """
    data = volume.data
    if config.fwhm > 0:
        sigma = [config.fwhm * FWHM_TO_SIGMA / v for v in volume.voxel_size]
        data = ndimage.gaussian_filter(data, sigma=sigma, mode="reflect", truncate=3.0)
    b = np.median(data)
    m = np.median(np.abs(data - b))
    z = (data - b) / (1.4826 * m + config.eps)
    # logistic via tanh avoids overflow warnings for large |z|
    prob = 0.5 * (1.0 + np.tanh(0.5 * (z - config.z0) / config.tau))
    if config.min_voxels > 1:
        labels, n = ndimage.label(prob > 0.5, structure=STRUCTURE_26)
        if n:
            sizes = np.bincount(labels.ravel())
            small = sizes < config.min_voxels
            small[0] = False
            prob[small[labels]] = 0.0
    return _clamp(prob)


class OracleProvider:
    name = "oracle"

    def __init__(self, blur_fwhm: float = 0.0):
        self.blur_fwhm = blur_fwhm

    def __call__(self, volume: Volume, subject: Subject) -> np.ndarray:
        prob = oracle_probmap(subject, self.blur_fwhm)
        if prob.shape != volume.dims:
            raise DimensionError(f"oracle map {prob.shape} does not match volume {volume.dims}")
        return prob


class HeuristicProvider:
    name = "heuristic"

    def __init__(self, config: HeuristicConfig = HeuristicConfig()):
        self.config = config

    def __call__(self, volume: Volume, subject: Subject = None) -> np.ndarray:
        return heuristic_probmap(volume, self.config)


def make_provider(name: str, blur_fwhm: float = 0.0, heuristic: HeuristicConfig = None):
    if name == "oracle":
        return OracleProvider(blur_fwhm)
    if name == "heuristic":
        return HeuristicProvider(heuristic or HeuristicConfig())
    raise DomainError(f"unknown probability provider {name!r}")


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 <= threshold <= 1.0:
        raise DomainError(f"threshold {threshold} outside [0, 1]")
    return np.asarray(prob) > threshold


def connected_components(mask: np.ndarray, voxel_size=(1.0, 1.0, 1.0)) -> list[LesionInstance]:
    """26-connected components, largest first, ties broken by smallest voxel."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=STRUCTURE_26)
    if n == 0:
        return []
    flat = np.flatnonzero(labels)
    lab = labels.ravel()[flat]
    order = np.argsort(lab, kind="stable")
    flat, lab = flat[order], lab[order]
    bounds = np.flatnonzero(np.diff(lab)) + 1
    groups = np.split(flat, bounds)
    # flat indices are already ascending within a group, i.e. lexicographic in (x, y, z)
    groups.sort(key=lambda g: (-len(g), int(g[0])))
    voxel_volume = float(np.prod(voxel_size))
    out = []
    for k, g in enumerate(groups, start=1):
        coords = np.stack(np.unravel_index(g, mask.shape), axis=1)
        out.append(LesionInstance(k, coords, len(g) * voxel_volume))
    return out


def quantify_lesions(instances, volume: Volume) -> list[LesionInstance]:
    data = volume.data
    out = []
    for inst in instances:
        if len(inst.voxels) == 0:
            raise DomainError(f"lesion {inst.label} has no voxels")
        values = data[tuple(inst.voxels.T)]
        out.append(dataclasses.replace(
            inst,
            volume_mm3=len(values) * volume.voxel_volume,
            suv_mean=float(values.mean()),
            suv_max=float(values.max()),
        ))
    return out
