"""Lesion-perceived modulation: patch sampling weights and the lesion loss."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError
from .volume import PatchGrid

DEFAULT_ETA = {1.0: 0.35, 2.0: 0.25, 5.0: 0.15, 10.0: 0.12, 25.0: 0.08, 50.0: 0.05}
J_EPS = 1e-8


@dataclass
class SamplingConfig:
    w_min: float = 0.3
    eta_table: dict = field(default_factory=lambda: dict(DEFAULT_ETA))
    # "soft": normalise the lesion loss by sum(p); "hard": by count(p > 0.5)
    j_mode: str = "soft"

    def __post_init__(self):
        if not 0 < self.w_min <= 1:
            raise DomainError(f"w_min must lie in (0, 1], got {self.w_min}")
        table = {float(k): float(v) for k, v in self.eta_table.items()}
        if not table or any(v <= 0 for v in table.values()):
            raise DomainError("eta table needs positive entries")
        levels = sorted(table)
        if any(table[a] < table[b] for a, b in zip(levels, levels[1:])):
            raise DomainError("eta must be non-increasing in count level")
        if self.j_mode not in ("soft", "hard"):
            raise DomainError(f"j_mode must be 'soft' or 'hard', got {self.j_mode!r}")
        self.eta_table = dict(sorted(table.items()))

    def eta(self, level: float) -> float:
        """Noise-aware factor; log-linear in the count level between table keys."""
        levels = list(self.eta_table)
        values = list(self.eta_table.values())
        level = float(level)
        if level <= 0:
            raise DomainError(f"count level must be positive, got {level}")
        if level in self.eta_table:
            return self.eta_table[level]
        return float(np.interp(math.log(level), np.log(levels), values))


@dataclass(frozen=True)
class TrainingPatchRecord:
    subject_id: str
    subject_index: int
    origin: tuple[int, int, int]
    count_level: float
    max_lesion_prob: float
    weight: float


@dataclass
class LeLossResult:
    value: float
    grad: np.ndarray


def sampling_weight(max_lesion_prob: float, count_level: float, config: SamplingConfig) -> float:
    if not 0.0 <= max_lesion_prob <= 1.0:
        raise DomainError(f"lesion probability {max_lesion_prob} outside [0, 1]")
    return config.eta(count_level) * max(max_lesion_prob, config.w_min)


def build_weight_table(cohort, provider, grid: PatchGrid, config: SamplingConfig,
                       levels: Sequence[float] = None, subject_indices: Sequence[int] = None):
    """One record per (subject, count level, patch origin), in that order."""
    indices = range(len(cohort)) if subject_indices is None else subject_indices
    s = grid.patch_size
    table = []
    for idx in indices:
        subj = cohort[idx]
        prob = provider(subj.hc, subj)
        if prob.shape != subj.hc.dims or subj.hc.dims != tuple(grid.dims):
            raise DimensionError(
                f"subject {subj.id}: volume {subj.hc.dims}, probmap {prob.shape}, grid {grid.dims}")
        patch_max = [float(prob[x:x + s, y:y + s, z:z + s].max()) for x, y, z in grid.origins]
        for level in sorted(levels if levels is not None else subj.lc):
            level = float(level)
            if level not in subj.lc:
                raise DimensionError(f"subject {subj.id} has no {level}% image")
            for origin, p in zip(grid.origins, patch_max):
                table.append(TrainingPatchRecord(subj.id, idx, origin, level, p,
                                                 sampling_weight(p, level, config)))
    return table


def sampling_probabilities(table, uniform: bool = False) -> np.ndarray:
    if not table:
        raise DomainError("weight table is empty")
    if uniform:
        return np.full(len(table), 1.0 / len(table))
    w = np.array([r.weight for r in table], dtype=np.float64)
    if np.any(w <= 0):
        raise DomainError("sampling weights must be positive")
    return w / w.sum()


def sample_batch(table, batch_size: int, rng: np.random.Generator, uniform: bool = False) -> list[int]:
    """Draw record indices with replacement, P(i) = w_i / sum(w)."""
    p = sampling_probabilities(table, uniform)
    if batch_size <= 0:
        return []
    return [int(i) for i in rng.choice(len(p), size=batch_size, replace=True, p=p)]


def write_weight_table(table, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "level", "origin_x", "origin_y", "origin_z", "prob", "weight"])
        for r in table:
            writer.writerow([r.subject_id, f"{r.count_level:g}", *r.origin,
                             repr(r.max_lesion_prob), repr(r.weight)])


def le_loss(v_den: np.ndarray, v_hc: np.ndarray, prob: np.ndarray, j_mode: str = "soft") -> LeLossResult:
    """Lesion-probability-weighted L1 distance with its (sub)gradient.

    value = sum(p * |den - hc|) / J, where J is sum(p) in soft mode or the
    number of voxels with p > 0.5 in hard mode (at least 1), floored at 1e-8.
    """
    v_den = np.asarray(v_den, dtype=np.float64)
    if not (v_den.shape == np.shape(v_hc) == np.shape(prob)):
        raise DimensionError(f"shape mismatch: {v_den.shape}, {np.shape(v_hc)}, {np.shape(prob)}")
    p = np.asarray(prob, dtype=np.float64)
    diff = v_den - v_hc
    if j_mode == "hard":
        j = max(float(np.count_nonzero(p > 0.5)), 1.0)
    else:
        j = max(float(p.sum()), J_EPS)
    value = float(np.sum(p * np.abs(diff)) / j)
    grad = p * np.sign(diff) / j
    return LeLossResult(value, grad)
