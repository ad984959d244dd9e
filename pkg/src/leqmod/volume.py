"""Volumes, cubic patches, patch grids and the LQMV file format.

Arrays are indexed ``data[x, y, z]``. On disk the payload is x-fastest,
which is Fortran order for that indexing.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CoverageError, DimensionError, FormatError

MAGIC = b"LQMV"
VERSION = 1
_HEADER = struct.Struct("<4sI3I3f")


def _as_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise DimensionError(f"dims must be three positive integers, got {dims}")
    return dims


@dataclass(frozen=True)
class Volume:
    """A 3D scalar field in SUV units with physical voxel spacing (mm)."""

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DimensionError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DimensionError("volume contains non-finite values")
        vs = tuple(float(v) for v in self.voxel_size)
        if len(vs) != 3 or min(vs) <= 0:
            raise DimensionError(f"voxel_size must be three positive values, got {self.voxel_size}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", vs)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.voxel_size))

    def with_data(self, data) -> "Volume":
        return Volume(data, self.voxel_size)


@dataclass(frozen=True)
class Patch:
    origin: tuple[int, int, int]
    data: np.ndarray

    @property
    def size(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class PatchGrid:
    dims: tuple[int, int, int]
    patch_size: int
    stride: int
    origins: list[tuple[int, int, int]] = field(repr=False)

    def __len__(self):
        return len(self.origins)


def axis_origins(length: int, size: int, stride: int) -> list[int]:
    """Window start positions 0, t, 2t, ... plus the flush position length - size."""
    if size > length:
        raise DimensionError(f"window of {size} does not fit an axis of {length}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    last = length - size
    starts = list(range(0, last + 1, stride))
    if last % stride:
        starts.append(last)
    return starts


def build_patch_grid(dims, patch_size: int, stride: int) -> PatchGrid:
    dims = _as_dims(dims)
    if patch_size < 1:
        raise DimensionError(f"patch_size must be >= 1, got {patch_size}")
    if patch_size > min(dims):
        raise DimensionError(f"patch of {patch_size} voxels exceeds volume dims {dims}")
    if stride > patch_size:
        raise DimensionError(f"stride {stride} larger than patch {patch_size} leaves gaps")
    per_axis = [axis_origins(d, patch_size, stride) for d in dims]
    origins = [(x, y, z) for x in per_axis[0] for y in per_axis[1] for z in per_axis[2]]
    return PatchGrid(dims, int(patch_size), int(stride), origins)


def _check_window(dims, origin, size):
    if len(origin) != 3 or any(o < 0 or o + size > d for o, d in zip(origin, dims)):
        raise DimensionError(f"patch at {tuple(origin)} of size {size} exceeds dims {tuple(dims)}")


def extract_patch(volume, origin, size: int) -> Patch:
    """Copy the cube of edge ``size`` starting at ``origin`` out of a volume or array."""
    arr = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    origin = tuple(int(o) for o in origin)
    _check_window(arr.shape, origin, size)
    x, y, z = origin
    return Patch(origin, arr[x:x + size, y:y + size, z:z + size].copy())


def reassemble(patches: Iterable, dims, voxel_size=(1.0, 1.0, 1.0)) -> Volume:
    """Average overlapping patches back into a full volume.

    ``patches`` yields ``(origin, patch)`` pairs where ``patch`` is a
    :class:`Patch` or a cubic array. Patches are accumulated in the order
    given, so a fixed grid gives run-to-run identical output.
    """
    dims = _as_dims(dims)
    total = np.zeros(dims, dtype=np.float64)
    count = np.zeros(dims, dtype=np.int64)
    for origin, patch in patches:
        values = patch.data if isinstance(patch, Patch) else np.asarray(patch, dtype=np.float64)
        s = values.shape[0]
        if values.shape != (s, s, s):
            raise DimensionError(f"patch must be cubic, got shape {values.shape}")
        _check_window(dims, origin, s)
        x, y, z = origin
        total[x:x + s, y:y + s, z:z + s] += values
        count[x:x + s, y:y + s, z:z + s] += 1
    if not count.all():
        first = tuple(int(i) for i in np.argwhere(count == 0)[0])
        raise CoverageError(f"voxel {first} is not covered by any patch")
    return Volume(total / count, voxel_size)


def write_volume(volume: Volume, path) -> None:
    nx, ny, nz = volume.dims
    header = _HEADER.pack(MAGIC, VERSION, nx, ny, nz, *volume.voxel_size)
    payload = np.asarray(volume.data, dtype="<f4").tobytes(order="F")
    Path(path).write_bytes(header + payload)


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: header truncated", offset=len(raw))
    magic, version, nx, ny, nz, vx, vy, vz = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if min(nx, ny, nz) < 1:
        raise FormatError(f"{path}: zero dimension in {(nx, ny, nz)}", offset=8)
    if not all(np.isfinite(v) and v > 0 for v in (vx, vy, vz)):
        raise FormatError(f"{path}: invalid voxel size {(vx, vy, vz)}", offset=20)
    expected = _HEADER.size + 4 * nx * ny * nz
    if len(raw) < expected:
        raise FormatError(f"{path}: payload truncated, expected {expected} bytes, got {len(raw)}",
                          offset=len(raw))
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes", offset=expected)
    flat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise FormatError(f"{path}: non-finite value", offset=_HEADER.size + 4 * int(bad[0]))
    data = flat.reshape((nx, ny, nz), order="F").astype(np.float64)
    return Volume(data, (float(vx), float(vy), float(vz)))


def patch_stack(arr: np.ndarray, origins: Sequence, size: int) -> np.ndarray:
    """Stack the cubes at ``origins`` into an array of shape (n, s, s, s)."""
    out = np.empty((len(origins), size, size, size), dtype=np.float64)
    for i, (x, y, z) in enumerate(origins):
        out[i] = arr[x:x + size, y:y + size, z:z + size]
    return out
