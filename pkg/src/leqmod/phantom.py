"""Synthetic SUV phantoms and low-count acquisition by binomial thinning.

High-count images are Poisson counts of the phantom activity. Each
low-count image keeps every detected count independently with probability
r/100, which is how disjoint list-mode subsets behave.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DomainError, FormatError, GenerationError
from .volume import Volume, read_volume, write_volume

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
COUNT_LEVELS = (1.0, 2.0, 5.0, 10.0, 25.0, 50.0)


@dataclass(frozen=True)
class Lesion:
    center: tuple[float, float, float]  # voxel coordinates
    radius: float  # mm
    suv: float


@dataclass(frozen=True)
class Organ:
    center: tuple[float, float, float]
    radius: float
    suv: float


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float] = (2.0, 2.0, 2.0)
    background_suv: float = 1.0
    organs: list[Organ] = field(default_factory=list)
    lesions: list[Lesion] = field(default_factory=list)
    seed: int = 0
    edge_ramp: bool = True
    organ_edge_mm: float = 4.0


@dataclass
class CountSimConfig:
    sensitivity: float = 100.0
    count_levels: tuple[float, ...] = (5.0,)
    smoothing_fwhm: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not self.sensitivity > 0:
            raise DomainError(f"sensitivity must be positive, got {self.sensitivity}")
        if self.smoothing_fwhm < 0:
            raise DomainError("smoothing_fwhm must be >= 0")
        for r in self.count_levels:
            if not 0 < r <= 100:
                raise DomainError(f"count level {r} outside (0, 100]")


@dataclass
class Subject:
    id: str
    hc: Volume
    lc: dict[float, Volume]
    oracle_prob: np.ndarray
    lesion_truth: list[Lesion]


def ramp_width(voxel_size) -> float:
    return float(max(voxel_size))


def _distance_mm(dims, voxel_size, center, reach):
    """Distances (mm) to ``center`` over the bounding box within ``reach`` mm."""
    lo, hi = [], []
    for c, vs, n in zip(center, voxel_size, dims):
        lo.append(max(0, int(math.floor(c - reach / vs))))
        hi.append(min(n, int(math.ceil(c + reach / vs)) + 1))
    axes = [(np.arange(a, b) - c) * vs for a, b, c, vs in zip(lo, hi, center, voxel_size)]
    d2 = axes[0][:, None, None] ** 2 + axes[1][None, :, None] ** 2 + axes[2][None, None, :] ** 2
    box = tuple(slice(a, b) for a, b in zip(lo, hi))
    return box, np.sqrt(d2)


def _lesion_reach(lesion, width):
    return lesion.radius + width


def _check_spec(spec: PhantomSpec):
    if spec.background_suv <= 0:
        raise DomainError("background_suv must be positive")
    vmin = min(spec.voxel_size)
    width = ramp_width(spec.voxel_size) if spec.edge_ramp else 0.0
    extent = [(n - 1) * vs for n, vs in zip(spec.dims, spec.voxel_size)]
    for o in spec.organs:
        if o.suv <= 0 or o.radius <= 0:
            raise DomainError(f"organ {o} needs positive suv and radius")
    for i, les in enumerate(spec.lesions):
        if les.suv <= spec.background_suv:
            raise DomainError(f"lesion {i}: suv {les.suv} not above background {spec.background_suv}")
        if les.radius < vmin:
            raise DomainError(f"lesion {i}: radius {les.radius} mm below one voxel ({vmin} mm)")
        reach = _lesion_reach(les, width)
        for c, vs, ext in zip(les.center, spec.voxel_size, extent):
            if c * vs - reach < 0 or c * vs + reach > ext:
                raise DomainError(f"lesion {i} at {les.center} extends outside the body")
    for i in range(len(spec.lesions)):
        for j in range(i + 1, len(spec.lesions)):
            a, b = spec.lesions[i], spec.lesions[j]
            d = math.dist([c * vs for c, vs in zip(a.center, spec.voxel_size)],
                          [c * vs for c, vs in zip(b.center, spec.voxel_size)])
            if d < _lesion_reach(a, width) + _lesion_reach(b, width):
                raise GenerationError(f"lesions {i} and {j} overlap")


def generate_phantom(spec: PhantomSpec):
    """Return ``(activity, oracle_prob, lesions)`` for a phantom spec.

    Lesions replace the underlying activity: a voxel inside a lesion sphere
    reads exactly the lesion SUV and the optional one-voxel shell blends
    linearly back to the surroundings. The oracle probability is 1 inside
    the sphere and falls linearly from 0.5 to 0 across the shell, so that
    thresholding at 0.5 recovers exactly the hard spheres.
    """
    _check_spec(spec)
    dims = tuple(spec.dims)
    vs = tuple(spec.voxel_size)
    bg = float(spec.background_suv)
    activity = np.full(dims, bg)
    for organ in spec.organs:
        sigma = spec.organ_edge_mm
        box, d = _distance_mm(dims, vs, organ.center, organ.radius + 3 * sigma)
        blob = np.where(d <= organ.radius, 1.0, np.exp(-0.5 * ((d - organ.radius) / sigma) ** 2))
        activity[box] += (organ.suv - bg) * blob
    if activity.min() <= 0:
        raise DomainError("organ blobs drive the activity to non-positive values")

    width = ramp_width(vs) if spec.edge_ramp else 0.0
    oracle = np.zeros(dims)
    for les in spec.lesions:
        box, d = _distance_mm(dims, vs, les.center, _lesion_reach(les, width))
        if width > 0:
            shell = np.clip((les.radius + width - d) / width, 0.0, 1.0)
        else:
            shell = np.zeros_like(d)
        inside = d <= les.radius
        profile = np.where(inside, 1.0, shell)
        activity[box] = activity[box] * (1.0 - profile) + les.suv * profile
        oracle[box] = np.maximum(oracle[box], np.where(inside, 1.0, 0.5 * shell))
    return Volume(activity, vs), oracle, list(spec.lesions)


def _smooth(image: np.ndarray, fwhm: float, voxel_size) -> np.ndarray:
    if fwhm <= 0:
        return image
    sigma = [fwhm * FWHM_TO_SIGMA / v for v in voxel_size]
    return ndimage.gaussian_filter(image, sigma=sigma, mode="reflect", truncate=3.0)


def count_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Counter-based stream keyed by (seed, index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def simulate_counts(activity: Volume, config: CountSimConfig, rng=None):
    """Poisson high-count image plus binomially thinned low-count images.

    Returns ``(hc_image, {level: lc_image})``. Images are count rates
    rescaled back to SUV and optionally Gaussian smoothed.
    """
    a = activity.data
    if np.any(a < 0):
        raise DomainError("activity must be non-negative")
    if rng is None:
        rng = count_rng(config.seed)
    sens = float(config.sensitivity)
    hc_counts = rng.poisson(a * sens)
    hc = _smooth(hc_counts / sens, config.smoothing_fwhm, activity.voxel_size)
    lc = {}
    for level in sorted(float(r) for r in config.count_levels):
        keep = level / 100.0
        counts = hc_counts.copy() if keep >= 1.0 else rng.binomial(hc_counts, keep)
        img = counts / (sens * keep)
        lc[level] = Volume(_smooth(img, config.smoothing_fwhm, activity.voxel_size), activity.voxel_size)
    return Volume(hc, activity.voxel_size), lc


@dataclass
class CohortSpec:
    """Template from which per-subject phantoms are drawn."""

    dims: tuple[int, int, int] = (64, 64, 64)
    voxel_size: tuple[float, float, float] = (2.0, 2.0, 2.0)
    background_suv: float = 1.0
    organs: list[Organ] = field(default_factory=list)
    organ_jitter: int = 3
    max_lesions: int = 5
    lesion_radius: tuple[float, float] = (3.0, 7.0)
    lesion_suv: tuple[float, float] = (3.0, 10.0)
    lesion_free_fraction: float = 0.3
    edge_ramp: bool = True
    seed: int = 0
    max_retries: int = 200


def default_organs(dims, voxel_size) -> list[Organ]:
    """A liver-like warm blob, a hot heart-like blob and a cold lung-like blob."""
    nx, ny, nz = dims
    span = min(n * v for n, v in zip(dims, voxel_size))
    return [
        Organ((0.35 * nx, 0.55 * ny, 0.4 * nz), 0.22 * span, 2.0),
        Organ((0.65 * nx, 0.35 * ny, 0.65 * nz), 0.1 * span, 3.5),
        Organ((0.7 * nx, 0.7 * ny, 0.3 * nz), 0.15 * span, 0.4),
    ]


def _quantize(arr: np.ndarray) -> np.ndarray:
    # volumes are stored as float32; keep in-memory cohorts identical to what is written
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def _draw_lesions(rng, template: CohortSpec, n_lesions: int, organs) -> list[Lesion]:
    vs = template.voxel_size
    width = ramp_width(vs) if template.edge_ramp else 0.0
    placed: list[Lesion] = []
    for _ in range(n_lesions):
        for _attempt in range(template.max_retries):
            radius = float(rng.uniform(*template.lesion_radius))
            suv = float(rng.uniform(*template.lesion_suv))
            reach = radius + width
            lo = [int(math.ceil(reach / v)) for v in vs]
            hi = [int(math.floor((n - 1) - reach / v)) for n, v in zip(template.dims, vs)]
            if any(h < l for l, h in zip(lo, hi)):
                continue
            center = tuple(float(rng.integers(l, h + 1)) for l, h in zip(lo, hi))
            cand = Lesion(center, radius, suv)
            trial = PhantomSpec(template.dims, vs, template.background_suv, organs,
                                placed + [cand], edge_ramp=template.edge_ramp)
            try:
                _check_spec(trial)
            except (GenerationError, DomainError):
                continue
            placed.append(cand)
            break
        else:
            raise GenerationError(
                f"could not place lesion {len(placed)} after {template.max_retries} attempts")
    return placed


def generate_subject(index: int, template: CohortSpec, config: CountSimConfig, lesion_free: bool) -> Subject:
    geo = count_rng(template.seed, index)
    organs = []
    for o in (template.organs or default_organs(template.dims, template.voxel_size)):
        j = template.organ_jitter
        shift = geo.integers(-j, j + 1, size=3) if j > 0 else np.zeros(3, dtype=int)
        organs.append(Organ(tuple(float(c + s) for c, s in zip(o.center, shift)), o.radius, o.suv))
    n_lesions = 0 if lesion_free else int(geo.integers(1, template.max_lesions + 1))
    lesions = _draw_lesions(geo, template, n_lesions, organs)
    spec = PhantomSpec(template.dims, template.voxel_size, template.background_suv, organs,
                       lesions, seed=template.seed, edge_ramp=template.edge_ramp)
    activity, oracle, lesions = generate_phantom(spec)
    hc, lc = simulate_counts(activity, config, rng=count_rng(config.seed, index))
    vs = hc.voxel_size
    return Subject(
        id=f"s{index:03d}",
        hc=Volume(_quantize(hc.data), vs),
        lc={k: Volume(_quantize(v.data), vs) for k, v in lc.items()},
        oracle_prob=_quantize(oracle),
        lesion_truth=lesions,
    )


def lesion_free_quota(n_subjects: int, fraction: float, seed: int) -> set[int]:
    n_free = int(math.floor(fraction * n_subjects + 0.5))
    order = count_rng(seed, 2**32 - 1).permutation(n_subjects)
    return set(int(i) for i in order[:n_free])


def generate_cohort(n_subjects: int, template: CohortSpec, config: CountSimConfig) -> list[Subject]:
    if n_subjects < 1:
        raise DomainError("cohort needs at least one subject")
    if not 0.0 <= template.lesion_free_fraction <= 1.0:
        raise DomainError("lesion_free_fraction must lie in [0, 1]")
    free = lesion_free_quota(n_subjects, template.lesion_free_fraction, template.seed)
    return [generate_subject(i, template, config, i in free) for i in range(n_subjects)]


# --- manifest -------------------------------------------------------------

MANIFEST_NAME = "manifest.txt"


def format_level(level: float) -> str:
    return f"{float(level):g}"


def _fmt_vec(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def _parse_vec(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def write_manifest(cohort: list[Subject], directory) -> Path:
    """Write every subject volume plus ``manifest.txt`` into ``directory``.

    Manifest lines are whitespace-separated ``key=value`` records::

        subject id=s000 dims=64,64,64 voxel_size=2.0,2.0,2.0
        file id=s000 role=hc count_level=100 path=s000_hc.lqmv
        file id=s000 role=lc count_level=5 path=s000_lc5.lqmv
        file id=s000 role=oracle count_level=0 path=s000_oracle.lqmv
        lesion id=s000 center=10.0,20.0,30.0 radius=4.5 suv=6.25
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["# leqmod cohort manifest", "version=1"]
    for subj in cohort:
        vs = subj.hc.voxel_size
        lines.append(f"subject id={subj.id} dims={','.join(map(str, subj.hc.dims))} voxel_size={_fmt_vec(vs)}")
        entries = [("hc", 100.0, subj.hc, f"{subj.id}_hc.lqmv")]
        for level in sorted(subj.lc):
            entries.append(("lc", level, subj.lc[level], f"{subj.id}_lc{format_level(level)}.lqmv"))
        entries.append(("oracle", 0.0, Volume(subj.oracle_prob, vs), f"{subj.id}_oracle.lqmv"))
        for role, level, vol, name in entries:
            write_volume(vol, directory / name)
            lines.append(f"file id={subj.id} role={role} count_level={format_level(level)} path={name}")
        for les in subj.lesion_truth:
            lines.append(f"lesion id={subj.id} center={_fmt_vec(les.center)} "
                         f"radius={les.radius!r} suv={les.suv!r}")
    path = directory / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n")
    return path


def _parse_record(line: str, lineno: int, path) -> tuple[str, dict[str, str]]:
    kind, *fields = line.split()
    rec = {}
    for f in fields:
        if "=" not in f:
            raise FormatError(f"{path}:{lineno}: malformed field {f!r}")
        k, v = f.split("=", 1)
        rec[k] = v
    return kind, rec


def read_manifest(path) -> list[Subject]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FormatError(f"manifest not found: {path}")
    base = path.parent
    order: list[str] = []
    info: dict[str, dict] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("version="):
            if line != "version=1":
                raise FormatError(f"{path}:{lineno}: unsupported manifest {line}")
            continue
        kind, rec = _parse_record(line, lineno, path)
        try:
            sid = rec["id"]
            if kind == "subject":
                order.append(sid)
                info[sid] = {"vs": _parse_vec(rec["voxel_size"]), "lc": {}, "lesions": []}
            elif kind == "file":
                file_path = base / rec["path"]
                if not file_path.exists():
                    raise FormatError(f"{path}:{lineno}: missing volume file {file_path}")
                vol = read_volume(file_path)
                role = rec["role"]
                if role == "hc":
                    info[sid]["hc"] = vol
                elif role == "lc":
                    info[sid]["lc"][float(rec["count_level"])] = vol
                elif role == "oracle":
                    info[sid]["oracle"] = vol.data.copy()
                else:
                    raise FormatError(f"{path}:{lineno}: unknown role {role!r}")
            elif kind == "lesion":
                info[sid]["lesions"].append(
                    Lesion(_parse_vec(rec["center"]), float(rec["radius"]), float(rec["suv"])))
            else:
                raise FormatError(f"{path}:{lineno}: unknown record {kind!r}")
        except KeyError as exc:
            raise FormatError(f"{path}:{lineno}: missing field or subject {exc}") from None
    cohort = []
    for sid in order:
        d = info[sid]
        if "hc" not in d or "oracle" not in d:
            raise FormatError(f"{path}: subject {sid} lacks hc or oracle entries")
        cohort.append(Subject(sid, d["hc"], dict(sorted(d["lc"].items())), d["oracle"], d["lesions"]))
    return cohort
