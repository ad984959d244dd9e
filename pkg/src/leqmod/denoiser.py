"""Hand-differentiated toy denoisers, the combined objective, Adam and training.

Two architectures are provided:

``convnet``
    three 3x3x3 convolutions (1 -> 8 -> 8 -> 1 channels) with ReLU between
    them and an additive input skip.
``linfilter``
    a single 5x5x5 linear convolution.

Activations are channels-last, ``(batch, x, y, z, channels)``; kernels are
``(kx, ky, kz, c_in, c_out)``. Convolutions zero-pad to keep the patch size.
"""
from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, DomainError, FormatError, TrainingError
from .lemod import SamplingConfig, build_weight_table, le_loss, sampling_probabilities
from .phantom import count_rng
from .qumod import DEFAULT_MU, ParcellationPlan, build_parcellation, qu_loss
from .volume import PatchGrid, Volume, build_patch_grid, patch_stack, reassemble

ARCHITECTURES = {
    "convnet": [("w1", (3, 3, 3, 1, 8)), ("b1", (8,)),
                ("w2", (3, 3, 3, 8, 8)), ("b2", (8,)),
                ("w3", (3, 3, 3, 8, 1)), ("b3", (1,))],
    "linfilter": [("w", (5, 5, 5, 1, 1)), ("b", (1,))],
}


@dataclass
class ModelParams:
    arch: str
    blocks: dict[str, np.ndarray]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.blocks.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.blocks.items()})


def zero_params(arch: str) -> ModelParams:
    if arch not in ARCHITECTURES:
        raise DomainError(f"unknown architecture {arch!r}")
    return ModelParams(arch, {name: np.zeros(shape) for name, shape in ARCHITECTURES[arch]})


def init_params(arch: str, rng: np.random.Generator) -> ModelParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero."""
    params = zero_params(arch)
    for name, shape in ARCHITECTURES[arch]:
        if len(shape) == 5:
            fan_in = shape[0] * shape[1] * shape[2] * shape[3]
            bound = 1.0 / math.sqrt(fan_in)
            params.blocks[name] = rng.uniform(-bound, bound, size=shape)
    return params


def identity_params(arch: str) -> ModelParams:
    """Parameters whose forward pass returns the input unchanged."""
    params = zero_params(arch)
    if arch == "linfilter":
        params.blocks["w"][2, 2, 2, 0, 0] = 1.0
    return params


# --- convolution ------------------------------------------------------------

def _pad(x, r):
    return np.pad(x, ((0, 0), (r, r), (r, r), (r, r), (0, 0)))


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    k = w.shape[0]
    _, nx, ny, nz, _ = x.shape
    xp = _pad(x, k // 2)
    out = np.zeros(x.shape[:4] + (w.shape[4],))
    for i in range(k):
        for j in range(k):
            for l in range(k):
                out += xp[:, i:i + nx, j:j + ny, l:l + nz, :] @ w[i, j, l]
    out += b
    return out


def conv3d_backward(x, w, g, need_input_grad=True):
    """Return (dw, db, dx) for ``conv3d(x, w, b)`` given upstream ``g``."""
    k = w.shape[0]
    _, nx, ny, nz, _ = x.shape
    xp = _pad(x, k // 2)
    dw = np.empty_like(w)
    g2 = g.reshape(-1, g.shape[-1])
    for i in range(k):
        for j in range(k):
            for l in range(k):
                cols = np.ascontiguousarray(xp[:, i:i + nx, j:j + ny, l:l + nz, :])
                dw[i, j, l] = cols.reshape(-1, x.shape[-1]).T @ g2
    db = g.sum(axis=(0, 1, 2, 3))
    dx = None
    if need_input_grad:
        gp = _pad(g, k // 2)
        dx = np.zeros(x.shape)
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    dx += gp[:, i:i + nx, j:j + ny, l:l + nz, :] @ w[k - 1 - i, k - 1 - j, k - 1 - l].T
    return dw, db, dx


def _as_batch(v):
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 3
    if single:
        v = v[None]
    if v.ndim != 4 or not (v.shape[1] == v.shape[2] == v.shape[3]):
        raise DimensionError(f"expected a cubic patch or batch of patches, got shape {v.shape}")
    return v, single


def _forward_cache(params: ModelParams, x: np.ndarray):
    p = params.blocks
    xc = x[..., None]
    if params.arch == "linfilter":
        if x.shape[1] < p["w"].shape[0] // 2 + 1:
            raise DimensionError(f"patch {x.shape[1:]} too small for a 5^3 kernel")
        return conv3d(xc, p["w"], p["b"])[..., 0], (xc,)
    h1 = conv3d(xc, p["w1"], p["b1"])
    a1 = np.maximum(h1, 0.0)
    h2 = conv3d(a1, p["w2"], p["b2"])
    a2 = np.maximum(h2, 0.0)
    out = conv3d(a2, p["w3"], p["b3"])[..., 0] + x
    return out, (xc, h1, a1, h2, a2)


def forward(params: ModelParams, v_lc) -> np.ndarray:
    x, single = _as_batch(v_lc)
    out, _ = _forward_cache(params, x)
    return out[0] if single else out


def _backward_cache(params, cache, up, need_input_grad):
    p = params.blocks
    g = up[..., None]
    if params.arch == "linfilter":
        (xc,) = cache
        dw, db, dx = conv3d_backward(xc, p["w"], g, need_input_grad)
        return {"w": dw, "b": db}, (dx[..., 0] if dx is not None else None)
    xc, h1, a1, h2, a2 = cache
    dw3, db3, da2 = conv3d_backward(a2, p["w3"], g)
    dh2 = da2 * (h2 > 0)
    dw2, db2, da1 = conv3d_backward(a1, p["w2"], dh2)
    dh1 = da1 * (h1 > 0)
    dw1, db1, dx = conv3d_backward(xc, p["w1"], dh1, need_input_grad)
    grads = {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2, "w3": dw3, "b3": db3}
    return grads, (dx[..., 0] + up if dx is not None else None)


def backward(params: ModelParams, v_lc, upstream_grad, need_input_grad=True):
    """Exact reverse-mode gradients: ``(param_grads, input_grad)``."""
    x, single = _as_batch(v_lc)
    up = np.asarray(upstream_grad, dtype=np.float64)
    if single:
        up = up[None]
    if up.shape != x.shape:
        raise DimensionError(f"upstream gradient {up.shape} does not match output {x.shape}")
    _, cache = _forward_cache(params, x)
    grads, dx = _backward_cache(params, cache, up, need_input_grad)
    if dx is not None and single:
        dx = dx[0]
    return grads, dx


# --- objective --------------------------------------------------------------

@dataclass
class TrainConfig:
    arch: str = "convnet"
    lambda_le: float = 0.15
    lambda_qu: float = 0.5
    use_base: bool = True
    use_le: bool = True
    use_qu: bool = True
    weighted_sampling: bool = True
    lr0: float = 1e-4
    lr_decay: float = 0.1
    patience: int = 5
    lr_min: float = 1e-7
    batch_size: int = 4
    max_epochs: int = 100
    epoch_samples: int = 0  # 0: one epoch draws as many patches as the weight table holds
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    patch_size: int = 32
    stride: int = 8
    levels: tuple[float, ...] = (5.0,)
    mu: tuple[float, ...] = DEFAULT_MU
    val_fraction: float = 0.1
    test_fraction: float = 0.3
    max_val_patches: int = 64
    j_mode: str = "soft"

    def __post_init__(self):
        if self.lambda_le < 0 or self.lambda_qu < 0:
            raise DomainError("loss weights must be non-negative")
        if not self.lr0 > 0:
            raise DomainError("lr0 must be positive")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")


def base_loss(v_den, v_hc):
    diff = v_den - v_hc
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def combined_loss(v_den, v_hc, prob, plan: ParcellationPlan, config: TrainConfig):
    """Base MSE plus weighted lesion and quantification terms for one patch.

    Returns ``(value, grad_wrt_v_den, components)``; disabled components
    report exactly 0 and contribute no gradient.
    """
    v_den = np.asarray(v_den, dtype=np.float64)
    if not (v_den.shape == np.shape(v_hc) == np.shape(prob)):
        raise DimensionError(f"shape mismatch: {v_den.shape}, {np.shape(v_hc)}, {np.shape(prob)}")
    comps = {"base": 0.0, "le": 0.0, "qu": 0.0}
    grad = np.zeros_like(v_den)
    if config.use_base:
        comps["base"], g = base_loss(v_den, v_hc)
        grad += g
    if config.use_le and config.lambda_le > 0:
        r = le_loss(v_den, v_hc, prob, config.j_mode)
        comps["le"] = r.value
        grad += config.lambda_le * r.grad
    if config.use_qu and config.lambda_qu > 0:
        r = qu_loss(v_den, v_hc, plan)
        comps["qu"] = r.value
        grad += config.lambda_qu * r.grad
    total = comps["base"] + config.lambda_le * comps["le"] + config.lambda_qu * comps["qu"]
    return total, grad, comps


# --- optimizer --------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in params.blocks.items()},
                   {k: np.zeros_like(a) for k, a in params.blocks.items()})


def adam_step(params: ModelParams, grads, state: OptimizerState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {name!r}")
    state.step += 1
    t = state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        params.blocks[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


# --- training ---------------------------------------------------------------

LOG_FIELDS = ["epoch", "lr", "loss_total", "loss_base", "loss_le", "loss_qu", "val_loss", "lesion_fraction"]


def split_cohort(n: int, val_fraction: float, test_fraction: float):
    """Consecutive train / validation / test subject indices."""
    n_test = int(math.floor(test_fraction * n + 0.5))
    n_val = int(math.floor(val_fraction * n + 0.5))
    n_train = n - n_test - n_val
    if n_train < 1:
        raise TrainingError(f"no training subjects left from {n} (val {n_val}, test {n_test})")
    idx = list(range(n))
    return idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:]


class _PatchSource:
    """Cached per-subject arrays for quick patch gathering."""

    def __init__(self, cohort, provider, size):
        self.cohort = cohort
        self.provider = provider
        self.size = size
        self._prob = {}

    def prob(self, idx):
        if idx not in self._prob:
            subj = self.cohort[idx]
            self._prob[idx] = self.provider(subj.hc, subj)
        return self._prob[idx]

    def gather(self, records):
        s = self.size
        lc = np.empty((len(records), s, s, s))
        hc = np.empty_like(lc)
        pr = np.empty_like(lc)
        for n, r in enumerate(records):
            subj = self.cohort[r.subject_index]
            x, y, z = r.origin
            win = (slice(x, x + s), slice(y, y + s), slice(z, z + s))
            lc[n] = subj.lc[r.count_level].data[win]
            hc[n] = subj.hc.data[win]
            pr[n] = self.prob(r.subject_index)[win]
        return lc, hc, pr


def _batch_objective(params, lc, hc, pr, plan, config):
    out, cache = _forward_cache(params, lc)
    b = lc.shape[0]
    up = np.empty_like(out)
    sums = {"total": 0.0, "base": 0.0, "le": 0.0, "qu": 0.0}
    for n in range(b):
        total, g, comps = combined_loss(out[n], hc[n], pr[n], plan, config)
        up[n] = g / b
        sums["total"] += total / b
        for k, v in comps.items():
            sums[k] += v / b
    return sums, up, cache


def evaluate_loss(params, source, records, plan, config, chunk=8) -> float:
    total = 0.0
    for start in range(0, len(records), chunk):
        lc, hc, pr = source.gather(records[start:start + chunk])
        out = forward(params, lc)
        for n in range(len(out)):
            total += combined_loss(out[n], hc[n], pr[n], plan, config)[0]
    return total / max(len(records), 1)


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for row in self.rows:
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_FIELDS[1:]])
        return buf.getvalue()


def train(cohort, provider, config: TrainConfig, sampling: SamplingConfig = None,
          train_idx=None, val_idx=None, params: ModelParams = None, progress=None):
    """Weighted-sampling Adam training on LC/HC patch pairs.

    Returns ``(params, log)``. The learning rate drops by ``lr_decay`` after
    ``patience`` epochs without a new best validation loss, and training
    stops once it falls below ``lr_min`` or ``max_epochs`` is reached.
    """
    if not cohort:
        raise TrainingError("empty cohort")
    sampling = sampling or SamplingConfig(j_mode=config.j_mode)
    if train_idx is None:
        train_idx, val_idx, _ = split_cohort(len(cohort), config.val_fraction, config.test_fraction)
    val_idx = list(val_idx or [])
    dims = cohort[0].hc.dims
    grid = build_patch_grid(dims, config.patch_size, config.stride)
    plan = build_parcellation(config.patch_size, config.mu)
    if params is None:
        params = init_params(config.arch, count_rng(config.seed, 1))
    params = params.copy()
    log = TrainingLog()
    if config.max_epochs <= 0:
        return params, log

    table = build_weight_table(cohort, provider, grid, sampling, config.levels, train_idx)
    probs = sampling_probabilities(table, uniform=not config.weighted_sampling)
    source = _PatchSource(cohort, provider, config.patch_size)
    val_records = []
    if val_idx:
        val_records = build_weight_table(cohort, provider, grid, sampling, config.levels, val_idx)
        if len(val_records) > config.max_val_patches:
            keep = np.sort(count_rng(config.seed, 3).choice(len(val_records), config.max_val_patches,
                                                            replace=False))
            val_records = [val_records[i] for i in keep]

    sampler = count_rng(config.seed, 2)
    state = OptimizerState.for_params(params)
    n_draws = config.epoch_samples or len(table)
    n_batches = max(1, math.ceil(n_draws / config.batch_size))
    lr = config.lr0
    best = math.inf
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        acc = {"total": 0.0, "base": 0.0, "le": 0.0, "qu": 0.0}
        lesion_hits = 0
        for _ in range(n_batches):
            picks = sampler.choice(len(table), size=config.batch_size, replace=True, p=probs)
            records = [table[i] for i in picks]
            lesion_hits += sum(r.max_lesion_prob > 0.5 for r in records)
            lc, hc, pr = source.gather(records)
            sums, up, cache = _batch_objective(params, lc, hc, pr, plan, config)
            if not math.isfinite(sums["total"]):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            grads, _ = _backward_cache(params, cache, up, need_input_grad=False)
            adam_step(params, grads, state, lr, config.beta1, config.beta2, config.adam_eps)
            for k in acc:
                acc[k] += sums[k] / n_batches
        if val_records:
            val_loss = evaluate_loss(params, source, val_records, plan, config)
        else:
            val_loss = acc["total"]
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        log.rows.append({"epoch": epoch, "lr": lr, "loss_total": acc["total"], "loss_base": acc["base"],
                         "loss_le": acc["le"], "loss_qu": acc["qu"], "val_loss": val_loss,
                         "lesion_fraction": lesion_hits / (n_batches * config.batch_size)})
        if progress:
            progress(log.rows[-1])
        if val_loss < best:
            best = val_loss
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                lr *= config.lr_decay
                stale = 0
                if lr < config.lr_min * (1 - 1e-9):
                    break
    return params, log


def denoise_volume(params: ModelParams, volume: Volume, grid: PatchGrid, chunk: int = 8) -> Volume:
    """Denoise patch by patch, average overlaps and clamp negatives to zero."""
    if tuple(grid.dims) != volume.dims:
        raise DimensionError(f"grid dims {grid.dims} do not match volume {volume.dims}")
    s = grid.patch_size
    outputs = []
    for start in range(0, len(grid.origins), chunk):
        origins = grid.origins[start:start + chunk]
        out = forward(params, patch_stack(volume.data, origins, s))
        outputs.extend(zip(origins, out))
    merged = reassemble(outputs, volume.dims, volume.voxel_size)
    return merged.with_data(np.maximum(merged.data, 0.0))


# --- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"LQMP"
CKPT_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    """LQMP layout (little-endian): magic, u32 version, 16-byte ASCII arch tag,
    u32 block count, then per block u32 ndim, ndim x u32 shape and the f64
    values in C order. Blocks follow the architecture's documented order."""
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), params.arch.encode("ascii").ljust(16, b"\0"),
             struct.pack("<I", len(params.blocks))]
    for name, _shape in ARCHITECTURES[params.arch]:
        arr = params.blocks[name]
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, expect_arch: str = None) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}", offset=0)
    if len(raw) < 28:
        raise FormatError(f"{path}: checkpoint header truncated", offset=len(raw))
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    arch = raw[8:24].rstrip(b"\0").decode("ascii", errors="replace")
    if arch not in ARCHITECTURES:
        raise FormatError(f"{path}: unknown architecture tag {arch!r}", offset=8)
    if expect_arch is not None and arch != expect_arch:
        raise FormatError(f"{path}: checkpoint holds {arch!r}, expected {expect_arch!r}", offset=8)
    (n_blocks,) = struct.unpack_from("<I", raw, 24)
    layout = ARCHITECTURES[arch]
    if n_blocks != len(layout):
        raise FormatError(f"{path}: {n_blocks} blocks, {arch} needs {len(layout)}", offset=24)
    pos = 28
    blocks = {}
    for name, shape in layout:
        try:
            (ndim,) = struct.unpack_from("<I", raw, pos)
            got = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
        except struct.error:
            raise FormatError(f"{path}: truncated block {name}", offset=pos) from None
        if tuple(got) != shape:
            raise FormatError(f"{path}: block {name} has shape {got}, expected {shape}", offset=pos)
        pos += 4 + 4 * ndim
        nbytes = 8 * int(np.prod(shape))
        if pos + nbytes > len(raw):
            raise FormatError(f"{path}: truncated block {name}", offset=len(raw))
        blocks[name] = np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes", offset=pos)
    return ModelParams(arch, blocks)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
