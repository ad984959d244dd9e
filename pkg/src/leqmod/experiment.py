"""End-to-end pipeline steps: generate, train, denoise, evaluate and ablate."""
from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .denoiser import denoise_volume, load_checkpoint, save_checkpoint, split_cohort, train
from .errors import DomainError, EvaluationError
from .metrics import CohortReport, bland_altman, evaluate_cohort, wilcoxon_signed_rank
from .phantom import MANIFEST_NAME, format_level, generate_cohort, read_manifest, write_manifest
from .volume import build_patch_grid, read_volume, write_volume

MODEL_NAME = "model.lqmp"
LOG_NAME = "train_log.csv"
METRICS_NAME = "metrics.csv"
ABLATION_NAME = "ablation.csv"
ECHO_NAME = "config_echo.txt"
BLAND_ALTMAN_NAME = "bland_altman.csv"
DENOISED_DIR = "denoised"


def cohort_hash(cohort) -> str:
    """SHA-256 over every subject's ids, volumes and lesion truth."""
    h = hashlib.sha256()
    for subj in cohort:
        h.update(subj.id.encode())
        h.update(np.ascontiguousarray(subj.hc.data).tobytes())
        for level in sorted(subj.lc):
            h.update(repr(float(level)).encode())
            h.update(np.ascontiguousarray(subj.lc[level].data).tobytes())
        h.update(np.ascontiguousarray(subj.oracle_prob, dtype=np.float64).tobytes())
        for les in subj.lesion_truth:
            h.update(repr((les.center, les.radius, les.suv)).encode())
    return h.hexdigest()


def write_echo(cfg: RunConfig, out: Path, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = cfg.echo()
    for k, v in (extra or {}).items():
        text += f"# {k}={v}\n"
    (out / ECHO_NAME).write_text(text)


def make_cohort(cfg: RunConfig):
    return generate_cohort(cfg["subjects"], cfg.cohort_spec(), cfg.count_config())


def manifest_path(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg["manifest"]) if cfg["manifest"] else out / MANIFEST_NAME


def eval_indices(cfg: RunConfig, n: int) -> list[int]:
    if cfg["eval_split"] == "all":
        return list(range(n))
    return split_cohort(n, cfg["val_fraction"], cfg["test_fraction"])[2]


def denoised_name(subject_id: str, level: float) -> str:
    return f"{subject_id}_den{format_level(level)}.lqmv"


# --- individual steps -------------------------------------------------------

def run_gen(cfg: RunConfig, out: Path):
    cohort = make_cohort(cfg)
    write_manifest(cohort, out)
    write_echo(cfg, out, {"cohort_hash": cohort_hash(cohort)})
    return cohort


def run_train(cfg: RunConfig, cohort, out: Path, progress=None):
    params, log = train(cohort, cfg.provider(), cfg.train_config(), cfg.sampling_config(), progress=progress)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / MODEL_NAME)
    (out / LOG_NAME).write_text(log.to_csv())
    write_echo(cfg, out, {"cohort_hash": cohort_hash(cohort)})
    return params, log


def denoise_cohort(params, cohort, cfg: RunConfig, indices=None) -> dict:
    dims = cohort[0].hc.dims
    grid = build_patch_grid(dims, cfg["patch_size"], cfg["stride"])
    indices = range(len(cohort)) if indices is None else indices
    return {(cohort[i].id, level): denoise_volume(params, cohort[i].lc[level], grid)
            for i in indices for level in sorted(cohort[i].lc)}


def run_denoise(cfg: RunConfig, cohort, out: Path, model_path: Path) -> dict:
    params = load_checkpoint(model_path, expect_arch=cfg["arch"])
    den = denoise_cohort(params, cohort, cfg)
    den_dir = Path(cfg["denoised_dir"]) if cfg["denoised_dir"] else out / DENOISED_DIR
    den_dir.mkdir(parents=True, exist_ok=True)
    for (sid, level), vol in den.items():
        write_volume(vol, den_dir / denoised_name(sid, level))
    write_echo(cfg, out)
    return den


def load_denoised(cohort, den_dir: Path, indices) -> dict:
    den = {}
    for i in indices:
        subj = cohort[i]
        for level in sorted(subj.lc):
            path = den_dir / denoised_name(subj.id, level)
            if not path.exists():
                raise EvaluationError(f"missing denoised volume {path}")
            den[(subj.id, level)] = read_volume(path)
    return den


def run_eval(cfg: RunConfig, cohort, den: dict, out: Path) -> CohortReport:
    report = evaluate_cohort(cohort, den, cfg.provider(), observer=cfg.observer(),
                             subject_indices=eval_indices(cfg, len(cohort)))
    out.mkdir(parents=True, exist_ok=True)
    (out / METRICS_NAME).write_text(report.to_csv())
    pairs = report.tlg_pairs()
    if len(pairs) >= 2:
        (out / BLAND_ALTMAN_NAME).write_text(bland_altman(pairs).to_csv())
    write_echo(cfg, out)
    return report


# --- ablation ------------------------------------------------------------------

CASE_METRICS = ("nrmse", "psnr_db", "ssim", "ssim_x100", "tlg_bias_pct", "tversky_03_07", "dice", "tversky_07_03")
LESION_METRICS = ("suv_mean_bias_pct", "suv_max_bias_pct", "abs_suv_mean_bias_pct", "abs_suv_max_bias_pct")


@dataclass
class ArmResult:
    arm: str
    report: CohortReport
    log_rows: int


def _case_values(report: CohortReport, metric: str) -> np.ndarray:
    return np.array([float(c.row()[metric]) for c in report.cases])


def _lesion_values(report: CohortReport, metric: str) -> np.ndarray:
    name = metric.replace("abs_", "")
    vals = np.array([getattr(l, name) for l in report.lesion_biases()], dtype=np.float64)
    return np.abs(vals) if metric.startswith("abs_") else vals


def metric_vector(report: CohortReport, metric: str) -> np.ndarray:
    if metric in LESION_METRICS:
        return _lesion_values(report, metric)
    return _case_values(report, metric)


def _nanmean(values: np.ndarray) -> float:
    values = values[np.isfinite(values)]
    return float(values.mean()) if values.size else math.nan


def _paired_p(a: np.ndarray, b: np.ndarray) -> float:
    keep = np.isfinite(a) & np.isfinite(b)
    try:
        return wilcoxon_signed_rank(a[keep], b[keep]).p_value
    except DomainError:
        return math.nan


def ablation_table(results: list[ArmResult], chash: str, reference: str = "baseline") -> str:
    """Per-arm metric means, Wilcoxon p-values against ``reference`` and Bland-Altman limits."""
    metrics = CASE_METRICS + LESION_METRICS
    ref = next((r for r in results if r.arm == reference), results[0])
    buf = io.StringIO()
    buf.write(f"# cohort_hash={chash}\n# reference_arm={ref.arm}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "cohort_hash", "n_cases", "n_lesions", *metrics, *[f"p_{m}" for m in metrics],
                "ba_mean_bias", "ba_lower", "ba_upper"])
    for res in results:
        means = [_nanmean(metric_vector(res.report, m)) for m in metrics]
        pvals = [_paired_p(metric_vector(res.report, m), metric_vector(ref.report, m)) for m in metrics]
        pairs = res.report.tlg_pairs()
        if len(pairs) >= 2:
            ba = bland_altman(pairs)
            limits = [ba.mean_bias, ba.lower, ba.upper]
        else:
            limits = [math.nan] * 3
        w.writerow([res.arm, chash, len(res.report.cases), len(res.report.lesion_biases())]
                   + [repr(float(v)) for v in means + pvals + limits])
    return buf.getvalue()


def run_ablate(cfg: RunConfig, out: Path, cohort=None, progress=None) -> tuple[list[ArmResult], str]:
    """Train, denoise and evaluate every configured arm on one shared cohort."""
    out.mkdir(parents=True, exist_ok=True)
    if cohort is None:
        if cfg["manifest"]:
            cohort = read_manifest(cfg["manifest"])
        else:
            cohort = make_cohort(cfg)
            write_manifest(cohort, out / "cohort")
    chash = cohort_hash(cohort)
    test_idx = eval_indices(cfg, len(cohort))
    results = []
    for arm in cfg["ablate_arms"]:
        arm_cfg = cfg.apply_arm(arm)
        arm_dir = out / arm
        params, log = run_train(arm_cfg, cohort, arm_dir,
                                progress=(lambda row, a=arm: progress(a, row)) if progress else None)
        den = denoise_cohort(params, cohort, arm_cfg, test_idx)
        report = evaluate_cohort(cohort, den, arm_cfg.provider(), observer=arm_cfg.observer(),
                                 subject_indices=test_idx)
        (arm_dir / METRICS_NAME).write_text(report.to_csv())
        pairs = report.tlg_pairs()
        if len(pairs) >= 2:
            (arm_dir / BLAND_ALTMAN_NAME).write_text(bland_altman(pairs).to_csv())
        results.append(ArmResult(arm, report, len(log.rows)))
    table = ablation_table(results, chash)
    (out / ABLATION_NAME).write_text(table)
    write_echo(cfg, out, {"cohort_hash": chash})
    return results, table
