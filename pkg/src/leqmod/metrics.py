"""Image-quality, lesion-quantification and observer metrics plus paired statistics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError, EvaluationError
from .seg import binarize, connected_components, quantify_lesions
from .volume import Volume

TVERSKY_PAIRS = ((0.3, 0.7), (0.5, 0.5), (0.7, 0.3))
Z_96 = 2.054  # two-sided 96% normal quantile
EXACT_MAX_N = 15


def _arrays(test, ref):
    t = test.data if isinstance(test, Volume) else np.asarray(test, dtype=np.float64)
    r = ref.data if isinstance(ref, Volume) else np.asarray(ref, dtype=np.float64)
    if t.shape != r.shape:
        raise DimensionError(f"shape mismatch {t.shape} vs {r.shape}")
    return t, r


def nrmse(test, ref) -> float:
    """RMSE normalised by the reference mean."""
    t, r = _arrays(test, ref)
    mean_ref = float(r.mean())
    if mean_ref <= 0:
        raise DomainError("reference mean must be positive for NRMSE")
    return math.sqrt(float(np.mean((t - r) ** 2))) / mean_ref


def psnr(test, ref) -> float:
    """PSNR in dB with the reference maximum as peak; ``inf`` for identical images."""
    t, r = _arrays(test, ref)
    peak = float(r.max())
    if peak <= 0:
        raise DomainError("reference maximum must be positive for PSNR")
    mse = float(np.mean((t - r) ** 2))
    if mse == 0:
        return math.inf
    return 20.0 * math.log10(peak) - 10.0 * math.log10(mse)


def _window_sums(arr: np.ndarray, w: int) -> np.ndarray:
    """Sums over every fully contained w^3 window."""
    sat = np.zeros(tuple(n + 1 for n in arr.shape))
    sat[1:, 1:, 1:] = arr.cumsum(0).cumsum(1).cumsum(2)
    hi = slice(w, None)
    lo = lambda n: slice(0, n - w + 1)  # noqa: E731
    nx, ny, nz = arr.shape
    X0, X1 = lo(nx), hi
    Y0, Y1 = lo(ny), hi
    Z0, Z1 = lo(nz), hi
    return (sat[X1, Y1, Z1] - sat[X0, Y1, Z1] - sat[X1, Y0, Z1] - sat[X1, Y1, Z0]
            + sat[X0, Y0, Z1] + sat[X0, Y1, Z0] + sat[X1, Y0, Z0] - sat[X0, Y0, Z0])


def ssim(test, ref, window: int = 7) -> float:
    """Mean SSIM over all valid ``window``^3 uniform windows.

    Local moments are population (1/n) moments; L is the reference maximum.
    """
    t, r = _arrays(test, ref)
    if min(t.shape) < window:
        raise DomainError(f"volume {t.shape} smaller than the {window}^3 SSIM window")
    L = float(r.max())
    if L <= 0:
        raise DomainError("reference maximum must be positive for SSIM")
    c1 = (0.01 * L) ** 2
    c2 = (0.03 * L) ** 2
    # centre both images; covariances are shift invariant and this limits cancellation
    mt, mr = float(t.mean()), float(r.mean())
    tc, rc = t - mt, r - mr
    n = float(window ** 3)
    mu_t = _window_sums(tc, window) / n
    mu_r = _window_sums(rc, window) / n
    var_t = _window_sums(tc * tc, window) / n - mu_t ** 2
    var_r = _window_sums(rc * rc, window) / n - mu_r ** 2
    cov = _window_sums(tc * rc, window) / n - mu_t * mu_r
    mu_t += mt
    mu_r += mr
    num = (2 * mu_t * mu_r + c1) * (2 * cov + c2)
    den = (mu_t ** 2 + mu_r ** 2 + c1) * (var_t + var_r + c2)
    return float(np.mean(num / den))


def tversky(mask_den, mask_hc, alpha: float, beta: float) -> float:
    a = np.asarray(mask_den, dtype=bool)
    b = np.asarray(mask_hc, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if alpha < 0 or beta < 0:
        raise DomainError("alpha and beta must be non-negative")
    tp = int(np.count_nonzero(a & b))
    fp = int(np.count_nonzero(a & ~b))
    fn = int(np.count_nonzero(b & ~a))
    if tp + fp + fn == 0:
        return 1.0
    denom = tp + alpha * fp + beta * fn
    return tp / denom if denom > 0 else 0.0


def dice(mask_a, mask_b) -> float:
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    total = int(a.sum() + b.sum())
    return 1.0 if total == 0 else 2.0 * int(np.count_nonzero(a & b)) / total


@dataclass
class LesionBias:
    label: int
    volume_mm3: float
    suv_mean_hc: float
    suv_mean_den: float
    suv_max_hc: float
    suv_max_den: float
    suv_mean_bias_pct: float
    suv_max_bias_pct: float


@dataclass
class QuantBiases:
    lesions: list[LesionBias]
    tlg_hc: float
    tlg_den: float
    tlg_bias_pct: float  # nan when the subject has no quantifiable lesion
    warnings: list[str] = field(default_factory=list)


def _pct(den: float, ref: float) -> float:
    return 100.0 * (den - ref) / ref


def quantification_biases(den: Volume, hc: Volume, instances) -> QuantBiases:
    """Per-lesion SUV_mean/SUV_max bias (%) and the subject's TLG bias (%)."""
    if den.dims != hc.dims:
        raise DimensionError(f"shape mismatch {den.dims} vs {hc.dims}")
    q_hc = quantify_lesions(instances, hc)
    q_den = quantify_lesions(instances, den)
    lesions, warnings = [], []
    tlg_hc = tlg_den = 0.0
    for h, d in zip(q_hc, q_den):
        if h.suv_mean == 0 or h.suv_max == 0:
            warnings.append(f"lesion {h.label}: zero reference SUV, skipped")
            continue
        lesions.append(LesionBias(h.label, h.volume_mm3, h.suv_mean, d.suv_mean, h.suv_max, d.suv_max,
                                  _pct(d.suv_mean, h.suv_mean), _pct(d.suv_max, h.suv_max)))
        tlg_hc += h.volume_mm3 * h.suv_mean
        tlg_den += d.volume_mm3 * d.suv_mean
    tlg_bias = _pct(tlg_den, tlg_hc) if lesions else math.nan
    return QuantBiases(lesions, tlg_hc, tlg_den, tlg_bias, warnings)


@dataclass
class BlandAltmanSummary:
    means: np.ndarray
    diffs: np.ndarray
    mean_bias: float
    sd: float
    lower: float
    upper: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case", "mean", "diff"])
        for i, (m, d) in enumerate(zip(self.means, self.diffs)):
            w.writerow([i, repr(float(m)), repr(float(d))])
        w.writerow([])
        w.writerow(["mean_bias", repr(self.mean_bias)])
        w.writerow(["sd", repr(self.sd)])
        w.writerow(["lower_96", repr(self.lower)])
        w.writerow(["upper_96", repr(self.upper)])
        return buf.getvalue()


def bland_altman(pairs) -> BlandAltmanSummary:
    """Agreement of ``(denoised, reference)`` pairs; limits are bias +/- 2.054 sd."""
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    if len(arr) < 2:
        raise DomainError("Bland-Altman analysis needs at least two pairs")
    diffs = arr[:, 0] - arr[:, 1]
    means = arr.mean(axis=1)
    bias = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    return BlandAltmanSummary(means, diffs, bias, sd, bias - Z_96 * sd, bias + Z_96 * sd)


@dataclass
class WilcoxonResult:
    statistic: float  # sum of ranks of positive differences
    p_value: float
    n: int
    method: str  # "exact", "normal" or "degenerate"

    @property
    def degenerate(self) -> bool:
        return self.method == "degenerate"


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def exact_signed_rank_pvalue(ranks: np.ndarray, w_plus: float) -> float:
    """Two-sided p from the exact permutation distribution of W+.

    Average ranks are multiples of 1/2, so doubled ranks are integers and
    the 2^n sign patterns can be counted by dynamic programming.
    """
    doubled = np.rint(2 * ranks).astype(int)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled:
        counts[r:] = counts[r:] + counts[:total + 1 - r].copy()
    target = int(round(2 * w_plus))
    n_patterns = 2 ** len(ranks)
    lower = sum(counts[:target + 1])
    upper = sum(counts[target:])
    return min(1.0, 2.0 * min(lower, upper) / n_patterns)


def wilcoxon_signed_rank(paired_a, paired_b) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test of ``a - b``.

    Zero differences are dropped; ties share average ranks. Exact null
    distribution for n <= 15, otherwise a normal approximation with tie
    and continuity corrections.
    """
    a = np.asarray(paired_a, dtype=np.float64)
    b = np.asarray(paired_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError("paired samples must have equal length")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate")
    if n < 5:
        raise DomainError(f"Wilcoxon test needs at least 5 non-zero differences, got {n}")
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        return WilcoxonResult(w_plus, exact_signed_rank_pvalue(ranks, w_plus), n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    dev = w_plus - mean
    dev = max(abs(dev) - 0.5, 0.0)
    z = dev / math.sqrt(var)
    return WilcoxonResult(w_plus, min(1.0, math.erfc(z / math.sqrt(2.0))), n, "normal")


# --- cohort evaluation -------------------------------------------------------

def _pair_label(alpha, beta) -> str:
    if (alpha, beta) == (0.5, 0.5):
        return "dice"
    return f"tversky_{str(alpha).replace('0.', '0')}_{str(beta).replace('0.', '0')}"


@dataclass
class CaseMetrics:
    subject: str
    level: float
    nrmse: float
    psnr_db: float
    ssim: float
    biases: QuantBiases
    tversky: dict

    def row(self) -> dict:
        lesions = self.biases.lesions
        out = {
            "subject": self.subject,
            "level": f"{self.level:g}",
            "nrmse": self.nrmse,
            "psnr_db": self.psnr_db,
            "ssim": self.ssim,
            "ssim_x100": 100.0 * self.ssim,
            "n_lesions": len(lesions),
            "suv_mean_bias_pct": float(np.mean([l.suv_mean_bias_pct for l in lesions])) if lesions else math.nan,
            "suv_max_bias_pct": float(np.mean([l.suv_max_bias_pct for l in lesions])) if lesions else math.nan,
            "tlg_bias_pct": self.biases.tlg_bias_pct,
        }
        for (a, b), value in self.tversky.items():
            out[_pair_label(a, b)] = value
        return out


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class CohortReport:
    cases: list[CaseMetrics]
    alphas: tuple

    @property
    def columns(self) -> list[str]:
        return (["subject", "level", "nrmse", "psnr_db", "ssim", "ssim_x100", "n_lesions",
                 "suv_mean_bias_pct", "suv_max_bias_pct", "tlg_bias_pct"]
                + [_pair_label(a, b) for a, b in self.alphas])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for case in self.cases:
            row = case.row()
            w.writerow([_fmt(row[c]) for c in self.columns])
        return buf.getvalue()

    def lesion_biases(self, level=None) -> list[LesionBias]:
        return [l for c in self.cases if level is None or c.level == level for l in c.biases.lesions]

    def tlg_pairs(self, level=None) -> list[tuple[float, float]]:
        return [(c.biases.tlg_den, c.biases.tlg_hc) for c in self.cases
                if (level is None or c.level == level) and c.biases.lesions]

    def summary(self) -> dict:
        """Mean and sample sd of every numeric column, per count level."""
        out = {}
        for level in sorted({c.level for c in self.cases}):
            rows = [c.row() for c in self.cases if c.level == level]
            stats = {}
            for col in self.columns[2:]:
                vals = np.array([float(r[col]) for r in rows], dtype=np.float64)
                vals = vals[np.isfinite(vals)]
                stats[col] = (float(vals.mean()) if len(vals) else math.nan,
                              float(vals.std(ddof=1)) if len(vals) > 1 else math.nan)
            out[level] = stats
        return out


def evaluate_case(subject, level, den: Volume, provider, observer=None, alphas=TVERSKY_PAIRS) -> CaseMetrics:
    hc = subject.hc
    if den.dims != hc.dims:
        raise DimensionError(f"{subject.id}@{level:g}%: denoised {den.dims} vs reference {hc.dims}")
    observer = observer or provider
    ref_mask = binarize(provider(hc, subject))
    instances = connected_components(ref_mask, hc.voxel_size)
    biases = quantification_biases(den, hc, instances)
    s_hc = binarize(observer(hc, subject))
    s_den = binarize(observer(den, subject))
    tv = {(a, b): tversky(s_den, s_hc, a, b) for a, b in alphas}
    return CaseMetrics(subject.id, float(level), nrmse(den, hc), psnr(den, hc), ssim(den, hc), biases, tv)


def evaluate_cohort(cohort, denoised: dict, provider, alphas=TVERSKY_PAIRS, observer=None,
                    subject_indices=None, levels=None) -> CohortReport:
    """Metrics for every (subject, level); ``denoised`` maps (subject_id, level) to a Volume.

    ``provider`` defines the reference lesion set on the high-count image;
    ``observer`` (default: ``provider``) segments both images for the
    Tversky indices.
    """
    indices = range(len(cohort)) if subject_indices is None else subject_indices
    cases = []
    for idx in indices:
        subj = cohort[idx]
        for level in (levels if levels is not None else sorted(subj.lc)):
            key = (subj.id, float(level))
            if key not in denoised:
                raise EvaluationError(f"missing denoised volume for subject {subj.id} at {level:g}%")
            cases.append(evaluate_case(subj, level, denoised[key], provider, observer, alphas))
    return CohortReport(cases, tuple(alphas))
