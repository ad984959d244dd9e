"""Flat ``key=value`` run configuration shared by every CLI subcommand.

Precedence, lowest first: built-in defaults, ``--config`` file, dedicated
command-line flags, ``--set key=value`` overrides. Unknown keys are
rejected so a typo never silently falls back to a default.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .errors import ConfigError
from .lemod import DEFAULT_ETA, SamplingConfig
from .phantom import CohortSpec, CountSimConfig, format_level
from .qumod import DEFAULT_MU
from .seg import HeuristicConfig, make_provider


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _eta(text: str) -> dict[float, float]:
    table = {}
    for item in text.split(","):
        level, value = item.split(":")
        table[float(level)] = float(value)
    return table


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


def _str(text: str) -> str:
    return text


@dataclass(frozen=True)
class Key:
    default: str
    parse: Callable
    help: str


_ETA_TEXT = ",".join(f"{format_level(k)}:{v}" for k, v in DEFAULT_ETA.items())

KEYS: dict[str, Key] = {
    # cohort and count simulation
    "seed": Key("0", int, "seed for phantom geometry, count noise and training"),
    "subjects": Key("30", int, "number of synthetic subjects"),
    "dims": Key("64,64,64", _ints, "phantom dims in voxels"),
    "voxel_size": Key("2,2,2", _floats, "voxel size in mm"),
    "levels": Key("5", _floats, "low-count levels in percent"),
    "sensitivity": Key("100", float, "expected counts per SUV per voxel at full count"),
    "smoothing_fwhm": Key("2", float, "Gaussian post-smoothing FWHM in mm"),
    "background_suv": Key("1", float, "background SUV"),
    "max_lesions": Key("5", int, "maximum lesions per subject"),
    "lesion_radius": Key("3,7", _floats, "lesion radius range in mm"),
    "lesion_suv": Key("3,10", _floats, "lesion SUV range"),
    "lesion_free_fraction": Key("0.3", float, "fraction of lesion-free subjects"),
    "organ_jitter": Key("3", int, "per-subject organ shift in voxels"),
    "edge_ramp": Key("true", _bool, "one-voxel linear lesion edge"),
    # patches, sampling and losses
    "patch_size": Key("32", int, "training and inference patch edge"),
    "stride": Key("8", int, "patch stride"),
    "w_min": Key("0.3", float, "minimum lesion probability in the sampling weight"),
    "eta": Key(_ETA_TEXT, _eta, "noise-aware factor table level:eta"),
    "mu": Key(",".join(str(m) for m in DEFAULT_MU), _floats, "per-scale quantification weights"),
    "j_mode": Key("soft", _choice("soft", "hard"), "lesion loss normaliser"),
    "lambda_le": Key("0.15", float, "lesion loss weight"),
    "lambda_qu": Key("0.5", float, "quantification loss weight"),
    "use_base": Key("true", _bool, "enable the MSE term"),
    "use_le": Key("true", _bool, "enable the lesion loss"),
    "use_qu": Key("true", _bool, "enable the quantification loss"),
    "weighted_sampling": Key("true", _bool, "lesion-weighted patch sampling"),
    # optimisation
    "arch": Key("convnet", _choice("convnet", "linfilter"), "denoiser architecture"),
    "lr0": Key("1e-4", float, "initial learning rate"),
    "lr_decay": Key("0.1", float, "learning-rate decay factor"),
    "patience": Key("5", int, "epochs without improvement before decay"),
    "lr_min": Key("1e-7", float, "stop once the learning rate falls below this"),
    "batch_size": Key("4", int, "patches per batch"),
    "max_epochs": Key("100", int, "epoch cap"),
    "epoch_samples": Key("0", int, "patches drawn per epoch, 0 for the weight-table size"),
    "beta1": Key("0.9", float, "Adam beta1"),
    "beta2": Key("0.999", float, "Adam beta2"),
    "adam_eps": Key("1e-8", float, "Adam epsilon"),
    "val_fraction": Key("0.1", float, "validation share of subjects"),
    "test_fraction": Key("0.3", float, "test share of subjects"),
    "max_val_patches": Key("64", int, "validation patches kept"),
    # probability maps and evaluation
    "provider": Key("oracle", _choice("oracle", "heuristic"), "lesion probability source for training and reference lesions"),
    "observer": Key("heuristic", _choice("oracle", "heuristic"), "segmenter applied to both images for Tversky"),
    "oracle_blur_fwhm": Key("0", float, "blur of the oracle map in mm"),
    "heur_fwhm": Key("4", float, "heuristic segmenter smoothing FWHM in mm"),
    "heur_z0": Key("4", float, "heuristic logistic offset"),
    "heur_tau": Key("1", float, "heuristic logistic scale"),
    "heur_min_voxels": Key("3", int, "heuristic minimum component size"),
    "eval_split": Key("test", _choice("test", "all"), "subjects evaluated by eval and ablate"),
    "ablate_arms": Key("baseline,lemod,qumod,leqmod", lambda t: tuple(t.split(",")), "ablation arms"),
    # paths, empty means a fixed name under --out
    "manifest": Key("", _str, "cohort manifest to read"),
    "model": Key("", _str, "checkpoint to read"),
    "denoised_dir": Key("", _str, "directory of denoised volumes"),
}

ARMS = {
    "baseline": {"use_le": False, "use_qu": False, "weighted_sampling": False},
    "lemod": {"use_le": True, "use_qu": False, "weighted_sampling": True},
    "qumod": {"use_le": False, "use_qu": True, "weighted_sampling": False},
    "leqmod": {"use_le": True, "use_qu": True, "weighted_sampling": True},
}


class RunConfig:
    """Raw string values plus parsed accessors for every known key."""

    def __init__(self, values: dict[str, str] | None = None):
        self.raw = {k: key.default for k, key in KEYS.items()}
        self.values = {}
        self.update(values or {}, source="defaults")

    def update(self, values: dict[str, str], source: str = "override") -> None:
        for k, v in values.items():
            if k not in KEYS:
                raise ConfigError(f"unknown config key {k!r} ({source})")
            self.raw[k] = str(v).strip()
        self._parse()

    def _parse(self):
        parsed = {}
        for k, key in KEYS.items():
            try:
                parsed[k] = key.parse(self.raw[k])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {k}: {self.raw[k]!r} ({exc})") from None
        self.values = parsed

    def __getitem__(self, key):
        return self.values[key]

    def copy(self) -> "RunConfig":
        out = RunConfig()
        out.update(self.raw)
        return out

    def apply_arm(self, arm: str) -> "RunConfig":
        if arm not in ARMS:
            raise ConfigError(f"unknown ablation arm {arm!r}")
        out = self.copy()
        out.update({k: str(v).lower() for k, v in ARMS[arm].items()})
        return out

    # --- typed views -------------------------------------------------------

    def cohort_spec(self) -> CohortSpec:
        return CohortSpec(dims=self["dims"], voxel_size=self["voxel_size"],
                          background_suv=self["background_suv"], organ_jitter=self["organ_jitter"],
                          max_lesions=self["max_lesions"], lesion_radius=self["lesion_radius"],
                          lesion_suv=self["lesion_suv"], lesion_free_fraction=self["lesion_free_fraction"],
                          edge_ramp=self["edge_ramp"], seed=self["seed"])

    def count_config(self) -> CountSimConfig:
        return CountSimConfig(sensitivity=self["sensitivity"], count_levels=self["levels"],
                              smoothing_fwhm=self["smoothing_fwhm"], seed=self["seed"])

    def sampling_config(self) -> SamplingConfig:
        return SamplingConfig(w_min=self["w_min"], eta_table=self["eta"], j_mode=self["j_mode"])

    def train_config(self):
        from .denoiser import TrainConfig
        names = ("arch", "lambda_le", "lambda_qu", "use_base", "use_le", "use_qu", "weighted_sampling",
                 "lr0", "lr_decay", "patience", "lr_min", "batch_size", "max_epochs", "epoch_samples",
                 "beta1", "beta2", "adam_eps", "seed", "patch_size", "stride", "levels", "mu",
                 "val_fraction", "test_fraction", "max_val_patches", "j_mode")
        return TrainConfig(**{n: self[n] for n in names})

    def heuristic_config(self) -> HeuristicConfig:
        return HeuristicConfig(fwhm=self["heur_fwhm"], z0=self["heur_z0"], tau=self["heur_tau"],
                               min_voxels=self["heur_min_voxels"])

    def provider(self):
        return make_provider(self["provider"], self["oracle_blur_fwhm"], self.heuristic_config())

    def observer(self):
        return make_provider(self["observer"], self["oracle_blur_fwhm"], self.heuristic_config())

    # --- echo --------------------------------------------------------------

    def echo(self) -> str:
        lines = ["# effective configuration"]
        lines += [f"{k}={self.raw[k]}" for k in KEYS]
        sampling = self.sampling_config()
        for level in self["levels"]:
            if float(level) not in sampling.eta_table:
                lines.append(f"# level {format_level(level)} is not tabulated; "
                             f"eta interpolated log-linearly = {sampling.eta(level)!r}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str, source: str = "config") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path))
