"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numeric failure during training.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import KEYS, RunConfig, load_config_file
from .errors import ConfigError, LeqModError, TrainingError
from .experiment import (
    MODEL_NAME, load_denoised, manifest_path, run_ablate, run_denoise, run_eval, run_gen, run_train,
    eval_indices, write_echo,
)
from .phantom import read_manifest
from .qumod import build_parcellation

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _global_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", default=argparse.SUPPRESS, help="key=value config file")
    parent.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global seed")
    parent.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    parent.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    return parent


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="leqmod", description="Lesion- and quantification-aware PET denoising experiments",
                     parents=[common], epilog="config keys: " + ", ".join(KEYS))
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen", parents=[common], help="generate a synthetic cohort")
    gen.add_argument("--subjects", type=int, help="number of subjects")
    gen.add_argument("--levels", help="comma-separated count levels in percent")

    tr = sub.add_parser("train", parents=[common], help="train a denoiser")
    tr.add_argument("--no-lemod", action="store_true", help="uniform sampling and no lesion loss")
    tr.add_argument("--no-qumod", action="store_true", help="no quantification loss")
    tr.add_argument("--no-leqmod", action="store_true", help="plain MSE baseline")

    sub.add_parser("denoise", parents=[common], help="denoise every low-count volume")
    sub.add_parser("eval", parents=[common], help="evaluate denoised volumes")
    sub.add_parser("ablate", parents=[common], help="run all ablation arms end to end")

    plan = sub.add_parser("plan-dump", parents=[common], help="print the parcellation plan")
    plan.add_argument("--patch-size", type=int, help="patch edge (default: config patch_size)")
    return parser


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config), source=args.config)
    flags = {}
    if getattr(args, "seed", None) is not None:
        flags["seed"] = str(args.seed)
    if getattr(args, "subjects", None) is not None:
        flags["subjects"] = str(args.subjects)
    if getattr(args, "levels", None):
        flags["levels"] = args.levels
    if getattr(args, "no_lemod", False) or getattr(args, "no_leqmod", False):
        flags.update(use_le="false", weighted_sampling="false")
    if getattr(args, "no_qumod", False) or getattr(args, "no_leqmod", False):
        flags["use_qu"] = "false"
    cfg.update(flags, source="flags")
    cfg.update(_overrides(getattr(args, "set", None)), source="--set")
    return cfg


def _progress(row):
    print(f"epoch {row['epoch']:4d}  lr {row['lr']:.3g}  loss {row['loss_total']:.6g}  "
          f"val {row['val_loss']:.6g}", file=sys.stderr)


def _run(args) -> int:
    cfg = resolve_config(args)
    out = Path(getattr(args, "out", "."))
    cmd = args.command
    if cmd == "gen":
        run_gen(cfg, out)
    elif cmd == "train":
        cohort = read_manifest(manifest_path(cfg, out))
        run_train(cfg, cohort, out, progress=_progress)
    elif cmd == "denoise":
        cohort = read_manifest(manifest_path(cfg, out))
        model = Path(cfg["model"]) if cfg["model"] else out / MODEL_NAME
        run_denoise(cfg, cohort, out, model)
    elif cmd == "eval":
        cohort = read_manifest(manifest_path(cfg, out))
        den_dir = Path(cfg["denoised_dir"]) if cfg["denoised_dir"] else out / "denoised"
        den = load_denoised(cohort, den_dir, eval_indices(cfg, len(cohort)))
        report = run_eval(cfg, cohort, den, out)
        for level, stats in report.summary().items():
            print(f"level {level:g}%: " + ", ".join(
                f"{k}={m:.4g}" for k, (m, _sd) in stats.items() if k in ("nrmse", "psnr_db", "ssim", "suv_max_bias_pct")))
    elif cmd == "ablate":
        _results, table = run_ablate(cfg, out, progress=lambda arm, row: _progress({**row}))
        print(table, end="")
    elif cmd == "plan-dump":
        size = args.patch_size or cfg["patch_size"]
        print(build_parcellation(size, cfg["mu"]).describe())
        if args.__dict__.get("out"):
            write_echo(cfg, out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _run(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LeqModError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
