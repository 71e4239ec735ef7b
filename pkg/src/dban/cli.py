"""Batch command-line front end: degrade, train, sr, eval, compare.

Settings resolve as command-line flag > ``--config`` file (key=value lines)
> built-in defaults, and the resolved values are logged before any work.
Exit codes: 0 success, 1 internal error, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from dban.data import DatasetSpec, ImageIOError, degrade, list_images, load_image, make_pairs, save_image
from dban.metrics import EvalReport, EvalRow, format_value, evaluate_pair, time_sr
from dban.network import SUPPORTED_SCALES, ModelConfig, build_model, model_forward
from dban.resize import bicubic_resize, bilinear_resize
from dban.training import CheckpointError, TrainConfig, checkpoint_load, train

log = logging.getLogger("dban")

COMMANDS = ("degrade", "train", "sr", "eval", "compare")
MODEL_KEYS = ("in_channels", "num_units", "layers_per_unit", "growth", "feat_channels",
              "bottleneck_channels", "attention_ratio")
TRAIN_KEYS = ("beta1", "beta2", "eps", "patience", "lr_factor", "lr_floor", "max_steps")

DEFAULTS = {
    "scale": 2,
    "seed": 0,
    "epochs": TrainConfig.max_epochs,
    "batch_size": TrainConfig.batch_size,
    "lr": TrainConfig.lr0,
    "patch_size": 96,
    "patch_stride": None,
    "augment": True,
    "val_fraction": 0.1,
    "toy": False,
}

TYPES = {
    "scale": int, "seed": int, "epochs": int, "batch_size": int, "lr": float, "patch_size": int,
    "patch_stride": int, "augment": "bool", "val_fraction": float, "toy": "bool",
    "in_channels": int, "num_units": int, "layers_per_unit": int, "growth": int, "feat_channels": int,
    "bottleneck_channels": int, "attention_ratio": int,
    "beta1": float, "beta2": float, "eps": float, "patience": int, "lr_factor": float, "lr_floor": float,
    "max_steps": int,
}


class UsageError(Exception):
    """Bad flags, config or inputs; maps to exit code 2."""


def _convert(key: str, raw: str):
    kind = TYPES[key]
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    if raw.strip().lower() == "none":
        return None
    try:
        return kind(raw)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def read_config(path) -> dict:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in TYPES:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dban", description="Dense blended attention super-resolution")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--input", "-i", help="input file or directory")
    p.add_argument("--output", "-o", help="output file or directory")
    p.add_argument("--reference", help="ground-truth HR directory (eval)")
    p.add_argument("--checkpoint", help="model checkpoint")
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--scale", type=int, choices=SUPPORTED_SCALES)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--toy", action="store_const", const=True, default=None,
                   help="use the small test network")
    p.add_argument("--verbose", "-v", action="store_true")
    return p


def resolve(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if args.config:
        settings.update(read_config(args.config))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if settings["scale"] not in SUPPORTED_SCALES:
        raise UsageError(f"scale must be one of {SUPPORTED_SCALES}, got {settings['scale']}")
    if not 0 <= settings["val_fraction"] < 1:
        raise UsageError("val_fraction must lie in [0, 1)")
    return settings


def model_config(settings: dict) -> ModelConfig:
    overrides = {k: settings[k] for k in MODEL_KEYS if k in settings}
    if settings["toy"]:
        base = ModelConfig.toy(settings["scale"], overrides.get("in_channels", 3))
        return dataclasses.replace(base, **overrides)
    return ModelConfig(scale=settings["scale"], **overrides)


def train_config(settings: dict) -> TrainConfig:
    extra = {k: settings[k] for k in TRAIN_KEYS if k in settings}
    return TrainConfig(lr0=settings["lr"], batch_size=settings["batch_size"], max_epochs=settings["epochs"],
                       seed=settings["seed"], **extra)


def _require(value, flag: str, command: str):
    if not value:
        raise UsageError(f"{command} needs {flag}")
    return value


def _dir(path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"{what} directory not found: {path}")
    return path


def modcrop(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[-2:]
    return img[..., :h - h % scale, :w - w % scale]


# -- commands -----------------------------------------------------------------

def cmd_degrade(args, settings) -> int:
    src = _dir(_require(args.input, "--input", "degrade"), "input")
    dst = Path(_require(args.output, "--output", "degrade"))
    files = list_images(src)
    dst.mkdir(parents=True, exist_ok=True)
    for f in files:
        save_image(degrade(load_image(f), settings["scale"]), dst / f.name)
    print(f"{len(files)} file(s) written to {dst}")
    return 0


def split_validation(samples, fraction: float, seed: int):
    """Hold out whole patches (all augmentations of a patch go to the same side).

    Validation keeps only the un-augmented copy of each held-out patch.
    """
    groups: dict[str, list] = {}
    for s in samples:
        groups.setdefault(s.source_id.rsplit("a", 1)[0], []).append(s)
    keys = list(groups)
    n_val = int(math.floor(fraction * len(keys) + 0.5)) if fraction > 0 else 0
    n_val = min(n_val, len(keys) - 1)
    picked = set(np.random.default_rng(seed).permutation(len(keys))[:n_val].tolist())
    train_set, val_set = [], []
    for i, k in enumerate(keys):
        if i in picked:
            val_set.append(groups[k][0])
        else:
            train_set.extend(groups[k])
    return train_set, val_set


def _provenance(settings: dict, cfg: ModelConfig, tcfg: TrainConfig) -> str:
    return json.dumps({"settings": settings, "model": cfg.to_dict(), "train": dataclasses.asdict(tcfg)},
                      sort_keys=True)


def cmd_train(args, settings) -> int:
    src = _dir(_require(args.input, "--input", "train"), "input")
    out = Path(_require(args.output, "--output", "train"))
    cfg = model_config(settings)
    tcfg = train_config(settings)
    spec = DatasetSpec(list_images(src), patch_size=settings["patch_size"], patch_stride=settings["patch_stride"],
                       scale=cfg.scale, augment=settings["augment"], seed=settings["seed"],
                       channels=cfg.in_channels)
    samples = make_pairs(spec)
    for skipped in spec.skipped:
        log.warning("skipped %s (smaller than one patch)", skipped)
    if not samples:
        raise UsageError(f"no training patches found in {src}")
    train_set, val_set = split_validation(samples, settings["val_fraction"], settings["seed"])
    if len(train_set) < tcfg.batch_size:
        raise UsageError(f"{len(train_set)} training patches cannot fill a batch of {tcfg.batch_size}")
    log.info("%d training / %d validation patches", len(train_set), len(val_set))

    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "metrics.log"
    with open(log_path, "w") as fh:
        fh.write(f"# {_provenance(settings, cfg, tcfg)}\n")

        def write(record):
            fh.write(record.log_line() + "\n")
            fh.flush()

        model = build_model(cfg, seed=settings["seed"])
        train(model, cfg, train_set, tcfg, val_set, checkpoint_path=out / "best.ckpt", hooks=[write])
    print(f"checkpoint: {out / 'best.ckpt'}")
    print(f"log: {log_path}")
    return 0


def _load_checkpoint(path):
    try:
        return checkpoint_load(_require(path, "--checkpoint", "this command"))
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None


def super_resolve(lr: np.ndarray, model, cfg: ModelConfig) -> np.ndarray:
    return np.clip(model_forward(lr, model, cfg), 0.0, 1.0)


def cmd_sr(args, settings, scale_given: bool) -> int:
    src = Path(_require(args.input, "--input", "sr"))
    dst = Path(_require(args.output, "--output", "sr"))
    ck = _load_checkpoint(args.checkpoint)
    if scale_given and settings["scale"] != ck.cfg.scale:
        raise UsageError(f"requested scale {settings['scale']} but checkpoint was trained for scale {ck.cfg.scale}")
    if src.is_dir():
        jobs = [(f, dst / f.name) for f in list_images(src)]
    elif src.is_file():
        jobs = [(src, dst)]
    else:
        raise UsageError(f"input not found: {src}")
    for f, target in jobs:
        save_image(super_resolve(load_image(f, ck.cfg.in_channels), ck.model, ck.cfg), target)
    print(f"{len(jobs)} image(s) super-resolved x{ck.cfg.scale}")
    return 0


def _emit(text: str, output: Optional[str]) -> None:
    if output:
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        Path(output).write_text(text)
    sys.stdout.write(text)


def cmd_eval(args, settings) -> int:
    sr_dir = _dir(_require(args.input, "--input", "eval"), "SR")
    hr_dir = _dir(_require(args.reference, "--reference", "eval"), "reference")
    sr_files = {f.stem: f for f in list_images(sr_dir)}
    hr_files = {f.stem: f for f in list_images(hr_dir)}
    report = EvalReport()
    for stem in sorted(sr_files.keys() & hr_files.keys()):
        sr, hr = load_image(sr_files[stem]), load_image(hr_files[stem])
        if sr.shape != hr.shape:
            raise UsageError(f"{stem}: SR {sr.shape[-2:]} and HR {hr.shape[-2:]} differ in size")
        report.add(EvalRow(stem, *evaluate_pair(sr, hr)))
    only_one_side = sr_files.keys() ^ hr_files.keys()
    report.unmatched.extend(sorted((sr_files.get(s) or hr_files[s]).name for s in only_one_side))
    if report.unmatched:
        log.warning("unmatched file(s): %s", ", ".join(report.unmatched))
    _emit(report.to_csv(), args.output)
    return 0


def compare_reports(hr_paths: Sequence[Path], scale: int, ck=None) -> dict[str, EvalReport]:
    """Degrade each HR image and score bilinear, bicubic and (optionally) model reconstructions."""
    methods = {
        "bilinear": lambda lr: np.clip(bilinear_resize(lr, scale), 0.0, 1.0),
        "bicubic": lambda lr: np.clip(bicubic_resize(lr, scale), 0.0, 1.0),
    }
    if ck is not None:
        methods["model"] = lambda lr: super_resolve(lr.astype(np.float32), ck.model, ck.cfg)
    reports = {name: EvalReport() for name in methods}
    for path in hr_paths:
        hr = modcrop(load_image(path, ck.cfg.in_channels if ck else 3), scale)
        lr = degrade(hr, scale)
        for name, run in methods.items():
            sr = run(lr)
            seconds = time_sr(lambda: run(lr))
            reports[name].add(EvalRow(path.stem, *evaluate_pair(sr, hr), seconds))
    return reports


def summary_csv(reports: dict[str, EvalReport]) -> str:
    """One row per method holding that method's mean PSNR, SSIM and time."""
    lines = ["method,psnr_db,ssim,seconds"]
    for name, r in reports.items():
        lines.append(f"{name},{format_value(r.mean_psnr())},{format_value(r.mean_ssim())},{format_value(r.mean_seconds())}")
    return "\n".join(lines) + "\n"


def cmd_compare(args, settings, scale_given: bool) -> int:
    src = _dir(_require(args.input, "--input", "compare"), "input")
    ck = _load_checkpoint(args.checkpoint) if args.checkpoint else None
    scale = settings["scale"]
    if ck is not None:
        if scale_given and scale != ck.cfg.scale:
            raise UsageError(f"requested scale {scale} but checkpoint was trained for scale {ck.cfg.scale}")
        scale = ck.cfg.scale
    files = list_images(src)
    if not files:
        raise UsageError(f"no images in {src}")
    reports = compare_reports(files, scale, ck)
    text = summary_csv(reports)
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        for name, r in reports.items():
            (out / f"{name}.csv").write_text(r.to_csv())
        (out / "summary.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        settings = resolve(args)
        scale_given = args.scale is not None or (args.config is not None and "scale" in read_config(args.config))
        log.info("effective config: %s", json.dumps({"command": args.command, **settings}, sort_keys=True))
        if args.command == "degrade":
            return cmd_degrade(args, settings)
        if args.command == "train":
            return cmd_train(args, settings)
        if args.command == "sr":
            return cmd_sr(args, settings, scale_given)
        if args.command == "eval":
            return cmd_eval(args, settings)
        return cmd_compare(args, settings, scale_given)
    except (UsageError, ImageIOError, CheckpointError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2
    except ValueError as exc:
        # configuration values rejected by the library (e.g. patch size vs scale)
        log.error("%s", exc)
        return 2
    except Exception:  # noqa: BLE001
        log.exception("internal error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
