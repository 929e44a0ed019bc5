"""Command-line entry point: synth, train-detector, attack, eval, report.

Attack settings resolve as built-in defaults, then the ``--config`` file (a
flat JSON object), then explicit flags. The resolved settings are written to
``<out>/config.json`` so ``attack --config <out>/config.json`` replays a run.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import shutil
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .augment import EOTConfig
from .dataset import Dataset, DatasetError, generate_synthetic_dataset, load_dataset, save_dataset
from .detector import CheckpointError, ConfigurationError, load_checkpoint, save_checkpoint, train_toy_detector
from .evaluation import (emit_report, evaluate_asr, evaluate_sequence, generate_approach_sequence,
                         load_sequence, save_sequence)
from .losses import LossWeights
from .renderer import Mode, PlacementRule, init_trigger, load_trigger_png, save_trigger_png
from .uapgd import AttackReport, UAPGDConfig, run_uapgd

logger = logging.getLogger("oobtrigger")

EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def parse_fraction(text) -> float:
    """Parse ``"16/255"``, ``"0.0627"`` or a number exactly, then convert to float."""
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        return float(text)
    try:
        return float(Fraction(str(text).strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"not a number or fraction: {text!r}") from exc


def fraction_text(text: str) -> str:
    """Validate a numeric flag but keep its spelling so configs record ``16/255`` as written."""
    parse_fraction(text)
    return text


ATTACK_DEFAULTS = {
    "mode": "uapgd",
    "use_fg": True,
    "lambda_fg": 0.1,
    "lambda_tv": 2.5e-5,
    "eta0": "16/255",
    "n_epoch": 40,
    "batch_size": 32,
    "l_o": 5,
    "l_c": 3,
    "eps1": 0.01,
    "eps2": 0.1,
    "slack": "relative",
    "eta_min": "1/255",
    "seed": 0,
    "init": "uniform",
    "trigger_height": 16,
    "trigger_width": 32,
    "placement": "below",
    "relative_scale": 1.0,
    "gap_fraction": 0.1,
    "eot": True,
    "noise_amplitude": "4/255",
    "brightness_delta": 0.1,
    "contrast_lo": 0.9,
    "contrast_hi": 1.1,
    "rotation_deg": 5.0,
    "feature_levels": None,
    "target_class": None,
    "data": None,
    "test_data": None,
    "sequence": None,
    "detector": None,
    "out": None,
    "checkpoint_every": 0,
    "threshold": 0.5,
}

_NUMERIC = {"lambda_fg", "lambda_tv", "eta0", "eps1", "eps2", "eta_min", "relative_scale", "gap_fraction",
            "noise_amplitude", "brightness_delta", "contrast_lo", "contrast_hi", "rotation_deg", "threshold"}
_INTEGER = {"n_epoch", "batch_size", "l_o", "l_c", "seed", "trigger_height", "trigger_width", "checkpoint_every"}
_BOOL = {"use_fg", "eot"}
_PATHS = {"data", "detector"}
_OPTIONAL_PATHS = {"test_data", "sequence"}


def resolve_attack_config(file_values: dict, flag_values: dict) -> tuple[dict, list[str]]:
    """Merge defaults, file and flags; return the config and every schema violation found."""
    errors = []
    unknown = sorted(set(file_values) - set(ATTACK_DEFAULTS))
    errors += [f"unknown config key {k!r}" for k in unknown]
    cfg = dict(ATTACK_DEFAULTS)
    cfg.update({k: v for k, v in file_values.items() if k in ATTACK_DEFAULTS})
    cfg.update({k: v for k, v in flag_values.items() if v is not None})
    if cfg["mode"] not in ("pgd", "uapgd"):
        errors.append(f"mode must be 'pgd' or 'uapgd', got {cfg['mode']!r}")
    if cfg["placement"] not in {m.value for m in Mode}:
        errors.append(f"placement must be one of {[m.value for m in Mode]}, got {cfg['placement']!r}")
    if cfg["slack"] not in ("relative", "absolute"):
        errors.append(f"slack must be 'relative' or 'absolute', got {cfg['slack']!r}")
    if cfg["init"] not in ("uniform", "gray"):
        errors.append(f"init must be 'uniform' or 'gray', got {cfg['init']!r}")
    for key in _NUMERIC:
        try:
            value = parse_fraction(cfg[key])
            if not math.isfinite(value):
                raise argparse.ArgumentTypeError("not finite")
        except argparse.ArgumentTypeError:
            errors.append(f"{key} must be a number or fraction, got {cfg[key]!r}")
            continue
        if value < 0:
            errors.append(f"{key} must be non-negative, got {cfg[key]!r}")
    for key in _INTEGER:
        if isinstance(cfg[key], bool) or not isinstance(cfg[key], int):
            errors.append(f"{key} must be an integer, got {cfg[key]!r}")
    for key in ("n_epoch", "batch_size", "l_o", "trigger_height", "trigger_width"):
        if isinstance(cfg[key], int) and cfg[key] <= 0:
            errors.append(f"{key} must be positive, got {cfg[key]}")
    if isinstance(cfg["l_c"], int) and cfg["l_c"] < 2:
        errors.append(f"l_c must be at least 2, got {cfg['l_c']}")
    for key in _BOOL:
        if not isinstance(cfg[key], bool):
            errors.append(f"{key} must be true or false, got {cfg[key]!r}")
    for key in _PATHS:
        if cfg[key] is None:
            errors.append(f"{key} is required")
        elif not Path(cfg[key]).exists():
            errors.append(f"{key} path does not exist: {cfg[key]}")
    for key in _OPTIONAL_PATHS:
        if cfg[key] is not None and not Path(cfg[key]).exists():
            errors.append(f"{key} path does not exist: {cfg[key]}")
    if cfg["out"] is None:
        errors.append("out is required")
    try:
        lo, hi = parse_fraction(cfg["contrast_lo"]), parse_fraction(cfg["contrast_hi"])
        if not 0 < lo <= 1 <= hi:
            errors.append(f"contrast range must satisfy 0 < lo <= 1 <= hi, got ({lo}, {hi})")
    except argparse.ArgumentTypeError:
        pass
    return cfg, errors


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _dataset_from_dir(path) -> Dataset:
    d = Path(path)
    if not d.exists():
        raise FileNotFoundError(f"dataset path does not exist: {d}")
    ann = d / "annotations.json" if d.is_dir() else d
    root = d if d.is_dir() else d.parent
    if not ann.exists():
        raise FileNotFoundError(f"no annotations.json under {d}")
    return load_dataset(root, ann)


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.kind == "sequence":
        seq = generate_approach_sequence(args.frames, (args.size, args.size), (args.scale_min, args.scale_max),
                                         args.seed, args.fps)
        save_sequence(seq, out)
        print(f"wrote {len(seq.frames)} frames ({seq.duration:.1f} s) to {out}")
    else:
        ds = generate_synthetic_dataset(args.n, (args.size, args.size), args.seed,
                                        (args.scale_min, args.scale_max))
        save_dataset(ds, out)
        print(f"wrote {len(ds)} samples to {out}")
    return 0


def cmd_train_detector(args) -> int:
    ds = _dataset_from_dir(args.data)
    holdout = _dataset_from_dir(args.holdout) if args.holdout else None
    model, metrics = train_toy_detector(ds, args.epochs, args.seed, holdout=holdout,
                                        batch_size=args.batch_size, log_every=5 if args.verbose else 0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out, {"train_detection_rate": metrics.train_detection_rate,
                                 "holdout_detection_rate": metrics.holdout_detection_rate,
                                 "epochs": metrics.epochs})
    print(f"clean detection rate (train): {metrics.train_detection_rate:.4f}")
    if metrics.holdout_detection_rate is not None:
        print(f"clean detection rate (holdout): {metrics.holdout_detection_rate:.4f}")
    print(f"checkpoint: {out}")
    return 0


_ATTACK_FLAGS = {
    "mode": "mode", "use_fg": "use_fg", "lambda_fg": "lambda_fg", "lambda_tv": "lambda_tv", "eta": "eta0",
    "epochs": "n_epoch", "batch_size": "batch_size", "l_o": "l_o", "l_c": "l_c", "eps1": "eps1",
    "eps2": "eps2", "slack": "slack", "eta_min": "eta_min", "seed": "seed", "init": "init",
    "placement": "placement", "relative_scale": "relative_scale", "gap": "gap_fraction", "eot": "eot",
    "target_class": "target_class", "data": "data", "test_data": "test_data", "sequence": "sequence",
    "detector": "detector", "out": "out", "checkpoint_every": "checkpoint_every", "threshold": "threshold",
    "feature_level": "feature_levels",
}


def build_attack(cfg: dict):
    """Turn a resolved config into optimizer, loss, EOT and placement settings."""
    config = UAPGDConfig(
        eta0=parse_fraction(cfg["eta0"]), n_epoch=cfg["n_epoch"], l_c=cfg["l_c"], l_o=cfg["l_o"],
        eps1=parse_fraction(cfg["eps1"]), eps2=parse_fraction(cfg["eps2"]), slack=cfg["slack"],
        eta_min=parse_fraction(cfg["eta_min"]), batch_size=cfg["batch_size"], seed=cfg["seed"],
        adaptive=cfg["mode"] == "uapgd", checkpoint_every=cfg["checkpoint_every"])
    weights = LossWeights(parse_fraction(cfg["lambda_fg"]) if cfg["use_fg"] else 0.0, parse_fraction(cfg["lambda_tv"]))
    if cfg["eot"]:
        eot = EOTConfig(parse_fraction(cfg["noise_amplitude"]), parse_fraction(cfg["brightness_delta"]),
                        (parse_fraction(cfg["contrast_lo"]), parse_fraction(cfg["contrast_hi"])),
                        math.radians(parse_fraction(cfg["rotation_deg"])), cfg["seed"])
    else:
        eot = EOTConfig.disabled(cfg["seed"])
    rule = PlacementRule(Mode(cfg["placement"]), parse_fraction(cfg["relative_scale"]),
                         parse_fraction(cfg["gap_fraction"]))
    return config, weights, eot, rule


def cmd_attack(args) -> int:
    file_values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            file_values = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(file_values, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
    flags = {key: getattr(args, attr) for attr, key in _ATTACK_FLAGS.items()}
    cfg, errors = resolve_attack_config(file_values, flags)
    if errors:
        raise UsageError("invalid attack configuration:\n  " + "\n  ".join(errors))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=1), encoding="utf-8")
    if args.config:
        shutil.copyfile(args.config, out / "config.input.json")

    config, weights, eot, rule = build_attack(cfg)
    detector = load_checkpoint(cfg["detector"])
    dataset = _dataset_from_dir(cfg["data"])
    if cfg["target_class"] is not None:
        dataset = Dataset(dataset.samples, dataset.class_names, int(cfg["target_class"]))
    target = dataset.target_class
    dataset = dataset.with_target()
    dims = (cfg["trigger_height"], cfg["trigger_width"])
    initial = init_trigger(dims, cfg["seed"], cfg["init"])
    levels = cfg["feature_levels"]
    if isinstance(levels, str):
        levels = [levels]
    best, report = run_uapgd(config, dataset, detector, weights, eot, rule, target, initial,
                             checkpoint_dir=out / "checkpoints" if config.checkpoint_every else None,
                             resume=args.resume, feature_levels=levels)
    save_trigger_png(best, out / "trigger.png")
    np.save(out / "trigger.npy", best.detach().numpy())
    report.extra.update({"use_fg": cfg["use_fg"], "lambda_fg": weights.lambda_fg, "lambda_tv": weights.lambda_tv})
    if cfg["test_data"]:
        test = _dataset_from_dir(cfg["test_data"]).with_target()
        result = evaluate_asr(test, best, detector, rule, target, parse_fraction(cfg["threshold"]))
        report.asr = result.asr
        with open(out / "per_image.jsonl", "w", encoding="utf-8") as fh:
            for rec in result.records():
                fh.write(json.dumps(rec) + "\n")
    if cfg["sequence"]:
        seq = load_sequence(cfg["sequence"])
        series, proportion = evaluate_sequence(seq, best, detector, rule, target, parse_fraction(cfg["threshold"]))
        report.frame_series = series
        report.extra["undetected_proportion"] = proportion
    report.write(out)
    emit_report({out.name: report}, out / "report")
    print(f"epochs: {len(report.epoch_losses)}  best loss: {min(report.epoch_losses):.5f}")
    print(f"halving events: {report.halving_events}")
    if report.asr is not None:
        print(f"test ASR: {report.asr:.4f}")
    print(f"trigger: {out / 'trigger.png'}")
    return 0


def cmd_eval(args) -> int:
    detector = load_checkpoint(args.detector)
    if args.no_trigger:
        trigger = None
    else:
        if not args.trigger:
            raise UsageError("give --trigger PATH or --no-trigger")
        p = Path(args.trigger)
        if not p.exists():
            raise FileNotFoundError(f"trigger not found: {p}")
        trigger = torch.from_numpy(np.load(p)) if p.suffix == ".npy" else load_trigger_png(p)
    rule = PlacementRule(Mode(args.placement), args.relative_scale, args.gap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"threshold": args.threshold, "trigger": None if trigger is None else str(args.trigger)}
    if args.data:
        ds = _dataset_from_dir(args.data)
        target = ds.target_class if args.target_class is None else args.target_class
        ds = ds.with_target() if args.target_class is None else ds
        result = evaluate_asr(ds, trigger, detector, rule, target, args.threshold, workers=args.workers)
        summary.update({"asr": result.asr, "n_images": len(result.per_image)})
        with open(out / "per_image.jsonl", "w", encoding="utf-8") as fh:
            for rec in result.records():
                fh.write(json.dumps(rec) + "\n")
        print(f"ASR: {result.asr:.4f} over {len(result.per_image)} images")
    if args.sequence:
        seq = load_sequence(args.sequence)
        series, proportion = evaluate_sequence(seq, trigger, detector, rule, seq.target_class, args.threshold,
                                               workers=args.workers)
        summary.update({"frame_series": series, "undetected_proportion": proportion,
                        "frame_rate": seq.frame_rate})
        print(f"undetected proportion: {proportion:.4f} over {len(series)} frames")
    if not args.data and not args.sequence:
        raise UsageError("give --data and/or --sequence")
    (out / "eval.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    return 0


def cmd_report(args) -> int:
    reports = {}
    for run in args.runs:
        d = Path(run)
        if not (d / "summary.json").exists():
            raise FileNotFoundError(f"no summary.json in run directory {d}")
        rep = AttackReport.read(d)
        ev = d / "eval.json"
        if ev.exists():
            data = json.loads(ev.read_text(encoding="utf-8"))
            rep.asr = data.get("asr", rep.asr)
            rep.frame_series = data.get("frame_series", rep.frame_series)
        reports[d.name] = rep
    written = emit_report(reports, args.out)
    for p in written["plots"]:
        print(p)
    return 0


# ---------------------------------------------------------------------------
# Parser


def _bool_flag(parser, name, dest, help_text):
    group = parser.add_mutually_exclusive_group()
    group.add_argument(f"--{name}", dest=dest, action="store_const", const=True, default=None, help=help_text)
    group.add_argument(f"--no-{name}", dest=dest, action="store_const", const=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oobtrigger", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset or approach sequence")
    p.add_argument("--kind", choices=("images", "sequence"), default="images")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--frames", type=int, default=90)
    p.add_argument("--fps", type=float, default=10.0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--scale-min", type=float, default=0.1)
    p.add_argument("--scale-max", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-detector", help="train the toy detector")
    p.add_argument("--data", required=True)
    p.add_argument("--holdout")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("attack", help="optimise a trigger with PGD or UAPGD")
    p.add_argument("--config")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--mode", choices=("pgd", "uapgd"))
    _bool_flag(p, "fg", "use_fg", "add the feature-guidance term")
    _bool_flag(p, "eot", "eot", "randomise trigger appearance during optimisation")
    p.add_argument("--lambda-fg", type=fraction_text)
    p.add_argument("--lambda-tv", type=fraction_text)
    p.add_argument("--eta", type=fraction_text, help="initial step, e.g. 16/255")
    p.add_argument("--eta-min", type=fraction_text)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--l-o", type=int)
    p.add_argument("--l-c", type=int)
    p.add_argument("--eps1", type=fraction_text)
    p.add_argument("--eps2", type=fraction_text)
    p.add_argument("--slack", choices=("relative", "absolute"))
    p.add_argument("--seed", type=int)
    p.add_argument("--init", choices=("uniform", "gray"))
    p.add_argument("--placement", choices=[m.value for m in Mode])
    p.add_argument("--relative-scale", type=fraction_text)
    p.add_argument("--gap", type=fraction_text)
    p.add_argument("--feature-level", action="append")
    p.add_argument("--target-class", type=int)
    p.add_argument("--threshold", type=fraction_text)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--data")
    p.add_argument("--test-data")
    p.add_argument("--sequence")
    p.add_argument("--detector")
    p.add_argument("--out")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="measure ASR / undetected time of a trigger")
    p.add_argument("--detector", required=True)
    p.add_argument("--data")
    p.add_argument("--sequence")
    p.add_argument("--trigger")
    p.add_argument("--no-trigger", action="store_true")
    p.add_argument("--threshold", type=parse_fraction, default=0.5)
    p.add_argument("--target-class", type=int)
    p.add_argument("--placement", choices=[m.value for m in Mode], default="below")
    p.add_argument("--relative-scale", type=parse_fraction, default=1.0)
    p.add_argument("--gap", type=parse_fraction, default=0.1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="plots and comparison table over run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 for --help/--version
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    _configure_logging(args.verbose)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DatasetError, CheckpointError, ConfigurationError, OSError, ValueError,
            RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
