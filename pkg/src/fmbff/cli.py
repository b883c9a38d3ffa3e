"""Command-line front end: synth / train / eval / predict / gradcheck.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 verification failure.  Every artifact-producing command writes a
manifest.json next to its outputs recording the command, seeds, the config
snapshot, and a content hash of any checkpoint involved.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import data, gradcheck, metrics, train as train_mod
from .engine import Tensor, bilinear_resize
from .errors import (
    ConfigurationError,
    DimensionError,
    FormatError,
    ParseError,
    StateError,
    TrainingDiverged,
    UsageError,
    ValidationError,
)
from .model import ModelConfig, build_model, model_forward
from .train import TrainConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_VERIFY = 4


# ---------------------------------------------------------------------------
# config files: `key = value` lines with dotted keys


def _parse_int_tuple(value, key):
    parts = value.replace("x", ",").split(",")
    try:
        return tuple(int(p.strip()) for p in parts if p.strip())
    except ValueError:
        raise ConfigurationError(f"{key}: expected comma-separated integers, got {value!r}")


def _parse_float_tuple(value, key):
    try:
        return tuple(float(p.strip()) for p in value.split(",") if p.strip())
    except ValueError:
        raise ConfigurationError(f"{key}: expected comma-separated floats, got {value!r}")


def _parse_bool(value, key):
    lowered = value.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")


_MODEL_KEYS = {
    "in_channels": int,
    "input_size": _parse_int_tuple,
    "encoder_widths": _parse_int_tuple,
    "decoder_widths": _parse_int_tuple,
    "heads": int,
    "fmcab_reduction": int,
    "p_exponent": float,
    "shuffle_groups": int,
    "skip_mode": str,
    "seed": int,
}

_TRAIN_KEYS = {
    "lr0": float,
    "max_epochs": int,
    "plateau_patience": int,
    "plateau_factor": float,
    "early_stop_patience": int,
    "batch_size": int,
    "loss_weights": _parse_float_tuple,
    "augment": _parse_bool,
    "seed": int,
}


def parse_config_text(text):
    """Parse `key = value` lines into (ModelConfig, TrainConfig)."""
    model_kwargs = {}
    train_kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise ConfigurationError(f"line {lineno}: key {key!r} must be dotted")
        section, field = key.split(".", 1)
        table = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS}.get(section)
        if table is None or field not in table:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        parser = table[field]
        try:
            parsed = parser(value, key) if parser in (
                _parse_int_tuple, _parse_float_tuple, _parse_bool
            ) else parser(value)
        except ConfigurationError:
            raise
        except ValueError:
            raise ConfigurationError(f"line {lineno}: bad value for {key!r}: {value!r}")
        (model_kwargs if section == "model" else train_kwargs)[field] = parsed
    model_config = ModelConfig(**model_kwargs)
    model_config.validate()
    train_config = TrainConfig(**train_kwargs)
    train_config.validate()
    return model_config, train_config


def load_config(path):
    if path is None:
        return ModelConfig(), TrainConfig()
    with open(path) as fh:
        return parse_config_text(fh.read())


# ---------------------------------------------------------------------------
# manifests


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _threads():
    raw = os.environ.get("FMBFF_THREADS")
    return int(raw) if raw else None


def write_manifest(out_dir, command, seed, config=None, checkpoint=None, outputs=()):
    manifest = {
        "command": command,
        "seed": seed,
        "config": config,
        "checkpoint_sha256": _sha256(checkpoint) if checkpoint else None,
        "outputs": sorted(outputs),
        "threads": _threads(),
        "created_unix": time.time(),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _config_snapshot(model_config, train_config=None):
    snap = {"model": {k: list(v) if isinstance(v, tuple) else v
                      for k, v in vars(model_config).items()}}
    if train_config is not None:
        snap["train"] = {k: list(v) if isinstance(v, tuple) else v
                         for k, v in vars(train_config).items()}
    return snap


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    samples = data.generate_synthetic(args.n, size=tuple(args.size), seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    data.write_dataset(args.out, samples)
    write_manifest(
        args.out, "synth", args.seed,
        config={"n": args.n, "size": list(args.size)},
        outputs=[f"images/{s.id}.ppm" for s in samples]
        + [f"masks/{s.id}_mask.pgm" for s in samples],
    )
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args):
    model_config, train_config = load_config(args.config)
    samples = data.load_dataset(args.data)
    plan = data.split([s.id for s in samples], ratio=0.8, seed=train_config.seed)
    by_id = {s.id: s for s in samples}
    train_set = [by_id[i] for i in plan.train_ids]
    val_set = [by_id[i] for i in plan.val_ids]
    if train_config.augment:
        expanded = []
        for s in train_set:
            expanded.extend(data.expand_augmentations(s))
        train_set = expanded

    params = build_model(model_config)
    params, state, history = train_mod.train(params, train_set, val_set, train_config)

    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "ckpt.fmbf")
    train_mod.save_checkpoint(ckpt_path, params, state)
    history_path = os.path.join(args.out, "history.csv")
    with open(history_path, "w") as fh:
        fh.write(train_mod.history_csv(history))
    write_manifest(
        args.out, "train", train_config.seed,
        config=_config_snapshot(model_config, train_config),
        checkpoint=ckpt_path,
        outputs=["ckpt.fmbf", "history.csv"],
    )
    best = max(row["val_dice"] for row in history)
    print(f"trained {len(history)} epochs; best val dice {best:.4f}; wrote {ckpt_path}")
    return EXIT_OK


def _predict_probs(params, images, batch_size=8):
    out = []
    for start in range(0, len(images), batch_size):
        x = Tensor(np.stack(images[start : start + batch_size]).astype(np.float32))
        out.append(model_forward(x, params, mode="eval").f_out.data)
    return np.concatenate(out, axis=0)


def cmd_eval(args):
    params, _state = train_mod.load_checkpoint(args.ckpt)
    h, w = params.config.input_size
    samples = data.load_dataset(args.data)

    images = []
    for s in samples:
        if s.image.shape[1:] != (h, w):
            t = bilinear_resize(Tensor(s.image[None].astype(np.float32)), h, w)
            images.append(t.data[0])
        else:
            images.append(s.image)
    probs = _predict_probs(params, images)

    pred_by_id = {}
    for s, prob in zip(samples, probs):
        oh, ow = s.mask.shape[1:]
        if (oh, ow) != (h, w):
            prob = bilinear_resize(Tensor(prob[None]), oh, ow).data[0]
        pred_by_id[s.id] = prob
    gt_by_id = {s.id: s.mask for s in samples}

    folds = None
    if args.folds:
        folds = data.kfold(list(pred_by_id), k=args.folds, seed=0).folds
    report = metrics.evaluate(
        pred_by_id, gt_by_id, folds=folds, include_precision=args.precision
    )
    os.makedirs(args.out, exist_ok=True)
    text = metrics.to_text(report)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(text)
    with open(os.path.join(args.out, "report.csv"), "w") as fh:
        fh.write(metrics.to_csv(report))
    write_manifest(
        args.out, "eval", params.config.seed,
        config=_config_snapshot(params.config),
        checkpoint=args.ckpt,
        outputs=["report.txt", "report.csv"],
    )
    print(text, end="")
    return EXIT_OK


def cmd_predict(args):
    params, _state = train_mod.load_checkpoint(args.ckpt)
    h, w = params.config.input_size
    image = data.read_image(args.image)
    oh, ow = image.shape[1:]
    resized = image
    if (oh, ow) != (h, w):
        resized = bilinear_resize(Tensor(image[None].astype(np.float32)), h, w).data[0]
    prob = _predict_probs(params, [resized])[0]
    if (oh, ow) != (h, w):
        prob = bilinear_resize(Tensor(prob[None]), oh, ow).data[0]

    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    mask_path = os.path.join(args.out, f"{stem}_mask.pgm")
    prob_path = os.path.join(args.out, f"{stem}_prob.npy")
    data.write_mask(mask_path, (prob >= 0.5).astype(np.float32))
    np.save(prob_path, prob.astype(np.float32))
    write_manifest(
        args.out, "predict", params.config.seed,
        config=_config_snapshot(params.config),
        checkpoint=args.ckpt,
        outputs=[os.path.basename(mask_path), os.path.basename(prob_path)],
    )
    print(f"wrote {mask_path} and {prob_path}")
    return EXIT_OK


def cmd_gradcheck(args):
    blocks = list(gradcheck.BLOCK_NAMES) if args.blocks == "all" else [args.blocks]
    failures = []
    for block in blocks:
        errors, tolerance = gradcheck.run_suite(block)
        worst = max(err for _, err in errors)
        print(f"{block}: max relative error {worst:.3e} (tolerance {tolerance:.0e})")
        for name, err in errors:
            if err > tolerance:
                failures.append((block, name, err))
    if failures:
        for block, name, err in failures:
            print(f"FAIL {block}/{name}: {err:.3e}")
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fmbff", description="Segmentation network toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=str, default="64x64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--folds", type=int, default=0)
    p.add_argument("--precision", action="store_true")
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--image", type=str, required=True)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument(
        "--blocks",
        choices=("all",) + gradcheck.BLOCK_NAMES,
        default="all",
    )
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if hasattr(args, "size"):
            args.size = _parse_int_tuple(args.size, "--size")
        return args.fn(args)
    except (ConfigurationError, DimensionError, StateError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, FormatError, ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
