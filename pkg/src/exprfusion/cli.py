"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 data or input error,
4 numeric divergence, 5 checkpoint error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ._io import atomic_write_text
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config, load_config
from .data import (
    STANDARD_FIXTURE, batch_stream, generate_fixture, load_manifest, read_features, window_sequences,
    window_video,
)
from .errors import CheckpointError, ConfigError, DataError, InputError, NumericError
from .metrics import IGNORE_INDEX, metrics_report
from .model import FusionModel, predict
from .training import FocalLossConfig, evaluate, fit, lr_range_test, seeded_rngs

log = logging.getLogger("exprfusion")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4, 5


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.override or []:
        if "=" not in item:
            raise ConfigError(f"--override expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        out["train.seed"] = str(args.seed)
    if getattr(args, "out_dir", None):
        out["output.dir"] = args.out_dir
    return out


def _run_config(args) -> RunConfig:
    overrides = _overrides(args)
    if getattr(args, "manifest", None):
        overrides["data.train_manifest"] = args.manifest
    return load_config(args.config, overrides)


def _windows(path: str, what: str):
    if not path:
        raise DataError(f"no {what} manifest configured")
    manifest = load_manifest(path)
    if not manifest.entries:
        raise DataError(f"{what} manifest {path} lists no videos")
    return window_sequences(manifest)


def _write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg = _run_config(args)
    train = _windows(cfg.data.train_manifest, "training")
    val = _windows(cfg.data.val_manifest, "validation") if cfg.data.val_manifest else train
    out = Path(cfg.output.dir)
    model = FusionModel(cfg.model, rng=seeded_rngs(cfg.train.seed)["init"])
    result = fit(model, train, val, cfg.train)

    final = evaluate(model, val, cfg.train.batch_size, cfg.train.loss)
    report = metrics_report(final.confusion)
    report.update(best_epoch=result.best_epoch, learning_rate=result.learning_rate)
    meta = {
        "best_epoch": result.best_epoch,
        "best_val_macro_f1": result.best_macro_f1,
        "batch_size": cfg.train.batch_size,
        "loss": {"gamma": cfg.train.loss.gamma, "class_weights": list(cfg.train.loss.class_weights),
                 "ignore_index": cfg.train.loss.ignore_index},
        "seed": cfg.train.seed,
    }
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.bin", model, meta)
    atomic_write_text(out / "history.jsonl", "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n"
                                                      for r in result.history))
    _write_json(out / "metrics.json", report)
    atomic_write_text(out / "resolved.cfg", dump_config(cfg))
    print(f"best epoch {result.best_epoch}: val macro-F1 {report['macro_f1']:.4f} (lr {result.learning_rate:.3g})")
    return EXIT_OK


def _loss_from_meta(meta: dict) -> FocalLossConfig:
    loss = meta.get("loss")
    return FocalLossConfig(**loss) if loss else FocalLossConfig()


def _check_width(model: FusionModel, windows) -> None:
    width = windows[0].features.shape[-1]
    spec = model.config.backbone
    expected = spec.feature_dim if spec.variant == "precomputed" else spec.image_size**2 * 3
    if width != expected:
        raise InputError(f"data width {width} does not match the checkpoint's backbone ({expected})")


def cmd_evaluate(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    windows = _windows(args.manifest, "evaluation")
    _check_width(model, windows)
    result = evaluate(model, windows, int(meta.get("batch_size", 16)), _loss_from_meta(meta))
    report = metrics_report(result.confusion)
    if args.report:
        _write_json(Path(args.report), report)
    for row in report["classes"]:
        print(f"{row['name']:<10} p={row['precision']:.4f} r={row['recall']:.4f} "
              f"f1={row['f1']:.4f} n={row['support']}")
    print(f"macro-F1 {report['macro_f1']:.6f}")
    return EXIT_OK


def cmd_lr_find(args) -> int:
    cfg = _run_config(args)
    train = _windows(cfg.data.train_manifest, "training")
    rngs = seeded_rngs(cfg.train.seed)
    model = FusionModel(cfg.model, rng=rngs["init"])
    batches = batch_stream(train, cfg.train.batch_size, rngs["lr_finder"], cfg.train.lr_finder.num_steps)
    result = lr_range_test(model, batches, cfg.train.lr_finder, cfg.train.loss, cfg.train.adam, rngs["lr_finder"])
    out = Path(cfg.output.dir)
    atomic_write_text(out / "lr_curve.csv", "lr,smoothed_loss\n" + "".join(
        f"{lr!r},{loss!r}\n" for lr, loss in result.curve))
    atomic_write_text(out / "resolved.cfg", dump_config(cfg))
    print(f"suggested learning rate {result.suggested_lr:.6g}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    feats = read_features(args.features)
    spec = model.config.backbone
    expected = spec.feature_dim if spec.variant == "precomputed" else spec.image_size**2 * 3
    if feats.shape[1] != expected:
        raise InputError(f"feature width {feats.shape[1]} != {expected}")
    labels = np.full(len(feats), IGNORE_INDEX)
    codes = []
    for window in window_video(Path(args.features).stem, feats, labels):
        pred, _ = predict(window.features, model)
        codes.extend(int(c) for c in pred[window.mask])
    text = "".join(f"{c}\n" for c in codes)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_make_fixture(args) -> int:
    probs = [float(p) for p in args.class_probs.split(",")] if args.class_probs else None
    manifest = generate_fixture(
        args.out_dir, probs, frames_per_video=args.frames, num_videos=args.videos, noise=args.noise,
        seed=args.seed, means=args.means, class_seed=args.class_seed, split=args.split, name=f"{args.split}.tsv",
    )
    print(f"wrote {len(manifest)} videos, {manifest.total_frames} frames -> {manifest.path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exprfusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p):
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        p.add_argument("--override", action="append", metavar="KEY=VALUE")

    p = sub.add_parser("train", help="fit a model and write checkpoint, history and metrics")
    run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", help="write the metrics report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("lr-find", help="run the learning-rate range test")
    run_flags(p)
    p.add_argument("--manifest", help="training manifest (overrides the config)")
    p.set_defaults(func=cmd_lr_find)

    p = sub.add_parser("predict", help="per-frame labels for one feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("make-fixture", help="write a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--videos", type=int, default=STANDARD_FIXTURE["num_videos"])
    p.add_argument("--frames", type=int, default=STANDARD_FIXTURE["frames_per_video"])
    p.add_argument("--noise", type=float, default=STANDARD_FIXTURE["noise"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--means", choices=("block", "gaussian"), default="block")
    p.add_argument("--class-seed", type=int, default=0, help="seed for gaussian class means")
    p.add_argument("--class-probs", help="8 comma-separated probabilities")
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataError, InputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
