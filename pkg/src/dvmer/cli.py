"""Command-line entry point.

Commands: extract-features, train, eval, diagnose, export-embeddings.

Exit codes are stable: 0 success, 2 configuration error, 3 data error,
4 non-finite loss during training, 5 checkpoint/config hash mismatch.
All commands accept --json for machine-readable output; every file output
is written atomically.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import config as cfgmod
from . import data as datakit
from . import features as feats
from . import training
from .errors import (
    BadSampleRate,
    CheckpointMismatch,
    ConfigError,
    DvmerError,
    EmptySplit,
    NonFiniteLoss,
    TrackTooShort,
)
from .ioutil import atomic_write_text

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NONFINITE = 4
EXIT_CHECKPOINT = 5


@dataclass
class CommandResult:
    exit_code: int
    summary: str
    payload: dict | None = None


def _emit(result: CommandResult, as_json: bool) -> int:
    if as_json:
        body = {"exit_code": result.exit_code, "summary": result.summary}
        if result.payload:
            body.update(result.payload)
        print(json.dumps(body))
    else:
        print(result.summary)
    return result.exit_code


def _load_samples(manifest_path, features_dir, dimension) -> tuple[list, list]:
    """Manifest records plus in-memory samples with cached features."""
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    records = datakit.parse_manifest(manifest_path)
    samples = []
    for rec in records:
        cache = os.path.join(features_dir, f"{rec.track_id}.dmrf")
        if not os.path.exists(cache):
            raise FileNotFoundError(f"feature cache missing for track {rec.track_id}: {cache}")
        pair = feats.read_feature_cache(cache)
        samples.append(datakit.Sample(track_id=rec.track_id, label=rec.label(dimension), pair=pair))
    return records, samples


def _overrides_from_args(args) -> dict:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "dimension", None) is not None:
        overrides["dimension"] = args.dimension
    if getattr(args, "no_dsaf", False):
        overrides["use_dsaf"] = False
    if getattr(args, "no_pcl", False):
        overrides["use_pcl"] = False
    if getattr(args, "no_saml", False):
        overrides["use_saml"] = False
    if getattr(args, "ensemble", False):
        overrides["ensemble_eval"] = True
    return overrides


# -- commands -----------------------------------------------------------------


def cmd_extract_features(args) -> CommandResult:
    cfg = cfgmod.load_feature_config(args.config) if args.config else feats.FeatureConfig()
    in_dir, out_dir = args.in_dir, args.out
    if not os.path.isdir(in_dir):
        raise FileNotFoundError(f"input directory not found: {in_dir}")
    os.makedirs(out_dir, exist_ok=True)
    wavs = sorted(p for p in os.listdir(in_dir) if p.lower().endswith(".wav"))
    if not wavs:
        raise FileNotFoundError(f"no .wav files in {in_dir}")

    done, failed = [], []
    for name in wavs:
        track_id = os.path.splitext(name)[0]
        try:
            track, rate = feats.read_wav(os.path.join(in_dir, name))
            seg = feats.select_segment(track, rate, cfg)
            pair = feats.extract_pair(seg, cfg)
            feats.write_feature_cache(os.path.join(out_dir, f"{track_id}.dmrf"), pair, track_id, cfg)
            done.append(track_id)
        except (TrackTooShort, BadSampleRate, ConfigError) as exc:
            failed.append((track_id, str(exc)))
            print(f"skipped {track_id}: {exc}", file=sys.stderr)

    payload = {"extracted": done, "failed": [t for t, _ in failed], "config_hash": cfg.config_hash()}
    if failed:
        return CommandResult(EXIT_DATA, f"extracted {len(done)} track(s), {len(failed)} failed", payload)
    return CommandResult(EXIT_OK, f"extracted {len(done)} track(s) to {out_dir}", payload)


def cmd_train(args) -> CommandResult:
    train_cfg, model_cfg = cfgmod.load_train_configs(args.config, overrides=_overrides_from_args(args))
    records, samples = _load_samples(args.manifest, args.features, train_cfg.dimension)

    split = datakit.stratified_split(records, train_cfg.dimension, seed=train_cfg.seed)
    by_id = {s.track_id: s for s in samples}
    train_samples = [by_id[i] for i in split.train_ids]
    test_samples = [by_id[i] for i in split.test_ids]
    if train_cfg.mode == "semi":
        train_samples = datakit.mark_unlabeled(train_samples, train_cfg.labeled_fraction, train_cfg.seed)

    os.makedirs(args.out, exist_ok=True)

    def log_epoch(record):
        print(
            f"epoch {record.epoch:3d}  lr {record.lr:.2e}  tau {record.tau:.3f}  "
            f"theta {record.theta:.3f}  loss {record.loss_total:.4f}  acc {record.train_acc:.3f}",
            file=sys.stderr,
        )

    result = training.run_training(train_samples, train_cfg, model_cfg, on_epoch=log_epoch)

    config_hash = cfgmod.run_config_hash(train_cfg, result.model_config)
    checkpoint_path = os.path.join(args.out, "checkpoint.dmrc")
    training.save_checkpoint(checkpoint_path, result, config_hash)
    atomic_write_text(
        os.path.join(args.out, "epochs.log"),
        "\n".join(json.dumps(r.to_dict()) for r in result.records) + "\n",
    )
    atomic_write_text(os.path.join(args.out, "split.json"), split.to_json())

    train_metrics = training.evaluate(result.model, train_samples, ensemble=train_cfg.ensemble_eval)
    test_metrics = training.evaluate(result.model, test_samples, ensemble=train_cfg.ensemble_eval)
    summary = {
        "dimension": train_cfg.dimension,
        "config_hash": config_hash,
        "epochs": train_cfg.epochs,
        "train": {"acc": train_metrics.acc, "f1": train_metrics.f1, "auc": train_metrics.auc},
        "test": {"acc": test_metrics.acc, "f1": test_metrics.f1, "auc": test_metrics.auc},
    }
    atomic_write_text(os.path.join(args.out, "result.json"), json.dumps(summary, indent=1) + "\n")

    return CommandResult(
        EXIT_OK,
        f"trained {train_cfg.epochs} epoch(s); test acc {test_metrics.acc:.4f} "
        f"f1 {test_metrics.f1:.4f} auc {test_metrics.auc:.4f}",
        summary,
    )


def cmd_eval(args) -> CommandResult:
    train_cfg, model_cfg = cfgmod.load_train_configs(args.config, overrides=_overrides_from_args(args))
    expected_hash = cfgmod.run_config_hash(train_cfg, model_cfg)
    model, _ = training.load_model_from_checkpoint(args.checkpoint, model_cfg, expected_hash=expected_hash)

    records, samples = _load_samples(args.manifest, args.features, train_cfg.dimension)
    split = datakit.stratified_split(records, train_cfg.dimension, seed=train_cfg.seed)
    ids = split.train_ids if args.split == "train" else split.test_ids
    by_id = {s.track_id: s for s in samples}
    subset = [by_id[i] for i in ids]
    metrics = training.evaluate(model, subset, ensemble=train_cfg.ensemble_eval)

    payload = {
        "dimension": train_cfg.dimension,
        "split": args.split,
        "acc": metrics.acc,
        "f1": metrics.f1,
        "auc": metrics.auc,
    }
    return CommandResult(
        EXIT_OK,
        f"{train_cfg.dimension} {args.split}: acc {metrics.acc:.4f} f1 {metrics.f1:.4f} auc {metrics.auc:.4f}",
        payload,
    )


DIAGNOSE_COLUMNS = (
    "epoch", "tau", "theta", "mask_ratio", "mean_confidence",
    "mean_reliability", "queue_entropy", "coverage_0", "coverage_1",
)


def cmd_diagnose(args) -> CommandResult:
    if not os.path.exists(args.log):
        raise FileNotFoundError(f"epoch log not found: {args.log}")
    rows = []
    with open(args.log, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{args.log}:{lineno}: bad record: {exc}") from exc
            coverage = rec.get("queue_coverage", [0.0, 0.0])
            rows.append([
                rec["epoch"], rec["tau"], rec["theta"], rec["mask_ratio"],
                rec["mean_confidence"], rec["mean_reliability"], rec["queue_entropy"],
                coverage[0] if len(coverage) > 0 else 0.0,
                coverage[1] if len(coverage) > 1 else 0.0,
            ])
    lines = [",".join(DIAGNOSE_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    return CommandResult(EXIT_OK, f"wrote {len(rows)} row(s) to {args.out}", {"rows": len(rows)})


def cmd_export_embeddings(args) -> CommandResult:
    train_cfg, model_cfg = cfgmod.load_train_configs(args.config, overrides=_overrides_from_args(args))
    expected_hash = cfgmod.run_config_hash(train_cfg, model_cfg)
    model, _ = training.load_model_from_checkpoint(args.checkpoint, model_cfg, expected_hash=expected_hash)
    _, samples = _load_samples(args.manifest, args.features, train_cfg.dimension)
    if not samples:
        raise EmptySplit("no tracks to export")

    header = ["track_id", "label"] + [f"f_{i}" for i in range(model_cfg.fusion_dim)]
    lines = [",".join(header)]
    for start in range(0, len(samples), 64):
        batch = samples[start:start + 64]
        mel = np.stack([s.pair.mel for s in batch])
        coch = np.stack([s.pair.coch for s in batch])
        outputs = model.forward(mel, coch, training=False)
        for s, vec in zip(batch, outputs.z_fuse.data):
            lines.append(",".join([s.track_id, str(s.label)] + [repr(float(v)) for v in vec]))
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    return CommandResult(
        EXIT_OK,
        f"exported {len(samples)} embedding(s) of width {model_cfg.fusion_dim} to {args.out}",
        {"rows": len(samples), "columns": len(header)},
    )


# -- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dvmer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-features", help="turn WAV tracks into feature caches")
    p.add_argument("--in", dest="in_dir", required=True, help="directory of 44.1 kHz 16-bit WAV files")
    p.add_argument("--out", required=True, help="cache output directory")
    p.add_argument("--config", default=None, help="feature config file")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train", help="train a model from cached features")
    p.add_argument("--config", required=True, help="run config file (requires epochs, batch_size)")
    p.add_argument("--manifest", required=True, help="tab-separated track manifest")
    p.add_argument("--features", required=True, help="feature cache directory")
    p.add_argument("--out", required=True, help="output directory for checkpoint and logs")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dimension", choices=("arousal", "valence"), default=None)
    p.add_argument("--no-dsaf", action="store_true", help="encode views independently")
    p.add_argument("--no-pcl", action="store_true", help="disable pseudo-label learning")
    p.add_argument("--no-saml", action="store_true", help="disable the contrastive memory")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dimension", choices=("arousal", "valence"), default=None)
    p.add_argument("--ensemble", action="store_true", help="average the three heads' probabilities")
    p.add_argument("--no-dsaf", action="store_true")
    p.add_argument("--no-pcl", action="store_true")
    p.add_argument("--no-saml", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="convert an epoch log into a plotting CSV")
    p.add_argument("--log", required=True, help="epoch log from a training run")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("export-embeddings", help="dump fused features per track as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dimension", choices=("arousal", "valence"), default=None)
    p.add_argument("--no-dsaf", action="store_true")
    p.add_argument("--no-pcl", action="store_true")
    p.add_argument("--no-saml", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    as_json = getattr(args, "json", False)
    try:
        result = args.func(args)
    except ConfigError as exc:
        return _emit(CommandResult(EXIT_CONFIG, f"config error: {exc}"), as_json)
    except NonFiniteLoss as exc:
        return _emit(CommandResult(EXIT_NONFINITE, f"non-finite loss: {exc}"), as_json)
    except CheckpointMismatch as exc:
        return _emit(CommandResult(EXIT_CHECKPOINT, f"checkpoint mismatch: {exc}"), as_json)
    except (FileNotFoundError, ValueError, EmptySplit, DvmerError) as exc:
        return _emit(CommandResult(EXIT_DATA, f"data error: {exc}"), as_json)
    return _emit(result, as_json)


if __name__ == "__main__":
    sys.exit(main())
