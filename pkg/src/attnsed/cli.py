"""Command-line surface: synth, featurize, train, eval, dump-attention.

Each command writes a ``manifest.json`` beside its outputs recording the
canonical config hash, the seeds in play, and SHA-256 digests of the input
files, so any artifact can be traced to the exact run that made it. All
commands are deterministic given (config, seed): reruns produce identical
bytes. Failures exit nonzero with a one-line ``error[category]: message``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .audio_io import read_wav
from .config import RunConfig, apply_overrides, load_config, serialize_config
from .errors import FormatError, ParameterError, ToolkitError
from .features import (FeatureMatrix, apply_norm, fbank_extract, fit_norm_stats,
                       load_feature_matrix, load_norm_stats, save_feature_matrix,
                       save_norm_stats)
from .model import ModelConfig, load_checkpoint, model_forward
from .postprocess import (SEGMENT_S, format_metrics_table, write_detections_tsv,
                          write_metrics_csv)
from .synth import CLASS_IDS, CLASS_NAMES, SynthConfig, read_annotations, synthesize_dataset
from .training import (TrainConfig, evaluate, make_example, pretrain_baseline,
                       train_full)


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir, command: str, cfg: RunConfig, seeds: Dict[str, int],
                   inputs: Dict[str, str], extra: Optional[dict] = None) -> Path:
    """Record what produced this directory: config hash, seeds, input hashes."""
    manifest = {
        "command": command,
        "config_sha256": hashlib.sha256(serialize_config(cfg).encode()).hexdigest(),
        "seeds": seeds,
        "inputs": {name: _sha256_file(p) for name, p in sorted(inputs.items())},
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "set", None):
        cfg = apply_overrides(cfg, args.set)
    overrides: List[str] = []
    if getattr(args, "seed", None) is not None:
        overrides += [f"synth.master_seed={args.seed}", f"train.seed={args.seed}"]
    if getattr(args, "event_class", None):
        overrides.append(f"class={args.event_class}")
    return apply_overrides(cfg, overrides) if overrides else cfg


def _norm_features(path, stats) -> FeatureMatrix:
    return apply_norm(load_feature_matrix(path), stats)


def _load_examples(features_dir, annotations_path, stats, class_name: str,
                   model_config: ModelConfig):
    """One ClipExample per .fbnk file; events from the annotation TSV.

    Only rows of the target class create positive labels; clips without a
    matching row are background for this detector.
    """
    rows = read_annotations(annotations_path) if annotations_path else []
    by_clip = {}
    for name, onset, offset, label in rows:
        stem = name[:-4] if name.endswith(".wav") else name
        if stem in by_clip:
            raise FormatError(f"duplicate annotation for clip {stem!r}")
        by_clip[stem] = (onset, offset, label)
    paths = sorted(Path(features_dir).glob("*.fbnk"))
    if not paths:
        raise ParameterError(f"no .fbnk feature files under {features_dir}")
    examples = []
    for p in paths:
        feat = _norm_features(p, stats)
        row = by_clip.get(p.stem)
        event = (row[0], row[1]) if row is not None and row[2] == class_name else None
        examples.append(make_example(p.stem, feat.frames, event, class_name,
                                     model_config))
    return examples


# -- commands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    synth_overrides = []
    if args.clips is not None:
        synth_overrides.append(f"synth.n_clips={args.clips}")
    if args.duration is not None:
        synth_overrides.append(f"synth.clip_duration_s={args.duration}")
    if args.presence is not None:
        synth_overrides.append(f"synth.event_presence_prob={args.presence}")
    if args.event_class:
        synth_overrides.append(f"synth.classes={CLASS_IDS[args.event_class]}")
    if synth_overrides:
        cfg = apply_overrides(cfg, synth_overrides)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clips = synthesize_dataset(cfg.synth, out)
    n_events = sum(1 for c in clips if c.event is not None)
    per_class = {}
    for c in clips:
        key = c.clip_id.split("_")[0]
        per_class.setdefault(key, [0, 0])
        per_class[key][0] += 1
        per_class[key][1] += c.event is not None
    write_manifest(out, "synth", cfg, {"master_seed": cfg.synth.master_seed}, {},
                   extra={"clips": len(clips), "events": n_events})
    print(f"wrote {len(clips)} clips to {out} "
          f"({n_events} with events, rate {n_events / len(clips):.2f})")
    for name, (n, e) in sorted(per_class.items()):
        print(f"  {name}: {n} clips, {e} events")
    return 0


def cmd_featurize(args) -> int:
    cfg = _resolve_config(args)
    wav_dir = Path(args.wav_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wavs = sorted(wav_dir.glob("*.wav"))
    if not wavs:
        raise ParameterError(f"no .wav files under {wav_dir}")
    done, failures = [], []
    inputs = {}
    for wav in wavs:
        try:
            samples, rate = read_wav(wav)
            feat = fbank_extract(samples, rate)
            save_feature_matrix(out / (wav.stem + ".fbnk"), feat)
            done.append(feat)
            inputs[wav.name] = wav
        except (ToolkitError, OSError) as exc:
            failures.append(f"{wav.name}: {exc}")
    stats_path = None
    if args.fit_stats:
        if not done:
            raise ParameterError("no clips featurized; cannot fit normalization stats")
        stats_path = out / "norm_stats.bin"
        save_norm_stats(stats_path, fit_norm_stats(done))
    write_manifest(out, "featurize", cfg, {}, inputs,
                   extra={"featurized": len(done), "failed": len(failures),
                          "stats_fitted": bool(args.fit_stats)})
    print(f"featurized {len(done)}/{len(wavs)} clips to {out}"
          + (f"; stats -> {stats_path.name}" if stats_path else ""))
    for f in failures:
        print(f"  failed {f}", file=sys.stderr)
    return 0 if not failures else 1


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    stats = load_norm_stats(args.stats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = TrainConfig(**{**{k: getattr(cfg.train, k)
                                  for k in TrainConfig.__dataclass_fields__},
                               "checkpoint_dir": str(out)})
    examples = _load_examples(args.features, args.annotations, stats,
                              cfg.class_name, cfg.model)
    val = None
    if args.val_features:
        if not args.val_annotations:
            raise ParameterError("--val-features needs --val-annotations")
        val = _load_examples(args.val_features, args.val_annotations, stats,
                             cfg.class_name, cfg.model)
    inputs = {"stats": args.stats, "annotations": args.annotations}

    if args.mode == "baseline":
        result = pretrain_baseline(examples, cfg.model, train_cfg,
                                   verbose=not args.quiet)
        print(f"baseline checkpoint -> {result.checkpoint_path} "
              f"(final loss {result.loss_curve[-1]:.4f})")
    else:
        if args.init:
            inputs["init_checkpoint"] = args.init
        result = train_full(examples, cfg.model, train_cfg,
                            baseline_checkpoint=args.init, val_clips=val,
                            verbose=not args.quiet)
        best = (f", best epoch {result.best_epoch + 1} "
                f"-> {result.best_checkpoint_path}") if result.best_checkpoint_path else ""
        print(f"final checkpoint -> {result.checkpoint_path}{best}")
        print(f"loss curve -> {result.curve_path}")
    write_manifest(out, f"train:{args.mode}", cfg, {"train_seed": train_cfg.seed},
                   inputs, extra={"n_train": len(examples),
                                  "n_val": len(val) if val else 0})
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    params = load_checkpoint(args.checkpoint)
    stats = load_norm_stats(args.stats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    examples = _load_examples(args.features, args.annotations, stats,
                              cfg.class_name, params.config)
    report, detections = evaluate(params, examples)
    write_detections_tsv(out / "detections.tsv", detections)
    write_metrics_csv(out / "metrics.csv", [report])
    write_manifest(out, "eval", cfg, {},
                   {"checkpoint": args.checkpoint, "stats": args.stats,
                    "annotations": args.annotations},
                   extra={"n_clips": len(examples)})
    print(format_metrics_table([report]))
    print(f"detections -> {out / 'detections.tsv'}")
    return 0


def _write_pgm(path, img: np.ndarray) -> None:
    """8-bit grayscale PGM (binary P5); img must already be uint8."""
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def _to_uint8(x: np.ndarray, per_row: bool) -> np.ndarray:
    """Min-max scale to 0..255; constant regions map to mid gray."""
    x = x.astype(np.float64)
    axis = 1 if per_row else None
    lo = x.min(axis=axis, keepdims=True)
    hi = x.max(axis=axis, keepdims=True)
    span = hi - lo
    flat = np.broadcast_to(span < 1e-12, x.shape)
    scaled = np.where(flat, 128.0, 255.0 * (x - lo) / np.where(span < 1e-12, 1.0, span))
    return np.clip(np.round(scaled), 0, 255).astype(np.uint8)


def cmd_dump_attention(args) -> int:
    cfg = _resolve_config(args)
    params = load_checkpoint(args.checkpoint)
    stats = load_norm_stats(args.stats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    samples, rate = read_wav(args.wav)
    raw = fbank_extract(samples, rate)
    feat = apply_norm(raw, stats)
    primed = False
    if any(s.count == 0 for s in params.bn_states.values()):
        # a never-trained checkpoint has no running stats; prime them from
        # this clip so eval-mode inference is defined
        with ad.no_grad():
            model_forward(feat.frames, params, mode="train",
                          rng=np.random.default_rng(0))
        primed = True
    with ad.no_grad():
        trace = model_forward(feat.frames, params, mode="eval")

    a = trace.temporal_weights.data
    m = trace.frequential_weights.data
    y = trace.probabilities.data
    with open(out / "a.csv", "w", encoding="utf-8") as fh:
        fh.write("segment_index,time_s,weight,probability\n")
        for i, (w, p) in enumerate(zip(a, y)):
            fh.write(f"{i},{i * SEGMENT_S:.2f},{w:.6f},{p:.6f}\n")
    _write_pgm(out / "M.pgm", _to_uint8(m, per_row=True))
    _write_pgm(out / "fbank.pgm", _to_uint8(raw.frames, per_row=False))
    _write_pgm(out / "weighted_fbank.pgm",
               _to_uint8(trace.weighted_feature.data, per_row=False))
    write_manifest(out, "dump-attention", cfg, {},
                   {"checkpoint": args.checkpoint, "stats": args.stats,
                    "wav": args.wav},
                   extra={"n_segments": int(a.shape[0]), "bn_primed": primed})
    print(f"attention dump -> {out} (a.csv, M.pgm, fbank.pgm, weighted_fbank.pgm)")
    return 0


# -- argument parsing --------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="override synthesis and training seeds")
    p.add_argument("--class", dest="event_class", choices=sorted(CLASS_IDS),
                   help="target event class")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnsed",
        description="Sound event detection with temporal-frequential attention.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic WAV corpus + annotations")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--clips", type=int, help="clips per class")
    p.add_argument("--duration", type=float, help="clip length in seconds")
    p.add_argument("--presence", type=float, help="event presence probability")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="extract log-mel features from WAVs")
    _add_common(p)
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fit-stats", action="store_true",
                   help="fit normalization stats on this (training) split")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train the detector (baseline or full)")
    _add_common(p)
    p.add_argument("--features", required=True, help="directory of .fbnk files")
    p.add_argument("--annotations", required=True, help="ground-truth TSV")
    p.add_argument("--stats", required=True, help="normalization stats file")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--mode", choices=["baseline", "full"], default="full")
    p.add_argument("--init", help="baseline checkpoint to initialize from")
    p.add_argument("--val-features", help="validation .fbnk directory")
    p.add_argument("--val-annotations", help="validation ground-truth TSV")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a feature set")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-attention", help="export attention weights for one clip")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_attention)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ToolkitError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
