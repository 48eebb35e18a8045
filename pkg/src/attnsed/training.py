"""Training loop: weighted cross-entropy, pretraining schedule, evaluation.

The schedule mirrors the two-stage recipe: the attention-free baseline CRNN
is trained first for a few epochs, its weights then initialize the shared
layers of the attention model, which trains for the main run. The loss is
binary cross-entropy per segment with positive targets upweighted:

    Loss = -sum(w * t * log(y) + (1 - t) * log(1 - y)) / N

with N the number of segments in the batch. Checkpointing keeps both the
best-by-validation-ER and final-epoch parameters; a CSV records the curve.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, NonFiniteError, ParameterError
from .model import (ModelConfig, ModelParams, init_params, load_pretrained_crnn,
                    model_forward_batch, save_checkpoint)
from .optim import Adam
from .postprocess import (SEGMENT_S, DetectionResult, MetricsReport,
                          decode_probabilities, score_detections)

CLIP_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters. Full-size defaults; desk runs shrink
    batch_size to 8 and main_epochs to around 30."""

    learning_rate: float = 0.001
    batch_size: int = 64
    pretrain_epochs: int = 10
    main_epochs: int = 200
    positive_weight: float = 10.0
    seed: int = 0
    checkpoint_dir: str = "."

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.pretrain_epochs < 1 or self.main_epochs < 1:
            raise ConfigError("epoch counts must be >= 1")
        if self.positive_weight <= 0:
            raise ConfigError(f"positive_weight must be positive, got {self.positive_weight}")


@dataclass
class ClipExample:
    """One training/eval item: normalized features, segment targets, truth."""

    clip_id: str
    features: np.ndarray
    labels: np.ndarray
    reference: DetectionResult

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.float32)
        if self.features.ndim != 2:
            raise DimensionError(f"{self.clip_id}: features must be T x n_mels")
        if self.labels.ndim != 1:
            raise DimensionError(f"{self.clip_id}: labels must be 1-D per segment")


def segment_labels(event: Optional[Tuple[float, float]], n_segments: int,
                   segment_s: float = SEGMENT_S) -> np.ndarray:
    """Per-segment {0,1} targets: 1 iff the event covers >= 50% of the segment.

    A clip without an event is all zeros. The result is always a single
    contiguous block of ones (at most one event per clip).
    """
    labels = np.zeros(n_segments, dtype=np.float32)
    if event is None:
        return labels
    onset, offset = float(event[0]), float(event[1])
    if not onset < offset:
        raise ParameterError(f"event onset {onset} must precede offset {offset}")
    starts = np.arange(n_segments, dtype=np.float64) * segment_s
    overlap = np.minimum(starts + segment_s, offset) - np.maximum(starts, onset)
    # tiny slack absorbs float noise at exact-half boundaries
    labels[overlap + 1e-9 >= 0.5 * segment_s] = 1.0
    return labels


def make_example(clip_id: str, features: np.ndarray,
                 event: Optional[Tuple[float, float]], class_name: str,
                 model_config: ModelConfig) -> ClipExample:
    """Bundle normalized features with derived labels and the reference."""
    features = np.asarray(features, dtype=np.float32)
    n_seg = model_config.segments_for(features.shape[0])
    return ClipExample(clip_id, features, segment_labels(event, n_seg),
                       DetectionResult(clip_id, class_name, event))


def weighted_bce_loss(y: Tensor, targets, positive_weight: float) -> Tensor:
    """Mean binary cross-entropy with positives scaled by positive_weight.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    t = np.asarray(targets, dtype=y.dtype)
    if y.shape != t.shape:
        raise DimensionError(f"probabilities {y.shape} vs targets {t.shape}")
    yc = ad.clip(y, CLIP_EPS, 1.0 - CLIP_EPS)
    tt = Tensor(t)
    per_seg = tt * ad.log(yc) * positive_weight + (1.0 - tt) * ad.log(1.0 - yc)
    return ad.tsum(per_seg) * (-1.0 / y.size)


def _sorted_by_id(clips: Sequence[ClipExample]) -> List[ClipExample]:
    # canonical order first: batch composition must depend on the seed,
    # not on the caller's file ordering
    return sorted(clips, key=lambda c: c.clip_id)


def _stack_features(clips: Sequence[ClipExample]) -> np.ndarray:
    t0 = clips[0].features.shape
    for c in clips:
        if c.features.shape != t0:
            raise DimensionError(f"clips must share one feature shape for batching: "
                                 f"{c.clip_id} has {c.features.shape}, expected {t0}")
    return np.stack([c.features for c in clips])


def _param_norm_report(params: ModelParams) -> str:
    worst = sorted(((float(np.linalg.norm(t.data)), n) for n, t in params.tensors.items()),
                   reverse=True)[:5]
    return ", ".join(f"{n}|{v:.3e}" for v, n in worst)


def _run_training(params: ModelParams, clips: List[ClipExample], cfg: TrainConfig,
                  epochs: int, rng: np.random.Generator, stage: str,
                  val_clips: Optional[List[ClipExample]] = None,
                  verbose: bool = True):
    """Shared epoch loop; returns (mean-loss curve, val-ER curve, best epoch)."""
    if not clips:
        raise ParameterError("training set is empty")
    opt = Adam(params.active(), learning_rate=cfg.learning_rate)
    losses: List[float] = []
    val_ers: List[float] = []
    best_epoch, best_er = -1, np.inf
    best_snapshot = None
    labels = np.stack([c.labels for c in clips])
    features = _stack_features(clips)
    n = len(clips)
    for epoch in range(epochs):
        t_start = time.time()
        order = rng.permutation(n)
        batch_losses = []
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            x = Tensor(features[idx])
            trace = model_forward_batch(x, params, mode="train", rng=rng)
            loss = weighted_bce_loss(trace.probabilities, labels[idx],
                                     cfg.positive_weight)
            if not np.isfinite(loss.item()):
                raise NonFiniteError(f"{stage}: non-finite loss at epoch {epoch} "
                                     f"batch {b0 // cfg.batch_size}; largest params: "
                                     + _param_norm_report(params))
            opt.zero_grad()
            loss.backward()
            opt.check_finite_grads()
            opt.step()
            batch_losses.append(loss.item())
        losses.append(float(np.mean(batch_losses)))
        if val_clips:
            report, _ = evaluate(params, val_clips)
            val_ers.append(report.er)
            if report.er < best_er:
                best_er, best_epoch = report.er, epoch
                best_snapshot = {name: t.data.copy() for name, t in params.tensors.items()}
                best_snapshot["__bn__"] = {k: (s.running_mean.copy(), s.running_var.copy(),
                                               s.count) for k, s in params.bn_states.items()}
        else:
            val_ers.append(float("nan"))
        if verbose:
            val_txt = f" val_er {val_ers[-1]:.3f}" if val_clips else ""
            print(f"{stage} epoch {epoch + 1}/{epochs}: loss {losses[-1]:.4f}"
                  f"{val_txt} ({time.time() - t_start:.1f}s)", flush=True)
    return losses, val_ers, best_epoch, best_snapshot


@dataclass
class TrainResult:
    params: ModelParams
    loss_curve: List[float]
    val_er_curve: List[float]
    best_epoch: int
    checkpoint_path: Path
    best_checkpoint_path: Optional[Path] = None
    curve_path: Optional[Path] = None


def pretrain_baseline(train_clips: Sequence[ClipExample], model_config: ModelConfig,
                      cfg: TrainConfig, verbose: bool = True) -> TrainResult:
    """Train the attention-free CRNN and checkpoint it for later reuse."""
    base_cfg = ModelConfig(**{**model_config.to_dict(),
                              "use_temporal_attention": False,
                              "use_frequential_attention": False})
    params = init_params(base_cfg, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    clips = _sorted_by_id(train_clips)
    losses, _, _, _ = _run_training(params, clips, cfg, cfg.pretrain_epochs, rng,
                                    stage="pretrain", verbose=verbose)
    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    path = ckpt_dir / "baseline.ckpt"
    save_checkpoint(path, params)
    return TrainResult(params=params, loss_curve=losses,
                       val_er_curve=[float("nan")] * len(losses),
                       best_epoch=-1, checkpoint_path=path)


def train_full(train_clips: Sequence[ClipExample], model_config: ModelConfig,
               cfg: TrainConfig, baseline_checkpoint=None,
               val_clips: Optional[Sequence[ClipExample]] = None,
               verbose: bool = True) -> TrainResult:
    """Train the configured model for main_epochs, checkpointing best and final.

    With a baseline checkpoint the shared weights start from it and the
    attention layers are re-randomized; without one, everything starts fresh.
    """
    if baseline_checkpoint is not None:
        params = load_pretrained_crnn(baseline_checkpoint, model_config, seed=cfg.seed)
    else:
        params = init_params(model_config, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 2])
    clips = _sorted_by_id(train_clips)
    val = _sorted_by_id(val_clips) if val_clips else None
    losses, val_ers, best_epoch, best_snapshot = _run_training(
        params, clips, cfg, cfg.main_epochs, rng, stage="train",
        val_clips=val, verbose=verbose)

    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    final_path = ckpt_dir / "final.ckpt"
    save_checkpoint(final_path, params)

    best_path = None
    if best_snapshot is not None:
        bn_saved = best_snapshot.pop("__bn__")
        saved_tensors = {name: params.tensors[name].data.copy() for name in params.tensors}
        saved_bn = {k: (s.running_mean.copy(), s.running_var.copy(), s.count)
                    for k, s in params.bn_states.items()}
        for name, data in best_snapshot.items():
            params.tensors[name].data[...] = data
        for k, (m, v, c) in bn_saved.items():
            params.bn_states[k].running_mean, params.bn_states[k].running_var = m, v
            params.bn_states[k].count = c
        best_path = ckpt_dir / "best.ckpt"
        save_checkpoint(best_path, params)
        for name, data in saved_tensors.items():
            params.tensors[name].data[...] = data
        for k, (m, v, c) in saved_bn.items():
            params.bn_states[k].running_mean, params.bn_states[k].running_var = m, v
            params.bn_states[k].count = c

    curve_path = ckpt_dir / "loss_curve.csv"
    with open(curve_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "val_er"])
        for e, (l, v) in enumerate(zip(losses, val_ers)):
            writer.writerow([e + 1, f"{l:.8f}", "" if np.isnan(v) else f"{v:.6f}"])

    return TrainResult(params=params, loss_curve=losses, val_er_curve=val_ers,
                       best_epoch=best_epoch, checkpoint_path=final_path,
                       best_checkpoint_path=best_path, curve_path=curve_path)


def evaluate(params: ModelParams, clips: Sequence[ClipExample],
             eval_batch: int = 16) -> Tuple[MetricsReport, List[DetectionResult]]:
    """Frozen-model inference, decoding, and event-based scoring."""
    if not clips:
        raise ParameterError("evaluation set is empty")
    clips = _sorted_by_id(clips)
    detections: List[DetectionResult] = []
    with ad.no_grad():
        for b0 in range(0, len(clips), eval_batch):
            chunk = clips[b0:b0 + eval_batch]
            x = Tensor(_stack_features(chunk))
            trace = model_forward_batch(x, params, mode="eval")
            probs = trace.probabilities.data
            for c, y in zip(chunk, probs):
                detections.append(decode_probabilities(c.clip_id, y,
                                                       c.reference.class_name))
    references = [c.reference for c in clips]
    label = references[0].class_name if references else "overall"
    report = score_detections(references, detections, label=label)
    return report, detections
