"""Turning per-segment probabilities into scored event detections.

Decoding: threshold at 0.5, clean with a 240 ms (3-segment) median
filter, then keep the longest run of positive segments as the single
detected event (the task guarantees at most one event per clip).

Scoring: event-based error rate and F-score with a 500 ms collar applied
to the onset only; offsets never affect the score.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DimensionError, ParameterError

SEGMENT_S = 0.08
THRESHOLD = 0.5
MEDIAN_LEN_S = 0.24
COLLAR_S = 0.5


def binarize(y, threshold: float = THRESHOLD) -> np.ndarray:
    """1 where y > threshold, 0 elsewhere (ties fall to 0)."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise DimensionError(f"expected a 1-D probability sequence, got shape {y.shape}")
    return (y > threshold).astype(np.int8)


def median_filter(b, length_s: float = MEDIAN_LEN_S,
                  segment_s: float = SEGMENT_S) -> np.ndarray:
    """Sliding median over the binary sequence, edges replicated.

    The window is length_s / segment_s taps and must come out odd
    (240 ms over 80 ms segments is 3).
    """
    b = np.asarray(b, dtype=np.int8)
    if b.ndim != 1:
        raise DimensionError(f"expected a 1-D binary sequence, got shape {b.shape}")
    taps_f = length_s / segment_s
    taps = int(round(taps_f))
    if abs(taps_f - taps) > 1e-6 or taps < 1:
        raise ConfigError(f"filter length {length_s}s is not a whole number of "
                          f"{segment_s}s segments")
    if taps % 2 == 0:
        raise ConfigError(f"median filter needs an odd tap count, got {taps}")
    if b.size == 0:
        return b.copy()
    half = taps // 2
    padded = np.pad(b, (half, half), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, taps)
    return np.median(windows, axis=1).astype(np.int8)


def longest_run(b, segment_s: float = SEGMENT_S) -> Optional[Tuple[float, float]]:
    """(onset_s, offset_s) of the longest run of 1s, or None if all zero.

    Ties go to the earliest run. The offset is the end-exclusive segment
    boundary, so both times are multiples of segment_s.
    """
    b = np.asarray(b, dtype=np.int8)
    if b.ndim != 1:
        raise DimensionError(f"expected a 1-D binary sequence, got shape {b.shape}")
    best_start, best_len = -1, 0
    i = 0
    n = b.size
    while i < n:
        if b[i] == 1:
            j = i
            while j < n and b[j] == 1:
                j += 1
            if j - i > best_len:
                best_start, best_len = i, j - i
            i = j
        else:
            i += 1
    if best_len == 0:
        return None
    return best_start * segment_s, (best_start + best_len) * segment_s


@dataclass
class DetectionResult:
    """One clip's decoded event (or absence of one).

    Used for both system outputs and ground-truth references; the
    probability sequence is kept on system outputs for diagnostics.
    """

    clip_id: str
    class_name: str
    event: Optional[Tuple[float, float]] = None
    probabilities: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.event is not None:
            onset, offset = self.event
            if not onset < offset:
                raise ParameterError(f"{self.clip_id}: event onset {onset} must "
                                     f"precede offset {offset}")


def decode_probabilities(clip_id: str, y, class_name: str,
                         threshold: float = THRESHOLD,
                         median_len_s: float = MEDIAN_LEN_S,
                         segment_s: float = SEGMENT_S) -> DetectionResult:
    """Full decode chain: threshold, median filter, longest run."""
    y = np.asarray(y, dtype=np.float64)
    smoothed = median_filter(binarize(y, threshold), median_len_s, segment_s)
    return DetectionResult(clip_id, class_name, longest_run(smoothed, segment_s),
                           probabilities=y)


def _index_by_clip(results: Sequence[DetectionResult], what: str) -> Dict[str, DetectionResult]:
    table: Dict[str, DetectionResult] = {}
    for r in results:
        if r.clip_id in table:
            raise ParameterError(f"duplicate clip id in {what}: {r.clip_id!r}")
        table[r.clip_id] = r
    return table


def match_events(references: Sequence[DetectionResult],
                 detections: Sequence[DetectionResult],
                 collar_s: float = COLLAR_S) -> Tuple[int, int, int]:
    """Count (tp, deletions, insertions) under the onset-only collar.

    A detection is a true positive when its clip's reference has an event
    of the same class and the onsets differ by at most collar_s. Offsets
    are ignored. Unmatched references are deletions; unmatched detections
    are insertions.
    """
    refs = _index_by_clip(references, "references")
    dets = _index_by_clip(detections, "detections")
    tp = deletions = insertions = 0
    for clip_id in set(refs) | set(dets):
        ref = refs.get(clip_id)
        det = dets.get(clip_id)
        ref_event = ref.event if ref is not None else None
        det_event = det.event if det is not None else None
        if ref_event is not None and det_event is not None \
                and ref.class_name == det.class_name \
                and abs(det_event[0] - ref_event[0]) <= collar_s:
            tp += 1
        else:
            if ref_event is not None:
                deletions += 1
            if det_event is not None:
                insertions += 1
    return tp, deletions, insertions


@dataclass(frozen=True)
class MetricsReport:
    """Event-based scores for one class (or pooled over all of them)."""

    label: str
    n_ref: int
    n_sys: int
    tp: int
    deletions: int
    insertions: int
    er: float
    precision: float
    recall: float
    f_score: float


def compute_metrics(tp: int, deletions: int, insertions: int, n_ref: int,
                    label: str = "overall") -> MetricsReport:
    """ER = (D + I) / n_ref and F = 2PR/(P+R) from matched counts."""
    if n_ref < 1:
        raise ParameterError("metrics are undefined with no reference events (n_ref = 0)")
    if min(tp, deletions, insertions) < 0:
        raise ParameterError("event counts must be nonnegative")
    if tp + deletions != n_ref:
        raise ParameterError(f"inconsistent counts: tp {tp} + deletions {deletions} "
                             f"!= n_ref {n_ref}")
    n_sys = tp + insertions
    er = (deletions + insertions) / n_ref
    precision = tp / n_sys if n_sys > 0 else 0.0
    recall = tp / n_ref
    f_score = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricsReport(label=label, n_ref=n_ref, n_sys=n_sys, tp=tp,
                         deletions=deletions, insertions=insertions, er=er,
                         precision=precision, recall=recall, f_score=f_score)


def score_detections(references: Sequence[DetectionResult],
                     detections: Sequence[DetectionResult],
                     collar_s: float = COLLAR_S,
                     label: str = "overall") -> MetricsReport:
    """Match then score in one step."""
    tp, deletions, insertions = match_events(references, detections, collar_s)
    n_ref = sum(1 for r in references if r.event is not None)
    return compute_metrics(tp, deletions, insertions, n_ref, label=label)


# -- reporting -------------------------------------------------------------------

def write_detections_tsv(path, detections: Sequence[DetectionResult]) -> None:
    """Same TSV layout as corpus annotations; clips without events get no row."""
    with open(path, "w", encoding="utf-8") as fh:
        for det in detections:
            if det.event is None:
                continue
            onset, offset = det.event
            fh.write(f"{det.clip_id}\t{onset:.6f}\t{offset:.6f}\t{det.class_name}\n")


def write_metrics_csv(path, reports: Sequence[MetricsReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "er", "f_score", "tp", "del", "ins", "n_ref"])
        for r in reports:
            writer.writerow([r.label, f"{r.er:.6f}", f"{r.f_score:.6f}",
                             r.tp, r.deletions, r.insertions, r.n_ref])


def format_metrics_table(reports: Sequence[MetricsReport]) -> str:
    """Fixed-width table for terminal output."""
    header = f"{'class':<12} {'ER':>7} {'F':>7} {'tp':>5} {'del':>5} {'ins':>5} {'n_ref':>6}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(f"{r.label:<12} {r.er:>7.3f} {r.f_score:>7.3f} "
                     f"{r.tp:>5d} {r.deletions:>5d} {r.insertions:>5d} {r.n_ref:>6d}")
    return "\n".join(lines)
