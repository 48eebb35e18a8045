"""Synthetic rare-event mixture generator.

Stands in for a real recording corpus: pink-noise backgrounds with slow
amplitude drift and occasional beep-like distractor tones, plus three
families of short target events (a harmonic cry, a broadband break with
ringing partials, an impulsive shot with a decaying tail). Events are mixed
in at a requested event-to-background ratio (EBR), defined as the RMS ratio
over the event's support region.

Every clip regenerates bit-identically from (master_seed, class, index);
the per-clip RNG is derived with numpy's SeedSequence, so generation order
and parallelism do not matter.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal as sp_signal

from .audio_io import write_wav
from .errors import ParameterError

SAMPLE_RATE = 44100

CLASS_NAMES = {0: "babycry", 1: "glassbreak", 2: "gunshot"}
CLASS_IDS = {v: k for k, v in CLASS_NAMES.items()}

# duration distributions per class: (mean_s, std_s, min_s, max_s)
EVENT_DURATION = {
    0: (2.25, 0.4, 1.0, 4.0),
    1: (1.16, 0.3, 0.5, 2.5),
    2: (1.32, 0.3, 0.5, 2.5),
}

BACKGROUND_RMS = 0.1


@dataclass
class EventLabel:
    class_id: int
    onset_s: float
    offset_s: float


@dataclass
class AnnotatedClip:
    samples: np.ndarray
    duration_s: float
    event: Optional[EventLabel]
    ebr_db: Optional[float]
    seed: int
    clip_id: str = ""
    # diagnostic only: where background beeps were placed (not ground truth)
    distractors: List[Tuple[float, float]] = field(default_factory=list)


@dataclass
class SynthConfig:
    n_clips: int = 200
    clip_duration_s: float = 10.0
    event_presence_prob: float = 0.9
    ebr_set: Tuple[float, ...] = (-6.0, 0.0, 6.0)
    master_seed: int = 0
    classes: Tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if self.n_clips < 1:
            raise ParameterError("n_clips must be positive")
        if not 0.0 <= self.event_presence_prob <= 1.0:
            raise ParameterError("event_presence_prob must be in [0, 1]")
        if self.clip_duration_s <= 0:
            raise ParameterError("clip_duration_s must be positive")


def _pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """1/f-power noise via random-phase spectral shaping (flat below 20 Hz)."""
    freqs = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)
    amp = 1.0 / np.sqrt(np.maximum(freqs, 20.0))
    amp[0] = 0.0
    phase = rng.uniform(0.0, 2.0 * np.pi, len(freqs))
    spectrum = amp * np.exp(1j * phase)
    noise = np.fft.irfft(spectrum, n=n)
    return (noise / (np.std(noise) + 1e-12)).astype(np.float32)


def _slow_envelope(n: int, rng: np.random.Generator) -> np.ndarray:
    # control point roughly every 0.7 s, linear interpolation between them
    n_ctrl = max(int(n / SAMPLE_RATE / 0.7) + 2, 2)
    ctrl = 1.0 + 0.35 * rng.uniform(-1.0, 1.0, n_ctrl)
    ctrl = np.maximum(ctrl, 0.3)
    t = np.linspace(0.0, n_ctrl - 1.0, n)
    return np.interp(t, np.arange(n_ctrl), ctrl).astype(np.float32)


def _gen_background_with_meta(duration_s: float, rng: np.random.Generator):
    if duration_s <= 0:
        raise ParameterError("duration must be positive")
    n = int(round(duration_s * SAMPLE_RATE))
    base = _pink_noise(n, rng) * _slow_envelope(n, rng)
    base *= BACKGROUND_RMS / (np.sqrt(np.mean(base ** 2)) + 1e-12)

    # beep-like distractor tones: salient, harmonic, too short to be events
    distractors: List[Tuple[float, float]] = []
    n_beeps = int(rng.poisson(duration_s / 5.0))
    for _ in range(n_beeps):
        dur = rng.uniform(0.08, 0.35)
        onset = rng.uniform(0.0, max(duration_s - dur, 0.0))
        f0 = np.exp(rng.uniform(np.log(400.0), np.log(2500.0)))
        gain = rng.uniform(1.5, 3.5) * BACKGROUND_RMS
        i0 = int(onset * SAMPLE_RATE)
        m = min(int(dur * SAMPLE_RATE), n - i0)
        if m <= 0:
            continue
        t = np.arange(m) / SAMPLE_RATE
        tone = np.sin(2 * np.pi * f0 * t) + 0.4 * np.sin(2 * np.pi * 2 * f0 * t)
        tone *= np.hanning(m)
        base[i0:i0 + m] += (gain * tone / (np.sqrt(np.mean(tone ** 2)) + 1e-12)).astype(np.float32)
        distractors.append((onset, onset + m / SAMPLE_RATE))
    return base.astype(np.float32), distractors


def gen_background(duration_s: float, rng: np.random.Generator) -> np.ndarray:
    """Pink-noise scene with slow loudness drift and occasional beeps."""
    samples, _ = _gen_background_with_meta(duration_s, rng)
    return samples


def _draw_duration(class_id: int, rng: np.random.Generator) -> float:
    mean, std, lo, hi = EVENT_DURATION[class_id]
    return float(np.clip(rng.normal(mean, std), lo, hi))


def _attack_release(n: int, attack_frac: float, release_frac: float,
                    floor: float = 0.05) -> np.ndarray:
    # small floor keeps first/last samples audible so the annotated range
    # is exactly the range that carries injected energy
    env = np.ones(n, dtype=np.float32)
    na = max(int(n * attack_frac), 1)
    nr = max(int(n * release_frac), 1)
    env[:na] = 0.5 - 0.5 * np.cos(np.pi * np.arange(na) / na)
    env[n - nr:] = 0.5 + 0.5 * np.cos(np.pi * np.arange(nr) / nr)
    return floor + (1.0 - floor) * env


def gen_event(class_id: int, rng: np.random.Generator) -> np.ndarray:
    """Synthesize one isolated event, unit RMS, at 44.1 kHz.

    class 0: harmonic complex with pitch vibrato and a wailing envelope
    class 1: broadband burst followed by ringing high partials
    class 2: impulsive low-heavy attack with an exponential tail
    """
    if class_id not in EVENT_DURATION:
        raise ParameterError(f"unknown event class {class_id!r}")
    dur = _draw_duration(class_id, rng)
    n = int(round(dur * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE

    if class_id == 0:
        f0 = rng.uniform(350.0, 550.0)
        vib_rate = rng.uniform(4.0, 8.0)
        vib_phase = rng.uniform(0.0, 2.0 * np.pi)
        f_inst = f0 * (1.0 + 0.06 * np.sin(2 * np.pi * vib_rate * t + vib_phase))
        phase = 2 * np.pi * np.cumsum(f_inst) / SAMPLE_RATE
        out = np.zeros(n)
        for k in range(1, 7):
            out += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k ** 1.3
        wail = 1.0 + 0.4 * np.sin(2 * np.pi * rng.uniform(1.0, 2.5) * t + rng.uniform(0, 2 * np.pi))
        out *= wail * _attack_release(n, 0.12, 0.20)
    elif class_id == 1:
        out = rng.standard_normal(n) * np.exp(-t / 0.035)
        n_part = rng.integers(3, 6)
        for _ in range(n_part):
            fp = rng.uniform(2500.0, 7000.0)
            tau = rng.uniform(0.10, 0.30)
            amp = rng.uniform(0.2, 0.5)
            ring = np.maximum(np.exp(-t / tau), 0.02)
            out += amp * np.sin(2 * np.pi * fp * t + rng.uniform(0, 2 * np.pi)) * ring
        out *= _attack_release(n, 0.005, 0.10)
    else:
        tau = rng.uniform(0.12, 0.25)
        noise = rng.standard_normal(n)
        # one-pole lowpass weights the blast toward low frequencies
        a = 0.92
        noise = sp_signal.lfilter([1.0 - a], [1.0, -a], noise)
        # decay keeps a faint floor so the tail stays above quantization
        out = noise * np.maximum(np.exp(-t / tau), 0.02)
        n_attack = int(0.010 * SAMPLE_RATE)
        out[:n_attack] += 3.0 * rng.standard_normal(n_attack)
        out *= _attack_release(n, 0.002, 0.05)

    rms = np.sqrt(np.mean(out ** 2))
    return (out / (rms + 1e-12)).astype(np.float32)


def mix_at_ebr(background: np.ndarray, event: np.ndarray, onset_s: float,
               ebr_db: float) -> np.ndarray:
    """Add the event so RMS(event)/RMS(background) over its support is 10^(ebr/20).

    The whole mixture is peak-normalized to 0.9 full scale if it would clip.
    A silent event leaves the background untouched.
    """
    i0 = int(round(onset_s * SAMPLE_RATE))
    if i0 < 0 or i0 + len(event) > len(background):
        raise ParameterError(f"event (onset {onset_s:.3f}s, {len(event)} samples) "
                             f"does not fit in a {len(background)}-sample clip")
    mixed = background.astype(np.float32).copy()
    ev_rms = np.sqrt(np.mean(event.astype(np.float64) ** 2))
    if ev_rms == 0.0:
        return mixed
    bg_rms = np.sqrt(np.mean(background[i0:i0 + len(event)].astype(np.float64) ** 2))
    scale = (10.0 ** (ebr_db / 20.0)) * bg_rms / ev_rms
    mixed[i0:i0 + len(event)] += (scale * event).astype(np.float32)
    peak = np.max(np.abs(mixed))
    if peak >= 1.0:
        mixed *= 0.9 / peak
    return mixed


def clip_rng(master_seed: int, class_id: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([master_seed, class_id, index])))


def synthesize_clip(cfg: SynthConfig, class_id: int, index: int) -> AnnotatedClip:
    """Generate one clip deterministically from (master_seed, class, index)."""
    rng = clip_rng(cfg.master_seed, class_id, index)
    background, distractors = _gen_background_with_meta(cfg.clip_duration_s, rng)
    has_event = rng.random() < cfg.event_presence_prob
    clip_id = f"{CLASS_NAMES[class_id]}_{index:05d}"

    if not has_event:
        peak = np.max(np.abs(background))
        if peak >= 1.0:  # same anti-clipping rule as mixed clips
            background = background * np.float32(0.9 / peak)
        return AnnotatedClip(background, cfg.clip_duration_s, None, None,
                             cfg.master_seed, clip_id, distractors)

    event = gen_event(class_id, rng)
    ev_dur = len(event) / SAMPLE_RATE
    if ev_dur > cfg.clip_duration_s:
        raise ParameterError(f"event duration {ev_dur:.2f}s exceeds clip duration")
    onset_s = rng.uniform(0.0, cfg.clip_duration_s - ev_dur)
    onset_s = int(round(onset_s * SAMPLE_RATE)) / SAMPLE_RATE  # snap to sample grid
    ebr = float(cfg.ebr_set[rng.integers(0, len(cfg.ebr_set))])
    mixed = mix_at_ebr(background, event, onset_s, ebr)
    label = EventLabel(class_id, onset_s, onset_s + len(event) / SAMPLE_RATE)
    return AnnotatedClip(mixed, cfg.clip_duration_s, label, ebr,
                         cfg.master_seed, clip_id, distractors)


def synthesize_corpus(cfg: SynthConfig, class_id: int) -> List[AnnotatedClip]:
    """All clips of one class, in index order (in memory, nothing written)."""
    return [synthesize_clip(cfg, class_id, i) for i in range(cfg.n_clips)]


def write_annotations(path, clips: Sequence[AnnotatedClip]) -> None:
    """TSV ground truth: filename, onset_s, offset_s, class_name.

    Background-only clips get no row, mirroring the usual reference format.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for clip in clips:
            if clip.event is None:
                continue
            fh.write(f"{clip.clip_id}.wav\t{clip.event.onset_s:.6f}\t"
                     f"{clip.event.offset_s:.6f}\t{CLASS_NAMES[clip.event.class_id]}\n")


def read_annotations(path) -> List[Tuple[str, float, float, str]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            name, onset, offset, label = line.split("\t")
            rows.append((name, float(onset), float(offset), label))
    return rows


def synthesize_dataset(cfg: SynthConfig, out_dir) -> List[AnnotatedClip]:
    """Write WAVs and an annotations.tsv for every configured class."""
    os.makedirs(out_dir, exist_ok=True)
    all_clips: List[AnnotatedClip] = []
    for class_id in cfg.classes:
        for i in range(cfg.n_clips):
            clip = synthesize_clip(cfg, class_id, i)
            try:
                write_wav(os.path.join(out_dir, clip.clip_id + ".wav"), clip.samples)
            except OSError as exc:
                raise OSError(f"cannot write {clip.clip_id}.wav under {out_dir}: {exc}") from exc
            all_clips.append(clip)
    write_annotations(os.path.join(out_dir, "annotations.tsv"), all_clips)
    return all_clips
