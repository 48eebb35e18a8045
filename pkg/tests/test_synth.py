"""Synthetic corpus generator: determinism, labels, EBR, and file output.

The key oracle regenerates a clip's background from the same seed stream and
inspects the residual (mixture minus background): its support must coincide
with the annotated event range, and its energy ratio against the background
must reproduce the requested EBR.
"""

import numpy as np
import pytest

from attnsed.audio_io import read_wav
from attnsed.errors import ParameterError
from attnsed.synth import (BACKGROUND_RMS, CLASS_IDS, CLASS_NAMES,
                           EVENT_DURATION, SAMPLE_RATE, SynthConfig,
                           _gen_background_with_meta, clip_rng, gen_background,
                           gen_event, mix_at_ebr, read_annotations,
                           synthesize_clip, synthesize_corpus,
                           synthesize_dataset, write_annotations)


def split_residual(cfg: SynthConfig, class_id: int, index: int):
    """(clip, event-only residual, scale applied to the background)."""
    clip = synthesize_clip(cfg, class_id, index)
    rng = clip_rng(cfg.master_seed, class_id, index)
    background, _ = _gen_background_with_meta(cfg.clip_duration_s, rng)
    mixed = clip.samples.astype(np.float64)
    bg = background.astype(np.float64)
    if clip.event is None:
        return clip, None, None
    # anti-clipping may rescale the whole mixture; estimate that factor from
    # the event-free region where mixed = alpha * background exactly
    i0 = int(round(clip.event.onset_s * SAMPLE_RATE))
    i1 = int(round(clip.event.offset_s * SAMPLE_RATE))
    outside = np.ones(len(bg), dtype=bool)
    outside[i0:i1] = False
    ratio = mixed[outside] / np.where(bg[outside] == 0.0, 1.0, bg[outside])
    alpha = float(np.median(ratio))
    return clip, mixed - alpha * bg, alpha


# -- determinism -----------------------------------------------------------------

def test_clip_regenerates_bit_identically():
    cfg = SynthConfig(n_clips=4, master_seed=7, event_presence_prob=1.0)
    a = synthesize_clip(cfg, 0, 2)
    b = synthesize_clip(cfg, 0, 2)
    assert np.array_equal(a.samples, b.samples)
    assert a.event is not None and b.event is not None
    assert (a.event.onset_s, a.event.offset_s) == (b.event.onset_s, b.event.offset_s)
    assert a.ebr_db == b.ebr_db


def test_generation_order_does_not_matter():
    cfg = SynthConfig(n_clips=3, master_seed=9)
    alone = synthesize_clip(cfg, 1, 2)
    in_order = synthesize_corpus(cfg, 1)[2]
    assert np.array_equal(alone.samples, in_order.samples)


def test_different_seeds_differ():
    a = synthesize_clip(SynthConfig(n_clips=1, master_seed=1), 0, 0)
    b = synthesize_clip(SynthConfig(n_clips=1, master_seed=2), 0, 0)
    assert not np.array_equal(a.samples, b.samples)


def test_clip_id_format():
    clip = synthesize_clip(SynthConfig(n_clips=1, master_seed=0), 2, 7)
    assert clip.clip_id == "gunshot_00007"


# -- event waveforms ----------------------------------------------------------------

@pytest.mark.parametrize("class_id", [0, 1, 2])
def test_event_has_unit_rms_and_legal_duration(class_id):
    rng = np.random.default_rng(13)
    for _ in range(5):
        ev = gen_event(class_id, rng)
        rms = np.sqrt(np.mean(ev.astype(np.float64) ** 2))
        np.testing.assert_allclose(rms, 1.0, atol=1e-4)
        _, _, lo, hi = EVENT_DURATION[class_id]
        assert lo <= len(ev) / SAMPLE_RATE <= hi


def test_event_mean_durations_near_targets():
    rng = np.random.default_rng(21)
    for class_id, (mean, _, _, _) in EVENT_DURATION.items():
        durations = [len(gen_event(class_id, rng)) / SAMPLE_RATE for _ in range(40)]
        assert abs(np.mean(durations) - mean) < 0.25


def test_babycry_duration_mean_over_many_draws():
    rng = np.random.default_rng(21)
    durations = [len(gen_event(0, rng)) / SAMPLE_RATE for _ in range(1000)]
    assert abs(np.mean(durations) - 2.25) < 0.05


def test_gen_event_rejects_unknown_class():
    with pytest.raises(ParameterError):
        gen_event(5, np.random.default_rng(0))


def test_gunshot_energy_is_front_loaded():
    rng = np.random.default_rng(3)
    ev = gen_event(2, rng).astype(np.float64)
    half = len(ev) // 2
    front = np.sum(ev[:half] ** 2)
    assert front / np.sum(ev ** 2) > 0.9


# -- background ----------------------------------------------------------------------

def test_background_rms_and_peak():
    bg = gen_background(5.0, np.random.default_rng(4)).astype(np.float64)
    rms = np.sqrt(np.mean(bg ** 2))
    assert 0.5 * BACKGROUND_RMS < rms < 3.0 * BACKGROUND_RMS
    assert np.max(np.abs(bg)) < 1.0


def test_background_spectrum_falls_like_pink_noise():
    from scipy import signal
    bg = gen_background(10.0, np.random.default_rng(8)).astype(np.float64)
    freqs, power = signal.welch(bg, fs=SAMPLE_RATE, nperseg=8192)
    band = (freqs >= 100.0) & (freqs <= 10000.0)
    slope = np.polyfit(np.log2(freqs[band]), 10.0 * np.log10(power[band]), 1)[0]
    assert abs(slope - (-3.0)) < 1.5  # dB per octave


def test_background_rejects_nonpositive_duration():
    with pytest.raises(ParameterError):
        gen_background(0.0, np.random.default_rng(0))


# -- mixing -------------------------------------------------------------------------

def test_mix_at_ebr_hits_requested_ratio():
    rng = np.random.default_rng(5)
    bg = gen_background(6.0, rng)
    ev = gen_event(0, rng)
    for ebr in (-6.0, 0.0, 6.0):
        mixed = mix_at_ebr(bg, ev, 1.0, ebr)
        i0 = SAMPLE_RATE
        res = mixed.astype(np.float64) - bg.astype(np.float64)
        seg = slice(i0, i0 + len(ev))
        got = np.sqrt(np.mean(res[seg] ** 2)) / np.sqrt(np.mean(bg[seg].astype(np.float64) ** 2))
        np.testing.assert_allclose(got, 10.0 ** (ebr / 20.0), rtol=0.02)


def test_mix_rejects_event_outside_clip():
    bg = np.zeros(SAMPLE_RATE, dtype=np.float32)
    ev = np.ones(SAMPLE_RATE // 2, dtype=np.float32)
    with pytest.raises(ParameterError):
        mix_at_ebr(bg, ev, 0.8, 0.0)


def test_silent_event_leaves_background_unchanged():
    bg = gen_background(2.0, np.random.default_rng(7))
    mixed = mix_at_ebr(bg, np.zeros(SAMPLE_RATE, dtype=np.float32), 0.5, 0.0)
    assert np.array_equal(mixed, bg.astype(np.float32))


def test_mix_never_clips():
    rng = np.random.default_rng(6)
    bg = gen_background(3.0, rng)
    ev = gen_event(2, rng)
    mixed = mix_at_ebr(bg, ev, 0.5, 24.0)  # extreme EBR forces rescaling
    assert np.max(np.abs(mixed)) <= 0.9 + 1e-6


# -- annotation alignment (the load-bearing oracle) -------------------------------------

@pytest.mark.parametrize("master_seed", [5, 11])
def test_annotations_bound_the_injected_energy(master_seed):
    cfg = SynthConfig(n_clips=7, clip_duration_s=10.0, ebr_set=(-6.0, 0.0, 6.0),
                      master_seed=master_seed)
    checked = 0
    for class_id in (0, 1, 2):
        for i in range(cfg.n_clips):
            clip, residual, _ = split_residual(cfg, class_id, i)
            if clip.event is None:
                continue
            support = np.nonzero(np.abs(residual) > 1e-6)[0]
            assert support.size > 0
            i0 = int(round(clip.event.onset_s * SAMPLE_RATE))
            i1 = int(round(clip.event.offset_s * SAMPLE_RATE))
            assert abs(int(support[0]) - i0) <= 1, clip.clip_id
            assert abs(int(support[-1]) - (i1 - 1)) <= 1, clip.clip_id
            checked += 1
    assert checked >= 15  # presence prob 0.9 makes all-background runs astronomically rare


def test_clip_ebr_reproduces_in_residual():
    cfg = SynthConfig(n_clips=6, master_seed=17, ebr_set=(-6.0,))
    rng = clip_rng(cfg.master_seed, 0, 0)
    for i in range(cfg.n_clips):
        clip, residual, alpha = split_residual(cfg, 0, i)
        if clip.event is None:
            continue
        i0 = int(round(clip.event.onset_s * SAMPLE_RATE))
        i1 = int(round(clip.event.offset_s * SAMPLE_RATE))
        bg_rms = np.sqrt(np.mean((clip.samples.astype(np.float64)[i0:i1]
                                  - residual[i0:i1]) ** 2))
        ev_rms = np.sqrt(np.mean(residual[i0:i1] ** 2))
        np.testing.assert_allclose(ev_rms / bg_rms, 10.0 ** (-6.0 / 20.0), rtol=0.03)


# -- presence probability ---------------------------------------------------------------

def test_presence_probability_binomial_count():
    cfg = SynthConfig(n_clips=1000, clip_duration_s=3.0, master_seed=31)
    n_ev = sum(synthesize_clip(cfg, 1, i).event is not None for i in range(1000))
    assert 870 <= n_ev <= 930


def test_presence_probability_extremes():
    always = SynthConfig(n_clips=10, clip_duration_s=6.0,
                         event_presence_prob=1.0, master_seed=3)
    never = SynthConfig(n_clips=10, clip_duration_s=6.0,
                        event_presence_prob=0.0, master_seed=3)
    assert all(synthesize_clip(always, 0, i).event is not None for i in range(10))
    assert all(synthesize_clip(never, 0, i).event is None for i in range(10))


def test_event_fits_inside_clip():
    cfg = SynthConfig(n_clips=12, clip_duration_s=5.0, event_presence_prob=1.0,
                      master_seed=23)
    for i in range(cfg.n_clips):
        clip = synthesize_clip(cfg, 0, i)
        assert 0.0 <= clip.event.onset_s < clip.event.offset_s <= cfg.clip_duration_s


# -- config validation --------------------------------------------------------------------

def test_synth_config_validation():
    with pytest.raises(ParameterError):
        SynthConfig(n_clips=0)
    with pytest.raises(ParameterError):
        SynthConfig(event_presence_prob=1.5)
    with pytest.raises(ParameterError):
        SynthConfig(clip_duration_s=-1.0)


# -- annotations and dataset files -----------------------------------------------------------

def test_annotations_round_trip(tmp_path):
    cfg = SynthConfig(n_clips=5, clip_duration_s=6.0, master_seed=2)
    clips = synthesize_corpus(cfg, 1)
    path = tmp_path / "annotations.tsv"
    write_annotations(path, clips)
    rows = read_annotations(path)
    with_events = [c for c in clips if c.event is not None]
    assert len(rows) == len(with_events)
    for row, clip in zip(rows, with_events):
        assert row[0] == clip.clip_id + ".wav"
        assert row[3] == CLASS_NAMES[clip.event.class_id]
        np.testing.assert_allclose(row[1], clip.event.onset_s, atol=1e-6)
        np.testing.assert_allclose(row[2], clip.event.offset_s, atol=1e-6)


def test_synthesize_dataset_writes_wavs(tmp_path):
    cfg = SynthConfig(n_clips=2, clip_duration_s=3.0, master_seed=1, classes=(0, 2))
    clips = synthesize_dataset(cfg, tmp_path)
    assert len(clips) == 4
    wavs = sorted(p.name for p in tmp_path.glob("*.wav"))
    assert wavs == ["babycry_00000.wav", "babycry_00001.wav",
                    "gunshot_00000.wav", "gunshot_00001.wav"]
    samples, rate = read_wav(tmp_path / "babycry_00000.wav")
    assert rate == SAMPLE_RATE
    # 16-bit quantization is the only loss
    np.testing.assert_allclose(samples, clips[0].samples, atol=1.0 / 32767)
    assert (tmp_path / "annotations.tsv").exists()


def test_class_tables_are_consistent():
    assert CLASS_NAMES == {0: "babycry", 1: "glassbreak", 2: "gunshot"}
    assert all(CLASS_IDS[name] == cid for cid, name in CLASS_NAMES.items())
