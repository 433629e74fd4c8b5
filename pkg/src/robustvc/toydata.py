"""Synthetic desk-scale corpus: formant-style speakers, vowel-sequence
utterances, and two disjoint families of noise clips.

Speaker identity lives in pitch, vocal-tract scale, spectral tilt, and the
upper resonances; content is the vowel (F1/F2) sequence. That separation is
what lets a small encoder-decoder model learn any-to-any conversion on CPU.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import Waveform, save_wav
from .manifest import Manifest, prepare_manifest

SAMPLE_RATE = 16000
UTTERANCE_RMS = 0.18

VOWELS = {
    "a": (730.0, 1090.0),
    "e": (530.0, 1840.0),
    "i": (270.0, 2290.0),
    "o": (570.0, 840.0),
    "u": (300.0, 870.0),
    "y": (660.0, 1720.0),
}
FORMANT_BANDWIDTHS = (90.0, 110.0, 160.0, 200.0)


@dataclass(frozen=True)
class ToySpeaker:
    """Identity is carried only by global spectral-envelope properties.

    Pitch, vibrato, and rhythm are drawn per utterance independent of the
    speaker, so vocal timbre is exactly the thing an envelope-transferring
    conversion model can change and a verifier can test.
    """

    speaker_id: str
    tract_scale: float
    tilt: float
    f3_hz: float
    f3_level: float
    f4_hz: float
    f4_level: float
    notch_hz: float
    notch_depth: float
    breathiness: float


def make_speakers(prefix: str, n: int, rng: np.random.Generator) -> list:
    """Speakers stratified over the strongest envelope dimensions."""
    tilt_grid = np.linspace(0.5, 1.8, n) + rng.uniform(-0.03, 0.03, n)
    scale_grid = rng.permutation(np.linspace(0.85, 1.18, n)) + rng.uniform(-0.005, 0.005, n)
    notch_grid = rng.permutation(np.linspace(800.0, 1700.0, n)) + rng.uniform(-20.0, 20.0, n)
    f3_grid = rng.permutation(np.linspace(2200.0, 3500.0, n)) + rng.uniform(-30.0, 30.0, n)
    speakers = []
    for i in range(n):
        speakers.append(
            ToySpeaker(
                speaker_id=f"{prefix}{i:02d}",
                tract_scale=float(scale_grid[i]),
                tilt=float(tilt_grid[i]),
                f3_hz=float(f3_grid[i]),
                f3_level=float(rng.uniform(0.15, 0.7)),
                f4_hz=float(rng.uniform(3700.0, 4800.0)),
                f4_level=float(rng.uniform(0.1, 0.5)),
                notch_hz=float(notch_grid[i]),
                notch_depth=float(rng.uniform(0.4, 0.85)),
                breathiness=float(rng.uniform(0.2, 2.0)),
            )
        )
    return speakers


def _resonance_gain(f: np.ndarray, center: float, bandwidth: float) -> np.ndarray:
    # Second-order resonance magnitude, unity at the center frequency.
    return (center * bandwidth) / np.sqrt(
        (f**2 - center**2) ** 2 + (bandwidth * f) ** 2
    )


def _segment(
    speaker: ToySpeaker,
    vowel: str,
    f0: float,
    vibrato: tuple,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    n_harm = max(3, int(7600.0 / f0))
    k = np.arange(1, n_harm + 1)
    freqs = k * f0
    f1, f2 = VOWELS[vowel]
    # Parallel formant mixing keeps the speaker-specific upper resonances
    # within ~15 dB of the vowel formants instead of burying them.
    centers = (
        f1 * speaker.tract_scale,
        f2 * speaker.tract_scale,
        speaker.f3_hz * speaker.tract_scale,
        speaker.f4_hz,
    )
    levels = (1.0, 0.6, speaker.f3_level, speaker.f4_level)
    gain = np.zeros_like(freqs)
    for c, bw, lvl in zip(centers, FORMANT_BANDWIDTHS, levels):
        gain = gain + lvl * _resonance_gain(freqs, c, bw)
    gain = gain * (1.0 - speaker.notch_depth * _resonance_gain(freqs, speaker.notch_hz, 220.0))
    amps = k.astype(np.float64) ** (-speaker.tilt) * np.maximum(gain, 1e-6)
    # Utterance-level vibrato: phase integral of f0 * (1 + d sin(2 pi r t)).
    depth, rate = vibrato
    vib = -depth / (2.0 * np.pi * rate) * np.cos(2.0 * np.pi * rate * t)
    base_phase = 2.0 * np.pi * (t + vib)
    phases = rng.uniform(0.0, 2.0 * np.pi, n_harm)
    sig = (amps[:, None] * np.sin(freqs[:, None] * base_phase[None, :] + phases[:, None])).sum(axis=0)
    sig += 0.006 * speaker.breathiness * np.sqrt(np.mean(sig**2)) / 0.1 * rng.standard_normal(n)
    edge = min(int(0.015 * SAMPLE_RATE), n // 2)
    env = np.ones(n)
    ramp = 0.5 * (1.0 - np.cos(np.linspace(0.0, np.pi, edge)))
    env[:edge] = ramp
    env[-edge:] = ramp[::-1]
    return sig * env


def synth_utterance(speaker: ToySpeaker, rng: np.random.Generator) -> Waveform:
    """One vowel-sequence utterance, about 1.1-2.0 s, RMS-normalized.

    Pitch base, vibrato, vowel order, and timing are utterance-level draws,
    deliberately independent of the speaker.
    """
    n_seg = int(rng.integers(5, 9))
    f0_base = float(rng.uniform(120.0, 230.0))
    vibrato = (float(rng.uniform(0.0, 0.012)), float(rng.uniform(4.0, 7.0)))
    vowel_keys = list(VOWELS)
    pieces = [np.zeros(int(rng.uniform(0.02, 0.04) * SAMPLE_RATE))]
    for s in range(n_seg):
        vowel = vowel_keys[int(rng.integers(len(vowel_keys)))]
        dur = float(rng.uniform(0.14, 0.24))
        declination = 1.04 - 0.08 * s / max(n_seg - 1, 1)
        f0 = f0_base * declination * float(rng.uniform(0.99, 1.01))
        pieces.append(_segment(speaker, vowel, f0, vibrato, int(dur * SAMPLE_RATE), rng))
        pieces.append(np.zeros(int(rng.uniform(0.02, 0.05) * SAMPLE_RATE)))
    x = np.concatenate(pieces)
    x = x * (UTTERANCE_RMS / max(np.sqrt(np.mean(x**2)), 1e-9))
    return Waveform(np.clip(x, -1.0, 1.0), SAMPLE_RATE)


def _pink(n: int, rng: np.random.Generator, exponent: float = 0.5) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.maximum(np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE), 1.0)
    return np.fft.irfft(spec / f**exponent, n=n)


def _noise_clip(family: str, n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    if family == "white":
        x = rng.standard_normal(n)
    elif family == "pink":
        x = _pink(n, rng)
    elif family == "hum":
        x = sum(a * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
                for f, a in ((50.0, 1.0), (100.0, 0.6), (150.0, 0.35)))
        x = x + 0.25 * rng.standard_normal(n)
    elif family == "bursts":
        x = rng.standard_normal(n)
        env = np.zeros(n)
        pos = 0
        while pos < n:
            on = int(rng.uniform(0.08, 0.3) * SAMPLE_RATE)
            off = int(rng.uniform(0.05, 0.2) * SAMPLE_RATE)
            env[pos : pos + on] = 1.0
            pos += on + off
        x = x * (0.15 + env)
    elif family == "brown":
        x = _pink(n, rng, exponent=1.0)
    elif family == "highpass":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
        spec[f < 1800.0] *= 0.02
        x = np.fft.irfft(spec, n=n)
    elif family == "am_pink":
        x = _pink(n, rng) * (1.0 + 0.8 * np.sin(2 * np.pi * 3.0 * t))
    else:
        raise ValueError(f"unknown noise family {family!r}")
    return 0.1 * x / max(np.sqrt(np.mean(x**2)), 1e-9)


TRAIN_NOISE_FAMILIES = ("white", "pink", "hum", "bursts")
TEST_NOISE_FAMILIES = ("brown", "highpass", "am_pink")


def build_noise_corpus(out_dir, families, clips_per_family: int, rng: np.random.Generator) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for family in families:
        for i in range(clips_per_family):
            n = int(rng.uniform(4.0, 8.0) * SAMPLE_RATE)
            save_wav(out_dir / f"{family}{i:02d}.wav", Waveform(np.clip(_noise_clip(family, n, rng), -1, 1), SAMPLE_RATE))


def build_toy_corpus(
    root,
    n_train_speakers: int = 12,
    n_eval_speakers: int = 8,
    utts_per_train_speaker: int = 50,
    utts_per_eval_speaker: int = 12,
    clips_per_noise_family: int = 3,
    seed: int = 0,
) -> dict:
    """Write the full desk-scale dataset tree and its manifests.

    Layout: <root>/{train,eval}/<speaker>/<utt>.wav plus noise_train/ and
    noise_test/ with disjoint noise families. Returns the key paths.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    splits = {
        "train": make_speakers("trn", n_train_speakers, rng),
        "eval": make_speakers("evl", n_eval_speakers, rng),
    }
    counts = {"train": utts_per_train_speaker, "eval": utts_per_eval_speaker}
    for split_idx, (split, speakers) in enumerate(splits.items()):
        for spk in speakers:
            spk_dir = root / split / spk.speaker_id
            spk_dir.mkdir(parents=True, exist_ok=True)
            for u in range(counts[split]):
                utt_rng = np.random.default_rng(
                    np.random.SeedSequence([seed, split_idx, int(spk.speaker_id[3:]), u])
                )
                save_wav(spk_dir / f"u{u:03d}.wav", synth_utterance(spk, utt_rng))
    build_noise_corpus(root / "noise_train", TRAIN_NOISE_FAMILIES, clips_per_noise_family, rng)
    build_noise_corpus(root / "noise_test", TEST_NOISE_FAMILIES, clips_per_noise_family, rng)

    paths = {
        "train_dir": root / "train",
        "eval_dir": root / "eval",
        "noise_train_dir": root / "noise_train",
        "noise_test_dir": root / "noise_test",
        "train_manifest": root / "train_manifest.tsv",
        "eval_manifest": root / "eval_manifest.tsv",
    }
    prepare_manifest(paths["train_dir"], paths["train_manifest"])
    prepare_manifest(paths["eval_dir"], paths["eval_manifest"])
    return paths
