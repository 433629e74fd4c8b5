"""The three waveform degradations and the stochastic augmentation policy.

Order is fixed: additive noise, then reverberation, then band rejection.
Each degraded utterance gets a DegradationSpec that fully determines the
output, so any augmentation draw can be replayed bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, firwin

from .audio import AudioError, Waveform, load_wav


class DegradationError(ValueError):
    """Degradation parameters or inputs are invalid."""


# Synthetic RIR model: unit direct path followed by an exponentially decaying
# white-noise tail. RT60 maps linearly from room_scale; the tail starts at
# this amplitude relative to the direct path.
MAX_RT60_S = 0.8
RIR_TAIL_PAD_S = 0.05
RIR_TAIL_LEVEL = 0.05

BAND_REJECT_TAPS = 4095
_KAISER_BETA = 5.653  # ~60 dB stopband


@dataclass
class AugmentationPolicy:
    """Per-utterance augmentation probabilities and parameter ranges."""

    p_augment: float = 0.6
    snr_choices_db: tuple = (0.0, 5.0, 10.0, 15.0)
    p_reverb: float = 0.5
    p_band_reject: float = 0.5
    room_scale_range: tuple = (0.0, 100.0)
    lower_freq_range_hz: tuple = (100.0, 500.0)
    bandwidth_range_hz: tuple = (50.0, 150.0)
    noise_corpus_id: str = "train"

    def __post_init__(self):
        for p in (self.p_augment, self.p_reverb, self.p_band_reject):
            if not 0.0 <= p <= 1.0:
                raise DegradationError(f"probability {p} outside [0, 1]")
        self.snr_choices_db = tuple(float(s) for s in self.snr_choices_db)

    @classmethod
    def train_default(cls) -> "AugmentationPolicy":
        return cls()

    @classmethod
    def test_default(cls) -> "AugmentationPolicy":
        # Unseen-condition evaluation: every utterance degraded, SNR grid and
        # noise corpus disjoint from training.
        return cls(
            p_augment=1.0,
            snr_choices_db=(2.5, 7.5, 12.5, 17.5),
            noise_corpus_id="test",
        )


@dataclass
class DegradationSpec:
    """Complete record of one augmentation draw; replayable via apply_spec."""

    seed: int = 0
    noise_id: str | None = None
    snr_db: float | None = None
    noise_offset: int = 0
    reverb_applied: bool = False
    room_scale: float | None = None
    reverb_seed: int = 0
    band_reject_applied: bool = False
    lower_freq_hz: float | None = None
    bandwidth_hz: float | None = None

    def __post_init__(self):
        if (self.snr_db is None) != (self.noise_id is None):
            raise DegradationError("snr_db present iff a noise clip is applied")
        if self.reverb_applied != (self.room_scale is not None):
            raise DegradationError("room_scale present iff reverb applied")
        if self.band_reject_applied != (
            self.lower_freq_hz is not None and self.bandwidth_hz is not None
        ):
            raise DegradationError("band fields present iff band rejection applied")

    @property
    def is_degraded(self) -> bool:
        return self.noise_id is not None or self.reverb_applied or self.band_reject_applied

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "DegradationSpec":
        return cls(**json.loads(line))


class NoiseCorpus:
    """Directory of 16 kHz mono WAV noise clips, loaded lazily and cached."""

    def __init__(self, root):
        self.root = Path(root)
        self.ids = sorted(p.stem for p in self.root.glob("*.wav"))
        if not self.ids:
            raise DegradationError(f"no WAV files in noise corpus {self.root}")
        self._cache: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.ids)

    def get(self, noise_id: str) -> np.ndarray:
        if noise_id not in self._cache:
            path = self.root / f"{noise_id}.wav"
            if not path.exists():
                raise DegradationError(f"noise clip {noise_id} missing from {self.root}")
            self._cache[noise_id] = load_wav(path).samples
        return self._cache[noise_id]


def _loop_noise(noise: np.ndarray, length: int, offset: int) -> np.ndarray:
    """Circularly tile/crop the noise to `length` samples starting at `offset`."""
    idx = (offset + np.arange(length)) % len(noise)
    return noise[idx]


def mix_at_snr(
    clean: Waveform, noise: Waveform, snr_db: float, *, offset: int = 0
) -> Waveform:
    """Add noise scaled so the full-utterance power SNR equals snr_db exactly.

    Shorter noise is tiled with a circular offset, longer noise cropped from
    `offset`. Powers are plain mean squares over the whole utterance.
    """
    if clean.sample_rate != noise.sample_rate:
        raise DegradationError("clean and noise sample rates differ")
    p_clean = float(np.mean(clean.samples**2))
    if p_clean == 0.0:
        raise DegradationError("silent clean signal: SNR undefined")
    looped = _loop_noise(noise.samples, len(clean), offset)
    p_noise = float(np.mean(looped**2))
    if p_noise == 0.0:
        raise DegradationError("silent noise signal: SNR undefined")
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(clean.samples + gain * looped, clean.sample_rate)


def make_rir(room_scale: float, sample_rate: int, seed: int = 0) -> np.ndarray:
    """Synthetic room impulse response for the given room scale.

    RT60 = room_scale / 100 * 0.8 s; unit direct path then a white-noise tail
    decaying 60 dB over RT60, padded 50 ms.
    """
    if not 0.0 <= room_scale <= 100.0:
        raise DegradationError(f"room_scale {room_scale} outside [0, 100]")
    if room_scale == 0.0:
        return np.array([1.0])
    rt60 = room_scale / 100.0 * MAX_RT60_S
    n_tail = int(round((rt60 + RIR_TAIL_PAD_S) * sample_rate))
    t = np.arange(1, n_tail + 1) / sample_rate
    decay = np.exp(-3.0 * np.log(10.0) * t / rt60)
    rng = np.random.default_rng(seed)
    tail = RIR_TAIL_LEVEL * decay * rng.standard_normal(n_tail)
    return np.concatenate(([1.0], tail))


def direct_to_reverberant_db(rir: np.ndarray) -> float:
    """Energy ratio of the direct path to the tail, in dB."""
    tail_energy = float(np.sum(rir[1:] ** 2))
    if tail_energy == 0.0:
        return np.inf
    return 10.0 * np.log10(rir[0] ** 2 / tail_energy)


def apply_reverb(w: Waveform, room_scale: float, *, seed: int = 0) -> Waveform:
    """Convolve with a synthetic RIR; room_scale 0 is an exact identity."""
    rir = make_rir(room_scale, w.sample_rate, seed)
    if len(rir) == 1:
        return w.copy()
    out = fftconvolve(w.samples, rir)[: len(w)]
    return Waveform(out, w.sample_rate)


def band_reject_taps(
    lower_freq_hz: float, bandwidth_hz: float, sample_rate: int
) -> np.ndarray:
    """Linear-phase FIR band-stop taps for [lower, lower + bandwidth] Hz."""
    upper = lower_freq_hz + bandwidth_hz
    if lower_freq_hz <= 0 or bandwidth_hz <= 0:
        raise DegradationError("band edges must be positive")
    if upper >= sample_rate / 2:
        raise DegradationError(
            f"stop band up to {upper} Hz exceeds Nyquist ({sample_rate / 2} Hz)"
        )
    return firwin(
        BAND_REJECT_TAPS,
        [lower_freq_hz, upper],
        window=("kaiser", _KAISER_BETA),
        pass_zero=True,
        fs=sample_rate,
    )


def apply_band_reject(w: Waveform, lower_freq_hz: float, bandwidth_hz: float) -> Waveform:
    """Notch out [lower, lower + bandwidth] Hz with a linear-phase FIR filter."""
    taps = band_reject_taps(lower_freq_hz, bandwidth_hz, w.sample_rate)
    delay = (len(taps) - 1) // 2
    out = fftconvolve(w.samples, taps)[delay : delay + len(w)]
    return Waveform(out, w.sample_rate)


def augment(
    w: Waveform,
    policy: AugmentationPolicy,
    corpus: NoiseCorpus | None,
    rng: np.random.Generator,
    seed: int = 0,
) -> tuple[Waveform, DegradationSpec]:
    """Randomly degrade one utterance per the policy.

    With probability p_augment: always noise, then reverb and band rejection
    with their own coin flips, in that order; otherwise the input is returned
    intact. The returned spec records every sampled value. The output of a
    degraded draw is clipped to [-1, 1] once, after the whole chain.
    """
    if rng.random() >= policy.p_augment:
        return w, DegradationSpec(seed=seed)

    if corpus is None or len(corpus) == 0:
        raise DegradationError("augmentation fired but the noise corpus is empty")

    noise_id = corpus.ids[int(rng.integers(len(corpus)))]
    noise = corpus.get(noise_id)
    snr_db = float(policy.snr_choices_db[int(rng.integers(len(policy.snr_choices_db)))])
    offset = int(rng.integers(len(noise)))

    reverb_applied = bool(rng.random() < policy.p_reverb)
    room_scale = float(rng.uniform(*policy.room_scale_range)) if reverb_applied else None
    reverb_seed = int(rng.integers(2**31)) if reverb_applied else 0

    band_applied = bool(rng.random() < policy.p_band_reject)
    lower = float(rng.uniform(*policy.lower_freq_range_hz)) if band_applied else None
    bandwidth = float(rng.uniform(*policy.bandwidth_range_hz)) if band_applied else None

    spec = DegradationSpec(
        seed=seed,
        noise_id=noise_id,
        snr_db=snr_db,
        noise_offset=offset,
        reverb_applied=reverb_applied,
        room_scale=room_scale,
        reverb_seed=reverb_seed,
        band_reject_applied=band_applied,
        lower_freq_hz=lower,
        bandwidth_hz=bandwidth,
    )
    return apply_spec(w, spec, corpus), spec


def apply_spec(w: Waveform, spec: DegradationSpec, corpus: NoiseCorpus | None) -> Waveform:
    """Replay a recorded degradation chain; the spec is a complete witness."""
    if not spec.is_degraded:
        return w
    out = w
    if spec.noise_id is not None:
        if corpus is None:
            raise DegradationError("spec references a noise clip but no corpus given")
        noise = Waveform(corpus.get(spec.noise_id), w.sample_rate)
        out = mix_at_snr(out, noise, spec.snr_db, offset=spec.noise_offset)
    if spec.reverb_applied:
        out = apply_reverb(out, spec.room_scale, seed=spec.reverb_seed)
    if spec.band_reject_applied:
        out = apply_band_reject(out, spec.lower_freq_hz, spec.bandwidth_hz)
    return Waveform(np.clip(out.samples, -1.0, 1.0), out.sample_rate)


def check_disjoint(train: AugmentationPolicy, test: AugmentationPolicy) -> None:
    """Unseen-condition guarantee: train/test SNR grids must not overlap."""
    overlap = set(train.snr_choices_db) & set(test.snr_choices_db)
    if overlap:
        raise DegradationError(f"train and test SNR sets overlap: {sorted(overlap)}")
    if train.noise_corpus_id == test.noise_corpus_id:
        raise DegradationError("train and test noise corpora must differ")
