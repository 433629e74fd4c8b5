"""Waveform and mel-spectrogram primitives shared by every pipeline stage.

All audio is mono 16 kHz float in [-1, 1]. Feature extraction is a plain
windowed STFT followed by a triangular mel filterbank on linear magnitudes;
reconstruction inverts the filterbank with a pseudo-inverse and recovers
phase iteratively.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np
import torch


class AudioError(ValueError):
    """Invalid audio data or parameters."""


class AudioFormatError(AudioError):
    """WAV file does not match the required encoding."""


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    win_length: int = 400
    hop_length: int = 200
    n_fft: int = 512
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.win_length > self.n_fft:
            raise AudioError("win_length must not exceed n_fft")
        if self.hop_length <= 0 or self.win_length <= 0:
            raise AudioError("window and hop must be positive")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise AudioError("mel band must satisfy 0 <= fmin < fmax <= Nyquist")

    @property
    def frame_hop_s(self) -> float:
        return self.hop_length / self.sample_rate

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win_length:
            raise AudioError(
                f"utterance of {n_samples} samples is shorter than one "
                f"analysis window ({self.win_length})"
            )
        return (n_samples - self.win_length) // self.hop_length + 1


@dataclass
class Waveform:
    """Mono audio signal. Samples are dimensionless, nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError("waveform must be 1-D mono")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise AudioError("sample_rate must be positive")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2))) if len(self) else 0.0

    def copy(self) -> "Waveform":
        return Waveform(self.samples.copy(), self.sample_rate)


@dataclass
class MelSpectrogram:
    """Log-mel magnitudes, one row per analysis frame."""

    frames: np.ndarray
    frame_hop_s: float
    n_mels: int
    fmin: float
    fmax: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise AudioError("mel spectrogram must be a T x M matrix with T >= 1")
        if self.frames.shape[1] != self.n_mels:
            raise AudioError("frame width does not match n_mels")
        if not np.all(np.isfinite(self.frames)):
            raise AudioError("mel spectrogram contains non-finite entries")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_centers(cfg: FeatureConfig) -> np.ndarray:
    """Center frequency (Hz) of each triangular mel filter."""
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return pts[1:-1]


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular filterbank, shape (n_mels, n_fft // 2 + 1)."""
    n_bins = cfg.n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        left, center, right = pts[m], pts[m + 1], pts[m + 2]
        up = (bin_hz - left) / max(center - left, 1e-12)
        down = (right - bin_hz) / max(right - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


# Cached per-config tensors so the hot paths do not rebuild them.
_FB_CACHE: dict = {}
_WIN_CACHE: dict = {}


def _fb_tensor(cfg: FeatureConfig, dtype: torch.dtype) -> torch.Tensor:
    key = (cfg, dtype)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = torch.from_numpy(mel_filterbank(cfg)).to(dtype)
    return _FB_CACHE[key]


def _window(cfg: FeatureConfig, dtype: torch.dtype) -> torch.Tensor:
    key = (cfg.win_length, dtype)
    if key not in _WIN_CACHE:
        _WIN_CACHE[key] = torch.hann_window(cfg.win_length, periodic=True, dtype=dtype)
    return _WIN_CACHE[key]


def frame_signal(x: torch.Tensor, cfg: FeatureConfig) -> torch.Tensor:
    """Slice (..., N) into (..., T, win_length) frames without padding."""
    if x.shape[-1] < cfg.win_length:
        raise AudioError("signal shorter than one analysis window")
    return x.unfold(-1, cfg.win_length, cfg.hop_length)


def stft(x: torch.Tensor, cfg: FeatureConfig) -> torch.Tensor:
    """Windowed STFT of (..., N), returns complex (..., T, n_fft // 2 + 1)."""
    frames = frame_signal(x, cfg) * _window(cfg, x.dtype)
    return torch.fft.rfft(frames, n=cfg.n_fft)


def istft(spec: torch.Tensor, cfg: FeatureConfig) -> torch.Tensor:
    """Weighted overlap-add inverse of `stft`; output has (T-1)*hop + win samples."""
    frames = torch.fft.irfft(spec, n=cfg.n_fft)[..., : cfg.win_length]
    win = _window(cfg, frames.dtype)
    frames = frames * win
    t = spec.shape[-2]
    out_len = (t - 1) * cfg.hop_length + cfg.win_length
    shape = spec.shape[:-2] + (out_len,)
    out = torch.zeros(shape, dtype=frames.dtype, device=frames.device)
    norm = torch.zeros(out_len, dtype=frames.dtype, device=frames.device)
    wsq = win * win
    for i in range(t):
        start = i * cfg.hop_length
        out[..., start : start + cfg.win_length] += frames[..., i, :]
        norm[start : start + cfg.win_length] += wsq
    return out / torch.clamp(norm, min=1e-10)


def mel_magnitudes_torch(x: torch.Tensor, cfg: FeatureConfig) -> torch.Tensor:
    """Linear mel magnitudes of (..., N), differentiable, shape (..., T, n_mels)."""
    mag = torch.abs(stft(x, cfg))
    return mag @ _fb_tensor(cfg, mag.dtype).T


def log_mel_torch(x: torch.Tensor, cfg: FeatureConfig) -> torch.Tensor:
    """Log-compressed mel magnitudes with the configured floor, differentiable."""
    return torch.log(torch.clamp(mel_magnitudes_torch(x, cfg), min=cfg.log_floor))


def mel_magnitudes(w: Waveform, cfg: FeatureConfig) -> np.ndarray:
    """Pre-log linear mel magnitudes of a waveform, shape (T, n_mels)."""
    _check_wave(w, cfg)
    with torch.no_grad():
        m = mel_magnitudes_torch(torch.from_numpy(w.samples), cfg)
    return m.numpy()


def extract_mel(w: Waveform, cfg: FeatureConfig) -> MelSpectrogram:
    """Log-mel feature extraction. Pure: identical input gives identical frames."""
    lin = mel_magnitudes(w, cfg)
    frames = np.log(np.maximum(lin, cfg.log_floor))
    return MelSpectrogram(
        frames=frames,
        frame_hop_s=cfg.frame_hop_s,
        n_mels=cfg.n_mels,
        fmin=cfg.fmin,
        fmax=cfg.fmax,
    )


def _check_wave(w: Waveform, cfg: FeatureConfig) -> None:
    if len(w) == 0:
        raise AudioError("empty waveform")
    if w.sample_rate != cfg.sample_rate:
        raise AudioError(
            f"waveform rate {w.sample_rate} does not match config {cfg.sample_rate}"
        )
    cfg.n_frames(len(w))


_PINV_CACHE: dict = {}


def _fb_pinv(cfg: FeatureConfig) -> np.ndarray:
    if cfg not in _PINV_CACHE:
        _PINV_CACHE[cfg] = np.linalg.pinv(mel_filterbank(cfg))
    return _PINV_CACHE[cfg]


def reconstruct_waveform(
    m: MelSpectrogram, cfg: FeatureConfig, n_iters: int = 32, seed: int = 0
) -> Waveform:
    """Mel-to-waveform via pseudo-inverse mel projection and iterative phase recovery.

    A vocoder stand-in: adequate for desk-scale listening and for feeding the
    speaker verifier, not a neural vocoder. Deterministic for a fixed seed.
    """
    if abs(m.frame_hop_s - cfg.frame_hop_s) > 1e-12 or m.n_mels != cfg.n_mels:
        raise AudioError("mel spectrogram does not match the feature config")
    lin_mel = np.exp(m.frames)  # (T, M)
    mag = np.maximum(lin_mel @ _fb_pinv(cfg).T, 0.0)  # (T, F)
    rng = np.random.default_rng(seed)
    phase = rng.uniform(-np.pi, np.pi, size=mag.shape)
    mag_t = torch.from_numpy(mag)
    spec = mag_t * torch.exp(1j * torch.from_numpy(phase))
    with torch.no_grad():
        for _ in range(n_iters):
            x = istft(spec, cfg)
            rebuilt = stft(x, cfg)
            unit = rebuilt / torch.clamp(torch.abs(rebuilt), min=1e-12)
            spec = mag_t * unit
        x = istft(spec, cfg)
    samples = np.clip(x.numpy(), -1.0, 1.0)
    return Waveform(samples, cfg.sample_rate)


def load_wav(path, *, resample: bool = False, target_rate: int = 16000) -> Waveform:
    """Read a RIFF WAV. Without `resample`, only 16-bit PCM mono 16 kHz is accepted."""
    try:
        with wave.open(str(path), "rb") as f:
            n_channels = f.getnchannels()
            sampwidth = f.getsampwidth()
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as e:
        raise AudioFormatError(f"{path}: not a readable WAV file ({e})") from e

    problems = []
    if sampwidth != 2:
        problems.append(f"{8 * sampwidth}-bit samples (need 16-bit PCM)")
    if n_channels != 1:
        problems.append(f"{n_channels} channels (need mono)")
    if rate != target_rate:
        problems.append(f"{rate} Hz (need {target_rate} Hz)")
    if problems and not resample:
        raise AudioFormatError(
            f"{path}: " + ", ".join(problems) + "; pass --resample to convert on load"
        )

    if sampwidth == 2:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif sampwidth == 1:
        x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif sampwidth == 4:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2147483648.0
    else:
        raise AudioFormatError(f"{path}: unsupported sample width {sampwidth}")

    if n_channels > 1:
        x = x.reshape(-1, n_channels).mean(axis=1)
    if rate != target_rate:
        from scipy.signal import resample_poly

        g = np.gcd(rate, target_rate)
        x = resample_poly(x, target_rate // g, rate // g)
    return Waveform(np.clip(x, -1.0, 1.0), target_rate)


def save_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM mono little-endian RIFF."""
    pcm = np.clip(w.samples, -1.0, 1.0)
    pcm = np.round(pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())
