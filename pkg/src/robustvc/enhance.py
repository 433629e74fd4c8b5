"""Speech-enhancement front-end: a common enhancer interface, a trainable
spectral-masking denoiser, subprocess adapters for external enhancers, and
the SI-SDR metric.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import FeatureConfig, Waveform, istft, load_wav, save_wav, stft
from .degrade import AugmentationPolicy, NoiseCorpus, augment
from .manifest import AudioStore, Manifest
from .seeding import rng_for, seed_for


class EnhancerError(RuntimeError):
    """Enhancement failed; never silently passed through."""


DENOISER_VERSION = "robustvc-denoiser-1"
SI_SDR_CAP_DB = 100.0


def si_sdr(estimate: Waveform, reference: Waveform) -> float:
    """Scale-invariant signal-to-distortion ratio in dB.

    Projects the estimate onto the reference and compares projection energy
    to residual energy. Capped at +/-100 dB at the degenerate ends.
    """
    if len(estimate) != len(reference):
        raise EnhancerError("estimate and reference lengths differ")
    ref = reference.samples
    est = estimate.samples
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise EnhancerError("silent reference: SI-SDR undefined")
    scale = float(np.dot(est, ref)) / ref_energy
    target = scale * ref
    signal_energy = float(np.dot(target, target))
    residual = est - target
    residual_energy = float(np.dot(residual, residual))
    if signal_energy == 0.0:
        return -SI_SDR_CAP_DB
    if residual_energy <= 1e-12 * signal_energy:
        return SI_SDR_CAP_DB
    return float(10.0 * np.log10(signal_energy / residual_energy))


class MaskDenoiser(nn.Module):
    """Small convolutional magnitude-mask predictor over STFT frames."""

    def __init__(self, feature_config: FeatureConfig, channels: int = 192):
        super().__init__()
        self.feature_config = feature_config
        self.channels = channels
        n_freq = feature_config.n_fft // 2 + 1
        self.net = nn.Sequential(
            nn.Conv1d(n_freq, channels, 5, padding=2),
            nn.GELU(),
            nn.Conv1d(channels, channels, 5, padding=2),
            nn.GELU(),
            nn.Conv1d(channels, n_freq, 1),
        )

    def mask(self, magnitude: torch.Tensor) -> torch.Tensor:
        """Mask in (0, 1) for magnitudes shaped (B, T, F)."""
        x = ((torch.log(magnitude + 1e-5) + 1.0) / 3.5).transpose(1, 2)
        return torch.sigmoid(self.net(x)).transpose(1, 2)

    def enhance_t(self, wave: torch.Tensor) -> torch.Tensor:
        """Denoise (B, N) waveforms; phase is taken from the input."""
        cfg = self.feature_config
        n = wave.shape[-1]
        pad = cfg.win_length
        padded = F.pad(wave, (pad, pad))
        spec = stft(padded, cfg)
        mag = torch.abs(spec)
        phase = spec / torch.clamp(mag, min=1e-12)
        out = istft(self.mask(mag) * mag * phase, cfg)
        out = out[..., pad : pad + n]
        if out.shape[-1] < n:  # hop remainder at the tail
            out = F.pad(out, (0, n - out.shape[-1]))
        return out


@dataclass
class Enhancer:
    """Preprocessing front-end descriptor. kind selects the backend."""

    kind: str  # identity | builtin_mask | external_adapter
    model: MaskDenoiser | None = None
    command: str | None = None
    timeout_s: float = 30.0

    def __post_init__(self):
        if self.kind not in ("identity", "builtin_mask", "external_adapter"):
            raise EnhancerError(f"unknown enhancer kind {self.kind!r}")
        if self.kind == "builtin_mask" and self.model is None:
            raise EnhancerError("builtin_mask enhancer needs a trained model")
        if self.kind == "external_adapter" and not self.command:
            raise EnhancerError("external_adapter enhancer needs a command template")


def identity_enhancer() -> Enhancer:
    return Enhancer(kind="identity")


def enhance(w: Waveform, e: Enhancer) -> Waveform:
    """Run the enhancer; output always has the input's length and rate."""
    if e.kind == "identity":
        return w
    if e.kind == "builtin_mask":
        with torch.no_grad():
            x = torch.from_numpy(w.samples).to(next(e.model.parameters()).dtype)
            out = e.model.enhance_t(x.unsqueeze(0)).squeeze(0)
        return Waveform(out.double().numpy(), w.sample_rate)
    return _enhance_external(w, e)


def _enhance_external(w: Waveform, e: Enhancer) -> Waveform:
    if "{in}" not in e.command or "{out}" not in e.command:
        raise EnhancerError("external command must contain {in} and {out} placeholders")
    with tempfile.TemporaryDirectory(prefix="robustvc-se-") as tmp:
        in_path = Path(tmp) / "in.wav"
        out_path = Path(tmp) / "out.wav"
        save_wav(in_path, w)
        cmd = shlex.split(e.command.format(**{"in": str(in_path), "out": str(out_path)}))
        try:
            proc = subprocess.run(
                cmd, capture_output=True, text=True, timeout=e.timeout_s
            )
        except subprocess.TimeoutExpired:
            raise EnhancerError(f"external enhancer timed out after {e.timeout_s}s")
        except OSError as err:
            raise EnhancerError(f"external enhancer could not start: {err}") from err
        if proc.returncode != 0:
            raise EnhancerError(
                f"external enhancer exited {proc.returncode}: {proc.stderr.strip()}"
            )
        if not out_path.exists():
            raise EnhancerError("external enhancer produced no output file")
        out = load_wav(out_path, resample=True, target_rate=w.sample_rate)
    samples = out.samples
    if len(samples) < len(w):
        samples = np.pad(samples, (0, len(w) - len(samples)))
    return Waveform(samples[: len(w)], w.sample_rate)


@dataclass
class DenoiserTrainConfig:
    steps: int = 600
    batch_size: int = 8
    learning_rate: float = 1e-3
    crop_seconds: float = 1.5
    channels: int = 192
    seed: int = 0


def _crop(w: Waveform, n: int, rng: np.random.Generator) -> np.ndarray:
    x = w.samples
    if len(x) <= n:
        return np.pad(x, (0, n - len(x)))
    start = int(rng.integers(len(x) - n + 1))
    return x[start : start + n]


def train_denoiser(
    manifest: Manifest,
    policy: AugmentationPolicy,
    cfg: DenoiserTrainConfig,
    corpus: NoiseCorpus,
    feature_config: FeatureConfig | None = None,
) -> Enhancer:
    """Train the builtin magnitude-mask denoiser on policy-degraded crops.

    L1 loss between the masked degraded magnitude and the clean magnitude;
    the clean pairs the policy leaves intact teach near-passthrough behavior.
    The returned enhancer carries the per-step losses in `train_losses`.
    """
    fcfg = feature_config or FeatureConfig()
    torch.manual_seed(seed_for(cfg.seed, "denoiser-init"))
    model = MaskDenoiser(fcfg, channels=cfg.channels)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    store = AudioStore(manifest)
    ids = [u.utterance_id for u in manifest]
    n_crop = int(cfg.crop_seconds * fcfg.sample_rate)
    losses = []
    for step in range(cfg.steps):
        batch_rng = rng_for(cfg.seed, "denoiser", step)
        clean_batch, noisy_batch = [], []
        picks = batch_rng.choice(len(ids), size=cfg.batch_size, replace=True)
        for j, k in enumerate(picks):
            utt_rng = rng_for(cfg.seed, "denoiser", step, int(j))
            clean = Waveform(_crop(store.get(ids[int(k)]), n_crop, utt_rng), fcfg.sample_rate)
            noisy, _ = augment(clean, policy, corpus, utt_rng)
            clean_batch.append(clean.samples)
            noisy_batch.append(noisy.samples)
        clean_t = torch.from_numpy(np.stack(clean_batch)).float()
        noisy_t = torch.from_numpy(np.stack(noisy_batch)).float()
        with torch.no_grad():
            clean_mag = torch.abs(stft(clean_t, fcfg))
        noisy_mag = torch.abs(stft(noisy_t, fcfg))
        loss = torch.mean(torch.abs(model.mask(noisy_mag) * noisy_mag - clean_mag))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    model.eval()
    enhancer = Enhancer(kind="builtin_mask", model=model)
    enhancer.train_losses = losses
    return enhancer


def save_denoiser(e: Enhancer, path, meta: dict | None = None) -> None:
    if e.kind != "builtin_mask":
        raise EnhancerError("only builtin_mask enhancers are checkpointable")
    torch.save(
        {
            "version": DENOISER_VERSION,
            "feature_config": asdict(e.model.feature_config),
            "channels": e.model.channels,
            "state_dict": e.model.state_dict(),
            "meta": dict(meta or {}),
        },
        str(path),
    )


def load_denoiser(path) -> tuple[Enhancer, dict]:
    blob = torch.load(str(path), map_location="cpu", weights_only=False)
    if blob.get("version") != DENOISER_VERSION:
        raise EnhancerError(f"denoiser checkpoint version {blob.get('version')!r} unsupported")
    model = MaskDenoiser(FeatureConfig(**blob["feature_config"]), channels=blob["channels"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return Enhancer(kind="builtin_mask", model=model), blob.get("meta", {})


@dataclass
class ExternalMetric:
    """Optional metric adapter (e.g. PESQ/STOI): subprocess printing one float.

    Command template gets {est} and {ref} WAV paths.
    """

    command: str
    timeout_s: float = 30.0

    def __call__(self, estimate: Waveform, reference: Waveform) -> float:
        with tempfile.TemporaryDirectory(prefix="robustvc-metric-") as tmp:
            est_path = Path(tmp) / "est.wav"
            ref_path = Path(tmp) / "ref.wav"
            save_wav(est_path, estimate)
            save_wav(ref_path, reference)
            cmd = shlex.split(self.command.format(est=str(est_path), ref=str(ref_path)))
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout_s)
            if proc.returncode != 0:
                raise EnhancerError(f"metric adapter exited {proc.returncode}: {proc.stderr.strip()}")
            try:
                return float(proc.stdout.strip().split()[-1])
            except (ValueError, IndexError):
                raise EnhancerError(f"metric adapter output unparseable: {proc.stdout!r}")
