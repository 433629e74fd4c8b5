"""Any-to-any voice conversion model.

Encoder-decoder with instance-normalized content encoding and adaptive
instance normalization for speaker conditioning: the content encoder strips
per-channel global statistics, the speaker encoder pools them into a single
vector, and the decoder reinjects them. Deterministic autoencoder (no
variational term), sized for CPU training on toy corpora.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import FeatureConfig, MelSpectrogram, Waveform, log_mel_torch


class ModelError(ValueError):
    """Invalid model input or configuration."""


class CheckpointError(RuntimeError):
    """Checkpoint missing, corrupt, or from an incompatible version."""


CHECKPOINT_VERSION = "robustvc-vc-1"
MIN_SPEAKER_FRAMES = 8

# Affine map keeping log-mel features (silence floor ~ -23, speech ~ +3) in a
# range the convs train well on; the decoder inverts it on the way out.
MEL_NORM_OFFSET = 4.0
MEL_NORM_SCALE = 5.0


def normalize_mel(x):
    return (x + MEL_NORM_OFFSET) / MEL_NORM_SCALE


def denormalize_mel(x):
    return x * MEL_NORM_SCALE - MEL_NORM_OFFSET


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 80
    content_dim: int = 8
    speaker_dim: int = 128
    channels: int = 128
    downsample: int = 4
    content_noise_std: float = 0.3

    def __post_init__(self):
        if self.downsample != 4:
            raise ModelError("architecture is built for downsample factor 4")


@dataclass
class ContentCode:
    """Time-downsampled linguistic representation, (T', content_dim)."""

    codes: np.ndarray
    n_source_frames: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.codes)):
            raise ModelError("content code contains non-finite values")


@dataclass
class SpeakerCode:
    """One timbre vector per utterance."""

    vector: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise ModelError("speaker code contains non-finite values")


class ContentEncoder(nn.Module):
    """Strided conv stack; instance norm after every conv keeps the code
    free of per-channel global statistics. Reflect padding so a constant
    per-channel input offset is removed exactly by the first norm."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.channels
        # Only the input conv needs reflect padding: a constant per-channel
        # offset then survives the conv as a constant and is removed exactly
        # by the first norm, so later layers can pad with zeros.
        self.convs = nn.ModuleList(
            [
                nn.Conv1d(cfg.n_mels, ch, 5, padding=2, padding_mode="reflect"),
                nn.Conv1d(ch, ch, 5, stride=2, padding=2),
                nn.Conv1d(ch, ch, 5, stride=2, padding=2),
                nn.Conv1d(ch, cfg.content_dim, 5, padding=2),
            ]
        )
        # Small eps keeps the normalized-variance contract tight even for
        # low-variance channels.
        self.norms = nn.ModuleList(
            [nn.InstanceNorm1d(c.out_channels, affine=False, eps=1e-8) for c in self.convs]
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, n_mels, T) -> (B, content_dim, ceil(T / 4)); the last op is a
        # plain instance norm, so the code itself is per-channel standardized.
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            x = norm(conv(x))
            if i < len(self.convs) - 1:
                x = F.gelu(x)
        return x


class SpeakerEncoder(nn.Module):
    """Circular convs with mean+std pooling over time, so the embedding is
    exactly invariant to circular shifts of the input by whole frames."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.channels
        self.convs = nn.ModuleList(
            [
                nn.Conv1d(cfg.n_mels, ch, 5, padding=2, padding_mode="circular"),
                nn.Conv1d(ch, ch, 5, padding=2, padding_mode="circular"),
                nn.Conv1d(ch, ch, 5, padding=2, padding_mode="circular"),
            ]
        )
        self.proj = nn.Linear(2 * ch, cfg.speaker_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] < MIN_SPEAKER_FRAMES:
            raise ModelError(
                f"speaker encoder needs >= {MIN_SPEAKER_FRAMES} frames, got {x.shape[-1]}"
            )
        for conv in self.convs:
            x = F.gelu(conv(x))
        mean = x.mean(dim=-1)
        std = torch.sqrt(x.var(dim=-1, unbiased=False) + 1e-8)
        return self.proj(torch.cat([mean, std], dim=-1))


class AdaIN1d(nn.Module):
    def __init__(self, channels: int, speaker_dim: int):
        super().__init__()
        self.norm = nn.InstanceNorm1d(channels, affine=False, eps=1e-8)
        self.affine = nn.Linear(speaker_dim, 2 * channels)

    def forward(self, x: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.affine(s).chunk(2, dim=-1)
        return self.norm(x) * (1.0 + gamma.unsqueeze(-1)) + beta.unsqueeze(-1)


class Decoder(nn.Module):
    """Upsamples the content code back to the source frame rate; speaker
    statistics enter through AdaIN at every layer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ch = cfg.channels
        self.convs = nn.ModuleList(
            [
                nn.Conv1d(cfg.content_dim, ch, 5, padding=2),
                nn.Conv1d(ch, ch, 5, padding=2),
                nn.Conv1d(ch, ch, 5, padding=2),
            ]
        )
        self.adains = nn.ModuleList([AdaIN1d(ch, cfg.speaker_dim) for _ in self.convs])
        self.out = nn.Conv1d(ch, cfg.n_mels, 5, padding=2)

    def forward(self, code: torch.Tensor, s: torch.Tensor, n_frames: int) -> torch.Tensor:
        x = code
        for i, (conv, adain) in enumerate(zip(self.convs, self.adains)):
            x = F.gelu(adain(conv(x), s))
            if i < 2:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.out(x)
        if x.shape[-1] < n_frames:
            raise ModelError("decoder produced fewer frames than requested")
        return x[..., :n_frames]


class VCModel(nn.Module):
    """Content encoder + speaker encoder + decoder, with the feature config
    they were trained for embedded so checkpoints are self-describing."""

    def __init__(self, model_config: ModelConfig, feature_config: FeatureConfig):
        super().__init__()
        self.model_config = model_config
        self.feature_config = feature_config
        self.content_encoder = ContentEncoder(model_config)
        self.speaker_encoder = SpeakerEncoder(model_config)
        self.decoder = Decoder(model_config)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # Tensor API. Mels are raw log-mels shaped (B, T, n_mels); normalization
    # and channel-first layout are internal.

    def content_t(self, mel: torch.Tensor) -> torch.Tensor:
        return self.content_encoder(normalize_mel(mel).transpose(1, 2)).transpose(1, 2)

    def speaker_t(self, mel: torch.Tensor) -> torch.Tensor:
        return self.speaker_encoder(normalize_mel(mel).transpose(1, 2))

    def decode_t(self, code: torch.Tensor, s: torch.Tensor, n_frames: int) -> torch.Tensor:
        # Bottleneck noise during training stops the content code from
        # smuggling speaker statistics past the AdaIN path; inference decoding
        # stays deterministic.
        if self.training and self.model_config.content_noise_std > 0:
            code = code + self.model_config.content_noise_std * torch.randn_like(code)
        out = self.decoder(code.transpose(1, 2), s, n_frames).transpose(1, 2)
        return denormalize_mel(out)

    def reconstruct_t(self, mel: torch.Tensor) -> torch.Tensor:
        return self.decode_t(self.content_t(mel), self.speaker_t(mel), mel.shape[1])

    def convert_t(self, source_mel: torch.Tensor, target_mel: torch.Tensor) -> torch.Tensor:
        return self.decode_t(
            self.content_t(source_mel), self.speaker_t(target_mel), source_mel.shape[1]
        )

    def speaker_from_wave(self, wave: torch.Tensor) -> torch.Tensor:
        """Differentiable waveform -> speaker embedding path (attack surface)."""
        if wave.dim() == 1:
            wave = wave.unsqueeze(0)
        mel = log_mel_torch(wave, self.feature_config)
        return self.speaker_t(mel)


def _mel_tensor(m: MelSpectrogram, model: VCModel) -> torch.Tensor:
    return torch.from_numpy(m.frames).to(model.dtype).unsqueeze(0)


def _as_mel(frames: torch.Tensor, like: MelSpectrogram) -> MelSpectrogram:
    return MelSpectrogram(
        frames=frames.squeeze(0).detach().cpu().numpy().astype(np.float64),
        frame_hop_s=like.frame_hop_s,
        n_mels=like.n_mels,
        fmin=like.fmin,
        fmax=like.fmax,
    )


def encode_content(m: MelSpectrogram, model: VCModel) -> ContentCode:
    with torch.no_grad():
        codes = model.content_t(_mel_tensor(m, model))
    return ContentCode(codes.squeeze(0).numpy(), n_source_frames=m.n_frames)


def encode_speaker(m: MelSpectrogram, model: VCModel) -> SpeakerCode:
    with torch.no_grad():
        vec = model.speaker_t(_mel_tensor(m, model))
    return SpeakerCode(vec.squeeze(0).numpy())


def decode(c: ContentCode, s: SpeakerCode, model: VCModel, like: MelSpectrogram) -> MelSpectrogram:
    if c.codes.shape[1] != model.model_config.content_dim:
        raise ModelError("content code width does not match the model")
    if s.vector.shape[0] != model.model_config.speaker_dim:
        raise ModelError("speaker code width does not match the model")
    with torch.no_grad():
        code = torch.from_numpy(c.codes).to(model.dtype).unsqueeze(0)
        vec = torch.from_numpy(s.vector).to(model.dtype).unsqueeze(0)
        out = model.decode_t(code, vec, c.n_source_frames)
    return _as_mel(out, like)


def convert(source: MelSpectrogram, target: MelSpectrogram, model: VCModel) -> MelSpectrogram:
    """Content of `source`, timbre of `target`; output length follows the source."""
    with torch.no_grad():
        out = model.convert_t(_mel_tensor(source, model), _mel_tensor(target, model))
    return _as_mel(out, source)


def reconstruction_loss(pred: MelSpectrogram, clean_target: MelSpectrogram) -> float:
    """Mean elementwise L1 distance between two equal-shape mel spectrograms."""
    if pred.frames.shape != clean_target.frames.shape:
        raise ModelError(
            f"shape mismatch {pred.frames.shape} vs {clean_target.frames.shape}"
        )
    return float(np.mean(np.abs(pred.frames - clean_target.frames)))


def reconstruction_loss_t(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ModelError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return torch.mean(torch.abs(pred - target))


def save_checkpoint(model: VCModel, path, meta: dict | None = None) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "model_config": asdict(model.model_config),
            "feature_config": asdict(model.feature_config),
            "state_dict": model.state_dict(),
            "meta": dict(meta or {}),
        },
        str(path),
    )


def load_checkpoint(path) -> tuple[VCModel, dict]:
    try:
        blob = torch.load(str(path), map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} does not exist")
    except Exception as e:
        raise CheckpointError(f"checkpoint {path} unreadable: {e}") from e
    version = blob.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has version {version!r}, expected {CHECKPOINT_VERSION!r}"
        )
    model = VCModel(ModelConfig(**blob["model_config"]), FeatureConfig(**blob["feature_config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("meta", {})
