"""Independent speaker-verification embedder for the evaluation protocol.

A small classifier trained on the toy training speakers; its penultimate
embedding generalizes to held-out speakers. Deliberately separate from the
VC model's own speaker encoder so attack objective and evaluation metric
never share parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import FeatureConfig, Waveform, log_mel_torch
from .manifest import AudioStore, Manifest
from .seeding import rng_for, seed_for

VERIFIER_VERSION = "robustvc-verifier-1"


class VerifierError(ValueError):
    pass


class SpeakerVerifier(nn.Module):
    def __init__(self, feature_config: FeatureConfig, channels: int = 96, emb_dim: int = 64):
        super().__init__()
        self.feature_config = feature_config
        self.channels = channels
        self.emb_dim = emb_dim
        self.convs = nn.ModuleList(
            [
                nn.Conv1d(feature_config.n_mels, channels, 5, padding=2),
                nn.Conv1d(channels, channels, 5, padding=2),
                nn.Conv1d(channels, channels, 5, padding=2),
            ]
        )
        self.proj = nn.Linear(2 * channels, emb_dim)

    def embed_raw_t(self, mel: torch.Tensor) -> torch.Tensor:
        """Pre-normalization embeddings for (B, T, n_mels) log-mels."""
        x = ((mel + 4.0) / 5.0).transpose(1, 2)  # same affine the VC model uses
        for conv in self.convs:
            x = F.gelu(conv(x))
        stats = torch.cat(
            [x.mean(dim=-1), torch.sqrt(x.var(dim=-1, unbiased=False) + 1e-8)], dim=-1
        )
        return self.proj(stats)

    def embed_t(self, mel: torch.Tensor) -> torch.Tensor:
        """Unit-normalized embeddings for (B, T, n_mels) log-mels."""
        e = self.embed_raw_t(mel)
        return e / torch.clamp(e.norm(dim=-1, keepdim=True), min=1e-12)

    def embed(self, w: Waveform) -> np.ndarray:
        cfg = self.feature_config
        if len(w) < cfg.win_length * 8:
            raise VerifierError(f"utterance too short for verification ({len(w)} samples)")
        with torch.no_grad():
            mel = log_mel_torch(torch.from_numpy(w.samples).float().unsqueeze(0), cfg)
            e = self.embed_t(mel)
        return e.squeeze(0).double().numpy()


@dataclass
class VerifierTrainConfig:
    steps: int = 600
    batch_size: int = 16
    learning_rate: float = 1e-3
    crop_seconds: float = 1.5
    channels: int = 96
    emb_dim: int = 64
    seed: int = 0


def train_verifier(
    manifest: Manifest,
    cfg: VerifierTrainConfig,
    feature_config: FeatureConfig | None = None,
) -> SpeakerVerifier:
    """Cross-entropy speaker classification on clean crops; the classifier
    head is dropped after training and only the embedding survives."""
    fcfg = feature_config or FeatureConfig()
    torch.manual_seed(seed_for(cfg.seed, "verifier-init"))
    model = SpeakerVerifier(fcfg, channels=cfg.channels, emb_dim=cfg.emb_dim)
    head = nn.Linear(cfg.emb_dim, len(manifest.speakers))
    opt = torch.optim.Adam(list(model.parameters()) + list(head.parameters()), lr=cfg.learning_rate)
    store = AudioStore(manifest)
    speaker_index = {s: i for i, s in enumerate(manifest.speakers)}
    ids = [u.utterance_id for u in manifest]
    n_crop = int(cfg.crop_seconds * fcfg.sample_rate)

    losses = []
    for step in range(cfg.steps):
        rng = rng_for(cfg.seed, "verifier", step)
        picks = rng.choice(len(ids), size=cfg.batch_size, replace=True)
        waves, labels = [], []
        for k in picks:
            utt_id = ids[int(k)]
            x = store.get(utt_id).samples
            if len(x) <= n_crop:
                x = np.pad(x, (0, n_crop - len(x)))
            else:
                start = int(rng.integers(len(x) - n_crop + 1))
                x = x[start : start + n_crop]
            waves.append(x)
            labels.append(speaker_index[manifest.by_id[utt_id].speaker_id])
        wave_t = torch.from_numpy(np.stack(waves)).float()
        label_t = torch.tensor(labels)
        mel = log_mel_torch(wave_t, fcfg)
        logits = head(model.embed_raw_t(mel))
        loss = F.cross_entropy(logits, label_t)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    model.eval()
    model.train_losses = losses
    return model


def save_verifier(model: SpeakerVerifier, path, meta: dict | None = None) -> None:
    torch.save(
        {
            "version": VERIFIER_VERSION,
            "feature_config": asdict(model.feature_config),
            "channels": model.channels,
            "emb_dim": model.emb_dim,
            "state_dict": model.state_dict(),
            "meta": dict(meta or {}),
        },
        str(path),
    )


def load_verifier(path) -> tuple[SpeakerVerifier, dict]:
    blob = torch.load(str(path), map_location="cpu", weights_only=False)
    if blob.get("version") != VERIFIER_VERSION:
        raise VerifierError(f"verifier checkpoint version {blob.get('version')!r} unsupported")
    model = SpeakerVerifier(
        FeatureConfig(**blob["feature_config"]),
        channels=blob["channels"],
        emb_dim=blob["emb_dim"],
    )
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("meta", {})
