"""Training regimes: clean baseline, end-to-end denoising training, and
denoising plus fast adversarial training, in one configurable loop.

Every mode is self-reconstruction on mel features; the loss target is always
the mel of the authentic clean waveform, whatever was done to the input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .attack import AttackConfig, fast_adv_example
from .audio import FeatureConfig, Waveform, log_mel_torch
from .degrade import AugmentationPolicy, DegradationSpec, NoiseCorpus, augment
from .manifest import AudioStore, Manifest
from .model import ModelConfig, VCModel, reconstruction_loss_t, save_checkpoint
from .seeding import rng_for, seed_for

TRAIN_MODES = ("clean", "denoising", "denoising_adversarial")


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    """Loss went non-finite; a diagnostic snapshot was written."""


@dataclass
class TrainConfig:
    mode: str = "clean"
    steps: int = 800
    batch_size: int = 8
    learning_rate: float = 1e-3
    p_adv: float = 0.5
    crop_seconds: float = 1.5
    checkpoint_interval: int = 200
    seed: int = 0
    attack: AttackConfig | None = None

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise TrainingError(f"unknown training mode {self.mode!r}")
        if self.mode == "denoising_adversarial" and self.attack is None:
            self.attack = AttackConfig(mode="untargeted", alpha=0.001, epsilon=0.005)
        if not 0.0 <= self.p_adv <= 1.0:
            raise TrainingError("p_adv must be in [0, 1]")


def effective_policy(cfg: TrainConfig, policy: AugmentationPolicy) -> AugmentationPolicy:
    """Clean mode forces all augmentation probabilities to zero."""
    if cfg.mode == "clean":
        return replace(policy, p_augment=0.0, p_reverb=0.0, p_band_reject=0.0)
    return policy


@dataclass
class PreparedBatch:
    input_waves: np.ndarray  # (B, N) model inputs after degradation/attack
    clean_waves: np.ndarray  # (B, N) authentic clean crops (the loss targets)
    specs: list
    utterance_ids: list
    n_augmented: int
    n_attacked: int


@dataclass
class StepResult:
    step: int
    loss: float
    step_seed: int
    utterance_ids: list
    specs: list
    n_augmented: int
    n_attacked: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "loss": self.loss,
                "seed": self.step_seed,
                "utterances": self.utterance_ids,
                "specs": [json.loads(s.to_json()) for s in self.specs],
                "augmented": self.n_augmented,
                "attacked": self.n_attacked,
            },
            sort_keys=True,
        )


def _crop(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(x) <= n:
        return np.pad(x, (0, n - len(x)))
    start = int(rng.integers(len(x) - n + 1))
    return x[start : start + n]


def prepare_batch(
    batch: list,
    model: VCModel,
    cfg: TrainConfig,
    policy: AugmentationPolicy,
    corpus: NoiseCorpus | None,
    step_seed: int,
) -> PreparedBatch:
    """Crop, degrade, and (in adversarial mode) perturb one batch.

    The clean crop is kept verbatim as the loss target. The final [-1, 1]
    clip happens here, once, after the whole degradation/attack chain.
    """
    pol = effective_policy(cfg, policy)
    sr = model.feature_config.sample_rate
    n_crop = int(cfg.crop_seconds * sr)
    inputs, cleans, specs = [], [], []
    n_aug = n_adv = 0
    for j, w in enumerate(batch):
        crop_rng = rng_for(step_seed, "crop", j)
        clean = _crop(w.samples, n_crop, crop_rng)
        degraded, spec = augment(
            Waveform(clean, sr), pol, corpus, rng_for(step_seed, "augment", j), seed=step_seed
        )
        n_aug += int(spec.is_degraded)
        x = degraded
        if cfg.mode == "denoising_adversarial":
            adv_rng = rng_for(step_seed, "adv", j)
            if adv_rng.random() < cfg.p_adv:
                x = fast_adv_example(model, x, cfg.attack.alpha, cfg.attack.epsilon, adv_rng)
                n_adv += 1
        inputs.append(np.clip(x.samples, -1.0, 1.0))
        cleans.append(clean)
        specs.append(spec)
    return PreparedBatch(
        input_waves=np.stack(inputs),
        clean_waves=np.stack(cleans),
        specs=specs,
        utterance_ids=[],
        n_augmented=n_aug,
        n_attacked=n_adv,
    )


def train_step(
    batch: list,
    model: VCModel,
    optimizer: torch.optim.Optimizer | None,
    cfg: TrainConfig,
    policy: AugmentationPolicy,
    corpus: NoiseCorpus | None,
    step_seed: int,
    step: int = 0,
    utterance_ids: list | None = None,
) -> StepResult:
    """One optimizer step of self-reconstruction against clean targets.

    With optimizer=None the loss is computed without updating (replay mode).
    """
    if not batch:
        raise TrainingError("empty batch")
    prepared = prepare_batch(batch, model, cfg, policy, corpus, step_seed)
    fcfg = model.feature_config
    input_t = torch.from_numpy(prepared.input_waves).to(model.dtype)
    with torch.no_grad():
        target_mel = log_mel_torch(torch.from_numpy(prepared.clean_waves).to(model.dtype), fcfg)
    # Bottleneck noise is drawn from a stream reseeded per step, so replaying
    # a logged step reproduces its loss exactly.
    torch.manual_seed(seed_for(step_seed, "bottleneck-noise"))
    model.train()
    pred = model.reconstruct_t(log_mel_torch(input_t, fcfg))
    loss = reconstruction_loss_t(pred, target_mel)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss at step {step}")
    model.eval()
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return StepResult(
        step=step,
        loss=float(loss.detach()),
        step_seed=step_seed,
        utterance_ids=list(utterance_ids or []),
        specs=prepared.specs,
        n_augmented=prepared.n_augmented,
        n_attacked=prepared.n_attacked,
    )


@dataclass
class TrainResult:
    model: VCModel
    checkpoint_path: Path
    log_path: Path
    losses: list = field(default_factory=list)


def train(
    manifest: Manifest,
    cfg: TrainConfig,
    policy: AugmentationPolicy,
    corpus: NoiseCorpus | None,
    out_dir,
    model_config: ModelConfig | None = None,
    feature_config: FeatureConfig | None = None,
    meta: dict | None = None,
    tag: str | None = None,
) -> TrainResult:
    """Full training run: periodic checkpoints plus an append-only JSONL log
    with everything needed to replay any step."""
    if len(manifest.speakers) < 2:
        raise TrainingError("training needs at least 2 speakers")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = tag or cfg.mode
    mcfg = model_config or ModelConfig()
    fcfg = feature_config or FeatureConfig()

    # Seeds deliberately ignore the mode/tag: runs that share cfg.seed start
    # from the same init and draw the same batches, so training modes can be
    # compared pairwise.
    torch.manual_seed(seed_for(cfg.seed, "model-init"))
    model = VCModel(mcfg, fcfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    store = AudioStore(manifest)
    ids = [u.utterance_id for u in manifest]

    log_path = out_dir / f"train_{tag}.jsonl"
    ckpt_path = out_dir / f"vc_{tag}.pt"
    losses = []
    with open(log_path, "w") as log:
        for step in range(cfg.steps):
            if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                save_checkpoint(model, out_dir / f"vc_{tag}_step{step}.pt", meta)
            step_seed = seed_for(cfg.seed, "train-step", step)
            picks = rng_for(step_seed, "batch").choice(len(ids), size=cfg.batch_size, replace=True)
            utt_ids = [ids[int(k)] for k in picks]
            batch = [store.get(u) for u in utt_ids]
            try:
                result = train_step(
                    batch, model, optimizer, cfg, policy, corpus, step_seed, step, utt_ids
                )
            except TrainingDiverged:
                snap = out_dir / f"diverged_{tag}_step{step}.pt"
                torch.save(
                    {"step": step, "utterances": utt_ids, "state_dict": model.state_dict()},
                    str(snap),
                )
                raise TrainingDiverged(f"step {step} diverged; snapshot at {snap}")
            log.write(result.to_json() + "\n")
            losses.append(result.loss)
    model.eval()
    save_checkpoint(model, ckpt_path, meta)
    return TrainResult(model=model, checkpoint_path=ckpt_path, log_path=log_path, losses=losses)


def replay_step(
    checkpoint_model: VCModel,
    manifest: Manifest,
    cfg: TrainConfig,
    policy: AugmentationPolicy,
    corpus: NoiseCorpus | None,
    log_entry: dict,
) -> float:
    """Recompute a logged step's loss (no update) from the checkpoint that
    precedes it; exact equality with the logged value is the determinism
    contract."""
    store = AudioStore(manifest)
    batch = [store.get(u) for u in log_entry["utterances"]]
    result = train_step(
        batch,
        checkpoint_model,
        None,
        cfg,
        policy,
        corpus,
        log_entry["seed"],
        log_entry["step"],
        log_entry["utterances"],
    )
    return result.loss


def read_log(path) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
