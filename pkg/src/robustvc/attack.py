"""Embedding attacks on the speaker encoder.

The multi-step attack perturbs a conversion target utterance inside an
l-infinity ball so its speaker embedding moves toward a third speaker
(targeted) or away from itself (untargeted). The single-step variant with
random initialization is the cheap perturbation used during adversarial
training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .audio import Waveform
from .model import VCModel


class AttackError(ValueError):
    """Invalid attack configuration or non-finite gradients."""


class GradientEvalCounter:
    """Counts backward passes so tests can pin the cost of the fast attack."""

    def __init__(self):
        self.count = 0

    def bump(self):
        self.count += 1


GRADIENT_EVALS = GradientEvalCounter()


@dataclass
class AttackConfig:
    mode: str = "untargeted"  # untargeted | targeted
    alpha: float = 0.001
    epsilon: float = 0.005
    n_steps: int = 10
    target_utterance_id: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("untargeted", "targeted"):
            raise AttackError(f"unknown attack mode {self.mode!r}")
        if self.alpha <= 0:
            raise AttackError("alpha must be positive")
        if self.epsilon < 0:
            raise AttackError("epsilon must be non-negative")
        # epsilon == 0 is the degenerate empty ball (attack is a no-op)
        if self.epsilon > 0 and self.alpha > self.epsilon:
            raise AttackError("alpha must not exceed epsilon")
        if self.n_steps < 1:
            raise AttackError("n_steps must be at least 1")
        if self.mode == "targeted" and self.target_utterance_id is None:
            raise AttackError("targeted attacks need target_utterance_id")


@dataclass
class AttackTrace:
    adversarial: Waveform
    objectives: list
    linf: float


def _embed(model: VCModel, wave: torch.Tensor) -> torch.Tensor:
    e = model.speaker_from_wave(wave)
    if not torch.all(torch.isfinite(e)):
        raise AttackError("non-finite speaker embedding during attack")
    return e


def _objective(e_adv: torch.Tensor, anchor: torch.Tensor, targeted: bool) -> torch.Tensor:
    cos = F.cosine_similarity(e_adv, anchor, dim=-1).squeeze()
    # Both modes are minimized: distance to the third speaker when targeted,
    # similarity to the original embedding when untargeted.
    return (1.0 - cos) if targeted else cos


def run_embedding_attack(
    model: VCModel,
    victim_target_utt: Waveform,
    cfg: AttackConfig,
    third_utt: Waveform | None = None,
) -> AttackTrace:
    """Iterative sign-gradient attack; returns the perturbed waveform plus the
    per-step objective values (final value last)."""
    targeted = cfg.mode == "targeted"
    if targeted and third_utt is None:
        raise AttackError("targeted attack called without a third utterance")
    if cfg.epsilon == 0.0:
        return AttackTrace(victim_target_utt.copy(), [], 0.0)

    model.eval()
    x = torch.from_numpy(victim_target_utt.samples).float()
    with torch.no_grad():
        anchor_wave = torch.from_numpy(third_utt.samples).float() if targeted else x
        anchor = _embed(model, anchor_wave).detach()

    delta = torch.zeros_like(x, requires_grad=True)
    objectives = []
    for _ in range(cfg.n_steps):
        loss = _objective(_embed(model, x + delta), anchor, targeted)
        objectives.append(float(loss.detach()))
        (grad,) = torch.autograd.grad(loss, delta)
        GRADIENT_EVALS.bump()
        if not torch.all(torch.isfinite(grad)):
            raise AttackError("non-finite attack gradient")
        with torch.no_grad():
            delta = torch.clamp(delta - cfg.alpha * torch.sign(grad), -cfg.epsilon, cfg.epsilon)
        delta.requires_grad_(True)
    with torch.no_grad():
        objectives.append(float(_objective(_embed(model, x + delta), anchor, targeted)))

    adv_np = _apply_delta(victim_target_utt.samples, delta.detach().double().numpy(), cfg.epsilon)
    linf = float(np.max(np.abs(adv_np - victim_target_utt.samples)))
    return AttackTrace(Waveform(adv_np, victim_target_utt.sample_rate), objectives, linf)


def _apply_delta(victim: np.ndarray, delta: np.ndarray, epsilon: float) -> np.ndarray:
    """victim + delta with ||out - victim||_inf <= epsilon holding exactly.

    The ball projection is shrunk by a hair (5e-12 relative) so that float64
    rounding of the re-addition can never push the measured perturbation
    past epsilon; the final [-1, 1] clip only moves samples toward the victim.
    """
    bound = epsilon * (1.0 - 1e-9)
    out = np.clip(victim + np.clip(delta, -bound, bound), -1.0, 1.0)
    assert np.max(np.abs(out - victim)) <= epsilon
    return out


def embedding_attack(
    model: VCModel,
    victim_target_utt: Waveform,
    cfg: AttackConfig,
    third_utt: Waveform | None = None,
) -> Waveform:
    """Perturbed target utterance with ||delta||_inf <= epsilon."""
    return run_embedding_attack(model, victim_target_utt, cfg, third_utt).adversarial


def fast_adv_example(
    model: VCModel,
    utt: Waveform,
    alpha: float,
    epsilon: float,
    rng: np.random.Generator,
) -> Waveform:
    """Single-step adversarial example with random initialization.

    Exactly one gradient evaluation: delta starts uniform in [-eps, eps],
    takes one sign step ascending the untargeted embedding objective, and is
    clipped back to the ball.
    """
    if epsilon == 0.0:
        return utt.copy()
    if alpha <= 0 or alpha > epsilon:
        raise AttackError("need 0 < alpha <= epsilon")
    model.eval()
    x = torch.from_numpy(utt.samples).float()
    with torch.no_grad():
        anchor = _embed(model, x).detach()
    init = rng.uniform(-epsilon, epsilon, size=len(utt))
    delta = torch.from_numpy(init).float().requires_grad_(True)
    distance = 1.0 - F.cosine_similarity(_embed(model, x + delta), anchor, dim=-1).squeeze()
    (grad,) = torch.autograd.grad(distance, delta)
    GRADIENT_EVALS.bump()
    if not torch.all(torch.isfinite(grad)):
        raise AttackError("non-finite attack gradient")
    with torch.no_grad():
        delta = torch.clamp(delta + alpha * torch.sign(grad), -epsilon, epsilon)
    adv = _apply_delta(utt.samples, delta.double().numpy(), epsilon)
    return Waveform(adv, utt.sample_rate)


@dataclass
class AttackRecord:
    """One line of the attack manifest written next to adversarial WAVs."""

    victim_utterance_id: str
    third_speaker_id: str | None
    epsilon: float
    alpha: float
    n_steps: int
    seed: int
    final_objective: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)
