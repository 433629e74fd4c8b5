"""Objective evaluation protocol: conversion-pair sampling, EER threshold
calibration, SVAR, CER, and the single-degradation ablation."""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path

import numpy as np

from .attack import AttackConfig, run_embedding_attack
from .audio import FeatureConfig, Waveform, extract_mel, reconstruct_waveform, save_wav
from .degrade import AugmentationPolicy, DegradationSpec, NoiseCorpus, apply_spec, augment
from .enhance import Enhancer, enhance, identity_enhancer
from .manifest import AudioStore, Manifest
from .model import VCModel, convert
from .seeding import rng_for, seed_for
from .verifier import SpeakerVerifier


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class VerificationTrial:
    score: float
    same_speaker: bool

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise EvaluationError("trial score is not finite")


def calibrate_threshold(trials) -> tuple[float, float]:
    """Threshold and EER where false-accept and false-reject rates meet.

    Acceptance rule is score > threshold. Rates are step functions of the
    threshold; between adjacent candidate thresholds both are interpolated
    linearly and the crossing solved exactly. On an exact tie the threshold
    is placed mid-way to the next candidate.
    """
    scores = np.array([t.score for t in trials], dtype=np.float64)
    labels = np.array([t.same_speaker for t in trials], dtype=bool)
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("threshold calibration needs both trial labels")

    def far(t):
        return float(np.sum(scores[~labels] > t)) / n_neg

    def frr(t):
        return float(np.sum(scores[labels] <= t)) / n_pos

    candidates = np.unique(scores)
    # Virtual left point below every score: FAR=1, FRR=0.
    prev_t = candidates[0] - 1.0
    prev_f = 1.0 - 0.0
    for t in candidates:
        f = far(t) - frr(t)
        if f == 0.0:
            nxt = candidates[candidates > t]
            t_star = (t + nxt[0]) / 2.0 if len(nxt) else float(t)
            return t_star, (far(t_star) + frr(t_star)) / 2.0
        if f < 0.0:
            a0, r0 = far(prev_t), frr(prev_t)
            a1, r1 = far(t), frr(t)
            denom = (r1 - r0) - (a1 - a0)
            frac = (a0 - r0) / denom if denom != 0 else 0.5
            t_star = prev_t + frac * (t - prev_t)
            eer = r0 + frac * (r1 - r0)
            return float(t_star), float(eer)
        prev_t, prev_f = t, f
    raise EvaluationError("no FAR/FRR crossing found")  # pragma: no cover


def speaker_similarity(converted: Waveform, target: Waveform, verifier: SpeakerVerifier) -> float:
    """Cosine similarity of unit-normalized verifier embeddings, in [-1, 1]."""
    e1 = verifier.embed(converted)
    e2 = verifier.embed(target)
    return float(np.clip(np.dot(e1, e2), -1.0, 1.0))


def svar(pairs, conversions, threshold, verifier, store) -> float:
    """Percentage of conversions accepted by the verifier at the threshold."""
    if not pairs:
        raise EvaluationError("no conversion pairs")
    accepted = 0
    for pair in pairs:
        conv = conversions.get(pair.pair_id)
        if conv is None:
            raise EvaluationError(f"missing conversion for pair {pair.pair_id}")
        target = store.get(pair.target_utterance_id)
        if speaker_similarity(conv, target, verifier) > threshold:
            accepted += 1
    return 100.0 * accepted / len(pairs)


def levenshtein(a: str, b: str) -> int:
    """Character-level edit distance, iterative two-row DP."""
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def cer(hypothesis: str, reference: str) -> float:
    """Character error rate: edit distance over reference length.

    Empty reference is defined as len(hypothesis); callers flag it in reports.
    """
    if len(reference) == 0:
        return float(len(hypothesis))
    return levenshtein(hypothesis, reference) / len(reference)


@dataclass(frozen=True)
class ConversionPair:
    pair_id: int
    source_utterance_id: str
    target_utterance_id: str
    source_speaker_id: str
    target_speaker_id: str
    third_speaker_id: str | None = None
    third_utterance_id: str | None = None

    def __post_init__(self):
        if self.source_speaker_id == self.target_speaker_id:
            raise EvaluationError("source and target speakers must differ")
        if self.third_speaker_id is not None and self.third_speaker_id == self.target_speaker_id:
            raise EvaluationError("third speaker must differ from the target speaker")


def sample_pairs(
    manifest: Manifest,
    n: int,
    rng: np.random.Generator,
    speakers: list | None = None,
    with_third: bool = False,
) -> list:
    """Random conversion pairs among the held-out speakers.

    Source and target speakers always differ; when with_third is set, a third
    speaker (and one of its utterances) different from the target is sampled
    for targeted attacks.
    """
    pool = speakers if speakers is not None else manifest.speakers
    pool = sorted(pool)
    if len(pool) < 2:
        raise EvaluationError("need at least two speakers to sample conversion pairs")
    pairs = []
    for i in range(n):
        src_spk, tgt_spk = (pool[int(k)] for k in rng.choice(len(pool), size=2, replace=False))
        src = manifest.by_speaker[src_spk][int(rng.integers(len(manifest.by_speaker[src_spk])))]
        tgt = manifest.by_speaker[tgt_spk][int(rng.integers(len(manifest.by_speaker[tgt_spk])))]
        third_spk = third_utt = None
        if with_third:
            others = [s for s in pool if s != tgt_spk]
            third_spk = others[int(rng.integers(len(others)))]
            cand = manifest.by_speaker[third_spk]
            third_utt = cand[int(rng.integers(len(cand)))].utterance_id
        pairs.append(
            ConversionPair(
                pair_id=i,
                source_utterance_id=src.utterance_id,
                target_utterance_id=tgt.utterance_id,
                source_speaker_id=src_spk,
                target_speaker_id=tgt_spk,
                third_speaker_id=third_spk,
                third_utterance_id=third_utt,
            )
        )
    return pairs


def verification_trials(manifest: Manifest, store: AudioStore, verifier: SpeakerVerifier):
    """All ordered pairs of distinct authentic utterances as trials."""
    embs = {}
    for u in manifest:
        embs[u.utterance_id] = verifier.embed(store.get(u.utterance_id))
    trials = []
    utts = list(manifest)
    for a in utts:
        for b in utts:
            if a.utterance_id == b.utterance_id:
                continue
            score = float(np.dot(embs[a.utterance_id], embs[b.utterance_id]))
            trials.append(VerificationTrial(score, a.speaker_id == b.speaker_id))
    return trials


@dataclass
class PairResult:
    pair_id: int
    source_utterance_id: str
    target_utterance_id: str
    third_speaker_id: str | None
    similarity: float
    accepted: bool
    cer: float | None = None
    cer_empty_reference: bool = False


@dataclass
class EvalReport:
    """Self-contained outcome of one condition x defense evaluation cell."""

    condition: str
    defense: str
    threshold: float
    eer: float
    svar: float
    n_pairs: int
    master_seed: int
    config_hash: str
    pair_results: list = field(default_factory=list)

    def __post_init__(self):
        accepted = sum(1 for r in self.pair_results if r.accepted)
        if self.pair_results and abs(self.svar - 100.0 * accepted / len(self.pair_results)) > 1e-9:
            raise EvaluationError("svar does not equal accepted percentage")

    def to_json(self) -> str:
        blob = asdict(self)
        return json.dumps(blob, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        blob = json.loads(text)
        blob["pair_results"] = [PairResult(**r) for r in blob["pair_results"]]
        return cls(**blob)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())

    def to_csv(self) -> str:
        lines = ["pair_id,source,target,third_speaker,similarity,accepted,cer"]
        for r in self.pair_results:
            cer_s = "" if r.cer is None else f"{r.cer:.6f}"
            lines.append(
                f"{r.pair_id},{r.source_utterance_id},{r.target_utterance_id},"
                f"{r.third_speaker_id or ''},{r.similarity:.6f},{int(r.accepted)},{cer_s}"
            )
        return "\n".join(lines) + "\n"


@dataclass
class Transcriber:
    """Pluggable ASR adapter: subprocess reading a WAV path, printing text."""

    command: str
    timeout_s: float = 60.0

    def __call__(self, w: Waveform) -> str:
        with tempfile.TemporaryDirectory(prefix="robustvc-asr-") as tmp:
            path = Path(tmp) / "utt.wav"
            save_wav(path, w)
            cmd = shlex.split(self.command.format(**{"in": str(path)}))
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout_s)
            if proc.returncode != 0:
                raise EvaluationError(f"transcriber exited {proc.returncode}: {proc.stderr.strip()}")
            return proc.stdout.strip()


CONDITIONS = ("clean", "degraded", "attacked")
SINGLE_DEGRADATIONS = ("noise", "reverberation", "band_rejection")


@dataclass
class EvaluationContext:
    """Everything shared across evaluation cells: the verifier with its
    calibrated operating point, the unseen-condition degradation setup, the
    attack parameters, and the sampled pairs."""

    verifier: SpeakerVerifier
    threshold: float
    eer: float
    store: AudioStore
    pairs: list
    test_policy: AugmentationPolicy
    test_corpus: NoiseCorpus
    attack_config: AttackConfig
    feature_config: FeatureConfig
    gl_iters: int = 32
    master_seed: int = 0
    config_hash: str = ""
    transcriber: Transcriber | None = None
    reference_texts: dict | None = None

    def degrade_for_pair(self, w: Waveform, pair_id: int, role: str, single: str | None) -> Waveform:
        """Deterministic per-pair degradation, shared across every cell so
        comparisons between defenses are paired."""
        rng = rng_for(self.master_seed, "degrade", pair_id, role)
        if single is None:
            out, _ = augment(w, self.test_policy, self.test_corpus, rng)
            return out
        return apply_spec(w, self._single_spec(single, rng), self.test_corpus)

    def _single_spec(self, kind: str, rng: np.random.Generator) -> DegradationSpec:
        if kind == "noise":
            noise_id = self.test_corpus.ids[int(rng.integers(len(self.test_corpus)))]
            snr = self.test_policy.snr_choices_db
            return DegradationSpec(
                noise_id=noise_id,
                snr_db=float(snr[int(rng.integers(len(snr)))]),
                noise_offset=int(rng.integers(len(self.test_corpus.get(noise_id)))),
            )
        if kind == "reverberation":
            return DegradationSpec(
                reverb_applied=True,
                room_scale=float(rng.uniform(*self.test_policy.room_scale_range)),
                reverb_seed=int(rng.integers(2**31)),
            )
        if kind == "band_rejection":
            return DegradationSpec(
                band_reject_applied=True,
                lower_freq_hz=float(rng.uniform(*self.test_policy.lower_freq_range_hz)),
                bandwidth_hz=float(rng.uniform(*self.test_policy.bandwidth_range_hz)),
            )
        raise EvaluationError(f"unknown single degradation {kind!r}")


def run_condition(
    ctx: EvaluationContext,
    vc_model: VCModel,
    condition: str,
    defense: str = "baseline",
    enhancer: Enhancer | None = None,
    single: str | None = None,
    save_conversions_to=None,
) -> EvalReport:
    """Evaluate one cell of the condition x defense grid.

    The threat model is structural here: adversarial perturbations are always
    computed against the bare VC model, before any enhancement; the enhancer
    only runs as the deployed preprocessing step.
    """
    if condition not in CONDITIONS:
        raise EvaluationError(f"unknown condition {condition!r}")
    if condition == "attacked" and any(p.third_utterance_id is None for p in ctx.pairs):
        raise EvaluationError("attacked condition needs pairs sampled with third speakers")
    enh = enhancer if enhancer is not None else identity_enhancer()
    out_dir = Path(save_conversions_to) if save_conversions_to else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    results = []
    for pair in ctx.pairs:
        src = ctx.store.get(pair.source_utterance_id)
        tgt = ctx.store.get(pair.target_utterance_id)
        tgt_reference = tgt  # similarity is always scored against the clean target

        if condition == "degraded" or single is not None:
            src = ctx.degrade_for_pair(src, pair.pair_id, "source", single)
            tgt = ctx.degrade_for_pair(tgt, pair.pair_id, "target", single)
        elif condition == "attacked":
            cfg = replace(
                ctx.attack_config,
                mode="targeted",
                target_utterance_id=pair.third_utterance_id,
                seed=seed_for(ctx.master_seed, "attack", pair.pair_id),
            )
            tgt = run_embedding_attack(
                vc_model, tgt, cfg, ctx.store.get(pair.third_utterance_id)
            ).adversarial

        if enh.kind != "identity":
            src = enhance(src, enh)
            tgt = enhance(tgt, enh)

        mel_src = extract_mel(src, ctx.feature_config)
        mel_tgt = extract_mel(tgt, ctx.feature_config)
        converted_mel = convert(mel_src, mel_tgt, vc_model)
        converted = reconstruct_waveform(
            converted_mel,
            ctx.feature_config,
            n_iters=ctx.gl_iters,
            seed=seed_for(ctx.master_seed, "gl", pair.pair_id),
        )
        if out_dir is not None:
            save_wav(out_dir / f"pair{pair.pair_id:04d}.wav", converted)

        sim = speaker_similarity(converted, tgt_reference, ctx.verifier)
        pair_cer = None
        empty_ref = False
        if ctx.transcriber is not None and ctx.reference_texts is not None:
            ref = ctx.reference_texts.get(pair.source_utterance_id, "")
            empty_ref = len(ref) == 0
            pair_cer = cer(ctx.transcriber(converted), ref)
        results.append(
            PairResult(
                pair_id=pair.pair_id,
                source_utterance_id=pair.source_utterance_id,
                target_utterance_id=pair.target_utterance_id,
                third_speaker_id=pair.third_speaker_id if condition == "attacked" else None,
                similarity=round(sim, 9),
                accepted=sim > ctx.threshold,
                cer=pair_cer,
                cer_empty_reference=empty_ref,
            )
        )

    accepted = sum(1 for r in results if r.accepted)
    tag = condition if single is None else f"single:{single}"
    return EvalReport(
        condition=tag,
        defense=defense,
        threshold=ctx.threshold,
        eer=ctx.eer,
        svar=100.0 * accepted / len(results),
        n_pairs=len(results),
        master_seed=ctx.master_seed,
        config_hash=ctx.config_hash,
        pair_results=results,
    )


def run_ablation(
    ctx: EvaluationContext,
    vc_model: VCModel,
    defense: str = "baseline",
    enhancer: Enhancer | None = None,
) -> dict:
    """One report per single-degradation condition, plus the clean reference.

    Same pairs and per-pair seeds in every condition, so only the degradation
    differs between cells.
    """
    reports = {"none": run_condition(ctx, vc_model, "clean", defense, enhancer)}
    for kind in SINGLE_DEGRADATIONS:
        reports[kind] = run_condition(ctx, vc_model, "degraded", defense, enhancer, single=kind)
    return reports


def report_table(reports) -> str:
    """Aligned-column summary of a list of reports."""
    rows = [("condition", "defense", "SVAR %", "EER %", "threshold", "pairs")]
    for r in reports:
        rows.append(
            (r.condition, r.defense, f"{r.svar:.1f}", f"{100 * r.eer:.2f}", f"{r.threshold:.4f}", str(r.n_pairs))
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_svg_bars(path, labels, values, title, ylabel="SVAR (%)", y_max=100.0) -> None:
    """Minimal deterministic SVG bar chart (no plotting dependency)."""
    width, height, margin = 640, 360, 60
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    n = max(len(values), 1)
    bar_w = plot_w / n * 0.6
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<text x="16" y="{height / 2}" transform="rotate(-90 16 {height / 2})" '
        f'text-anchor="middle" font-size="12">{ylabel}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
    ]
    for i, (label, value) in enumerate(zip(labels, values)):
        x = margin + plot_w * (i + 0.2) / n
        h = plot_h * min(max(value, 0.0), y_max) / y_max
        y = height - margin - h
        parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w:.1f}" height="{h:.1f}" fill="#4477aa"/>')
        parts.append(
            f'<text x="{x + bar_w / 2:.1f}" y="{y - 4:.1f}" text-anchor="middle" font-size="11">{value:.1f}</text>'
        )
        parts.append(
            f'<text x="{x + bar_w / 2:.1f}" y="{height - margin + 16}" text-anchor="middle" '
            f'font-size="11">{label}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
