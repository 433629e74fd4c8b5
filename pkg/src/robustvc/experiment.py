"""Experiment orchestration: trains/loads the checkpoint set, calibrates the
verification threshold, and runs the condition x defense evaluation grid."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from .config import ExperimentConfig
from .degrade import NoiseCorpus
from .enhance import (
    Enhancer,
    identity_enhancer,
    load_denoiser,
    save_denoiser,
    train_denoiser,
)
from .evaluate import (
    EvalReport,
    EvaluationContext,
    calibrate_threshold,
    report_table,
    run_condition,
    sample_pairs,
    verification_trials,
    write_svg_bars,
)
from .manifest import AudioStore, Manifest
from .model import VCModel, load_checkpoint
from .seeding import rng_for, seed_for
from .train import TrainResult, train
from .verifier import SpeakerVerifier, load_verifier, save_verifier, train_verifier

VC_MODES = ("clean", "denoising", "denoising_adversarial")
DEFENSES = ("baseline", "se_concat", "denoising", "denoising_adversarial")
CELL_CONDITIONS = ("clean", "degraded", "attacked")


class StaleArtifactError(RuntimeError):
    """Checkpoint was produced under a different config hash."""


@dataclass
class Artifacts:
    vc: dict
    denoiser: Enhancer | None
    verifier: SpeakerVerifier
    threshold: float
    eer: float
    config_hash: str


def checkpoint_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / "checkpoints"


def vc_checkpoint_path(cfg: ExperimentConfig, mode: str) -> Path:
    return checkpoint_dir(cfg) / f"vc_{mode}.pt"


def _check_hash(meta: dict, cfg: ExperimentConfig, what: str, force: bool) -> None:
    have = meta.get("config_hash")
    if have != cfg.hash() and not force:
        raise StaleArtifactError(
            f"{what} was trained under config hash {have}, current is {cfg.hash()}; "
            "retrain or pass --force"
        )


def train_vc_model(cfg: ExperimentConfig, mode: str, force: bool = False) -> TrainResult | None:
    """Train one VC mode; returns None when a current checkpoint already exists."""
    path = vc_checkpoint_path(cfg, mode)
    if path.exists() and not force:
        _, meta = load_checkpoint(path)
        if meta.get("config_hash") == cfg.hash():
            return None
    manifest = Manifest.read(cfg.train_manifest)
    corpus = NoiseCorpus(cfg.noise_train_dir)
    train_cfg = replace(cfg.train, mode=mode, seed=seed_for(cfg.seed, "train"), attack=None)
    if mode == "denoising_adversarial":
        train_cfg = replace(train_cfg, attack=replace(cfg.attack, mode="untargeted", target_utterance_id=None))
    return train(
        manifest,
        train_cfg,
        cfg.policy_train,
        corpus,
        checkpoint_dir(cfg),
        model_config=cfg.model,
        feature_config=cfg.features,
        meta={"config_hash": cfg.hash(), "mode": mode},
        tag=mode,
    )


def train_denoiser_artifact(cfg: ExperimentConfig, force: bool = False) -> Path:
    path = checkpoint_dir(cfg) / "denoiser.pt"
    if path.exists() and not force:
        _, meta = load_denoiser(path)
        if meta.get("config_hash") == cfg.hash():
            return path
    manifest = Manifest.read(cfg.train_manifest)
    corpus = NoiseCorpus(cfg.noise_train_dir)
    dn_cfg = replace(cfg.denoiser, seed=seed_for(cfg.seed, "denoiser"))
    enhancer = train_denoiser(manifest, cfg.policy_train, dn_cfg, corpus, cfg.features)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_denoiser(enhancer, path, {"config_hash": cfg.hash()})
    return path


def train_verifier_artifact(cfg: ExperimentConfig, force: bool = False) -> Path:
    path = checkpoint_dir(cfg) / "verifier.pt"
    if path.exists() and not force:
        _, meta = load_verifier(path)
        if meta.get("config_hash") == cfg.hash():
            return path
    manifest = Manifest.read(cfg.train_manifest)
    v_cfg = replace(cfg.verifier, seed=seed_for(cfg.seed, "verifier"))
    model = train_verifier(manifest, v_cfg, cfg.features)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_verifier(model, path, {"config_hash": cfg.hash()})
    return path


def train_all(cfg: ExperimentConfig, force: bool = False) -> None:
    checkpoint_dir(cfg).mkdir(parents=True, exist_ok=True)
    train_verifier_artifact(cfg, force)
    train_denoiser_artifact(cfg, force)
    for mode in VC_MODES:
        train_vc_model(cfg, mode, force)


def calibrate(cfg: ExperimentConfig, verifier: SpeakerVerifier) -> tuple[float, float]:
    """EER operating point on all ordered authentic-utterance pairs of the
    evaluation split; cached beside the checkpoints."""
    cal_path = checkpoint_dir(cfg) / "calibration.json"
    if cal_path.exists():
        blob = json.loads(cal_path.read_text())
        if blob.get("config_hash") == cfg.hash():
            return blob["threshold"], blob["eer"]
    manifest = Manifest.read(cfg.eval_manifest)
    trials = verification_trials(manifest, AudioStore(manifest), verifier)
    threshold, eer = calibrate_threshold(trials)
    cal_path.parent.mkdir(parents=True, exist_ok=True)
    cal_path.write_text(
        json.dumps(
            {"threshold": threshold, "eer": eer, "n_trials": len(trials), "config_hash": cfg.hash()},
            sort_keys=True,
            indent=2,
        )
        + "\n"
    )
    return threshold, eer


def load_artifacts(cfg: ExperimentConfig, force: bool = False) -> Artifacts:
    verifier, v_meta = load_verifier(checkpoint_dir(cfg) / "verifier.pt")
    _check_hash(v_meta, cfg, "verifier", force)
    denoiser, d_meta = load_denoiser(checkpoint_dir(cfg) / "denoiser.pt")
    _check_hash(d_meta, cfg, "denoiser", force)
    vc = {}
    for mode in VC_MODES:
        model, meta = load_checkpoint(vc_checkpoint_path(cfg, mode))
        _check_hash(meta, cfg, f"vc_{mode}", force)
        vc[mode] = model
    threshold, eer = calibrate(cfg, verifier)
    return Artifacts(
        vc=vc,
        denoiser=denoiser,
        verifier=verifier,
        threshold=threshold,
        eer=eer,
        config_hash=cfg.hash(),
    )


def configured_enhancer(cfg: ExperimentConfig, artifacts: Artifacts) -> Enhancer:
    kind = cfg.enhancer.kind
    if kind == "identity":
        return identity_enhancer()
    if kind == "builtin_mask":
        if artifacts.denoiser is None:
            raise StaleArtifactError("builtin denoiser requested but not trained")
        return artifacts.denoiser
    return Enhancer(kind="external_adapter", command=cfg.enhancer.command, timeout_s=cfg.enhancer.timeout_s)


def defense_setup(cfg: ExperimentConfig, artifacts: Artifacts, defense: str):
    """Which VC model runs, and whether enhancement precedes it."""
    if defense == "baseline":
        return artifacts.vc["clean"], None
    if defense == "se_concat":
        return artifacts.vc["clean"], configured_enhancer(cfg, artifacts)
    if defense == "denoising":
        return artifacts.vc["denoising"], None
    if defense == "denoising_adversarial":
        return artifacts.vc["denoising_adversarial"], None
    raise ValueError(f"unknown defense {defense!r}")


def build_context(cfg: ExperimentConfig, artifacts: Artifacts) -> EvaluationContext:
    manifest = Manifest.read(cfg.eval_manifest)
    pairs = sample_pairs(
        manifest, cfg.evaluation.n_pairs, rng_for(cfg.seed, "pairs"), with_third=True
    )
    return EvaluationContext(
        verifier=artifacts.verifier,
        threshold=artifacts.threshold,
        eer=artifacts.eer,
        store=AudioStore(manifest),
        pairs=pairs,
        test_policy=cfg.policy_test,
        test_corpus=NoiseCorpus(cfg.noise_test_dir),
        attack_config=cfg.attack,
        feature_config=cfg.features,
        gl_iters=cfg.evaluation.gl_iters,
        master_seed=cfg.seed,
        config_hash=cfg.hash(),
    )


def evaluate_cell(
    cfg: ExperimentConfig,
    artifacts: Artifacts,
    condition: str,
    defense: str,
    ctx: EvaluationContext | None = None,
) -> EvalReport:
    model, enhancer = defense_setup(cfg, artifacts, defense)
    ctx = ctx or build_context(cfg, artifacts)
    return run_condition(ctx, model, condition, defense=defense, enhancer=enhancer)


def run_matrix(cfg: ExperimentConfig, artifacts: Artifacts, jobs: int = 1) -> list:
    """All condition x defense cells; reports, summary table, and plots land
    under <out_dir>/reports."""
    ctx = build_context(cfg, artifacts)
    cells = [(c, d) for c in CELL_CONDITIONS for d in DEFENSES]

    def one(cell):
        condition, defense = cell
        return evaluate_cell(cfg, artifacts, condition, defense, ctx)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(one, cells))
    else:
        reports = [one(cell) for cell in cells]

    report_dir = Path(cfg.out_dir) / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)
    for report in reports:
        report.write(report_dir / f"{report.condition}_{report.defense}.json")
    (report_dir / "summary.txt").write_text(report_table(reports))
    for condition in CELL_CONDITIONS:
        subset = [r for r in reports if r.condition == condition]
        write_svg_bars(
            report_dir / f"svar_{condition}.svg",
            [r.defense for r in subset],
            [r.svar for r in subset],
            f"SVAR by defense ({condition} inputs)",
        )
    return reports
