"""Command-line interface wiring the modules into the experiment matrix.

Exit codes: 0 success, 1 validation error (bad config/data), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .attack import AttackError, run_embedding_attack, AttackRecord
from .audio import AudioError, extract_mel, load_wav, reconstruct_waveform, save_wav
from .config import ConfigError, load_config
from .degrade import DegradationError, NoiseCorpus
from .enhance import EnhancerError, enhance
from .evaluate import EvaluationError, report_table
from .experiment import (
    CELL_CONDITIONS,
    DEFENSES,
    StaleArtifactError,
    build_context,
    evaluate_cell,
    load_artifacts,
    run_matrix,
    train_all,
    train_denoiser_artifact,
    train_vc_model,
    train_verifier_artifact,
    VC_MODES,
)
from .manifest import AudioStore, Manifest, ManifestError, prepare_manifest
from .model import CheckpointError, ModelError, convert, load_checkpoint
from .seeding import seed_for
from .train import TrainingError
from .evaluate import EvalReport

VALIDATION_ERRORS = (
    ConfigError,
    ManifestError,
    AudioError,
    DegradationError,
    AttackError,
    ModelError,
    EvaluationError,
)
RUNTIME_ERRORS = (TrainingError, CheckpointError, EnhancerError, StaleArtifactError, OSError)


def _add_config_arg(p):
    p.add_argument("--config", required=True, help="experiment config (YAML)")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--threads", type=int, default=None, help="torch CPU threads (1 = reproducible)")


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threads is not None:
        torch.set_num_threads(args.threads)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    cfg.write_snapshot(Path(cfg.out_dir) / "config.resolved.json")
    return cfg


def cmd_prepare(args) -> int:
    manifest = prepare_manifest(args.corpus, args.out, resample=args.resample)
    print(f"wrote {len(manifest)} utterances ({len(manifest.speakers)} speakers) to {args.out}")
    return 0


def cmd_toydata(args) -> int:
    from .toydata import build_toy_corpus

    paths = build_toy_corpus(
        args.out,
        n_train_speakers=args.train_speakers,
        n_eval_speakers=args.eval_speakers,
        utts_per_train_speaker=args.train_utts,
        utts_per_eval_speaker=args.eval_utts,
        seed=args.seed,
    )
    for k, v in paths.items():
        print(f"{k}: {v}")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    if args.target == "all":
        train_all(cfg, force=args.force)
        print(f"all checkpoints current under {cfg.out_dir}/checkpoints")
        return 0
    if args.target == "verifier":
        print(f"verifier: {train_verifier_artifact(cfg, force=args.force)}")
        return 0
    if args.target == "denoiser":
        print(f"denoiser: {train_denoiser_artifact(cfg, force=args.force)}")
        return 0
    result = train_vc_model(cfg, args.target, force=args.force)
    if result is None:
        print(f"vc_{args.target}: checkpoint already current")
    else:
        print(f"vc_{args.target}: {result.checkpoint_path} (final loss {result.losses[-1]:.4f})")
    return 0


def cmd_enhance(args) -> int:
    cfg = _load(args)
    artifacts = load_artifacts(cfg, force=args.force)
    from .experiment import configured_enhancer

    enhancer = configured_enhancer(cfg, artifacts)
    manifest = Manifest.read(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for utt in manifest:
        w = load_wav(utt.path)
        save_wav(out_dir / f"{utt.utterance_id}.wav", enhance(w, enhancer))
    print(f"enhanced {len(manifest)} utterances into {out_dir}")
    return 0


def cmd_attack(args) -> int:
    cfg = _load(args)
    artifacts = load_artifacts(cfg, force=args.force)
    ctx = build_context(cfg, artifacts)
    model = artifacts.vc[args.model]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for pair in ctx.pairs:
        attack_cfg = replace(
            cfg.attack,
            mode="targeted",
            target_utterance_id=pair.third_utterance_id,
            seed=seed_for(cfg.seed, "attack", pair.pair_id),
        )
        trace = run_embedding_attack(
            model,
            ctx.store.get(pair.target_utterance_id),
            attack_cfg,
            ctx.store.get(pair.third_utterance_id),
        )
        save_wav(out_dir / f"pair{pair.pair_id:04d}.wav", trace.adversarial)
        lines.append(
            AttackRecord(
                victim_utterance_id=pair.target_utterance_id,
                third_speaker_id=pair.third_speaker_id,
                epsilon=attack_cfg.epsilon,
                alpha=attack_cfg.alpha,
                n_steps=attack_cfg.n_steps,
                seed=attack_cfg.seed,
                final_objective=trace.objectives[-1],
            ).to_json()
        )
    (out_dir / "attack_manifest.jsonl").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} adversarial utterances into {out_dir}")
    return 0


def cmd_convert(args) -> int:
    cfg = _load(args)
    artifacts = load_artifacts(cfg, force=args.force)
    ctx = build_context(cfg, artifacts)
    model = artifacts.vc[args.model]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for pair in ctx.pairs:
        src = extract_mel(ctx.store.get(pair.source_utterance_id), cfg.features)
        tgt = extract_mel(ctx.store.get(pair.target_utterance_id), cfg.features)
        out = reconstruct_waveform(
            convert(src, tgt, model),
            cfg.features,
            n_iters=cfg.evaluation.gl_iters,
            seed=seed_for(cfg.seed, "gl", pair.pair_id),
        )
        save_wav(out_dir / f"pair{pair.pair_id:04d}.wav", out)
    print(f"converted {len(ctx.pairs)} pairs into {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    artifacts = load_artifacts(cfg, force=args.force)
    report = evaluate_cell(cfg, artifacts, args.condition, args.defense)
    report_dir = Path(cfg.out_dir) / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)
    out = report_dir / f"{report.condition}_{report.defense}.json"
    report.write(out)
    print(report_table([report]))
    print(f"report: {out}")
    return 0


def cmd_matrix(args) -> int:
    cfg = _load(args)
    train_all(cfg, force=args.force)
    artifacts = load_artifacts(cfg, force=args.force)
    reports = run_matrix(cfg, artifacts, jobs=args.jobs)
    print(report_table(reports))
    print(f"reports under {Path(cfg.out_dir) / 'reports'}")
    return 0


def cmd_report(args) -> int:
    report_dir = Path(args.run_dir) / "reports"
    paths = sorted(report_dir.glob("*.json"))
    if not paths:
        raise EvaluationError(f"no reports under {report_dir}")
    reports = [EvalReport.from_json(p.read_text()) for p in paths]
    table = report_table(reports)
    (report_dir / "summary.txt").write_text(table)
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustvc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="scan a corpus directory into a manifest")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resample", action="store_true", help="convert non-conforming audio on load")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("toydata", help="generate the synthetic desk-scale corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-speakers", type=int, default=12)
    p.add_argument("--eval-speakers", type=int, default=8)
    p.add_argument("--train-utts", type=int, default=50)
    p.add_argument("--eval-utts", type=int, default=12)
    p.set_defaults(func=cmd_toydata)

    p = sub.add_parser("train", help="train checkpoints")
    _add_config_arg(p)
    p.add_argument("--target", default="all", choices=list(VC_MODES) + ["denoiser", "verifier", "all"])
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="batch-enhance a manifest of utterances")
    _add_config_arg(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("attack", help="generate targeted adversarial target utterances")
    _add_config_arg(p)
    p.add_argument("--model", default="clean", choices=list(VC_MODES))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("convert", help="run clean conversions for the sampled pairs")
    _add_config_arg(p)
    p.add_argument("--model", default="clean", choices=list(VC_MODES))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("evaluate", help="evaluate one condition x defense cell")
    _add_config_arg(p)
    p.add_argument("--condition", required=True, choices=list(CELL_CONDITIONS))
    p.add_argument("--defense", required=True, choices=list(DEFENSES))
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("matrix", help="train everything and run the full grid")
    _add_config_arg(p)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("report", help="re-render tables from stored reports")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
