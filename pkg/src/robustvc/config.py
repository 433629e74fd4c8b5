"""Experiment configuration: YAML with include support, hard validation of
the unseen-condition constraints, and canonical hashing for idempotence."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path

import yaml

from .attack import AttackConfig
from .audio import FeatureConfig
from .degrade import AugmentationPolicy, DegradationError, check_disjoint
from .enhance import DenoiserTrainConfig
from .model import ModelConfig
from .train import TrainConfig
from .verifier import VerifierTrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalSettings:
    n_pairs: int = 160
    gl_iters: int = 32

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ConfigError("n_pairs must be positive")


@dataclass
class EnhancerSettings:
    kind: str = "builtin_mask"  # identity | builtin_mask | external_adapter
    command: str | None = None
    timeout_s: float = 30.0

    def __post_init__(self):
        if self.kind not in ("identity", "builtin_mask", "external_adapter"):
            raise ConfigError(f"unknown enhancer kind {self.kind!r}")
        if self.kind == "external_adapter" and not self.command:
            raise ConfigError("external_adapter enhancer needs a command template")


@dataclass
class ExperimentConfig:
    train_manifest: Path
    eval_manifest: Path
    noise_train_dir: Path
    noise_test_dir: Path
    out_dir: Path
    seed: int = 0
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    policy_train: AugmentationPolicy = field(default_factory=AugmentationPolicy.train_default)
    policy_test: AugmentationPolicy = field(default_factory=AugmentationPolicy.test_default)
    attack: AttackConfig = field(default_factory=AttackConfig)
    denoiser: DenoiserTrainConfig = field(default_factory=DenoiserTrainConfig)
    verifier: VerifierTrainConfig = field(default_factory=VerifierTrainConfig)
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    enhancer: EnhancerSettings = field(default_factory=EnhancerSettings)

    def __post_init__(self):
        try:
            check_disjoint(self.policy_train, self.policy_test)
        except DegradationError as e:
            raise ConfigError(str(e)) from e
        if Path(self.noise_train_dir).resolve() == Path(self.noise_test_dir).resolve():
            raise ConfigError("train and test noise corpora must be different directories")

    def snapshot(self) -> dict:
        """Fully resolved, JSON-serializable view of the config."""
        blob = asdict(self)
        for key in ("train_manifest", "eval_manifest", "noise_train_dir", "noise_test_dir", "out_dir"):
            blob[key] = str(Path(blob[key]).resolve())
        return blob

    def hash(self) -> str:
        blob = self.snapshot()
        blob.pop("out_dir")  # relocating a run must not invalidate artifacts
        return config_hash(blob)

    def write_snapshot(self, path) -> None:
        Path(path).write_text(json.dumps(self.snapshot(), sort_keys=True, indent=2) + "\n")


def config_hash(blob) -> str:
    canonical = json.dumps(blob, sort_keys=True).encode()
    return hashlib.sha256(canonical).hexdigest()[:16]


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _load_yaml_with_includes(path: Path, seen: tuple = ()) -> dict:
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"config include cycle through {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist")
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    merged: dict = {}
    for inc in raw.pop("include", []) or []:
        merged = _deep_merge(merged, _load_yaml_with_includes(path.parent / inc, seen + (path,)))
    return _deep_merge(merged, raw)


def _build(cls, section: dict, name: str):
    try:
        return cls(**section)
    except TypeError as e:
        raise ConfigError(f"config section '{name}': {e}") from e
    except ValueError as e:
        raise ConfigError(f"config section '{name}': {e}") from e


def load_config(path) -> ExperimentConfig:
    """Parse and validate an experiment config; paths resolve relative to the file."""
    path = Path(path)
    raw = _load_yaml_with_includes(path)
    root = path.parent

    def resolve(key, default=None):
        value = raw.get("data", {}).get(key, default)
        if value is None:
            raise ConfigError(f"config is missing data.{key}")
        return (root / value).resolve()

    aug = raw.get("augment", {})
    train_pol = dict(aug.get("train", {}))
    test_pol = dict(aug.get("test", {}))
    train_pol.setdefault("noise_corpus_id", "train")
    test_pol.setdefault("noise_corpus_id", "test")
    test_defaults = asdict(AugmentationPolicy.test_default())
    test_section = {**test_defaults, **test_pol}

    cfg = ExperimentConfig(
        train_manifest=resolve("train_manifest"),
        eval_manifest=resolve("eval_manifest"),
        noise_train_dir=resolve("noise_train_dir"),
        noise_test_dir=resolve("noise_test_dir"),
        out_dir=(root / raw.get("out_dir", "runs/default")).resolve(),
        seed=int(raw.get("seed", 0)),
        features=_build(FeatureConfig, raw.get("features", {}), "features"),
        model=_build(ModelConfig, raw.get("model", {}), "model"),
        train=_build(TrainConfig, raw.get("train", {}), "train"),
        policy_train=_build(AugmentationPolicy, train_pol, "augment.train"),
        policy_test=_build(AugmentationPolicy, test_section, "augment.test"),
        attack=_build(AttackConfig, raw.get("attack", {}), "attack"),
        denoiser=_build(DenoiserTrainConfig, raw.get("denoiser", {}), "denoiser"),
        verifier=_build(VerifierTrainConfig, raw.get("verifier", {}), "verifier"),
        evaluation=_build(EvalSettings, raw.get("evaluation", {}), "evaluation"),
        enhancer=_build(EnhancerSettings, raw.get("enhancer", {}), "enhancer"),
    )
    return cfg
