"""Degradation- and attack-robust any-to-any voice conversion laboratory."""

from .audio import FeatureConfig, MelSpectrogram, Waveform, extract_mel, reconstruct_waveform
from .degrade import (
    AugmentationPolicy,
    DegradationSpec,
    NoiseCorpus,
    apply_band_reject,
    apply_reverb,
    apply_spec,
    augment,
    mix_at_snr,
)
from .model import VCModel, convert, encode_content, encode_speaker, decode, reconstruction_loss
from .enhance import Enhancer, enhance, identity_enhancer, si_sdr, train_denoiser
from .attack import AttackConfig, embedding_attack, fast_adv_example
from .evaluate import (
    ConversionPair,
    EvalReport,
    VerificationTrial,
    calibrate_threshold,
    cer,
    sample_pairs,
    speaker_similarity,
    svar,
)
from .train import TrainConfig, train, train_step

__version__ = "0.1.0"
