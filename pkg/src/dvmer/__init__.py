"""Dual-view music emotion recognition toolkit.

Feature extraction (Mel spectrogram + cochleagram), a cross-attention
fusion encoder over both views, curriculum pseudo-labelling, a contrastive
feature memory, and the training/evaluation machinery gluing them together.
"""

from .features import (
    AudioSegment,
    CochGram,
    FeatureConfig,
    FeaturePair,
    MelGram,
    cochleagram,
    extract_pair,
    mel_spectrogram,
    pre_emphasis,
    select_segment,
)
from .model import BranchOutputs, DualViewModel, ModelConfig, TokenSet
from .nncore import GradReport, Tensor, gradient_check
from .training import LossWeights, Metrics, TrainConfig, evaluate, run_training

__all__ = [
    "AudioSegment",
    "BranchOutputs",
    "CochGram",
    "DualViewModel",
    "FeatureConfig",
    "FeaturePair",
    "GradReport",
    "LossWeights",
    "MelGram",
    "Metrics",
    "ModelConfig",
    "Tensor",
    "TokenSet",
    "TrainConfig",
    "cochleagram",
    "evaluate",
    "extract_pair",
    "gradient_check",
    "mel_spectrogram",
    "pre_emphasis",
    "run_training",
    "select_segment",
]

__version__ = "0.1.0"
