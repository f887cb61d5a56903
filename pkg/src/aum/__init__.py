"""Audio Mamba: attention-free audio classification on a small numpy engine."""

from .encoder import BlockVariant, ClsPosition, ConfigError, Model, ModelConfig, model_forward
from .features import FeatureConfig, log_mel_spectrogram
from .training import TrainConfig, evaluate, train

__all__ = [
    "BlockVariant", "ClsPosition", "ConfigError", "Model", "ModelConfig", "model_forward",
    "FeatureConfig", "log_mel_spectrogram", "TrainConfig", "evaluate", "train",
]
__version__ = "0.1.0"
