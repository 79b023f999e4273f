"""Speaker-wise conditional end-to-end neural diarization at desk scale."""

from .model import FeatureSequence, ModelConfig, ModelParams, init_model
from .decode import DiarizationResult, infer

__all__ = ["FeatureSequence", "ModelConfig", "ModelParams", "init_model", "DiarizationResult",
           "infer"]
__version__ = "0.1.0"
