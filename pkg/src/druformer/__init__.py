"""Important-object detection for driving scenes with a relationship-understanding transformer."""

from .config import DRUConfig, PEConfig, RunConfig, config_hash, load_config
from .exceptions import (
    CheckpointError,
    ConfigError,
    DatasetError,
    DivergenceError,
    DruformerError,
    GeometryError,
    InvariantViolation,
    MatchingError,
    NonFiniteError,
    SceneSamplingError,
    ShapeError,
    TapeError,
    UnknownIntentionError,
)
from .intention import IntentionVocab, parse_intention
from .matching import LossWeights
from .model import DRUformer, ModelOutput
from .models import GradCheckResult, LossRecord, MetricsReport, Prediction
from .scenes import GeneratorConfig, SceneSpec

__version__ = "0.1.0"
__all__ = [
    "DRUformer",
    "ModelOutput",
    "RunConfig",
    "PEConfig",
    "DRUConfig",
    "GeneratorConfig",
    "LossWeights",
    "IntentionVocab",
    "SceneSpec",
    "LossRecord",
    "MetricsReport",
    "Prediction",
    "GradCheckResult",
    "config_hash",
    "load_config",
    "parse_intention",
    "DruformerError",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "MatchingError",
    "GeometryError",
    "UnknownIntentionError",
    "SceneSamplingError",
    "DatasetError",
    "ConfigError",
    "CheckpointError",
    "DivergenceError",
    "InvariantViolation",
]
