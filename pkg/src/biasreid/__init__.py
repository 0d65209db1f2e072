"""Bias-controlled adversarial metric learning for re-identification, desk scale.

Two training branches share one loss family: a bias-reducing branch that
suppresses feature components tied to a labelled bias channel (pose, camera,
body part, ...) and a bias-enhancing branch that amplifies them. The package
also ships the measurement side: CMC/mAP ranking with exclusion protocols,
frozen-feature bias probes, and same-bias rank-position statistics.
"""

__version__ = "0.1.0"

from .errors import (
    AlignmentError,
    BatchCompositionError,
    CheckpointError,
    ConfigError,
    DataError,
    EvaluationError,
    ParseError,
    TrainingError,
)

__all__ = [
    "__version__",
    "AlignmentError",
    "BatchCompositionError",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "EvaluationError",
    "ParseError",
    "TrainingError",
]
