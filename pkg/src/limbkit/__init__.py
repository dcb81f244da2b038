"""limbkit: unsupervised upper-body model learning from motion sequences,
meta-model consolidation, and still-image posture matching."""

from .config import PipelineConfig
from .estimators import MetaModelEstimator, SequenceModelLearner
from .limbs import PsModel, load_model, save_model
from .meta import MetaModel, build_meta_model, load_meta, save_meta
from .pipeline import learn_sequence_model, match_meta

__all__ = [
    "PipelineConfig",
    "PsModel",
    "MetaModel",
    "SequenceModelLearner",
    "MetaModelEstimator",
    "learn_sequence_model",
    "build_meta_model",
    "match_meta",
    "load_model",
    "save_model",
    "load_meta",
    "save_meta",
]

__version__ = "0.1.0"
