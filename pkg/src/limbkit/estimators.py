"""Scikit-learn style wrappers around the learning and matching pipeline.

`SequenceModelLearner.fit(frames)` learns one sequence-specific body model,
`MetaModelEstimator.fit(models)` consolidates many into a meta-model and
`predict(images)` returns posture estimates, so the system composes with
sklearn tooling (get_params/set_params, clone, pipelines over the config).
"""

from __future__ import annotations

import dataclasses
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import PipelineConfig
from .limbs import PsModel
from .meta import MetaModel, build_meta_model
from .pipeline import learn_sequence_model, match_meta


def check_frames(x) -> List[np.ndarray]:
    """Validate a sequence of uint8 RGB frames of uniform size."""
    frames = [np.asarray(f) for f in x]
    if len(frames) < 3:
        raise ValueError("need at least 3 frames")
    shape = frames[0].shape
    for f in frames:
        if f.ndim != 3 or f.shape[2] != 3 or f.dtype != np.uint8:
            raise ValueError("frames must be uint8 arrays of shape (H, W, 3)")
        if f.shape != shape:
            raise ValueError("frames must share dimensions")
    return frames


def _config_from_params(params: dict) -> PipelineConfig:
    base = PipelineConfig()
    overrides = {k: v for k, v in params.items() if v is not None}
    return dataclasses.replace(base, **overrides)


class SequenceModelLearner(BaseEstimator):
    """Unsupervised body-model learning from one motion sequence.

    Parameters mirror the pipeline config; None keeps the default.  After
    fit, the learned model is available as `model_`.
    """

    def __init__(self, n_features: Optional[int] = None,
                 ncut_tau: Optional[float] = None,
                 min_cluster_size: Optional[int] = None,
                 ddi_threshold: Optional[float] = None,
                 config: Optional[PipelineConfig] = None):
        self.n_features = n_features
        self.ncut_tau = ncut_tau
        self.min_cluster_size = min_cluster_size
        self.ddi_threshold = ddi_threshold
        self.config = config

    def _config(self) -> PipelineConfig:
        if self.config is not None:
            return self.config
        return _config_from_params(dict(
            n_features=self.n_features, ncut_tau=self.ncut_tau,
            min_cluster_size=self.min_cluster_size,
            ddi_threshold=self.ddi_threshold))

    def fit(self, X, y=None) -> "SequenceModelLearner":
        frames = check_frames(X)
        self.model_ = learn_sequence_model(frames, self._config())
        return self

    @property
    def n_limbs_(self) -> int:
        self._check_fitted()
        return self.model_.n_limbs

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit(frames) first")


class MetaModelEstimator(BaseEstimator):
    """Meta-model consolidation (fit) and still-image posture estimation
    (predict)."""

    def __init__(self, switches: str = "SGRCMA",
                 scale_grid: Sequence[float] = (1.0,),
                 theta_bins: Optional[int] = None,
                 config: Optional[PipelineConfig] = None):
        self.switches = switches
        self.scale_grid = scale_grid
        self.theta_bins = theta_bins
        self.config = config

    def _config(self) -> PipelineConfig:
        return self.config if self.config is not None else PipelineConfig()

    def fit(self, X: Sequence[PsModel], y=None) -> "MetaModelEstimator":
        models = list(X)
        if not models:
            raise ValueError("need at least one sequence model")
        if any(not isinstance(m, PsModel) for m in models):
            raise ValueError("fit expects a sequence of PsModel instances")
        self.meta_ = build_meta_model(models, self._config())
        return self

    def predict(self, X):
        """Posture estimates for one image or a list of images."""
        if not hasattr(self, "meta_"):
            raise NotFittedError("call fit(models) first")
        single = isinstance(X, np.ndarray) and X.ndim == 3
        images = [X] if single else list(X)
        postures = [match_meta(self.meta_, img, self.switches, self._config(),
                               scale_grid=tuple(self.scale_grid),
                               theta_bins=self.theta_bins)[0]
                    for img in images]
        return postures[0] if single else postures
