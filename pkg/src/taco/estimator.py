"""scikit-learn style wrapper around the pretraining loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .trainer import TrainConfig, fit_model


def check_volumes(X, min_modalities: int = 1) -> np.ndarray:
    """Validate a cohort array of shape ``(n_instances, n_modalities, Dz, Dy, Dx)``.

    Returns a float64 copy.  A single instance ``(n_modalities, Dz, Dy, Dx)``
    is promoted to a batch of one.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 4:
        X = X[None]
    if X.ndim != 5:
        raise ValueError(f"expected a 5-D array (instances, modalities, z, y, x), got {X.ndim}-D")
    if X.shape[0] < 1 or X.shape[1] < min_modalities:
        raise ValueError(f"need >= 1 instance and >= {min_modalities} modalities, got {X.shape[:2]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input volumes contain NaN or Inf")
    return X


class TopologyAwarePretrainer(TransformerMixin, BaseEstimator):
    """Self-supervised token encoder trained with reconstruction plus
    intra- and inter-instance neighborhood-ranking losses.

    Parameters mirror :class:`taco.trainer.TrainConfig`.

    Attributes
    ----------
    model_ : TokenAutoEncoder
        Trained encoder/decoder.
    loss_log_ : list of LossReport
        One entry per optimization step.
    """

    def __init__(self, iterations=2000, learning_rate=3e-4, weight_decay=1e-5,
                 batch_instances=2, omega=5, delta=0.3, warmup_fraction=0.1, patch_size=4,
                 feature_dim=32, depth=3, decoder_depth=2, mix=True, use_intra=True,
                 use_inter=True, random_state=0):
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_instances = batch_instances
        self.omega = omega
        self.delta = delta
        self.warmup_fraction = warmup_fraction
        self.patch_size = patch_size
        self.feature_dim = feature_dim
        self.depth = depth
        self.decoder_depth = decoder_depth
        self.mix = mix
        self.use_intra = use_intra
        self.use_inter = use_inter
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        params = self.get_params()
        seed = params.pop("random_state")
        return TrainConfig(seed=int(seed or 0), **params)

    def fit(self, X, y=None):
        X = check_volumes(X, min_modalities=2)
        volumes = {h: {m: X[h, m] for m in range(X.shape[1])} for h in range(X.shape[0])}
        result = fit_model(volumes, self._config())
        self.model_ = result.model
        self.loss_log_ = result.log
        self.n_modalities_in_ = X.shape[1]
        self.volume_shape_ = X.shape[2:]
        return self

    def transform(self, X):
        """Token features of shape ``(n_instances, n_modalities, K, F)``."""
        check_is_fitted(self, "model_")
        X = check_volumes(X)
        if X.shape[2:] != self.volume_shape_:
            raise ValueError(f"volume shape {X.shape[2:]} differs from fitted {self.volume_shape_}")
        return np.stack([np.stack([self.model_.tokens(v) for v in inst]) for inst in X])
