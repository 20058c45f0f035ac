"""scikit-learn style wrapper around the capsule autoencoder."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import ModelConfig
from .exceptions import ConfigurationError, InputError
from .layers import mask_activity
from .training import predict_batches, train

PRESETS = {"desk": ModelConfig.desk, "tiny": ModelConfig.tiny, "full": ModelConfig}


class PointCapsClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Point-cloud classifier whose ``transform`` gives the class-capsule latent.

    ``X`` is a 3-D array ``(n_clouds, n_points, 3)`` (or 6 channels with
    normals). The network size follows ``preset``; the point and class
    counts are taken from the training data. ``config_overrides`` is a
    dict of extra :class:`ModelConfig` fields.
    """

    def __init__(self, preset="desk", routing_mode="pointcaps", skip_connection=True,
                 epochs=25, batch_size=8, lr=2e-2, gamma=0.5, config_overrides=None,
                 random_state=0):
        self.preset = preset
        self.routing_mode = routing_mode
        self.skip_connection = skip_connection
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.gamma = gamma
        self.config_overrides = config_overrides
        self.random_state = random_state

    def _check_points(self, X, reset=False):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim != 3:
            raise InputError(f"expected (n_clouds, n_points, channels), got shape {X.shape}")
        if not reset:
            cfg = self.model_.config
            if X.shape[1:] != (cfg.num_points, cfg.in_channels):
                raise InputError(f"fitted on clouds of shape {(cfg.num_points, cfg.in_channels)}, "
                                 f"got {X.shape[1:]}")
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = self._check_points(X, reset=True)
        if self.preset not in PRESETS:
            raise ConfigurationError(f"preset must be one of {sorted(PRESETS)}")
        self.classes_, codes = np.unique(y, return_inverse=True)
        overrides = dict(self.config_overrides or {})
        overrides.update(
            num_points=X.shape[1], num_classes=len(self.classes_), in_channels=X.shape[2],
            routing_mode=self.routing_mode, skip_connection=self.skip_connection, gamma=self.gamma,
        )
        config = PRESETS[self.preset](**overrides)
        result = train(config, (X, codes), self.epochs, batch_size=self.batch_size, lr=self.lr,
                       seed=self.random_state)
        self.model_ = result.model
        self.history_ = result.history
        self.n_points_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        """Class-capsule lengths, one column per entry of ``classes_``."""
        check_is_fitted(self)
        X = self._check_points(X)
        return predict_batches(self.model_, X)[0]

    def predict(self, X):
        check_is_fitted(self)
        return self.classes_[self.decision_function(X).argmax(1)]

    def transform(self, X):
        """Instantiation vector of the longest class capsule, ``(n_clouds, digit_dim)``."""
        check_is_fitted(self)
        X = self._check_points(X)
        out = []
        for start in range(0, len(X), 32):
            enc = self.model_.encode(X[start:start + 32])
            out.append(mask_activity(enc.digit).data)
        return np.concatenate(out)

    def reconstruct(self, X):
        check_is_fitted(self)
        X = self._check_points(X)
        return predict_batches(self.model_, X)[1]

    def part_assign(self, X):
        """First-layer capsule index per point, ``(n_clouds, n_points)``."""
        check_is_fitted(self)
        X = self._check_points(X)
        return predict_batches(self.model_, X)[2].argmax(-1)
