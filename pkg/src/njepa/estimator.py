"""scikit-learn style wrappers around pre-training and the linear probe."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import RunConfig, apply_overrides
from .data import normalize
from .evaluation import ProbeConfig, extract_features, fit_linear


def _as_images(X, cfg: RunConfig) -> np.ndarray:
    """Accept (n, C, H, W) arrays or rows flattened from that layout."""
    X = check_array(X, allow_nd=True, dtype=np.float32)
    m = cfg.model
    shape = (m.channels, m.image_size, m.image_size)
    if X.ndim == 2:
        if X.shape[1] != int(np.prod(shape)):
            raise ValueError(f"rows of length {X.shape[1]} do not flatten {shape}")
        X = X.reshape(-1, *shape)
    if X.shape[1:] != shape:
        raise ValueError(f"images must have shape (n, {', '.join(map(str, shape))}), got {X.shape}")
    return X


class NJEPA(TransformerMixin, BaseEstimator):
    """Self-supervised pre-training; ``transform`` returns pooled encoder features.

    Parameters
    ----------
    steps : int
        Optimisation steps.
    seed : int
        Root seed for init, masking, noise and data order.
    overrides : tuple of str
        Extra ``section.key=value`` settings applied to the default config.
    feature_source : {"last_layer_avg", "concat_last_k"}
    encoder : {"student", "teacher"}
    output_dir : str or None
        Where to write config, metrics and checkpoints; nothing is written if None.
    """

    def __init__(self, steps=200, seed=0, overrides=(), feature_source="last_layer_avg",
                 encoder="student", output_dir=None):
        self.steps = steps
        self.seed = seed
        self.overrides = overrides
        self.feature_source = feature_source
        self.encoder = encoder
        self.output_dir = output_dir

    def _config(self) -> RunConfig:
        cfg = RunConfig()
        apply_overrides(cfg, list(self.overrides))
        cfg.run.seed = int(self.seed)
        cfg.train.steps = int(self.steps)
        cfg.probe.feature_source = self.feature_source
        cfg.probe.encoder = self.encoder
        return cfg.validate()

    def fit(self, X, y=None):
        from .trainer import train_loop

        cfg = self._config()
        images = _as_images(X, cfg)
        ds = normalize(images, None, "train")
        result = train_loop(cfg, ds, output_dir=self.output_dir, log_every=0)
        self.config_ = cfg
        self.bundle_ = result.bundle
        self.history_ = result.rows
        self.norm_stats_ = (ds.mean, ds.std)
        self.n_features_in_ = int(np.prod(images.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "bundle_")
        images = _as_images(X, self.config_)
        ds = normalize(images, None, "test", self.norm_stats_)
        p = self.config_.probe
        return extract_features(self.bundle_, ds, p.feature_source, p.last_k, p.encoder).features


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Softmax regression trained by SGD with momentum on standardised features."""

    def __init__(self, epochs=50, batch_size=256, lr=0.1, momentum=0.9, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("LinearProbe needs at least 2 classes")
        codes = np.searchsorted(self.classes_, y)
        cfg = ProbeConfig(self.epochs, self.batch_size, self.lr, self.momentum, seed=self.seed)
        self.model_ = fit_linear(X, codes, len(self.classes_), cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.model_.decision_function(X)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]
