"""scikit-learn compatible wrapper: ``fit`` runs search (or a baseline) and
the retrain; ``predict`` uses the retrained standalone network."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, validate_data

from nce.config import resolve_config
from nce.data import Dataset
from nce.errors import InputError
from nce.pipeline import run_experiment
from nce.tensor import precision


def check_images(X, ensure_min_samples: int = 1) -> np.ndarray:
    """Validate a batch as float32 [N, C, H, W]; 2-D input becomes [N, d, 1, 1]."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=ensure_min_samples)
    return _as_images(X)


def _as_images(X: np.ndarray) -> np.ndarray:
    if X.ndim == 2:
        X = X[:, :, None, None]
    if X.ndim != 4:
        raise InputError(f"expected [N, C, H, W] images or [N, d] features, got shape {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise InputError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    return np.ascontiguousarray(X)


class NCEClassifier(ClassifierMixin, BaseEstimator):
    """Channel-searched quantized CNN classifier.

    Parameters mirror the experiment config; ``config`` may carry a full
    nested config dict, which the flat parameters then override.
    """

    def __init__(self, mode: str = "nce", arch: str = "resnet8", seed_width: Optional[int] = None,
                 weight_bits=2, activation_bits=2, warmup_epochs: int = 5, search_epochs: int = 30,
                 retrain_epochs: int = 60, threshold: float = 0.3, batch_size: int = 64,
                 weight_lr: float = 0.05, arch_lr: float = 0.001, width_multiplier: float = 1.0,
                 random_state: int = 0, config: Optional[dict] = None):
        self.mode = mode
        self.arch = arch
        self.seed_width = seed_width
        self.weight_bits = weight_bits
        self.activation_bits = activation_bits
        self.warmup_epochs = warmup_epochs
        self.search_epochs = search_epochs
        self.retrain_epochs = retrain_epochs
        self.threshold = threshold
        self.batch_size = batch_size
        self.weight_lr = weight_lr
        self.arch_lr = arch_lr
        self.width_multiplier = width_multiplier
        self.random_state = random_state
        self.config = config

    def _resolve(self):
        cfg = resolve_config(self.config)
        return cfg.replace(**{
            "mode": self.mode, "width_multiplier": self.width_multiplier,
            "model.arch": self.arch, "model.seed_width": self.seed_width,
            "quant.weight_bits": self.weight_bits, "quant.activation_bits": self.activation_bits,
            "search.warmup_epochs": self.warmup_epochs, "search.search_epochs": self.search_epochs,
            "search.retrain_epochs": self.retrain_epochs, "search.threshold": self.threshold,
            "search.batch_size": self.batch_size, "optim.weight_lr": self.weight_lr,
            "optim.arch_lr": self.arch_lr, "run.seed": int(self.random_state)})

    def fit(self, X, y, eval_set=None):
        X, y = validate_data(self, X, y, allow_nd=True, dtype=np.float32, ensure_min_samples=2)
        X = _as_images(X)
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise InputError("need at least two classes")
        if eval_set is not None:
            xe = check_images(eval_set[0])
            ye = np.searchsorted(self.classes_, np.asarray(eval_set[1]))
        else:
            xe, ye = X, codes
        data = Dataset(X, codes.astype(np.int64), xe, ye.astype(np.int64), len(self.classes_))
        cfg = self._resolve()
        self.config_ = cfg
        self.result_, self.search_state_ = run_experiment(cfg, data)
        self.network_ = self.result_.network
        self.arch_ = self.result_.arch
        self.cost_ = self.result_.cost
        self.input_shape_ = X.shape[1:]
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = _as_images(validate_data(self, X, allow_nd=True, dtype=np.float32, reset=False))
        if X.shape[1:] != self.input_shape_:
            raise InputError(f"expected inputs of shape {self.input_shape_}, got {X.shape[1:]}")
        # float64 inference keeps outputs independent of how rows are batched
        with precision(np.float64):
            return self.network_.predict_logits(X.astype(np.float64))

    def decision_function(self, X) -> np.ndarray:
        """Logits; for two classes, the positive-class margin as a 1-D array."""
        z = self._logits(X)
        return z[:, 1] - z[:, 0] if len(self.classes_) == 2 else z

    def predict_proba(self, X) -> np.ndarray:
        z = self._logits(X).astype(np.float64)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        z = self._logits(X)
        return self.classes_[z.argmax(axis=1)]
