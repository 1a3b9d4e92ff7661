"""scikit-learn style wrapper around the training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ..tensor_io import RunConfig
from ..ube import softmax_probs
from .train import evaluate, fit_arrays, write_metrics

_CONFIG_FIELDS = tuple(RunConfig().to_dict())


class FlexSegSegmenter(ClassifierMixin, BaseEstimator):
    """Per-pixel segmenter trained with boundary weighting, prototypes and hardness sampling.

    Every ``RunConfig`` field is a constructor parameter, so ``get_params`` /
    ``set_params`` and ``sklearn.base.clone`` work as usual. ``X`` is a stack
    of images ``[N, H, W, 3]`` and ``y`` the matching training masks
    ``[N, H, W]``.
    """

    def __init__(self, alpha_ube=3.0, lambda_gap=0.5, tau_gap=0.07, momentum=0.99,
                 beta_has=0.9, k_has=0.05, midpoint_has=None, tau_has=1.0, ema_period=50,
                 granularity_kernels=(3, 5, 7), num_classes=4, feature_dim=16, seed=0,
                 schedule="sigmoid", kd=3, ke=3, n_iters=2000, lr=0.05, hidden_dim=32,
                 patch_radius=1, feature_stride=4, ube_per_image=False, has_loss="total",
                 strategy="ube", strategy_alpha=5.0, strategy_tau=0.5, strategy_a=0.1,
                 strategy_gamma=0.5):
        self.alpha_ube = alpha_ube
        self.lambda_gap = lambda_gap
        self.tau_gap = tau_gap
        self.momentum = momentum
        self.beta_has = beta_has
        self.k_has = k_has
        self.midpoint_has = midpoint_has
        self.tau_has = tau_has
        self.ema_period = ema_period
        self.granularity_kernels = granularity_kernels
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.seed = seed
        self.schedule = schedule
        self.kd = kd
        self.ke = ke
        self.n_iters = n_iters
        self.lr = lr
        self.hidden_dim = hidden_dim
        self.patch_radius = patch_radius
        self.feature_stride = feature_stride
        self.ube_per_image = ube_per_image
        self.has_loss = has_loss
        self.strategy = strategy
        self.strategy_alpha = strategy_alpha
        self.strategy_tau = strategy_tau
        self.strategy_a = strategy_a
        self.strategy_gamma = strategy_gamma

    @classmethod
    def from_config(cls, config: RunConfig) -> "FlexSegSegmenter":
        return cls(**config.to_dict())

    def to_config(self) -> RunConfig:
        params = self.get_params()
        params["granularity_kernels"] = tuple(params["granularity_kernels"])
        cfg = RunConfig(**{k: params[k] for k in _CONFIG_FIELDS})
        cfg.validate()
        return cfg

    def fit(self, X, y, true_masks=None):
        """Train on images ``X`` and training masks ``y``.

        ``true_masks`` only affects the logged error rates; it defaults to ``y``.
        """
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if X.ndim != 4 or X.shape[-1] != 3 or y.shape != X.shape[:3]:
            raise ValueError(f"expected X [N,H,W,3] and y [N,H,W], got {X.shape} and {y.shape}")
        true = y if true_masks is None else np.asarray(true_masks)
        res = fit_arrays(X, y, true, self.to_config())
        self.model_ = res.model
        self.bank_ = res.bank
        self.hardness_ = res.hardness.scores.copy()
        self.history_ = res.rows
        self.classes_ = np.arange(self.num_classes)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 3
        stack = X[None] if single else X
        out = np.stack([softmax_probs(self.model_.forward(img)[0]) for img in stack])
        return out[0] if single else out

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=-1)

    def transform(self, X):
        """Prototype-space features ``[N, H_s, W_s, D]`` for each image."""
        check_is_fitted(self, "model_")
        X = np.asarray(X, dtype=np.float64)
        return np.stack([self.model_.forward(img)[1] for img in X])

    def score(self, X, y, sample_weight=None):
        """Mean pixel accuracy over non-ignored pixels."""
        y = np.asarray(y)
        valid = y != 255
        return float(np.mean(self.predict(X)[valid] == y[valid]))

    def error_rates(self, X, true_masks) -> dict:
        check_is_fitted(self, "model_")
        return evaluate(self.model_, np.asarray(X, dtype=np.float64), true_masks)

    def write_metrics(self, path) -> None:
        check_is_fitted(self, "history_")
        write_metrics(self.history_, path)
