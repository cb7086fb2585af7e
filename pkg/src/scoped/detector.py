"""scikit-learn estimator front-end over the functional pipeline.

``ScopedDetector`` follows the outlier-estimator conventions: ``fit`` on
in-distribution data (optionally training the score network), then
``score_samples`` returns higher-is-more-normal values (the negated anomaly
NLL), ``decision_function`` subtracts the calibrated offset, and ``predict``
labels inliers +1 / outliers -1.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .calibration import anomaly_score_batch, calibrate, threshold_from_quantile
from .errors import InputError
from .schedule import build_linear_schedule, select_mid_step, snr_curve
from .score_models import DsmTrainConfig, MlpDenoiser, train_dsm
from .typicality import TypicalityConfig


class ScopedDetector(OutlierMixin, BaseEstimator):
    """Unsupervised OOD detector built on the score-curvature statistic.

    Fitting trains an MLP score network on X by denoising score matching
    (skipped when ``score_model`` is given), picks evaluation noise levels
    from the signal-fraction curve, and calibrates per-level KDEs over the
    in-distribution statistic. ``alpha`` sets the target false-positive
    rate of ``predict`` via the (1 - alpha) quantile of ID scores.

    Parameters mirror the pipeline config; see the project README for the
    full glossary.
    """

    def __init__(self, variant="two-step", timesteps="auto", retention=0.95,
                 early_step=1, n_steps=1000, beta_min=1e-4, beta_max=0.02,
                 hidden=(128, 128, 128), activation="tanh",
                 parameterization="eps", epochs=200, batch_size=128, lr=1e-3,
                 num_probes=1, probe_kind="rademacher", epsilon=1e-12,
                 noise_mode="fresh", apply_sign=True, bandwidth_rule="silverman",
                 alpha=0.05, score_model=None, n_workers=None, random_state=0):
        self.variant = variant
        self.timesteps = timesteps
        self.retention = retention
        self.early_step = early_step
        self.n_steps = n_steps
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.hidden = hidden
        self.activation = activation
        self.parameterization = parameterization
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.num_probes = num_probes
        self.probe_kind = probe_kind
        self.epsilon = epsilon
        self.noise_mode = noise_mode
        self.apply_sign = apply_sign
        self.bandwidth_rule = bandwidth_rule
        self.alpha = alpha
        self.score_model = score_model
        self.n_workers = n_workers
        self.random_state = random_state

    def _typicality_config(self):
        return TypicalityConfig(
            num_probes=self.num_probes, probe_kind=self.probe_kind,
            epsilon=self.epsilon, noise_mode=self.noise_mode,
            seed=int(self.random_state), apply_sign=self.apply_sign,
        )

    def _select_timesteps(self, X):
        if self.timesteps != "auto":
            return [t for t in self.timesteps]
        curve = snr_curve(X, self.schedule_)
        mid = select_mid_step(curve, self.retention)
        if self.variant == "two-step":
            return [int(self.early_step), mid]
        return [mid]

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.variant not in ("single", "two-step"):
            raise InputError("detector variant must be 'single' or 'two-step'")
        self.schedule_ = build_linear_schedule(self.n_steps, self.beta_min, self.beta_max)
        if self.score_model is not None:
            self.model_ = self.score_model
            if getattr(self.model_, "schedule", None) is None:
                self.model_.schedule = self.schedule_
        else:
            model = MlpDenoiser(
                dim=X.shape[1], hidden=self.hidden, activation=self.activation,
                parameterization=self.parameterization,
                seed=int(self.random_state), schedule=self.schedule_,
            )
            train_cfg = DsmTrainConfig(
                epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                seed=int(self.random_state),
            )
            model, self.loss_trace_ = train_dsm(model, X, self.schedule_, train_cfg)
            self.model_ = model
        cfg = self._typicality_config()
        self.timesteps_ = self._select_timesteps(X)
        self.artifact_ = calibrate(
            self.model_, X, self.timesteps_, self.schedule_, cfg,
            bandwidth_rule=self.bandwidth_rule, variant=self.variant,
            n_workers=self.n_workers,
        )
        self.offset_ = -threshold_from_quantile(self.artifact_.id_nll_scores(), self.alpha)
        self.n_features_in_ = X.shape[1]
        return self

    def score_samples(self, X):
        """Negated anomaly NLL: higher means more in-distribution."""
        check_is_fitted(self, "artifact_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InputError(
                f"X has {X.shape[1]} features; detector was fit with {self.n_features_in_}"
            )
        results, _, _ = anomaly_score_batch(
            self.artifact_, self.model_, X, self.schedule_,
            self._typicality_config(), n_workers=self.n_workers,
        )
        return np.array([np.nan if r is None else -r.value for r in results])

    def decision_function(self, X):
        """Positive for inliers, negative for outliers."""
        return self.score_samples(X) - self.offset_

    def predict(self, X):
        """+1 inlier, -1 outlier at the calibrated alpha cutoff."""
        return np.where(self.decision_function(X) < 0, -1, 1)
