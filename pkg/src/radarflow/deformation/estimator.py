from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ..flow_lift import stack_samples
from .coupling import ALPHA, HIDDEN, N_FREQS, N_LAYERS, CouplingField
from .objective import loss_flow
from .training import TrainConfig, fit


class DeformationFieldRegressor(BaseEstimator, RegressorMixin):
    """Fit an invertible deformation field to scene-flow samples.

    ``fit(samples)`` takes a list of :class:`~radarflow.flow_lift.SceneFlowSample`.
    ``predict(X)`` takes an ``(N, 5)`` array ``x, y, z, t_i, t_j`` (times in
    seconds) and returns warped positions ``(N, 3)``.
    """

    def __init__(
        self,
        n_layers=N_LAYERS,
        hidden=HIDDEN,
        n_freqs=N_FREQS,
        alpha=ALPHA,
        learning_rate=1e-3,
        iterations=2000,
        batch_size=1024,
        lambda_flow=1.0,
        lambda_rad=0.5,
        lr_final=None,
        random_state=0,
    ):
        self.n_layers = n_layers
        self.hidden = hidden
        self.n_freqs = n_freqs
        self.alpha = alpha
        self.learning_rate = learning_rate
        self.iterations = iterations
        self.batch_size = batch_size
        self.lambda_flow = lambda_flow
        self.lambda_rad = lambda_rad
        self.lr_final = lr_final
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            iterations=self.iterations,
            batch_size=self.batch_size,
            lambda_flow=self.lambda_flow,
            lambda_rad=self.lambda_rad,
            lr_final=self.lr_final,
            seed=int(self.random_state or 0),
        )

    def fit(self, X, y=None):
        arr = stack_samples(X)
        if len(arr) == 0:
            raise ValueError("no samples to fit")
        seed = int(self.random_state or 0)
        init = CouplingField.for_points(
            np.vstack([arr.x_ti, arr.x_tj]),
            np.concatenate([arr.t_i, arr.t_j]),
            seed=seed,
            n_layers=self.n_layers,
            hidden=self.hidden,
            n_freqs=self.n_freqs,
            alpha=self.alpha,
        )
        self.field_, self.loss_history_ = fit(init, arr, self._train_config())
        return self

    def predict(self, X):
        check_is_fitted(self, "field_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 5:
            raise ValueError("X must have columns x, y, z, t_i, t_j")
        f = self.field_
        return f.warp(X[:, :3], f.normalize_time(X[:, 3]), f.normalize_time(X[:, 4]))

    def score(self, X, y=None, sample_weight=None):
        """Negative mean squared endpoint error on a list of samples."""
        check_is_fitted(self, "field_")
        arr = stack_samples(X)
        return -loss_flow(self.field_, arr) / max(len(arr), 1)
