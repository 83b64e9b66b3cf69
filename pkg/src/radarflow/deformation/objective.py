"""Flow-consistency and radial-displacement losses and their exact gradients.

``L_flow = Σ ‖warp(x_ti; t_i→t_j) − x_tj‖²`` compared in the ego frame at
``t_j``.

``L_rad = Σ |F·û − v_r Δt|`` with predicted flow
``F = T_j_to_i · warp(x_ti) − x_ti`` and line of sight
``û = (x_ti − A) / ‖x_ti − A‖``, both in the ego frame at ``t_i``. Only
samples carrying a radial velocity enter ``L_rad``.
"""

from __future__ import annotations

import numpy as np

from ..errors import MissingRadialVelocity, SampleAtRadarOrigin
from ..flow_lift import stack_samples

MIN_ORIGIN_DISTANCE = 0.1


def _times(field, arr):
    return field.normalize_time(arr.t_i), field.normalize_time(arr.t_j)


def predict_targets(field, samples) -> np.ndarray:
    """Predicted ``x̂_tj`` (ego frame at ``t_j``) for every sample."""
    arr = stack_samples(samples)
    if len(arr) == 0:
        return np.zeros((0, 3))
    ti, tj = _times(field, arr)
    return field.warp(arr.x_ti, ti, tj)


def predicted_flow(arr, x_hat) -> np.ndarray:
    """``T_j_to_i · x̂_tj − x_ti`` in the ego frame at ``t_i``."""
    return np.einsum("nij,nj->ni", arr.R_ji, x_hat) + arr.t_ji - arr.x_ti


def line_of_sight(arr) -> np.ndarray:
    rel = arr.x_ti - arr.origin
    dist = np.linalg.norm(rel, axis=1, keepdims=True)
    if np.any(dist <= MIN_ORIGIN_DISTANCE):
        raise SampleAtRadarOrigin(f"sample within {MIN_ORIGIN_DISTANCE} m of the radar origin")
    return rel / dist


def radial_residuals(arr, x_hat) -> np.ndarray:
    """``F·û − v_r Δt`` for samples that all carry a radial velocity."""
    if not np.all(arr.has_radial):
        raise MissingRadialVelocity("every sample needs a radial velocity for L_rad")
    u = line_of_sight(arr)
    F = predicted_flow(arr, x_hat)
    return np.sum(F * u, axis=1) - arr.radial_velocity * (arr.t_j - arr.t_i)


def loss_flow(field, samples) -> float:
    arr = stack_samples(samples)
    if len(arr) == 0:
        return 0.0
    d = predict_targets(field, arr) - arr.x_tj
    return float(np.sum(d * d))


def loss_rad(field, samples) -> float:
    arr = stack_samples(samples)
    if len(arr) == 0:
        return 0.0
    return float(np.sum(np.abs(radial_residuals(arr, predict_targets(field, arr)))))


def total_loss(field, samples, lambda_flow=1.0, lambda_rad=0.5, params=None) -> float:
    return loss_and_gradient(field, samples, lambda_flow, lambda_rad, params, need_grad=False)[0]


def loss_and_gradient(field, samples, lambda_flow=1.0, lambda_rad=0.5, params=None, need_grad=True):
    """``λ_flow·L_flow + λ_rad·L_rad`` and its gradient w.r.t. the field's flat parameters.

    Samples without a radial velocity contribute to ``L_flow`` only.
    """
    arr = stack_samples(samples)
    params = field.params if params is None else params
    if len(arr) == 0:
        return 0.0, np.zeros_like(params)
    ti, tj = _times(field, arr)
    if need_grad:
        x_hat, vjp = field.warp_with_vjp(arr.x_ti, ti, tj, params)
    else:
        x_hat = field.warp(arr.x_ti, ti, tj, params)

    d = x_hat - arr.x_tj
    loss = lambda_flow * float(np.sum(d * d))
    g = 2.0 * lambda_flow * d

    rad = arr.has_radial
    if lambda_rad != 0.0 and rad.any():
        sub = arr.subset(rad)
        u = line_of_sight(sub)
        res = np.sum(predicted_flow(sub, x_hat[rad]) * u, axis=1) - sub.radial_velocity * (sub.t_j - sub.t_i)
        loss += lambda_rad * float(np.sum(np.abs(res)))
        g_F = (lambda_rad * np.sign(res))[:, None] * u
        g[rad] += np.einsum("nji,nj->ni", sub.R_ji, g_F)

    if not need_grad:
        return loss, None
    return loss, vjp(g)


def gradients(field, samples, weights=(1.0, 0.5), params=None) -> np.ndarray:
    """Exact parameter gradient of the weighted loss (``weights = (λ_flow, λ_rad)``)."""
    return loss_and_gradient(field, samples, weights[0], weights[1], params)[1]
