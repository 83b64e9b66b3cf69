from .coupling import CouplingField, time_embedding
from .estimator import DeformationFieldRegressor
from .objective import gradients, loss_and_gradient, loss_flow, loss_rad, predict_targets, predicted_flow, total_loss
from .rigid import RigidTrajectoryField, fit_rigid, kabsch
from .training import Adam, TrainConfig, fit


def field_from_dict(d: dict):
    if d.get("type") == "rigid":
        return RigidTrajectoryField.from_dict(d)
    return CouplingField.from_dict(d)


def forward(field, x, t):
    return field.forward(x, t)


def inverse(field, y, t):
    return field.inverse(y, t)


def warp(field, x, t_i, t_j):
    return field.warp(x, t_i, t_j)


__all__ = [
    "Adam",
    "CouplingField",
    "DeformationFieldRegressor",
    "RigidTrajectoryField",
    "TrainConfig",
    "field_from_dict",
    "fit",
    "fit_rigid",
    "forward",
    "gradients",
    "inverse",
    "kabsch",
    "loss_and_gradient",
    "loss_flow",
    "loss_rad",
    "predict_targets",
    "predicted_flow",
    "time_embedding",
    "total_loss",
    "warp",
]
