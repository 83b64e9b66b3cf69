"""Compare pipeline outputs with simulator ground truth."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import LengthMismatch
from .flow_lift import SampleArrays, stack_samples
from .deformation.objective import predict_targets, radial_residuals

MEMBERSHIP_TOL = 0.05  # m, slack when assigning a point to a box surface


@dataclass
class Predictions:
    """Per-frame pipeline outputs; any entry may be ``None`` to skip its metric."""

    ego_velocity: list | None = None  # (3,) per frame, sensor frame
    dyn_labels: list | None = None  # bool array per frame
    scales: list | None = None  # float per frame
    samples: list | None = None  # SceneFlowSample list (all frame pairs)
    field: object | None = None  # trained deformation field


@dataclass
class MetricsReport:
    n_frames: int
    ego_velocity_rmse: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    scale_rel_error_mean: float | None = None
    scale_rel_error_max: float | None = None
    n_samples: int = 0
    scene_flow_epe: float | None = None
    warp_epe: float | None = None
    l_rad: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)

    def to_csv(self) -> str:
        from .io import metrics_to_csv

        return metrics_to_csv(self.to_dict())

    def write(self, json_path, csv_path=None):
        with open(json_path, "w") as fh:
            fh.write(self.to_json() + "\n")
        if csv_path is not None:
            with open(csv_path, "w") as fh:
                fh.write(self.to_csv())


def _check_len(name, values, n):
    if values is not None and len(values) != n:
        raise LengthMismatch(f"{name}: {len(values)} entries for {n} frames")


def label_scores(pred, truth) -> tuple[float, float, float]:
    """Precision, recall and F1 for boolean arrays (empty denominators give 0)."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    precision = tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def true_targets(scene, bundles, samples) -> np.ndarray:
    """Ground-truth ``x_tj`` (ego frame at ``t_j``) for each sample.

    The sample's world position at ``t_i`` is assigned to the dynamic box it
    lies on (within ``MEMBERSHIP_TOL``) and moved with that box; anything
    else is treated as static.
    """
    arr = stack_samples(samples)
    if len(arr) == 0:
        return np.zeros((0, 3))
    times = np.array([b.timestamp for b in bundles])
    out = np.empty_like(arr.x_ti)
    dyn = range(scene.n_static, len(scene.boxes))
    for k in range(len(arr)):
        i = int(np.argmin(np.abs(times - arr.t_i[k])))
        j = int(np.argmin(np.abs(times - arr.t_j[k])))
        p = bundles[i].ego_pose.apply(arr.x_ti[k])
        lo, hi = scene.box_bounds(arr.t_i[k])
        vel = np.zeros(3)
        for b in dyn:
            if np.all(p >= lo[b] - MEMBERSHIP_TOL) and np.all(p <= hi[b] + MEMBERSHIP_TOL):
                vel = np.asarray(scene.boxes[b].velocity, dtype=np.float64)
                break
        moved = p + vel * (arr.t_j[k] - arr.t_i[k])
        out[k] = bundles[j].ego_pose.inverse().apply(moved)
    return out


def _epe(a, b):
    return float(np.mean(np.linalg.norm(a - b, axis=1))) if len(a) else None


def evaluate(scene, bundles, predictions: Predictions) -> MetricsReport:
    """Metrics of ``predictions`` against the ground truth in ``bundles``.

    ``scene`` is the :class:`~radarflow.simulator.Scene` the bundles came
    from; it supplies object geometry for the scene-flow ground truth.
    """
    n = len(bundles)
    _check_len("ego_velocity", predictions.ego_velocity, n)
    _check_len("dyn_labels", predictions.dyn_labels, n)
    _check_len("scales", predictions.scales, n)
    rep = MetricsReport(n_frames=n)

    if predictions.ego_velocity is not None:
        err = np.array([np.asarray(v, dtype=np.float64) - b.ego_velocity for v, b in zip(predictions.ego_velocity, bundles)])
        rep.ego_velocity_rmse = float(np.sqrt(np.mean(np.sum(err * err, axis=1)))) if n else 0.0

    if predictions.dyn_labels is not None:
        for lab, b in zip(predictions.dyn_labels, bundles):
            if len(lab) != len(b.dyn_labels_gt):
                raise LengthMismatch(f"frame {b.index}: {len(lab)} labels for {len(b.dyn_labels_gt)} points")
        pred = np.concatenate([np.asarray(x, dtype=bool) for x in predictions.dyn_labels]) if n else np.zeros(0, bool)
        truth = np.concatenate([b.dyn_labels_gt for b in bundles]) if n else np.zeros(0, bool)
        rep.precision, rep.recall, rep.f1 = label_scores(pred, truth)

    if predictions.scales is not None:
        s_gt = scene.cfg.relative_depth_scale
        rel = np.abs(np.asarray(predictions.scales, dtype=np.float64) - s_gt) / s_gt
        rep.scale_rel_error_mean = float(np.mean(rel)) if n else 0.0
        rep.scale_rel_error_max = float(np.max(rel)) if n else 0.0

    if predictions.samples is not None:
        arr: SampleArrays = stack_samples(predictions.samples)
        rep.n_samples = len(arr)
        gt = true_targets(scene, bundles, arr)
        rep.scene_flow_epe = _epe(arr.x_tj, gt)
        if predictions.field is not None and len(arr):
            x_hat = predict_targets(predictions.field, arr)
            rep.warp_epe = _epe(x_hat, gt)
            rad = arr.has_radial
            if rad.any():
                r = np.abs(radial_residuals(arr.subset(rad), x_hat[rad]))
                rep.l_rad = {
                    "count": int(r.size),
                    "mean": float(np.mean(r)),
                    "median": float(np.median(r)),
                    "max": float(np.max(r)),
                    "sum": float(np.sum(r)),
                }
    return rep
