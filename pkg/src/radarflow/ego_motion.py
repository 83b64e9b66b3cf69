"""Single-frame radar ego-velocity estimation and static/dynamic labelling.

For a static target seen along unit direction ``d`` from a sensor moving with
velocity ``v`` (sensor frame), the measured radial velocity is ``-d·v``.  The
static-world residual of a point is therefore ``r = v_r + d·v``; moving
targets show up as large residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import RadarFrame
from .errors import NoConsensus, TooFewPoints
from .validation import check_positive, check_radar_array

RANK_RTOL = 1e-6
DEGENERATE_DET = 1e-6
MAX_RESAMPLE_ROUNDS = 20


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 200
    inlier_threshold: float = 0.25
    min_inliers: int = 10
    seed: int = 0

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ValueError("iterations must be >= 1")
        check_positive(self.inlier_threshold, "inlier_threshold")
        if int(self.min_inliers) < 0:
            raise ValueError("min_inliers must be >= 0")


@dataclass(frozen=True, eq=False)
class EgoMotionEstimate:
    velocity: np.ndarray
    inlier_indices: np.ndarray
    rms_residual: float
    rank_deficient: bool = False
    hypothesis_index: int = field(default=-1, compare=False)

    def to_dict(self) -> dict:
        return {
            "velocity": [float(x) for x in self.velocity],
            "inlier_indices": [int(i) for i in self.inlier_indices],
            "rms_residual": float(self.rms_residual),
            "rank_deficient": bool(self.rank_deficient),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EgoMotionEstimate":
        return cls(
            velocity=np.asarray(d["velocity"], dtype=np.float64),
            inlier_indices=np.asarray(d["inlier_indices"], dtype=np.int64),
            rms_residual=float(d["rms_residual"]),
            rank_deficient=bool(d.get("rank_deficient", False)),
        )


def radial_projection(directions: np.ndarray, v) -> np.ndarray:
    """``d_i · v`` for every row, summed in a fixed order so that results are
    bitwise reproducible between the simulator and the estimator."""
    return directions[:, 0] * v[0] + directions[:, 1] * v[1] + directions[:, 2] * v[2]


def static_residuals(frame: RadarFrame, velocity) -> np.ndarray:
    """``v_r + d·v`` for every point of ``frame``."""
    return frame.radial_velocity + radial_projection(frame.directions(), velocity)


def _truncated_lstsq(A, b):
    """Minimum-norm least squares with singular values below ``RANK_RTOL·σ_max`` zeroed."""
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(A.shape[1]), True
    keep = s >= RANK_RTOL * s[0]
    coef = np.where(keep, (U.T @ b) / np.where(keep, s, 1.0), 0.0)
    return Vt.T @ coef, bool(not np.all(keep) or len(s) < A.shape[1])


def _draw_triples(rng, n, count):
    keys = rng.random((count, n))
    return np.sort(np.argpartition(keys, 2, axis=1)[:, :3], axis=1)


def estimate_ego_velocity(frame: RadarFrame, cfg: RansacConfig = RansacConfig()) -> EgoMotionEstimate:
    """RANSAC over minimal 3-point samples followed by a least-squares refit on the consensus set.

    Hypotheses are ranked by inlier count, ties going to the earliest
    hypothesis, so the result depends only on ``(frame, cfg)``.
    """
    n = len(frame)
    if n < 3:
        raise TooFewPoints(f"need at least 3 radar points, got {n}")
    D = frame.directions()
    vr = frame.radial_velocity
    rng = np.random.default_rng(cfg.seed)

    frame_rank_deficient = _truncated_lstsq(D, -vr)[1]
    triples = _draw_triples(rng, n, cfg.iterations)
    samples = D[triples]  # (K, 3, 3)
    if not frame_rank_deficient:
        for _ in range(MAX_RESAMPLE_ROUNDS):
            bad = np.abs(np.linalg.det(samples)) < DEGENERATE_DET
            if not bad.any():
                break
            triples[bad] = _draw_triples(rng, n, int(bad.sum()))
            samples = D[triples]
        usable = np.abs(np.linalg.det(samples)) >= DEGENERATE_DET
    else:
        usable = np.ones(len(triples), dtype=bool)

    hyps = np.zeros((len(triples), 3))
    if frame_rank_deficient:
        for k, tri in enumerate(triples):
            hyps[k] = _truncated_lstsq(D[tri], -vr[tri])[0]
    elif usable.any():
        hyps[usable] = np.linalg.solve(samples[usable], -vr[triples[usable]][..., None])[..., 0]

    within = np.abs(vr[None, :] + hyps @ D.T) <= cfg.inlier_threshold
    counts = np.where(usable, within.sum(axis=1), -1)
    best = int(np.argmax(counts))
    if counts[best] < max(cfg.min_inliers, 3):
        raise NoConsensus(f"best hypothesis has {max(counts[best], 0)} inliers, need {cfg.min_inliers}")

    inliers = np.flatnonzero(within[best])
    velocity, rank_def = _truncated_lstsq(D[inliers], -vr[inliers])
    res = vr[inliers] + radial_projection(D[inliers], velocity)
    return EgoMotionEstimate(
        velocity=velocity,
        inlier_indices=inliers.astype(np.int64),
        rms_residual=float(np.sqrt(np.mean(res**2))),
        rank_deficient=bool(rank_def or frame_rank_deficient),
        hypothesis_index=best,
    )


def classify_dynamic(frame: RadarFrame, est: EgoMotionEstimate, tau_dyn: float = 0.5) -> np.ndarray:
    """Boolean per point: ``True`` iff ``|v_r + d·v̂| > tau_dyn``."""
    check_positive(tau_dyn, "tau_dyn")
    return np.abs(static_residuals(frame, est.velocity)) > tau_dyn


def compensate(frame: RadarFrame, velocity) -> np.ndarray:
    """Ego-compensated radial velocity, i.e. the radial speed of each target in the world."""
    return static_residuals(frame, velocity)


class RansacEgoMotion(BaseEstimator):
    """Estimator wrapper: ``fit`` on one radar frame, ``predict`` dynamic labels.

    ``X`` is either a :class:`~radarflow.core.RadarFrame` or an ``(N, 4)``
    array of ``x, y, z, v_r`` in the sensor frame.
    """

    def __init__(self, iterations=200, inlier_threshold=0.25, min_inliers=10, tau_dyn=0.5, random_state=0):
        self.iterations = iterations
        self.inlier_threshold = inlier_threshold
        self.min_inliers = min_inliers
        self.tau_dyn = tau_dyn
        self.random_state = random_state

    def _config(self):
        return RansacConfig(self.iterations, self.inlier_threshold, self.min_inliers, int(self.random_state or 0))

    def fit(self, X, y=None):
        frame = check_radar_array(X)
        self.estimate_ = estimate_ego_velocity(frame, self._config())
        self.velocity_ = self.estimate_.velocity
        self.inlier_indices_ = self.estimate_.inlier_indices
        self.rms_residual_ = self.estimate_.rms_residual
        self.n_features_in_ = 4
        return self

    def predict(self, X):
        check_is_fitted(self, "estimate_")
        return classify_dynamic(check_radar_array(X), self.estimate_, self.tau_dyn)

    def fit_predict(self, X, y=None):
        return self.fit(X).predict(X)

    def transform(self, X):
        """Return ``X`` as an ``(N, 4)`` array with ``v_r`` replaced by its ego-compensated value."""
        check_is_fitted(self, "estimate_")
        frame = check_radar_array(X)
        return np.column_stack([frame.positions, compensate(frame, self.velocity_)])
