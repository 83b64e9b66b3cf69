"""Piecewise-rigid trajectory field and its closed-form fit."""

from __future__ import annotations

from collections import defaultdict

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from ..core import RigidTransform
from ..errors import DegenerateCorrespondences
from ..flow_lift import stack_samples


def kabsch(src, dst) -> RigidTransform:
    """Least-squares rigid transform with ``dst ≈ T(src)``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) < 3:
        raise DegenerateCorrespondences(f"need at least 3 correspondences, got {len(src)}")
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    A, B = src - ms, dst - md
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] == 0.0 or sv[1] < 1e-9 * sv[0]:
        raise DegenerateCorrespondences("correspondences are collinear")
    U, _, Vt = np.linalg.svd(A.T @ B)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, md - R @ ms)


class RigidTrajectoryField:
    """Keyframed poses ``pose(t)`` mapping canonical coordinates to time ``t``.

    Between keyframes the rotation is slerped and the translation linearly
    interpolated; outside the keyframe span the nearest keyframe is used.
    Times passed to :meth:`forward`/:meth:`inverse`/:meth:`warp` are
    normalised to ``[0, 1]`` over ``time_range``.
    """

    def __init__(self, times, poses, time_range=(0.0, 1.0)):
        self.times = np.asarray(times, dtype=np.float64)
        self.poses = list(poses)
        if len(self.times) != len(self.poses) or len(self.times) == 0:
            raise ValueError("need one pose per keyframe time")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("keyframe times must increase")
        self.time_range = (float(time_range[0]), float(time_range[1]))
        self._rot = Rotation.from_matrix(np.array([p.rotation for p in self.poses]))
        self._trans = np.array([p.translation for p in self.poses])
        self._slerp = Slerp(self.times, self._rot) if len(self.times) > 1 else None

    def normalize_time(self, t_seconds):
        t0, t1 = self.time_range
        return (np.asarray(t_seconds, dtype=np.float64) - t0) / (t1 - t0)

    def pose(self, t) -> RigidTransform:
        R, tr = self._interp(np.array([float(t)]))
        return RigidTransform(R[0], tr[0])

    def _interp(self, t):
        t = np.clip(np.asarray(t, dtype=np.float64).reshape(-1), self.times[0], self.times[-1])
        if self._slerp is None:
            return np.repeat(self._rot.as_matrix(), len(t), axis=0), np.repeat(self._trans, len(t), axis=0)
        R = self._slerp(t).as_matrix()
        k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        w = ((t - self.times[k]) / (self.times[k + 1] - self.times[k]))[:, None]
        tr = (1 - w) * self._trans[k] + w * self._trans[k + 1]
        # exact keyframe poses at keyframe times
        exact = np.isin(t, self.times)
        if exact.any():
            idx = np.searchsorted(self.times, t[exact])
            R[exact] = np.array([self.poses[i].rotation for i in idx])
            tr[exact] = self._trans[idx]
        return R, tr

    def _prep(self, x, t):
        X = np.asarray(x, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X).reshape(-1, 3)
        R, tr = self._interp(np.broadcast_to(np.asarray(t, dtype=np.float64), (len(X),)))
        return X, R, tr, single

    def forward(self, x, t):
        X, R, tr, single = self._prep(x, t)
        y = np.einsum("nij,nj->ni", R, X) + tr
        return y[0] if single else y

    def inverse(self, y, t):
        Y, R, tr, single = self._prep(y, t)
        x = np.einsum("nji,nj->ni", R, Y - tr)
        return x[0] if single else x

    def warp(self, x, t_i, t_j):
        X = np.asarray(x, dtype=np.float64)
        single = X.ndim == 1
        out = self.forward(self.inverse(np.atleast_2d(X), t_i), t_j)
        return out[0] if single else out

    def to_dict(self) -> dict:
        return {
            "type": "rigid",
            "time_range": list(self.time_range),
            "times": [float(t) for t in self.times],
            "poses": [p.to_list() for p in self.poses],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTrajectoryField":
        if d.get("type") != "rigid":
            raise ValueError("not a rigid-field document")
        return cls(d["times"], [RigidTransform.from_list(p) for p in d["poses"]], d["time_range"])


def fit_rigid(samples, timestamps) -> RigidTrajectoryField:
    """Chain per-pair Kabsch fits into a trajectory anchored at the middle frame.

    ``timestamps`` are the frame times (seconds); every consecutive pair must
    have at least three non-collinear correspondences among ``samples``.
    """
    ts = np.asarray(sorted(float(t) for t in timestamps))
    if len(ts) < 2:
        raise DegenerateCorrespondences("need at least two timestamps")
    arr = stack_samples(samples)
    groups = defaultdict(list)
    for k, (a, b) in enumerate(zip(arr.t_i, arr.t_j)):
        groups[(float(a), float(b))].append(k)
    steps = []
    for k in range(len(ts) - 1):
        idx = groups.get((ts[k], ts[k + 1]))
        if not idx:
            raise DegenerateCorrespondences(f"no correspondences between t={ts[k]} and t={ts[k + 1]}")
        steps.append(kabsch(arr.x_ti[idx], arr.x_tj[idx]))

    mid = len(ts) // 2
    poses = [None] * len(ts)
    poses[mid] = RigidTransform.identity()
    for k in range(mid, len(ts) - 1):
        poses[k + 1] = steps[k].compose(poses[k])
    for k in range(mid - 1, -1, -1):
        poses[k] = steps[k].inverse().compose(poses[k + 1])
    time_range = (ts[0], ts[-1])
    return RigidTrajectoryField((ts - ts[0]) / (ts[-1] - ts[0]), poses, time_range)
