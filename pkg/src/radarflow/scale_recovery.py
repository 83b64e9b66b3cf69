"""Metric scale of a relative depth map from static radar returns.

Visual points (back-projected relative depth) and static radar points are
matched by direction on the unit sphere. The three nearest visual neighbours
of a radar point span a local plane with normal ``n``; since the radar point
lies on the metric version of that plane, ``s = (n·p_radar) / (n·p_a)``.
Per-point scales are combined by histogram voting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import CameraModel, DepthImage, RadarFrame, RigidTransform, ScaleState, back_project_many
from .errors import (
    DegeneratePlane,
    NonPositiveScale,
    NoStaticPoints,
    NoValidSamples,
    TooFewPoints,
    UnstableDenominator,
    ZeroNorm,
)
from .validation import check_labels

COLLINEAR_TOL = 1e-6


@dataclass(frozen=True)
class ScaleConfig:
    max_spherical_spread: float = 0.02
    max_depth_ratio: float = 1.15
    min_normal_dot: float = 0.05
    hist_min: float = 0.05
    hist_max: float = 50.0
    hist_bins: int = 512
    subsample_stride: int = 4

    def __post_init__(self):
        if not self.hist_min < self.hist_max:
            raise ValueError("hist_min must be below hist_max")
        if int(self.hist_bins) < 2:
            raise ValueError("hist_bins must be >= 2")
        if not self.max_depth_ratio > 1:
            raise ValueError("max_depth_ratio must exceed 1")
        if int(self.subsample_stride) < 1:
            raise ValueError("subsample_stride must be >= 1")


@dataclass(frozen=True)
class ScaleSample:
    radar_index: int
    scale: float
    neighbor_indices: tuple[int, int, int]


def sphere_directions(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    norms = np.linalg.norm(p, axis=1, keepdims=True)
    if np.any(norms <= 1e-6):
        raise ZeroNorm("cannot project a point at the origin onto the unit sphere")
    return p / norms


class SphereIndex:
    """KD-tree over unit directions answering 3-NN queries.

    Distances are Euclidean chords, which order neighbours exactly like the
    great-circle angle. Ties are broken by lowest index.
    """

    def __init__(self, directions):
        self.directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        if len(self.directions) < 3:
            raise TooFewPoints(f"need at least 3 visual directions, got {len(self.directions)}")
        self._tree = cKDTree(self.directions)

    def __len__(self):
        return len(self.directions)

    def query3(self, queries) -> np.ndarray:
        """Indices ``(M, 3)`` of the three nearest directions for each query."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n = len(self.directions)
        k = min(n, 8)
        _, cand = self._tree.query(q, k=k)
        cand = cand.reshape(len(q), k)
        out = np.empty((len(q), 3), dtype=np.int64)
        for i in range(len(q)):
            c = cand[i]
            d = np.sum((self.directions[c] - q[i]) ** 2, axis=1)
            order = np.lexsort((c, d))
            if k < n and d[order[2]] == d.max():
                # tie extends past the candidate list; fall back to an exhaustive scan
                d_all = np.sum((self.directions - q[i]) ** 2, axis=1)
                out[i] = np.lexsort((np.arange(n), d_all))[:3]
            else:
                out[i] = c[order[:3]]
        return out


def nearest3_on_sphere(visual_dirs, query) -> np.ndarray:
    index = visual_dirs if isinstance(visual_dirs, SphereIndex) else SphereIndex(visual_dirs)
    return index.query3(np.asarray(query, dtype=np.float64).reshape(1, 3))[0]


def plane_scale(p_radar, p_a, p_b, p_c, cfg: ScaleConfig = ScaleConfig()) -> float:
    p_radar, p_a, p_b, p_c = (np.asarray(x, dtype=np.float64) for x in (p_radar, p_a, p_b, p_c))
    e1, e2 = p_a - p_b, p_b - p_c
    n = np.cross(e1, e2)
    denom_len = np.linalg.norm(e1) * np.linalg.norm(e2)
    n_len = np.linalg.norm(n)
    if denom_len == 0.0 or n_len / denom_len < COLLINEAR_TOL:
        raise DegeneratePlane("visual neighbours are collinear")
    na = float(n @ p_a)
    if abs(na) / (n_len * np.linalg.norm(p_a)) < cfg.min_normal_dot:
        raise UnstableDenominator("plane nearly contains the camera centre")
    s = float(n @ p_radar) / na
    if not s > 0:
        raise NonPositiveScale(f"plane scale {s} is not positive")
    return s


def _angle(a, b):
    return np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), np.sum(a * b, axis=-1))


def visual_points(depth: DepthImage, cam: CameraModel, stride: int = 4):
    """Back-project every ``stride``-th valid pixel; returns ``(points, depths)``."""
    if depth.data.shape != cam.shape:
        raise ValueError("depth image and camera dimensions differ")
    rows = np.arange(0, depth.height, stride)
    cols = np.arange(0, depth.width, stride)
    vv, uu = np.meshgrid(rows, cols, indexing="ij")
    d = depth.data[vv, uu]
    ok = d > 0
    return back_project_many(cam, uu[ok], vv[ok], d[ok]), d[ok]


def collect_scale_samples(
    depth: DepthImage,
    cam: CameraModel,
    frame: RadarFrame,
    dyn_labels,
    cfg: ScaleConfig = ScaleConfig(),
    ego_from_sensor: RigidTransform | None = None,
) -> list[ScaleSample]:
    """Per-radar-point scale estimates that pass the local-plane validity checks.

    A static radar point is kept when its direction and its three neighbours'
    directions are pairwise within ``max_spherical_spread``, the neighbours'
    relative depths agree within ``max_depth_ratio`` and the plane is well
    conditioned.
    """
    if depth.scale_state != ScaleState.RELATIVE:
        raise ValueError("scale recovery expects a relative depth image")
    labels = check_labels(dyn_labels, len(frame))
    static_idx = np.flatnonzero(~labels)
    if len(static_idx) == 0:
        raise NoStaticPoints("every radar point is labelled dynamic")
    cam_from_sensor = cam.cam_from_ego
    if ego_from_sensor is not None:
        cam_from_sensor = cam_from_sensor.compose(ego_from_sensor)
    radar_cam = cam_from_sensor.apply(frame.positions[static_idx])

    vis, vis_depth = visual_points(depth, cam, int(cfg.subsample_stride))
    index = SphereIndex(sphere_directions(vis))
    radar_dirs = sphere_directions(radar_cam)
    nbrs = index.query3(radar_dirs)

    samples = []
    for k, ridx in enumerate(static_idx):
        nb = nbrs[k]
        dirs = np.vstack([radar_dirs[k], index.directions[nb]])
        ii, jj = np.triu_indices(4, 1)
        if np.max(_angle(dirs[ii], dirs[jj])) > cfg.max_spherical_spread:
            continue
        dz = vis_depth[nb]
        if dz.max() / dz.min() > cfg.max_depth_ratio:
            continue
        try:
            s = plane_scale(radar_cam[k], vis[nb[0]], vis[nb[1]], vis[nb[2]], cfg)
        except (DegeneratePlane, UnstableDenominator, NonPositiveScale):
            continue
        samples.append(ScaleSample(int(ridx), s, tuple(int(i) for i in nb)))
    return samples


def _scale_values(samples):
    return np.asarray([s.scale if isinstance(s, ScaleSample) else s for s in samples], dtype=np.float64)


def vote_scale(samples, cfg: ScaleConfig = ScaleConfig()) -> float:
    """Histogram mode refined by the median of the samples in the mode bin and its neighbours."""
    vals = _scale_values(samples)
    vals = vals[np.isfinite(vals) & (vals >= cfg.hist_min) & (vals <= cfg.hist_max)]
    if vals.size == 0:
        raise NoValidSamples("no scale samples inside the histogram range")
    bins = int(cfg.hist_bins)
    idx = np.floor((vals - cfg.hist_min) / (cfg.hist_max - cfg.hist_min) * bins).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    mode = int(np.argmax(counts))
    return float(np.median(vals[np.abs(idx - mode) <= 1]))


def apply_scale(depth: DepthImage, s: float) -> DepthImage:
    if not s > 0:
        raise NonPositiveScale(f"scale must be positive, got {s}")
    return DepthImage(depth.data * s, ScaleState.METRIC)


class RadarScaleRecovery(BaseEstimator, TransformerMixin):
    """Fit a global metric scale from one relative depth map and a radar frame.

    ``fit(depth, frame=..., dyn_labels=...)`` stores ``scale_``;
    ``transform(depth)`` returns the metric depth image.
    """

    def __init__(
        self,
        camera: CameraModel | None = None,
        max_spherical_spread=0.02,
        max_depth_ratio=1.15,
        min_normal_dot=0.05,
        hist_min=0.05,
        hist_max=50.0,
        hist_bins=512,
        subsample_stride=4,
    ):
        self.camera = camera
        self.max_spherical_spread = max_spherical_spread
        self.max_depth_ratio = max_depth_ratio
        self.min_normal_dot = min_normal_dot
        self.hist_min = hist_min
        self.hist_max = hist_max
        self.hist_bins = hist_bins
        self.subsample_stride = subsample_stride

    def _config(self):
        return ScaleConfig(
            self.max_spherical_spread,
            self.max_depth_ratio,
            self.min_normal_dot,
            self.hist_min,
            self.hist_max,
            self.hist_bins,
            self.subsample_stride,
        )

    def fit(self, X: DepthImage, y=None, *, frame: RadarFrame, dyn_labels=None, ego_from_sensor=None):
        if self.camera is None:
            raise ValueError("camera must be set before fitting")
        if dyn_labels is None:
            dyn_labels = np.zeros(len(frame), dtype=bool)
        cfg = self._config()
        self.samples_ = collect_scale_samples(X, self.camera, frame, dyn_labels, cfg, ego_from_sensor)
        self.scale_ = vote_scale(self.samples_, cfg)
        n_static = int(np.count_nonzero(~np.asarray(dyn_labels, dtype=bool)))
        self.acceptance_rate_ = len(self.samples_) / n_static
        return self

    def transform(self, X: DepthImage) -> DepthImage:
        check_is_fitted(self, "scale_")
        return apply_scale(X, self.scale_)
