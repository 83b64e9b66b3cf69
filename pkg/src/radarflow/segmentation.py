"""Radar-anchored ROIs and per-pixel max compositing into a dynamic mask.

An ROI of patch size ``h x w`` centred on ``(center_u, center_v)`` covers
image rows ``center_v - h//2 .. center_v - h//2 + h - 1`` and the matching
columns; the part falling outside the image is clipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .core import CameraModel, RadarFrame, RigidTransform, project_many
from .validation import check_labels, check_positive, check_unit_interval

DEFAULT_PATCH_SIZE = 256
DEFAULT_TAU = 0.5
DEFAULT_SIGMA_PX = 24.0


@dataclass(frozen=True, eq=False)
class Roi:
    center_u: int
    center_v: int
    patch: np.ndarray

    def __post_init__(self):
        p = np.array(self.patch, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] == 0 or p.shape[1] == 0:
            raise ValueError("ROI patch must be a non-empty 2-D grid")
        if not np.all((p >= 0.0) & (p <= 1.0)):
            raise ValueError("ROI patch values must lie in [0, 1]")
        p.setflags(write=False)
        object.__setattr__(self, "patch", p)
        object.__setattr__(self, "center_u", int(self.center_u))
        object.__setattr__(self, "center_v", int(self.center_v))

    @property
    def origin(self) -> tuple[int, int]:
        """Image ``(row, col)`` of the patch's top-left pixel (may be negative)."""
        h, w = self.patch.shape
        return self.center_v - h // 2, self.center_u - w // 2

    def footprint(self, width, height):
        """Clipped ``(image_slice, patch_slice)`` pairs, or ``None`` when fully outside."""
        h, w = self.patch.shape
        r0, c0 = self.origin
        ir0, ic0 = max(r0, 0), max(c0, 0)
        ir1, ic1 = min(r0 + h, height), min(c0 + w, width)
        if ir0 >= ir1 or ic0 >= ic1:
            return None
        img = (slice(ir0, ir1), slice(ic0, ic1))
        pat = (slice(ir0 - r0, ir1 - r0), slice(ic0 - c0, ic1 - c0))
        return img, pat


@dataclass(frozen=True, eq=False)
class DynamicMask:
    data: np.ndarray

    def __post_init__(self):
        d = np.array(self.data)
        if d.ndim != 2:
            raise ValueError("mask must be 2-D")
        if not np.all((d == 0) | (d == 1)):
            raise ValueError("mask values must be 0 or 1")
        d = d.astype(np.uint8)
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


def _dynamic_pixels(frame, labels, cam, ego_from_sensor):
    labels = check_labels(labels, len(frame))
    if ego_from_sensor is None:
        ego_from_sensor = RigidTransform.identity()
    pts = frame.positions[labels]
    cam_pts = cam.cam_from_ego.compose(ego_from_sensor).apply(pts)
    u, v, ok = project_many(cam, cam_pts)
    ok &= cam.in_bounds(np.nan_to_num(u, nan=-1.0), np.nan_to_num(v, nan=-1.0))
    return u[ok], v[ok]


def project_dynamic_rois(
    frame: RadarFrame,
    labels,
    cam: CameraModel,
    patch_size: int = DEFAULT_PATCH_SIZE,
    max_anchors: int = 16,
    seed: int = 0,
    ego_from_sensor: RigidTransform | None = None,
) -> list[tuple[int, int]]:
    """Anchor pixels for ROIs: dynamic points projected into the image.

    Anchors keep the radar point order; when more than ``max_anchors``
    project into the image a seeded uniform subset (without replacement) is
    returned, still in radar order.
    """
    if int(patch_size) <= 0:
        raise ValueError("patch_size must be positive")
    u, v = _dynamic_pixels(frame, labels, cam, ego_from_sensor)
    anchors = np.column_stack([np.rint(u), np.rint(v)]).astype(np.int64)
    if len(anchors) > max_anchors:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(anchors), size=int(max_anchors), replace=False))
        anchors = anchors[keep]
    return [(int(a), int(b)) for a, b in anchors]


def score_roi_geometric(
    frame: RadarFrame,
    labels,
    cam: CameraModel,
    center: tuple[int, int],
    patch_size: int = DEFAULT_PATCH_SIZE,
    sigma_px: float = DEFAULT_SIGMA_PX,
    ego_from_sensor: RigidTransform | None = None,
) -> Roi:
    """Deterministic stand-in for a learned ROI scorer.

    Each patch pixel takes the maximum Gaussian kernel value over all dynamic
    radar projections that land inside the patch.
    """
    sigma = check_positive(sigma_px, "sigma_px")
    size = int(patch_size)
    cu, cv = int(center[0]), int(center[1])
    u, v = _dynamic_pixels(frame, labels, cam, ego_from_sensor)
    r0, c0 = cv - size // 2, cu - size // 2
    # patch-local coordinates of the projections
    pr, pc = v - r0, u - c0
    inside = (pr >= -0.5) & (pr < size - 0.5) & (pc >= -0.5) & (pc < size - 0.5)
    patch = np.zeros((size, size))
    if inside.any():
        rows = np.arange(size, dtype=np.float64)
        for r, c in zip(pr[inside], pc[inside]):
            gr = np.exp(-((rows - r) ** 2) / (2 * sigma**2))
            gc = np.exp(-((rows - c) ** 2) / (2 * sigma**2))
            np.maximum(patch, np.outer(gr, gc), out=patch)
    return Roi(cu, cv, np.clip(patch, 0.0, 1.0))


def confidence_map(rois, width: int, height: int) -> np.ndarray:
    conf = np.zeros((int(height), int(width)))
    for roi in rois:
        fp = roi.footprint(width, height)
        if fp is None:
            continue
        img, pat = fp
        np.maximum(conf[img], roi.patch[pat], out=conf[img])
    return conf


def composite_mask(rois, width: int, height: int, tau: float = DEFAULT_TAU) -> DynamicMask:
    """Per-pixel maximum over covering ROIs, thresholded strictly at ``tau``."""
    tau = check_unit_interval(tau, "tau")
    return DynamicMask((confidence_map(rois, width, height) > tau).astype(np.uint8))


def winning_roi(rois, width: int, height: int) -> np.ndarray:
    """Index of the ROI supplying each pixel's confidence (lowest index on ties, -1 if uncovered)."""
    best = np.full((int(height), int(width)), -np.inf)
    idx = np.full((int(height), int(width)), -1, dtype=np.int64)
    for i, roi in enumerate(rois):
        fp = roi.footprint(width, height)
        if fp is None:
            continue
        img, pat = fp
        better = roi.patch[pat] > best[img]
        best[img] = np.where(better, roi.patch[pat], best[img])
        idx[img] = np.where(better, i, idx[img])
    return idx


class RadarRoiSegmenter(BaseEstimator):
    """Dynamic-mask predictor from labelled radar points.

    Stateless: ``fit`` only validates parameters. ``predict(frame, labels,
    cam)`` runs anchor selection, the geometric ROI scorer and compositing.
    """

    def __init__(self, patch_size=DEFAULT_PATCH_SIZE, max_anchors=16, sigma_px=DEFAULT_SIGMA_PX, tau=DEFAULT_TAU, random_state=0):
        self.patch_size = patch_size
        self.max_anchors = max_anchors
        self.sigma_px = sigma_px
        self.tau = tau
        self.random_state = random_state

    def fit(self, X=None, y=None):
        check_positive(self.sigma_px, "sigma_px")
        check_unit_interval(self.tau, "tau")
        if int(self.patch_size) <= 0:
            raise ValueError("patch_size must be positive")
        return self

    def predict_rois(self, frame, labels, cam, ego_from_sensor=None):
        anchors = project_dynamic_rois(frame, labels, cam, self.patch_size, self.max_anchors, int(self.random_state or 0), ego_from_sensor)
        return [score_roi_geometric(frame, labels, cam, a, self.patch_size, self.sigma_px, ego_from_sensor) for a in anchors]

    def predict(self, frame, labels, cam, ego_from_sensor=None) -> DynamicMask:
        return composite_mask(self.predict_rois(frame, labels, cam, ego_from_sensor), cam.width, cam.height, self.tau)
