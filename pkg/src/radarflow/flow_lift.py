"""Lift 2-D optical flow on dynamic pixels to 3-D scene-flow correspondences,
then attach the radial velocity of the nearest dynamic radar return."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import CameraModel, DepthImage, RadarFrame, RigidTransform, back_project_many
from .ego_motion import compensate
from .errors import DimensionMismatch, NoDynamicRadarPoints
from .segmentation import DynamicMask
from .validation import check_labels

DEFAULT_STRIDE = 4
ASSOCIATION_MAX_DISTANCE = 3.0


@dataclass(frozen=True, eq=False)
class FlowImage:
    """Per-pixel ``(du, dv)`` displacement in pixels, shape ``(H, W, 2)``."""

    data: np.ndarray

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 2:
            raise ValueError("flow data must have shape (H, W, 2)")
        if not np.all(np.isfinite(d)):
            raise ValueError("flow contains non-finite entries")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class SceneFlowSample:
    """One dynamic correspondence.

    ``x_ti`` is in the ego frame at ``t_i``, ``x_tj`` in the ego frame at
    ``t_j`` and ``T_j_to_i`` maps the latter into the former.
    ``radial_velocity`` is ``None`` when no radar return was associated.
    """

    x_ti: np.ndarray
    x_tj: np.ndarray
    t_i: float
    t_j: float
    radar_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radial_velocity: float | None = None
    T_j_to_i: RigidTransform = field(default_factory=RigidTransform.identity)
    pixel: tuple[int, int] | None = None

    def __post_init__(self):
        for name in ("x_ti", "x_tj", "radar_origin"):
            a = np.array(getattr(self, name), dtype=np.float64)
            if a.shape != (3,) or not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be a finite 3-vector")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if not self.t_j > self.t_i:
            raise ValueError("t_j must be later than t_i")

    def to_dict(self) -> dict:
        d = {
            "x_ti": [float(x) for x in self.x_ti],
            "x_tj": [float(x) for x in self.x_tj],
            "t_i": float(self.t_i),
            "t_j": float(self.t_j),
            "radar_origin": [float(x) for x in self.radar_origin],
            "radial_velocity": None if self.radial_velocity is None else float(self.radial_velocity),
            "T_j_to_i": self.T_j_to_i.to_list(),
        }
        if self.pixel is not None:
            d["pixel"] = [int(self.pixel[0]), int(self.pixel[1])]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneFlowSample":
        return cls(
            x_ti=d["x_ti"],
            x_tj=d["x_tj"],
            t_i=float(d["t_i"]),
            t_j=float(d["t_j"]),
            radar_origin=d.get("radar_origin", [0.0, 0.0, 0.0]),
            radial_velocity=d.get("radial_velocity"),
            T_j_to_i=RigidTransform.from_list(d["T_j_to_i"]) if "T_j_to_i" in d else RigidTransform.identity(),
            pixel=tuple(d["pixel"]) if d.get("pixel") is not None else None,
        )


@dataclass(frozen=True, eq=False)
class SampleArrays:
    """Column view of a list of samples, used by the vectorised losses."""

    x_ti: np.ndarray
    x_tj: np.ndarray
    t_i: np.ndarray
    t_j: np.ndarray
    origin: np.ndarray
    radial_velocity: np.ndarray  # NaN where absent
    R_ji: np.ndarray
    t_ji: np.ndarray

    def __len__(self):
        return len(self.x_ti)

    def subset(self, idx) -> "SampleArrays":
        return SampleArrays(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @property
    def has_radial(self) -> np.ndarray:
        return np.isfinite(self.radial_velocity)


def stack_samples(samples) -> SampleArrays:
    if isinstance(samples, SampleArrays):
        return samples
    samples = list(samples)
    n = len(samples)
    if n == 0:
        z3 = np.zeros((0, 3))
        return SampleArrays(z3, z3, np.zeros(0), np.zeros(0), z3, np.zeros(0), np.zeros((0, 3, 3)), z3)
    return SampleArrays(
        x_ti=np.array([s.x_ti for s in samples]),
        x_tj=np.array([s.x_tj for s in samples]),
        t_i=np.array([s.t_i for s in samples], dtype=np.float64),
        t_j=np.array([s.t_j for s in samples], dtype=np.float64),
        origin=np.array([s.radar_origin for s in samples]),
        radial_velocity=np.array([np.nan if s.radial_velocity is None else s.radial_velocity for s in samples], dtype=np.float64),
        R_ji=np.array([s.T_j_to_i.rotation for s in samples]),
        t_ji=np.array([s.T_j_to_i.translation for s in samples]),
    )


def sample_inverse_depth(depth: np.ndarray, u, v, max_tap_ratio=None):
    """Bilinear lookup of ``1/z`` at sub-pixel ``(u, v)``.

    Inverse depth is affine in pixel coordinates on any plane, so the lookup
    is exact on planar surfaces. Returns ``(z, ok)``; a lookup fails when the
    location is outside the image, any of the four taps is invalid, or (with
    ``max_tap_ratio``) the taps span a depth jump.
    """
    h, w = depth.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    ok = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.where(ok, u, 0.0)
    vc = np.where(ok, v, 0.0)
    u0 = np.minimum(np.floor(uc).astype(np.int64), max(w - 2, 0))
    v0 = np.minimum(np.floor(vc).astype(np.int64), max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu, fv = uc - u0, vc - v0
    taps = np.stack([depth[v0, u0], depth[v0, u1], depth[v1, u0], depth[v1, u1]])
    ok &= np.all(taps > 0, axis=0)
    if max_tap_ratio is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            ok &= taps.max(axis=0) <= max_tap_ratio * taps.min(axis=0)
    inv = np.where(taps > 0, 1.0 / np.where(taps > 0, taps, 1.0), 0.0)
    wts = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv])
    inv_z = np.sum(inv * wts, axis=0)
    z = np.where(ok, 1.0 / np.where(ok, inv_z, 1.0), 0.0)
    return z, ok


def lift_scene_flow(
    flow: FlowImage,
    depth_i: DepthImage,
    depth_j: DepthImage,
    mask_i: DynamicMask,
    cam: CameraModel,
    pose_i: RigidTransform,
    pose_j: RigidTransform,
    stride: int = DEFAULT_STRIDE,
    *,
    t_i: float = 0.0,
    t_j: float = 0.1,
    radar_origin=(0.0, 0.0, 0.0),
    max_tap_ratio: float | None = 1.2,
) -> list[SceneFlowSample]:
    """3-D correspondences for the stride-subsampled dynamic pixels of frame ``i``.

    ``pose_i``/``pose_j`` are ``world_from_ego``. Output is row-major by
    source pixel. Pixels whose flowed target leaves the image or lands on
    invalid depth are skipped.
    """
    shapes = {depth_i.data.shape, depth_j.data.shape, mask_i.data.shape, flow.data.shape[:2], cam.shape}
    if len(shapes) != 1:
        raise DimensionMismatch(f"inconsistent raster shapes: {sorted(shapes)}")
    stride = int(stride)
    grid = np.zeros(cam.shape, dtype=bool)
    grid[::stride, ::stride] = True
    src = grid & (mask_i.data == 1) & (depth_i.data > 0)
    vs, us = np.nonzero(src)  # row-major
    du = flow.data[vs, us, 0]
    dv = flow.data[vs, us, 1]
    ut, vt = us + du, vs + dv
    zt, ok = sample_inverse_depth(depth_j.data, ut, vt, max_tap_ratio)
    vs, us, ut, vt, zt = vs[ok], us[ok], ut[ok], vt[ok], zt[ok]

    ego_from_cam = cam.cam_from_ego.inverse()
    x_i = ego_from_cam.apply(back_project_many(cam, us, vs, depth_i.data[vs, us]))
    x_j = ego_from_cam.apply(back_project_many(cam, ut, vt, zt))
    T_ji = pose_i.inverse().compose(pose_j)
    return [
        SceneFlowSample(x_i[k], x_j[k], t_i, t_j, radar_origin, None, T_ji, (int(us[k]), int(vs[k])))
        for k in range(len(x_i))
    ]


def associate_radial_velocity(
    samples,
    frame_i: RadarFrame,
    dyn_labels,
    ego_pose_i: RigidTransform,
    *,
    ego_velocity=None,
    max_distance: float = ASSOCIATION_MAX_DISTANCE,
) -> list[SceneFlowSample]:
    """Give each sample the radial velocity of its nearest dynamic radar return (K = 1).

    When ``ego_velocity`` (sensor frame) is given the inherited value is
    ego-compensated, i.e. the target's own radial speed; this is the quantity
    that matches a world-frame displacement. Samples farther than
    ``max_distance`` from every dynamic return get ``None``.
    """
    labels = check_labels(dyn_labels, len(frame_i))
    dyn = np.flatnonzero(labels)
    if len(dyn) == 0:
        raise NoDynamicRadarPoints("frame has no dynamic radar points")
    ego_from_sensor = ego_pose_i.inverse().compose(frame_i.sensor_from_world.inverse())
    radar_ego = ego_from_sensor.apply(frame_i.positions[dyn])
    vr = frame_i.radial_velocity if ego_velocity is None else compensate(frame_i, np.asarray(ego_velocity, dtype=np.float64))
    vr = vr[dyn]
    origin = ego_from_sensor.translation

    samples = list(samples)
    if not samples:
        return []
    X = np.array([s.x_ti for s in samples])
    out = []
    for start in range(0, len(X), 4096):
        chunk = X[start : start + 4096]
        d2 = np.sum((chunk[:, None, :] - radar_ego[None, :, :]) ** 2, axis=2)
        nearest = np.argmin(d2, axis=1)  # first minimum = lowest radar index
        dist = np.sqrt(d2[np.arange(len(chunk)), nearest])
        for k, s in enumerate(samples[start : start + 4096]):
            v = float(vr[nearest[k]]) if dist[k] <= max_distance else None
            out.append(replace(s, radar_origin=origin, radial_velocity=v))
    return out
