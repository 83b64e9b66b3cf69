"""Geometric primitives, frame conventions and the pinhole camera.

Frames
------
* camera: +z forward, +x right, +y down (pixels grow right/down).
* radar sensor and ego: +x forward, +y left, +z up.

The ego frame of a :class:`RadarFrame` is taken to coincide with the radar
sensor frame unless an explicit ``ego_from_sensor`` transform is supplied to
the functions that need one. Depth is always z-depth in the camera frame and
an invalid depth pixel is stored as exactly ``0``.

Radial velocity sign: positive when the range to the target is increasing.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCamera, NonPositiveDepth, OutOfBounds

ORTHONORMAL_TOL = 1e-9
MIN_RADAR_RANGE = 0.1
MIN_PROJECT_Z = 1e-6

# rotation taking ego axes (x fwd, y left, z up) to optical axes (x right, y down, z fwd)
CAM_FROM_EGO_AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) transform ``x -> R @ x + t``.

    Name instances ``a_from_b``: applying one maps coordinates expressed in
    frame ``b`` to frame ``a``.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation length 3")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite transform")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL * 10 or abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL * 10:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=0.0):
            raise ValueError("last row of a homogeneous transform must be [0, 0, 0, 1]")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(cls, quat_xyzw, translation) -> "RigidTransform":
        return cls(Rotation.from_quat(quat_xyzw).as_matrix(), translation)

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = np.cos(yaw), np.sin(yaw)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def as_quaternion(self) -> np.ndarray:
        """Unit quaternion (x, y, z, w)."""
        return Rotation.from_matrix(self.rotation).as_quat()

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        """Transform one point ``(3,)`` or a batch ``(N, 3)``."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_vector(self, vectors) -> np.ndarray:
        """Rotate direction/velocity vectors (no translation)."""
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0.0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol)
        )

    def to_list(self) -> list:
        """Row-major 4x4 homogeneous matrix as 16 floats."""
        return [float(x) for x in self.as_matrix().ravel()]

    @classmethod
    def from_list(cls, values) -> "RigidTransform":
        values = list(values)
        if len(values) != 16:
            raise ValueError("expected 16 values for a homogeneous transform")
        return cls.from_matrix(np.array(values, dtype=np.float64))

    def __repr__(self):
        q = np.round(self.as_quaternion(), 6)
        return f"RigidTransform(quat_xyzw={q.tolist()}, t={np.round(self.translation, 6).tolist()})"


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_from_ego: RigidTransform = field(default_factory=lambda: RigidTransform(CAM_FROM_EGO_AXES))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def in_bounds(self, u, v):
        u = np.asarray(u)
        v = np.asarray(v)
        return (u >= 0) & (u <= self.width - 1) & (v >= 0) & (v <= self.height - 1)

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame rays with unit z for every integer pixel, shape ``(H, W, 3)``."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "cam_from_ego": self.cam_from_ego.to_list(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        extra = set(d) - {"fx", "fy", "cx", "cy", "width", "height", "cam_from_ego"}
        if extra:
            raise ValueError(f"unknown camera keys: {sorted(extra)}")
        kw = {k: d[k] for k in ("fx", "fy", "cx", "cy")}
        kw.update(width=int(d["width"]), height=int(d["height"]))
        if "cam_from_ego" in d:
            kw["cam_from_ego"] = RigidTransform.from_list(d["cam_from_ego"])
        return cls(**kw)


def back_project(cam: CameraModel, u: float, v: float, depth: float) -> np.ndarray:
    """Pixel ``(u, v)`` at z-depth ``depth`` to a camera-frame point."""
    if not (0 <= u <= cam.width - 1 and 0 <= v <= cam.height - 1):
        raise OutOfBounds(f"pixel ({u}, {v}) outside {cam.width}x{cam.height} image")
    if not depth > 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    return np.array([(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth])


def back_project_many(cam: CameraModel, u, v, depth) -> np.ndarray:
    """Vectorised :func:`back_project` without bound checks; returns ``(N, 3)``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    return np.stack([(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d], axis=-1)


def project(cam: CameraModel, p) -> tuple[float, float]:
    x, y, z = _as_vec3(p)
    if not z > MIN_PROJECT_Z:
        raise BehindCamera(f"point z={z} is not in front of the camera")
    return (cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy)


def project_many(cam: CameraModel, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project ``(N, 3)`` camera-frame points.

    Returns ``(u, v, ok)``; entries with ``ok == False`` are behind the camera
    and hold NaN.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = p[:, 2]
    ok = z > MIN_PROJECT_Z
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(ok, cam.fx * p[:, 0] / z + cam.cx, np.nan)
        v = np.where(ok, cam.fy * p[:, 1] / z + cam.cy, np.nan)
    return u, v, ok


class RadarPoint(NamedTuple):
    position: np.ndarray
    radial_velocity: float


@dataclass(frozen=True, eq=False)
class RadarFrame:
    """One radar sweep: sensor-frame positions ``(N, 3)`` and radial velocities ``(N,)``."""

    timestamp: float
    sensor_from_world: RigidTransform
    positions: np.ndarray
    radial_velocity: np.ndarray

    def __post_init__(self):
        p = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        vr = np.array(self.radial_velocity, dtype=np.float64).reshape(-1)
        if len(p) != len(vr):
            raise ValueError("positions and radial_velocity lengths differ")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(vr)) and np.isfinite(self.timestamp)):
            raise ValueError("radar frame contains non-finite values")
        rng = np.linalg.norm(p, axis=1)
        if np.any(rng <= MIN_RADAR_RANGE):
            raise ValueError(f"radar point within {MIN_RADAR_RANGE} m of the sensor origin")
        p.setflags(write=False)
        vr.setflags(write=False)
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "radial_velocity", vr)

    @classmethod
    def from_points(cls, timestamp, sensor_from_world, points) -> "RadarFrame":
        pts = list(points)
        pos = np.array([np.asarray(p.position, dtype=np.float64) for p in pts]).reshape(-1, 3)
        vr = np.array([p.radial_velocity for p in pts], dtype=np.float64)
        return cls(timestamp, sensor_from_world, pos, vr)

    @property
    def points(self) -> list[RadarPoint]:
        return [RadarPoint(p.copy(), float(v)) for p, v in zip(self.positions, self.radial_velocity)]

    def __len__(self):
        return len(self.positions)

    def directions(self) -> np.ndarray:
        return self.positions / np.linalg.norm(self.positions, axis=1, keepdims=True)

    def as_array(self) -> np.ndarray:
        """``(N, 4)`` array of ``x, y, z, v_r``."""
        return np.column_stack([self.positions, self.radial_velocity])


class ScaleState(enum.IntEnum):
    RELATIVE = 0
    METRIC = 1


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Dense z-depth grid ``(H, W)``; ``0`` marks an invalid pixel."""

    data: np.ndarray
    scale_state: ScaleState = ScaleState.RELATIVE

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("depth data must be 2-D")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("depth entries must be finite and non-negative (0 = invalid)")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "scale_state", ScaleState(self.scale_state))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.data > 0
