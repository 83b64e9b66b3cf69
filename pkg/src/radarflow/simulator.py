"""Synthetic driving scenes with exact ground truth.

World frame: ground plane ``z = 0``, +z up. The ego frame sits at the radar
(and, by default, the camera centre) ``sensor_height`` above the ground and
follows a piecewise constant-speed / constant-yaw-rate trajectory. Boxes are
axis-aligned in the world; dynamic boxes translate at constant velocity.

Radar returns come from two pools: rays cast uniformly in azimuth/elevation
over the field of view (mostly ground), and points drawn uniformly by area
on the sensor-facing faces of boxes, kept only when unoccluded. Their radial
velocity is ``d·(v_target − v_sensor)`` in the sensor frame, so static
targets satisfy ``v_r + d·v_sensor = 0`` exactly when ``sigma_v = 0``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .core import CAM_FROM_EGO_AXES, CameraModel, DepthImage, RadarFrame, RigidTransform, ScaleState
from .ego_motion import radial_projection
from .errors import InvalidConfig
from .evaluation import MetricsReport, Predictions, evaluate  # noqa: F401  (re-exported)
from .flow_lift import FlowImage
from .segmentation import DynamicMask

GROUND_ID = 0
NO_HIT = -1
FLOW_BEHIND = -1.0e6  # flow sentinel for points that leave the front of the camera


@dataclass(frozen=True)
class EgoSegment:
    duration: float
    speed: float
    yaw_rate: float = 0.0


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def is_dynamic(self) -> bool:
        return any(v != 0.0 for v in self.velocity)


@dataclass(frozen=True)
class RadarModel:
    azimuth_fov_deg: float = 120.0
    elevation_fov_deg: float = 30.0
    max_range: float = 80.0
    points_per_frame: int = 300
    sigma_p: float = 0.05
    sigma_v: float = 0.1
    box_fraction: float = 0.5


def _default_camera():
    return CameraModel(320.0, 320.0, 160.0, 90.0, 320, 180, RigidTransform(CAM_FROM_EGO_AXES))


def default_static_boxes():
    boxes = []
    for x in (12.0, 27.0, 41.0, 58.0, 73.0, 90.0):
        boxes.append(Box((x, -7.5, 1.0), (4.2, 1.9, 2.0)))
    for x in (18.0, 50.0, 82.0):
        boxes.append(Box((x, 9.0, 1.0), (4.2, 1.9, 2.0)))
    for x in (30.0, 65.0, 100.0):
        boxes.append(Box((x, -16.0, 4.0), (14.0, 6.0, 8.0)))
        boxes.append(Box((x + 8.0, 17.0, 3.0), (10.0, 5.0, 6.0)))
    return tuple(boxes)


def default_dynamic_boxes():
    return (
        Box((20.0, 0.0, 0.8), (4.5, 1.9, 1.6), (12.0, 0.0, 0.0)),  # leading
        Box((75.0, 3.5, 0.8), (4.5, 1.9, 1.6), (-8.0, 0.0, 0.0)),  # oncoming
        Box((60.0, 55.0, 0.8), (1.9, 4.5, 1.6), (0.0, -10.0, 0.0)),  # lateral
    )


@dataclass(frozen=True)
class SceneConfig:
    duration: float = 5.0
    frame_rate: float = 10.0
    ego_start: tuple[float, float, float] = (0.0, 0.0, 0.0)  # x, y, yaw
    ego_segments: tuple[EgoSegment, ...] = (EgoSegment(5.0, 8.0, 0.0),)
    sensor_height: float = 1.2
    ground: bool = True
    static_boxes: tuple[Box, ...] = field(default_factory=default_static_boxes)
    dynamic_boxes: tuple[Box, ...] = field(default_factory=default_dynamic_boxes)
    radar: RadarModel = field(default_factory=RadarModel)
    camera: CameraModel = field(default_factory=_default_camera)
    relative_depth_scale: float = 3.0
    max_depth: float = 150.0
    seed: int = 0

    def __post_init__(self):
        if not self.frame_rate > 0 or not self.duration > 0:
            raise InvalidConfig("duration and frame_rate must be positive")
        if self.radar.sigma_p < 0 or self.radar.sigma_v < 0:
            raise InvalidConfig("noise levels must be non-negative")
        if not 0.0 <= self.radar.box_fraction <= 1.0:
            raise InvalidConfig("box_fraction must lie in [0, 1]")
        for b in (*self.static_boxes, *self.dynamic_boxes):
            if min(b.size) <= 0:
                raise InvalidConfig(f"box {b} has a non-positive extent")
        if any(b.is_dynamic for b in self.static_boxes):
            raise InvalidConfig("static boxes cannot have a velocity")
        if not self.relative_depth_scale > 0:
            raise InvalidConfig("relative_depth_scale must be positive")
        if not self.sensor_height > 0:
            raise InvalidConfig("sensor_height must be positive")

    @property
    def n_frames(self) -> int:
        return int(np.floor(self.duration * self.frame_rate + 1e-9)) + 1

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.frame_rate

    # -------------------------------------------------------------- json
    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["ego_segments"] = [asdict(s) for s in self.ego_segments]
        d["static_boxes"] = [asdict(b) for b in self.static_boxes]
        d["dynamic_boxes"] = [asdict(b) for b in self.dynamic_boxes]
        d["radar"] = asdict(self.radar)
        d["camera"] = self.camera.to_dict()
        d["ego_start"] = list(self.ego_start)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise InvalidConfig(f"unknown scene keys: {sorted(extra)}")
        kw = dict(d)
        try:
            if "ego_segments" in kw:
                kw["ego_segments"] = tuple(EgoSegment(**s) for s in kw["ego_segments"])
            for k in ("static_boxes", "dynamic_boxes"):
                if k in kw:
                    kw[k] = tuple(Box(tuple(b["center"]), tuple(b["size"]), tuple(b.get("velocity", (0.0, 0.0, 0.0)))) for b in kw[k])
            if "radar" in kw:
                kw["radar"] = RadarModel(**kw["radar"])
            if "camera" in kw:
                kw["camera"] = CameraModel.from_dict(kw["camera"])
            if "ego_start" in kw:
                kw["ego_start"] = tuple(kw["ego_start"])
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class FrameBundle:
    index: int
    timestamp: float
    radar: RadarFrame
    dyn_labels_gt: np.ndarray
    depth_metric: DepthImage
    depth_relative: DepthImage
    mask_gt: DynamicMask
    flow_to_next: FlowImage | None
    ego_pose: RigidTransform  # world_from_ego
    ego_velocity: np.ndarray  # sensor frame, m/s
    object_poses: tuple[RigidTransform, ...]  # world_from_object, dynamic boxes
    object_ids: np.ndarray  # per pixel: -1 sky, 0 ground, 1.. boxes (static first)


class Scene:
    """Analytic scene evaluated at arbitrary times."""

    def __init__(self, cfg: SceneConfig):
        self.cfg = cfg
        self.boxes = list(cfg.static_boxes) + list(cfg.dynamic_boxes)
        self.n_static = len(cfg.static_boxes)
        self._seg_start = np.concatenate([[0.0], np.cumsum([s.duration for s in cfg.ego_segments])])
        states = [np.array(cfg.ego_start, dtype=np.float64)]
        for k, seg in enumerate(cfg.ego_segments):
            states.append(self._advance(states[-1], seg, seg.duration))
        self._seg_state = states

    # ----------------------------------------------------------- trajectory
    @staticmethod
    def _advance(state, seg, dt):
        x, y, yaw = state
        v, w = seg.speed, seg.yaw_rate
        if abs(w) < 1e-12:
            return np.array([x + v * dt * np.cos(yaw), y + v * dt * np.sin(yaw), yaw])
        yaw1 = yaw + w * dt
        return np.array([x + v / w * (np.sin(yaw1) - np.sin(yaw)), y - v / w * (np.cos(yaw1) - np.cos(yaw)), yaw1])

    def _segment(self, t):
        segs = self.cfg.ego_segments
        k = int(np.clip(np.searchsorted(self._seg_start, t, side="right") - 1, 0, len(segs) - 1))
        return k, segs[k]

    def ego_state(self, t):
        k, seg = self._segment(t)
        return self._advance(self._seg_state[k], seg, t - self._seg_start[k])

    def ego_pose(self, t) -> RigidTransform:
        x, y, yaw = self.ego_state(t)
        return RigidTransform.from_yaw(yaw, (x, y, self.cfg.sensor_height))

    def ego_velocity(self, t) -> np.ndarray:
        """Sensor-frame linear velocity; the radar sits at the ego origin."""
        _, seg = self._segment(t)
        return np.array([seg.speed, 0.0, 0.0])

    def ego_velocity_world(self, t) -> np.ndarray:
        _, seg = self._segment(t)
        yaw = self.ego_state(t)[2]
        return seg.speed * np.array([np.cos(yaw), np.sin(yaw), 0.0])

    def box_center(self, i, t) -> np.ndarray:
        b = self.boxes[i]
        return np.asarray(b.center, dtype=np.float64) + t * np.asarray(b.velocity, dtype=np.float64)

    def box_bounds(self, t):
        centers = np.array([self.box_center(i, t) for i in range(len(self.boxes))]).reshape(-1, 3)
        half = 0.5 * np.array([b.size for b in self.boxes], dtype=np.float64).reshape(-1, 3)
        return centers - half, centers + half

    def velocity_of_id(self, ids) -> np.ndarray:
        """World velocity of the surface with object id (0 for ground/static/sky)."""
        ids = np.asarray(ids)
        table = np.zeros((len(self.boxes) + 2, 3))
        for i, b in enumerate(self.boxes):
            table[i + 1] = b.velocity
        out = table[np.clip(ids, 0, len(self.boxes) + 1)]
        out[ids < 1] = 0.0
        return out

    def is_dynamic_id(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        return ids > self.n_static

    # ------------------------------------------------------------ ray casting
    def cast(self, origin, dirs, t, forward=None):
        """First hit along ``origin + s·dir`` (``s > 0``). Returns ``(s, id)``; ``s = inf`` for no hit.

        ``forward`` (optional unit vector) lets boxes lying entirely behind
        the origin along it be skipped; all rays must then point forward.
        """
        o = np.asarray(origin, dtype=np.float64)
        d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        o = np.broadcast_to(o, d.shape)
        best = np.full(len(d), np.inf)
        ids = np.full(len(d), NO_HIT, dtype=np.int64)
        eps = 1e-9
        if self.cfg.ground:
            with np.errstate(divide="ignore", invalid="ignore"):
                s = np.where(d[:, 2] < 0, -o[:, 2] / d[:, 2], np.inf)
            hit = (s > eps) & (s < best)
            best[hit], ids[hit] = s[hit], GROUND_ID
        if self.boxes:
            lo, hi = self.box_bounds(t)
            keep = np.arange(len(self.boxes))
            if forward is not None:
                far_corner = np.where(np.asarray(forward) > 0, hi, lo)
                keep = np.flatnonzero((far_corner - o[0]) @ np.asarray(forward) > 0)
            lo, hi = lo[keep], hi[keep]
        if len(self.boxes) and len(keep):
            inv = 1.0 / np.where(np.abs(d) < 1e-300, 1e-300, d)
            for j, blo, bhi in zip(keep, lo, hi):
                t1 = (blo - o) * inv
                t2 = (bhi - o) * inv
                near = np.minimum(t1, t2).max(axis=1)
                far = np.maximum(t1, t2).min(axis=1)
                hit = (near <= far) & (near > eps) & (near < best)
                best[hit], ids[hit] = near[hit], j + 1
        return best, ids

    def camera_center(self, t) -> np.ndarray:
        return self.world_from_cam(t).translation

    def world_from_cam(self, t) -> RigidTransform:
        return self.ego_pose(t).compose(self.cfg.camera.cam_from_ego.inverse())

    def depth_at(self, u, v, t):
        """Ray-cast z-depth and object id at sub-pixel ``(u, v)``."""
        cam = self.cfg.camera
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        v = np.atleast_1d(np.asarray(v, dtype=np.float64))
        rays = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
        wfc = self.world_from_cam(t)
        s, ids = self.cast(wfc.translation, wfc.apply_vector(rays), t)
        bad = ~np.isfinite(s) | (s > self.cfg.max_depth)
        return np.where(bad, 0.0, s), np.where(bad, NO_HIT, ids)

    # -------------------------------------------------------------- rasters
    def render(self, t):
        """Metric z-depth ``(H, W)``, object ids and world hit points."""
        cam = self.cfg.camera
        rays = cam.pixel_rays().reshape(-1, 3)
        wfc = self.world_from_cam(t)
        s, ids = self.cast(wfc.translation, wfc.apply_vector(rays), t, forward=wfc.rotation[:, 2])
        bad = ~np.isfinite(s) | (s > self.cfg.max_depth)
        s = np.where(bad, 0.0, s)
        ids = np.where(bad, NO_HIT, ids)
        hits = wfc.translation + wfc.apply_vector(rays) * s[:, None]
        return s.reshape(cam.shape), ids.reshape(cam.shape), hits.reshape(cam.height, cam.width, 3)

    def flow(self, t, dt, ids, hits):
        cam = self.cfg.camera
        moved = hits + self.velocity_of_id(ids) * dt
        cam_from_world = self.world_from_cam(t + dt).inverse()
        pc = cam_from_world.apply(moved.reshape(-1, 3))
        z = pc[:, 2]
        front = z > 1e-6
        with np.errstate(divide="ignore", invalid="ignore"):
            u1 = cam.fx * pc[:, 0] / z + cam.cx
            v1 = cam.fy * pc[:, 1] / z + cam.cy
        v0, u0 = np.mgrid[0 : cam.height, 0 : cam.width]
        du = np.where(front, u1 - u0.ravel(), FLOW_BEHIND)
        dv = np.where(front, v1 - v0.ravel(), FLOW_BEHIND)
        sky = ids.ravel() == NO_HIT
        du[sky] = 0.0
        dv[sky] = 0.0
        return np.stack([du, dv], axis=-1).reshape(cam.height, cam.width, 2)

    # ---------------------------------------------------------------- radar
    def _in_fov(self, p_sensor):
        r = self.cfg.radar
        rng = np.linalg.norm(p_sensor, axis=1)
        az = np.degrees(np.arctan2(p_sensor[:, 1], p_sensor[:, 0]))
        el = np.degrees(np.arcsin(np.clip(p_sensor[:, 2] / np.maximum(rng, 1e-12), -1, 1)))
        return (rng <= r.max_range) & (rng > 0.5) & (np.abs(az) <= r.azimuth_fov_deg / 2) & (np.abs(el) <= r.elevation_fov_deg / 2)

    def _box_surface_samples(self, t, n, rng):
        origin = self.ego_pose(t).translation
        lo, hi = self.box_bounds(t)
        faces = []  # (box, axis, side, area)
        for i in range(len(self.boxes)):
            for axis in range(3):
                for side in (0, 1):
                    coord = (lo if side == 0 else hi)[i, axis]
                    facing = (origin[axis] < coord) if side == 0 else (origin[axis] > coord)
                    if not facing:
                        continue
                    other = [a for a in range(3) if a != axis]
                    area = np.prod(hi[i, other] - lo[i, other])
                    faces.append((i, axis, coord, area))
        if not faces or n <= 0:
            return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
        area = np.array([f[3] for f in faces])
        pick = rng.choice(len(faces), size=n, p=area / area.sum())
        pts = np.empty((n, 3))
        ids = np.empty(n, dtype=np.int64)
        uv = rng.random((n, 3))
        for k, fi in enumerate(pick):
            i, axis, coord, _ = faces[fi]
            pts[k] = lo[i] + uv[k] * (hi[i] - lo[i])
            pts[k, axis] = coord
            ids[k] = i + 1
        return pts, ids

    def radar_returns(self, t, rng):
        """Noise-free world points and object ids visible to the radar at ``t``."""
        r = self.cfg.radar
        pose = self.ego_pose(t)
        origin = pose.translation
        n_box = int(round(r.points_per_frame * r.box_fraction))

        pts_b, ids_b = self._box_surface_samples(t, 8 * max(n_box, 1), rng)
        if len(pts_b):
            ok = self._in_fov(pose.inverse().apply(pts_b))
            dirs = pts_b - origin
            dist = np.linalg.norm(dirs, axis=1)
            s, hid = self.cast(origin, dirs / np.maximum(dist, 1e-12)[:, None], t)
            ok &= (hid == ids_b) & (np.abs(s - dist) <= 1e-6 * np.maximum(dist, 1.0))
            pts_b, ids_b = pts_b[ok][:n_box], ids_b[ok][:n_box]

        n_ray = r.points_per_frame - len(pts_b)
        m = 8 * max(n_ray, 1)
        az = np.radians(rng.uniform(-r.azimuth_fov_deg / 2, r.azimuth_fov_deg / 2, m))
        el = np.radians(rng.uniform(-r.elevation_fov_deg / 2, r.elevation_fov_deg / 2, m))
        d_s = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)
        d_w = pose.apply_vector(d_s)
        s, ids = self.cast(origin, d_w, t)
        ok = np.isfinite(s) & (s <= r.max_range) & (s > 0.5)
        pts_r = (origin + d_w * s[:, None])[ok][:n_ray]
        ids_r = ids[ok][:n_ray]

        pts = np.vstack([pts_b, pts_r])
        ids = np.concatenate([ids_b, ids_r])
        order = rng.permutation(len(pts))
        return pts[order], ids[order]

    def radar_frame(self, t, rng):
        r = self.cfg.radar
        pose = self.ego_pose(t)
        sensor_from_world = pose.inverse()
        pts_w, ids = self.radar_returns(t, rng)
        p_s = sensor_from_world.apply(pts_w)
        dirs = p_s / np.linalg.norm(p_s, axis=1, keepdims=True)
        v_obj_s = sensor_from_world.apply_vector(self.velocity_of_id(ids))
        v_sensor = self.ego_velocity(t)
        vr = radial_projection(dirs, v_obj_s.T) - radial_projection(dirs, v_sensor)
        if r.sigma_v > 0:
            vr = vr + rng.normal(0.0, r.sigma_v, len(vr))
        if r.sigma_p > 0:
            p_s = p_s + rng.normal(0.0, r.sigma_p, p_s.shape)
        keep = np.linalg.norm(p_s, axis=1) > 0.1
        frame = RadarFrame(float(t), sensor_from_world, p_s[keep], vr[keep])
        return frame, self.is_dynamic_id(ids[keep])


def simulate_frame(scene: Scene, index: int) -> FrameBundle:
    cfg = scene.cfg
    t = float(index / cfg.frame_rate)
    rng = np.random.default_rng([cfg.seed, index])
    radar, labels = scene.radar_frame(t, rng)
    depth, ids, hits = scene.render(t)
    rel = depth / cfg.relative_depth_scale
    metric = rel * cfg.relative_depth_scale
    flow = None
    if index + 1 < cfg.n_frames:
        flow = FlowImage(scene.flow(t, 1.0 / cfg.frame_rate, ids, hits))
    object_poses = tuple(RigidTransform(np.eye(3), scene.box_center(i, t)) for i in range(scene.n_static, len(scene.boxes)))
    return FrameBundle(
        index=index,
        timestamp=t,
        radar=radar,
        dyn_labels_gt=labels,
        depth_metric=DepthImage(metric, ScaleState.METRIC),
        depth_relative=DepthImage(rel, ScaleState.RELATIVE),
        mask_gt=DynamicMask(scene.is_dynamic_id(ids).astype(np.uint8)),
        flow_to_next=flow,
        ego_pose=scene.ego_pose(t),
        ego_velocity=scene.ego_velocity(t),
        object_poses=object_poses,
        object_ids=ids,
    )


def simulate(cfg: SceneConfig = None) -> list[FrameBundle]:
    """Generate every frame of the scene; deterministic given ``cfg.seed``."""
    cfg = SceneConfig() if cfg is None else cfg
    scene = Scene(cfg)
    return [simulate_frame(scene, k) for k in range(cfg.n_frames)]
