"""Pipeline configuration and seed derivation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .deformation.training import TrainConfig
from .ego_motion import RansacConfig
from .errors import InvalidConfig
from .scale_recovery import ScaleConfig

STAGES = ("simulate", "ego-motion", "segment", "scale", "lift-flow", "fit-deform", "eval")
PATH_KEYS = ("input_dir", "output_dir")


def stage_seed(seed: int, stage: str) -> int:
    """64-bit seed for ``stage``: the first 8 bytes (little-endian) of ``sha256("<seed>:<stage>")``."""
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class EgoStageConfig:
    iterations: int = 200
    inlier_threshold: float = 0.25
    min_inliers: int = 10
    tau_dyn: float = 0.5

    def ransac(self, seed: int) -> RansacConfig:
        return RansacConfig(self.iterations, self.inlier_threshold, self.min_inliers, seed)


@dataclass(frozen=True)
class SegmentConfig:
    patch_size: int = 256
    max_anchors: int = 16
    sigma_px: float = 24.0
    tau: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidConfig("segment.tau must lie in [0, 1]")
        if self.patch_size <= 0 or self.sigma_px <= 0:
            raise InvalidConfig("segment.patch_size and segment.sigma_px must be positive")


@dataclass(frozen=True)
class ScaleStageConfig:
    max_spherical_spread: float = 0.02
    max_depth_ratio: float = 1.15
    min_normal_dot: float = 0.05
    hist_min: float = 0.05
    hist_max: float = 50.0
    hist_bins: int = 512
    subsample_stride: int = 4
    aggregate: str = "frame"  # "frame" or "sequence" (median of per-frame votes)

    def __post_init__(self):
        if self.aggregate not in ("frame", "sequence"):
            raise InvalidConfig("scale.aggregate must be 'frame' or 'sequence'")

    def scale_config(self) -> ScaleConfig:
        d = asdict(self)
        d.pop("aggregate")
        return ScaleConfig(**d)


@dataclass(frozen=True)
class FlowStageConfig:
    stride: int = 4
    max_tap_ratio: float | None = 1.2
    association_max_distance: float = 3.0
    compensate_ego: bool = True
    mask_source: str = "predicted"  # or "ground_truth"

    def __post_init__(self):
        if self.mask_source not in ("predicted", "ground_truth"):
            raise InvalidConfig("flow.mask_source must be 'predicted' or 'ground_truth'")
        if self.stride < 1:
            raise InvalidConfig("flow.stride must be >= 1")


@dataclass(frozen=True)
class TrainStageConfig:
    learning_rate: float = 1e-3
    iterations: int = 2000
    batch_size: int = 1024
    lambda_flow: float = 1.0
    lambda_rad: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_final: float | None = None
    max_samples: int = 20000

    def train_config(self, seed: int) -> TrainConfig:
        d = asdict(self)
        d.pop("max_samples")
        return TrainConfig(seed=seed, **d)


_SECTIONS = {
    "ego": EgoStageConfig,
    "segment": SegmentConfig,
    "scale": ScaleStageConfig,
    "flow": FlowStageConfig,
    "train": TrainStageConfig,
}


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise InvalidConfig(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(d) - known)
    if extra:
        raise InvalidConfig(f"unknown keys in {where}: {extra}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a pipeline run depends on.

    Inputs come from ``input_dir`` (a ``simulate`` output directory) or, when
    that is absent, from simulating ``scene`` (a scene-config object; ``{}``
    means the default scene). Stage seeds derive from ``seed`` via
    :func:`stage_seed`; the scene seed is taken from ``scene`` itself.
    """

    seed: int = 0
    input_dir: str | None = None
    output_dir: str | None = None
    scene: dict | None = None
    ego: EgoStageConfig = field(default_factory=EgoStageConfig)
    segment: SegmentConfig = field(default_factory=SegmentConfig)
    scale: ScaleStageConfig = field(default_factory=ScaleStageConfig)
    flow: FlowStageConfig = field(default_factory=FlowStageConfig)
    train: TrainStageConfig = field(default_factory=TrainStageConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise InvalidConfig("pipeline config must be a JSON object")
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise InvalidConfig(f"unknown pipeline keys: {extra}")
        kw = dict(d)
        for name, sub in _SECTIONS.items():
            if name in kw:
                kw[name] = _build(sub, kw[name], name)
        if kw.get("scene") is not None and not isinstance(kw["scene"], dict):
            raise InvalidConfig("scene must be an object")
        if not isinstance(kw.get("seed", 0), int) or kw.get("seed", 0) < 0:
            raise InvalidConfig("seed must be a non-negative integer")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise InvalidConfig(f"{path}: {exc}") from exc

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "input_dir": self.input_dir, "output_dir": self.output_dir, "scene": self.scene}
        for name in _SECTIONS:
            d[name] = asdict(getattr(self, name))
        return d

    def hash(self) -> str:
        """sha256 of the canonical JSON of every setting except I/O paths."""
        d = self.to_dict()
        for k in PATH_KEYS:
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
