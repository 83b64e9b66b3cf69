import numpy as np
import pytest

from radarflow.core import CameraModel, RigidTransform
from radarflow.simulator import Box, EgoSegment, RadarModel, Scene, SceneConfig, simulate


@pytest.fixture(scope="session")
def default_scene():
    cfg = SceneConfig()
    return Scene(cfg), simulate(cfg)


@pytest.fixture(scope="session")
def short_scene():
    cfg = SceneConfig(duration=0.5)
    return Scene(cfg), simulate(cfg)


def translating_box_config(duration=1.0, noise=False):
    """Stationary sensor, no ground, one box moving +x at 10 m/s (1 m per frame)."""
    radar = RadarModel() if noise else RadarModel(sigma_p=0.0, sigma_v=0.0)
    return SceneConfig(
        duration=duration,
        ground=False,
        static_boxes=(),
        dynamic_boxes=(Box((15.0, 0.0, 0.0), (4.0, 4.0, 3.0), (10.0, 0.0, 0.0)),),
        ego_segments=(EgoSegment(duration, 0.0, 0.0),),
        radar=radar,
    )


@pytest.fixture
def cam100():
    return CameraModel(100.0, 100.0, 50.0, 50.0, 101, 101, RigidTransform.identity())


def random_transform(rng):
    q = rng.normal(size=4)
    return RigidTransform.from_quaternion(q / np.linalg.norm(q), rng.normal(scale=5.0, size=3))
