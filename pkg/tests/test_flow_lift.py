import numpy as np
import pytest

from radarflow.core import DepthImage, RadarFrame, RigidTransform, ScaleState, project_many
from radarflow.errors import DimensionMismatch, NoDynamicRadarPoints
from radarflow.flow_lift import (
    FlowImage,
    SceneFlowSample,
    associate_radial_velocity,
    lift_scene_flow,
    sample_inverse_depth,
    stack_samples,
)
from radarflow.segmentation import DynamicMask
from radarflow.simulator import Scene, simulate

from conftest import translating_box_config


def flat(cam, z=10.0):
    return DepthImage(np.full(cam.shape, z), ScaleState.METRIC)


def full_mask(cam):
    return DynamicMask(np.ones(cam.shape, dtype=np.uint8))


def zero_flow(cam):
    return FlowImage(np.zeros((*cam.shape, 2)))


def sample_at(x, t_i=0.0, t_j=0.1):
    return SceneFlowSample(x, x, t_i, t_j)


@pytest.fixture(scope="module")
def translating():
    cfg = translating_box_config(duration=0.5)
    return Scene(cfg), simulate(cfg)


@pytest.fixture(scope="module")
def lifted_default(short_scene):
    scene, bundles = short_scene
    cam = scene.cfg.camera
    out = []
    for b, nb in zip(bundles[:-1], bundles[1:]):
        s = lift_scene_flow(
            b.flow_to_next, b.depth_metric, nb.depth_metric, b.mask_gt, cam, b.ego_pose, nb.ego_pose,
            t_i=b.timestamp, t_j=nb.timestamp,
        )
        out.append((b, s))
    return out


# ------------------------------------------------------------------ lift


def test_zero_flow_identity(cam100):
    samples = lift_scene_flow(zero_flow(cam100), flat(cam100), flat(cam100), full_mask(cam100), cam100,
                              RigidTransform.identity(), RigidTransform.identity())
    assert len(samples) == 26 * 26
    for s in samples:
        np.testing.assert_array_equal(s.x_ti, s.x_tj)


def test_row_major_order(cam100):
    samples = lift_scene_flow(zero_flow(cam100), flat(cam100), flat(cam100), full_mask(cam100), cam100,
                              RigidTransform.identity(), RigidTransform.identity(), stride=10)
    pixels = [(v, u) for u, v in (s.pixel for s in samples)]
    assert pixels == sorted(pixels)


def test_only_masked_pixels(cam100):
    m = np.zeros(cam100.shape, dtype=np.uint8)
    m[40:60, 20:30] = 1
    samples = lift_scene_flow(zero_flow(cam100), flat(cam100), flat(cam100), DynamicMask(m), cam100,
                              RigidTransform.identity(), RigidTransform.identity(), stride=1)
    assert len(samples) == 200
    assert all(m[v, u] == 1 for u, v in (s.pixel for s in samples))


def test_off_image_flow_dropped(cam100):
    f = np.zeros((*cam100.shape, 2))
    f[:, :, 0] = 500.0
    samples = lift_scene_flow(FlowImage(f), flat(cam100), flat(cam100), full_mask(cam100), cam100,
                              RigidTransform.identity(), RigidTransform.identity())
    assert samples == []


def test_invalid_target_depth_dropped(cam100):
    dj = np.full(cam100.shape, 10.0)
    dj[:, 50:] = 0.0
    samples = lift_scene_flow(zero_flow(cam100), flat(cam100), DepthImage(dj, ScaleState.METRIC),
                              full_mask(cam100), cam100, RigidTransform.identity(), RigidTransform.identity(), stride=1)
    assert samples and all(s.pixel[0] < 49 for s in samples)


def test_dimension_mismatch(cam100):
    small = DepthImage(np.ones((10, 10)), ScaleState.METRIC)
    with pytest.raises(DimensionMismatch):
        lift_scene_flow(zero_flow(cam100), small, flat(cam100), full_mask(cam100), cam100,
                        RigidTransform.identity(), RigidTransform.identity())


def test_translation_recovered(translating):
    scene, bundles = translating
    cam = scene.cfg.camera
    n = 0
    for b, nb in zip(bundles[:-1], bundles[1:]):
        samples = lift_scene_flow(b.flow_to_next, b.depth_metric, nb.depth_metric, b.mask_gt, cam,
                                  b.ego_pose, nb.ego_pose, t_i=b.timestamp, t_j=nb.timestamp)
        arr = stack_samples(samples)
        back = np.einsum("nij,nj->ni", arr.R_ji, arr.x_tj) + arr.t_ji
        np.testing.assert_allclose(back - arr.x_ti, np.tile([1.0, 0.0, 0.0], (len(arr), 1)), atol=1e-6)
        n += len(arr)
    assert n > 500


def test_reprojection_lands_on_flow(lifted_default, short_scene):
    cam = short_scene[0].cfg.camera
    for b, samples in lifted_default:
        if not samples:
            continue
        x = np.array([s.x_tj for s in samples])
        u, v, _ = project_many(cam, cam.cam_from_ego.apply(x))
        px = np.array([s.pixel for s in samples])
        f = b.flow_to_next.data[px[:, 1], px[:, 0]]
        assert np.max(np.abs(u - px[:, 0] - f[:, 0])) <= 1e-6
        assert np.max(np.abs(v - px[:, 1] - f[:, 1])) <= 1e-6


def test_transform_is_relative_pose(lifted_default, short_scene):
    bundles = short_scene[1]
    for b, samples in lifted_default[:2]:
        want = b.ego_pose.inverse().compose(bundles[b.index + 1].ego_pose)
        assert all(s.T_j_to_i.allclose(want, 1e-12) for s in samples)


# ---------------------------------------------------------------- lookup


def test_inverse_depth_exact_on_plane(cam100):
    # a tilted plane z = 10 / (1 + 0.002 u): inverse depth is affine in u
    u = np.arange(101.0)
    d = np.tile(10.0 / (1 + 0.002 * u), (101, 1))
    q = np.random.default_rng(0).uniform(0, 100, size=(50, 2))
    z, ok = sample_inverse_depth(d, q[:, 0], q[:, 1])
    assert ok.all()
    np.testing.assert_allclose(z, 10.0 / (1 + 0.002 * q[:, 0]), rtol=1e-12)


def test_inverse_depth_tap_ratio():
    d = np.array([[10.0, 30.0], [10.0, 30.0]])
    assert sample_inverse_depth(d, [0.5], [0.5])[1][0]
    assert not sample_inverse_depth(d, [0.5], [0.5], max_tap_ratio=1.2)[1][0]
    assert not sample_inverse_depth(d, [1.5], [0.5])[1][0]


# ------------------------------------------------------------- associate


def frame_of(points, vr):
    return RadarFrame(0.0, RigidTransform.identity(), np.asarray(points, float), np.asarray(vr, float))


def test_associate_exact_hit():
    frame = frame_of([(10, 0, 0), (5, 5, 0)], [-3.0, 2.0])
    (s,) = associate_radial_velocity([sample_at((5, 5, 0))], frame, [True, True], RigidTransform.identity())
    assert s.radial_velocity == 2.0


def test_associate_tie_lowest_index():
    frame = frame_of([(10, 1, 0), (10, -1, 0), (10, 0, 1)], [1.0, 2.0, 3.0])
    (s,) = associate_radial_velocity([sample_at((10, 0, 0))], frame, [False, True, True], RigidTransform.identity())
    # index 0 is static, 1 and 2 tie
    assert s.radial_velocity == 2.0


def test_associate_distance_cap():
    frame = frame_of([(10, 0, 0)], [1.0])
    near, far = associate_radial_velocity([sample_at((12, 0, 0)), sample_at((14, 0, 0))], frame, [True],
                                          RigidTransform.identity())
    assert near.radial_velocity == 1.0
    assert far.radial_velocity is None


def test_associate_only_annotates():
    frame = frame_of([(10, 0, 0)], [1.0])
    s0 = SceneFlowSample((9, 0, 0), (9.5, 0, 0), 0.0, 0.1)
    (s1,) = associate_radial_velocity([s0], frame, [True], RigidTransform.identity())
    np.testing.assert_array_equal(s1.x_ti, s0.x_ti)
    np.testing.assert_array_equal(s1.x_tj, s0.x_tj)


def test_associate_origin_in_ego_frame():
    # sensor 2 m ahead of the ego origin
    frame = RadarFrame(0.0, RigidTransform(np.eye(3), (-2.0, 0.0, 0.0)), np.array([[8.0, 0, 0]]), np.array([1.0]))
    (s,) = associate_radial_velocity([sample_at((10, 0, 0))], frame, [True], RigidTransform.identity())
    np.testing.assert_allclose(s.radar_origin, [2.0, 0.0, 0.0])
    assert s.radial_velocity == 1.0


def test_associate_compensates_ego():
    # sensor moving +x at 4 m/s; a static-in-world target would read -4
    frame = frame_of([(10, 0, 0)], [-1.0])
    (s,) = associate_radial_velocity([sample_at((10, 0, 0))], frame, [True], RigidTransform.identity(),
                                     ego_velocity=(4.0, 0.0, 0.0))
    assert s.radial_velocity == pytest.approx(3.0)


def test_associate_requires_dynamic():
    with pytest.raises(NoDynamicRadarPoints):
        associate_radial_velocity([], frame_of([(1, 0, 0)], [0.0]), [False], RigidTransform.identity())


def test_associate_matches_analytic_velocity(lifted_default, short_scene):
    scene = short_scene[0]
    errs = []
    for b, samples in lifted_default:
        if not b.dyn_labels_gt.any():
            continue
        samples = associate_radial_velocity(samples, b.radar, b.dyn_labels_gt, b.ego_pose, ego_velocity=b.ego_velocity)
        for s in samples:
            if s.radial_velocity is None:
                continue
            u, v = s.pixel
            vel = b.ego_pose.inverse().apply_vector(scene.velocity_of_id([b.object_ids[v, u]])[0])
            r = (s.x_ti - s.radar_origin) / np.linalg.norm(s.x_ti - s.radar_origin)
            errs.append(abs(r @ vel - s.radial_velocity))
    errs = np.array(errs)
    assert len(errs) > 100
    assert np.mean(errs <= 0.2) >= 0.95


# --------------------------------------------------------------- records


def test_sample_invariants():
    with pytest.raises(ValueError):
        SceneFlowSample((0, 0, 0), (0, 0, 0), 0.1, 0.1)
    with pytest.raises(ValueError):
        SceneFlowSample((0, 0, np.nan), (0, 0, 0), 0.0, 0.1)


def test_sample_dict_round_trip():
    s = SceneFlowSample((1, 2, 3), (4, 5, 6), 0.0, 0.1, (0.5, 0, 0), -2.5,
                        RigidTransform.from_yaw(0.1, (1, 0, 0)), (3, 4))
    r = SceneFlowSample.from_dict(s.to_dict())
    assert r.to_dict() == s.to_dict()
