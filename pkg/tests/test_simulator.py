from dataclasses import replace

import numpy as np
import pytest

from radarflow.core import project_many
from radarflow.ego_motion import static_residuals
from radarflow.errors import InvalidConfig, LengthMismatch
from radarflow.evaluation import true_targets
from radarflow.flow_lift import lift_scene_flow, stack_samples
from radarflow.simulator import (
    Box,
    EgoSegment,
    MetricsReport,
    Predictions,
    RadarModel,
    Scene,
    SceneConfig,
    evaluate,
    simulate,
)

from conftest import translating_box_config

NOISE_FREE = RadarModel(sigma_p=0.0, sigma_v=0.0)


def test_static_scene_zero_radial_velocity():
    cfg = SceneConfig(duration=0.2, dynamic_boxes=(), ego_segments=(EgoSegment(0.2, 0.0),), radar=NOISE_FREE)
    for b in simulate(cfg):
        assert len(b.radar) > 100
        assert np.all(b.radar.radial_velocity == 0.0)
        assert not b.dyn_labels_gt.any()


def test_head_on_approach_negative():
    cfg = SceneConfig(
        duration=0.2,
        ground=False,
        static_boxes=(),
        dynamic_boxes=(Box((30.0, 0.0, 0.0), (2.0, 20.0, 6.0), (-5.0, 0.0, 0.0)),),
        ego_segments=(EgoSegment(0.2, 0.0),),
        radar=RadarModel(sigma_p=0.0, sigma_v=0.0, azimuth_fov_deg=1.0, elevation_fov_deg=1.0),
    )
    for b in simulate(cfg):
        assert len(b.radar) > 0
        np.testing.assert_allclose(b.radar.radial_velocity, -5.0, atol=1e-3)


def test_depth_at_radar_projection():
    cfg = SceneConfig(duration=0.3, radar=NOISE_FREE)
    scene = Scene(cfg)
    cam = cfg.camera
    n = 0
    for b in simulate(cfg):
        pc = cam.cam_from_ego.apply(b.radar.positions)
        u, v, front = project_many(cam, pc)
        inside = front & cam.in_bounds(np.nan_to_num(u, nan=-1.0), np.nan_to_num(v, nan=-1.0))
        z, _ = scene.depth_at(u[inside], v[inside], b.timestamp)
        np.testing.assert_allclose(z, pc[inside, 2], rtol=0, atol=1e-6)
        n += inside.sum()
    assert n > 200


def test_static_residual_zero():
    cfg = SceneConfig(duration=0.3, radar=NOISE_FREE)
    for b in simulate(cfg):
        r = static_residuals(b.radar, b.ego_velocity)[~b.dyn_labels_gt]
        assert np.abs(r).max() <= 1e-12


def test_relative_depth_invariant(short_scene):
    scene, bundles = short_scene
    s = scene.cfg.relative_depth_scale
    for b in bundles:
        np.testing.assert_array_equal(b.depth_relative.data * s, b.depth_metric.data)


def test_rasters_share_dimensions(short_scene):
    scene, bundles = short_scene
    shape = scene.cfg.camera.shape
    for b in bundles:
        assert b.depth_metric.data.shape == shape
        assert b.mask_gt.data.shape == shape
        assert b.flow_to_next is None or b.flow_to_next.data.shape[:2] == shape
    assert bundles[-1].flow_to_next is None


def test_deterministic():
    cfg = SceneConfig(duration=0.2)
    a, b = simulate(cfg), simulate(cfg)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.radar.positions, y.radar.positions)
        np.testing.assert_array_equal(x.radar.radial_velocity, y.radar.radial_velocity)
        np.testing.assert_array_equal(x.depth_metric.data, y.depth_metric.data)
        if x.flow_to_next is not None:
            np.testing.assert_array_equal(x.flow_to_next.data, y.flow_to_next.data)


def test_seed_changes_radar():
    a = simulate(SceneConfig(duration=0.1))[0]
    b = simulate(SceneConfig(duration=0.1, seed=1))[0]
    assert not np.array_equal(a.radar.positions, b.radar.positions)


def test_consistency_triangle():
    cfg = translating_box_config(duration=0.3)
    scene, bundles = Scene(cfg), simulate(cfg)
    for b, nb in zip(bundles[:-1], bundles[1:]):
        samples = lift_scene_flow(b.flow_to_next, b.depth_metric, nb.depth_metric, b.mask_gt, cfg.camera,
                                  b.ego_pose, nb.ego_pose, t_i=b.timestamp, t_j=nb.timestamp)
        arr = stack_samples(samples)
        world_i = b.ego_pose.apply(arr.x_ti)
        world_j = nb.ego_pose.apply(arr.x_tj)
        step = nb.object_poses[0].translation - b.object_poses[0].translation
        np.testing.assert_allclose(world_j - world_i, np.tile(step, (len(arr), 1)), atol=1e-6)


def test_mask_marks_dynamic_pixels(short_scene):
    scene, bundles = short_scene
    b = bundles[0]
    np.testing.assert_array_equal(b.mask_gt.data == 1, b.object_ids > scene.n_static)
    assert b.mask_gt.data.sum() > 0


def test_default_scene_shape(default_scene):
    scene, bundles = default_scene
    assert len(bundles) == 51
    counts = [len(b.radar) for b in bundles]
    assert min(counts) >= 250 and max(counts) <= 300
    assert len(scene.boxes) - scene.n_static == 3
    assert np.allclose(bundles[0].ego_velocity, (8.0, 0.0, 0.0))


def test_invalid_configs():
    with pytest.raises(InvalidConfig):
        SceneConfig(frame_rate=0)
    with pytest.raises(InvalidConfig):
        SceneConfig(radar=RadarModel(sigma_v=-1))
    with pytest.raises(InvalidConfig):
        SceneConfig(static_boxes=(Box((0, 0, 0), (1, 0, 1)),))


def test_config_dict_round_trip():
    cfg = SceneConfig(duration=1.5, seed=7)
    assert SceneConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    with pytest.raises(InvalidConfig):
        SceneConfig.from_dict({"durations": 1})


# ------------------------------------------------------------- evaluate


def lifted_ground_truth(bundles, cfg):
    samples = []
    for b, nb in zip(bundles[:-1], bundles[1:]):
        samples += lift_scene_flow(b.flow_to_next, b.depth_metric, nb.depth_metric, b.mask_gt, cfg.camera,
                                   b.ego_pose, nb.ego_pose, t_i=b.timestamp, t_j=nb.timestamp)
    return samples


def ground_truth_predictions(scene, bundles):
    cfg = scene.cfg
    samples = lifted_ground_truth(bundles, cfg)
    targets = true_targets(scene, bundles, samples)
    samples = [replace(s, x_tj=x) for s, x in zip(samples, targets)]
    return Predictions(
        ego_velocity=[b.ego_velocity for b in bundles],
        dyn_labels=[b.dyn_labels_gt for b in bundles],
        scales=[cfg.relative_depth_scale] * len(bundles),
        samples=samples,
    )


def test_evaluate_ground_truth(short_scene):
    scene, bundles = short_scene
    rep = evaluate(scene, bundles, ground_truth_predictions(scene, bundles))
    assert rep.ego_velocity_rmse == 0.0
    assert rep.f1 == 1.0 and rep.precision == 1.0 and rep.recall == 1.0
    assert rep.scale_rel_error_max == 0.0
    assert rep.n_samples > 0
    assert rep.scene_flow_epe == 0.0


def test_lifted_ground_truth_flow_mostly_exact(short_scene):
    # pixels on a box's bottom edge can borrow ground depth at the flowed target
    scene, bundles = short_scene
    samples = lifted_ground_truth(bundles, scene.cfg)
    err = np.linalg.norm(stack_samples(samples).x_tj - true_targets(scene, bundles, samples), axis=1)
    assert np.mean(err <= 1e-6) >= 0.98


def test_evaluate_all_static(short_scene):
    scene, bundles = short_scene
    rep = evaluate(scene, bundles, Predictions(dyn_labels=[np.zeros(len(b.radar), bool) for b in bundles]))
    assert rep.recall == 0.0


def test_evaluate_length_mismatch(short_scene):
    scene, bundles = short_scene
    with pytest.raises(LengthMismatch):
        evaluate(scene, bundles, Predictions(scales=[3.0]))


def test_report_serialization(tmp_path, short_scene):
    scene, bundles = short_scene
    rep = evaluate(scene, bundles, Predictions(scales=[3.3] * len(bundles)))
    assert isinstance(rep, MetricsReport)
    rep.write(tmp_path / "r.json", tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text().splitlines()
    assert text[0] == "metric,value"
    assert any(line.startswith("scale_rel_error_max,") for line in text)
    assert rep.scale_rel_error_mean == pytest.approx(0.1)
