import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist
from sklearn.base import clone

from radarflow.core import DepthImage, RadarFrame, RigidTransform, ScaleState, project_many
from radarflow.errors import (
    DegeneratePlane,
    NonPositiveScale,
    NoStaticPoints,
    NoValidSamples,
    TooFewPoints,
    UnstableDenominator,
    ZeroNorm,
)
from radarflow.flow_lift import sample_inverse_depth
from radarflow.scale_recovery import (
    RadarScaleRecovery,
    ScaleConfig,
    ScaleSample,
    SphereIndex,
    apply_scale,
    collect_scale_samples,
    nearest3_on_sphere,
    plane_scale,
    sphere_directions,
    vote_scale,
)
from radarflow.simulator import RadarModel, SceneConfig, simulate

NOISE_FREE = RadarModel(sigma_p=0.0, sigma_v=0.0)


def coplanar(rng, s=2.0):
    """Metric points on a random plane in front of the camera and their 1/s visual copies."""
    n = np.array([*rng.uniform(-0.5, 0.5, 2), 1.0])
    d = rng.uniform(5.0, 20.0)
    corners = np.array([(0.0, 0.0), (-0.3, -0.2), (0.3, -0.2), (0.0, 0.3)])
    rays = np.column_stack([corners + rng.uniform(-0.05, 0.05, (4, 2)), np.ones(4)])
    pts = rays * (d / (rays @ n))[:, None]
    return pts[0], pts[1:] / s


# ---------------------------------------------------------------- sphere


def test_sphere_directions_examples():
    np.testing.assert_allclose(sphere_directions([(0, 0, 2)]), [[0, 0, 1]])
    np.testing.assert_allclose(sphere_directions([(3, 4, 0)]), [[0.6, 0.8, 0]])


def test_sphere_directions_unit_norm():
    p = np.random.default_rng(0).normal(scale=30.0, size=(1000, 3))
    assert np.max(np.abs(np.linalg.norm(sphere_directions(p), axis=1) - 1)) <= 1e-12


def test_sphere_directions_zero_norm():
    with pytest.raises(ZeroNorm):
        sphere_directions([(1, 0, 0), (0, 0, 1e-7)])


def test_nearest3_exact_hit_first():
    dirs = sphere_directions(np.random.default_rng(1).normal(size=(50, 3)))
    assert nearest3_on_sphere(dirs, dirs[17])[0] == 17


def test_nearest3_three_points():
    dirs = sphere_directions([(1, 0, 0), (0, 1, 0), (0, 0, 1)])
    assert sorted(nearest3_on_sphere(dirs, (1, 1, 1))) == [0, 1, 2]


def test_nearest3_too_few():
    with pytest.raises(TooFewPoints):
        SphereIndex(sphere_directions([(1, 0, 0), (0, 1, 0)]))


def test_nearest3_tie_lowest_index():
    dirs = sphere_directions([(0, 1, 0), (1, 0, 0), (0, -1, 0), (-1, 0, 0), (0, 0, -1)])
    # the query is equidistant from the first four
    np.testing.assert_array_equal(nearest3_on_sphere(dirs, (0, 0, 1)), [0, 1, 2])


def test_nearest3_matches_brute_force():
    rng = np.random.default_rng(2)
    dirs = sphere_directions(rng.normal(size=(10_000, 3)))
    q = sphere_directions(rng.normal(size=(200, 3)))
    index = SphereIndex(dirs)
    got = index.query3(q)
    d = cdist(q, dirs, "sqeuclidean")
    want = np.argsort(d, axis=1, kind="stable")[:, :3]
    np.testing.assert_array_equal(got, want)


# ----------------------------------------------------------------- plane


def test_plane_scale_exact_two():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p_r, (a, b, c) = coplanar(rng, 2.0)
        assert plane_scale(p_r, a, b, c) == pytest.approx(2.0, abs=1e-9)


def test_plane_scale_collinear():
    with pytest.raises(DegeneratePlane):
        plane_scale((0, 0, 5), (0, 0, 1), (0, 0, 2), (0, 0, 3))


def test_plane_scale_through_origin():
    # the plane x = 0 contains the camera centre
    with pytest.raises(UnstableDenominator):
        plane_scale((0, 1, 5), (0, 0, 1), (0, 1, 2), (0, -1, 3))


def test_plane_scale_non_positive():
    with pytest.raises(NonPositiveScale):
        plane_scale((0, 0, -5), (0, 0, 1), (1, 0, 1), (0, 1, 1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_plane_scale_equivariance(seed, k):
    p_r, (a, b, c) = coplanar(np.random.default_rng(seed), 1.5)
    s1 = plane_scale(p_r, a, b, c)
    sk = plane_scale(p_r, k * a, k * b, k * c)
    assert sk == pytest.approx(s1 / k, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_plane_scale_anchor_invariance(seed):
    p_r, pts = coplanar(np.random.default_rng(seed), 2.5)
    vals = [plane_scale(p_r, *pts[list(perm)]) for perm in ((0, 1, 2), (1, 2, 0), (2, 0, 1), (1, 0, 2))]
    assert max(vals) - min(vals) <= 1e-9


# ------------------------------------------------------------------ vote


def test_vote_constant():
    assert vote_scale([1.7] * 10) == pytest.approx(1.7, abs=1e-12)


def test_vote_monte_carlo():
    rng = np.random.default_rng(4)
    for _ in range(20):
        good = rng.normal(2.0, 0.01, 800)
        bad = rng.uniform(0.1, 10.0, 200)
        assert abs(vote_scale(np.concatenate([good, bad])) - 2.0) <= 0.02


def test_vote_all_outside():
    with pytest.raises(NoValidSamples):
        vote_scale([0.01, 60.0, 100.0])


def test_vote_tie_lower_bin():
    cfg = ScaleConfig(hist_min=0.0, hist_max=10.0, hist_bins=10)
    # bins 1 and 8 both hold two samples; the lower bin wins
    assert vote_scale([1.2, 1.4, 8.2, 8.4], cfg) == pytest.approx(1.3)


def test_vote_permutation_invariant():
    rng = np.random.default_rng(5)
    vals = np.concatenate([rng.normal(3.0, 0.05, 300), rng.uniform(0.1, 20, 100)])
    ref = vote_scale(vals)
    for _ in range(5):
        assert vote_scale(rng.permutation(vals)) == ref


def test_vote_accepts_samples():
    samples = [ScaleSample(i, 2.5, (0, 1, 2)) for i in range(5)]
    assert vote_scale(samples) == 2.5


def test_scale_config_invariants():
    with pytest.raises(ValueError):
        ScaleConfig(hist_min=5.0, hist_max=1.0)
    with pytest.raises(ValueError):
        ScaleConfig(hist_bins=1)
    with pytest.raises(ValueError):
        ScaleConfig(max_depth_ratio=1.0)


# ----------------------------------------------------------------- apply


def test_apply_scale_identity_and_double():
    d = np.array([[1.0, 0.0], [2.5, 4.0]])
    rel = DepthImage(d, ScaleState.RELATIVE)
    np.testing.assert_array_equal(apply_scale(rel, 1.0).data, d)
    two = apply_scale(rel, 2.0)
    np.testing.assert_array_equal(two.data, 2 * d)
    assert two.data[0, 1] == 0.0
    assert two.scale_state == ScaleState.METRIC


def test_apply_scale_rejects_non_positive():
    rel = DepthImage(np.ones((2, 2)), ScaleState.RELATIVE)
    with pytest.raises(NonPositiveScale):
        apply_scale(rel, 0.0)


# --------------------------------------------------------------- collect


@pytest.fixture(scope="module")
def planar_bundles():
    cfg = SceneConfig(duration=0.3, static_boxes=(), dynamic_boxes=(), radar=NOISE_FREE)
    return cfg, simulate(cfg)


def test_collect_planar_exact(planar_bundles):
    cfg, bundles = planar_bundles
    total = 0
    for b in bundles:
        samples = collect_scale_samples(b.depth_relative, cfg.camera, b.radar, b.dyn_labels_gt)
        total += len(samples)
        assert all(abs(s.scale - 3.0) <= 1e-6 for s in samples)
        assert all(len(set(s.neighbor_indices)) == 3 for s in samples)
    assert total > 100


def test_collect_default_scene_votes_exact():
    cfg = SceneConfig(duration=0.3, radar=NOISE_FREE)
    for b in simulate(cfg):
        samples = collect_scale_samples(b.depth_relative, cfg.camera, b.radar, b.dyn_labels_gt)
        vals = np.array([s.scale for s in samples])
        assert np.median(np.abs(vals - 3.0)) <= 1e-6
        assert vote_scale(samples) == pytest.approx(3.0, rel=1e-6)


def test_collect_all_dynamic(short_scene):
    scene, bundles = short_scene
    b = bundles[0]
    with pytest.raises(NoStaticPoints):
        collect_scale_samples(b.depth_relative, scene.cfg.camera, b.radar, np.ones(len(b.radar), bool))


def test_collect_rejects_depth_discontinuity(cam100):
    # left half of the image at z = 10, right half at z = 20
    d = np.full((101, 101), 10.0)
    d[:, 51:] = 20.0
    depth = DepthImage(d, ScaleState.RELATIVE)
    # a radar point looking at the seam, 3x farther than the near side
    frame = RadarFrame(0.0, RigidTransform.identity(), np.array([[0.005 * 30.0, 0.0, 30.0]]), np.zeros(1))
    cfg = ScaleConfig(subsample_stride=1, max_spherical_spread=0.05)
    assert collect_scale_samples(depth, cam100, frame, [False], cfg) == []
    # same geometry without the seam is accepted
    flat = DepthImage(np.full((101, 101), 10.0), ScaleState.RELATIVE)
    (sample,) = collect_scale_samples(flat, cam100, frame, [False], cfg)
    assert sample.scale == pytest.approx(3.0, rel=1e-9)


def test_collect_requires_relative(short_scene):
    scene, bundles = short_scene
    b = bundles[0]
    with pytest.raises(ValueError):
        collect_scale_samples(b.depth_metric, scene.cfg.camera, b.radar, b.dyn_labels_gt)


# ------------------------------------------------------------ end to end


def test_end_to_end_static_ranges():
    cfg = SceneConfig(duration=0.3, radar=NOISE_FREE)
    cam = cfg.camera
    for b in simulate(cfg):
        est = RadarScaleRecovery(cam).fit(b.depth_relative, frame=b.radar, dyn_labels=b.dyn_labels_gt)
        metric = est.transform(b.depth_relative).data
        pc = cam.cam_from_ego.apply(b.radar.positions[~b.dyn_labels_gt])
        u, v, front = project_many(cam, pc)
        u, v, z = u[front], v[front], pc[front, 2]
        # only points whose four depth taps sit on one surface have a defined depth
        zd, ok = sample_inverse_depth(metric, u, v, max_tap_ratio=1.05)
        assert ok.sum() > 100
        rel = np.abs(zd[ok] - z[ok]) / z[ok]
        assert rel.max() <= 0.03


def test_estimator_api(short_scene):
    scene, bundles = short_scene
    b = bundles[0]
    est = RadarScaleRecovery(scene.cfg.camera, hist_bins=256)
    assert est.get_params()["hist_bins"] == 256
    assert clone(est).get_params()["hist_bins"] == 256
    est.fit(b.depth_relative, frame=b.radar, dyn_labels=b.dyn_labels_gt)
    assert 0 < est.acceptance_rate_ <= 1
    assert est.scale_ == pytest.approx(3.0, rel=0.02)
    with pytest.raises(Exception):
        RadarScaleRecovery(scene.cfg.camera).transform(b.depth_relative)


def test_fit_is_deterministic(short_scene):
    scene, bundles = short_scene
    b = bundles[2]
    a = RadarScaleRecovery(scene.cfg.camera).fit(b.depth_relative, frame=b.radar, dyn_labels=b.dyn_labels_gt)
    c = RadarScaleRecovery(scene.cfg.camera).fit(b.depth_relative, frame=b.radar, dyn_labels=b.dyn_labels_gt)
    assert a.scale_ == c.scale_


def test_runtime_per_frame(short_scene):
    scene, bundles = short_scene
    b = bundles[0]
    t0 = time.perf_counter()
    RadarScaleRecovery(scene.cfg.camera).fit(b.depth_relative, frame=b.radar, dyn_labels=b.dyn_labels_gt)
    assert time.perf_counter() - t0 <= 5.0
