import numpy as np
import pytest

from splatgrasp import refiner
from splatgrasp.errors import DegenerateFaceError, ValidationError
from splatgrasp.hand_rig import HandPose
from splatgrasp.losses import photometric_loss
from splatgrasp.rasterizer import RasterConfig
from splatgrasp.refiner import (RefineConfig, ViewpointSet, photometric_pose_gradient, refine_pose,
                                render_hand_scene, sample_viewpoint)
from splatgrasp.rotations import axis_angle_to_matrix
from splatgrasp.splat_binding import GaussianSet
from splatgrasp.synthetic import orbit_cameras

from recovery import RecoveryTask

# hard cutoffs make the image piecewise smooth; loosening them gives a smooth
# objective for finite-difference checks of the full chain
SMOOTH_RASTER = RasterConfig(sigma_cutoff=8.0, alpha_min=1e-9)


@pytest.fixture(scope="module")
def small_views(rig, binding, box_object, gt_pose):
    cams = orbit_cameras(size=48, count=4)
    targets = [render_hand_scene(gt_pose, rig, binding, box_object, c)[0].pixels for c in cams]
    return ViewpointSet(cams, targets, seed=3)


def perturbed(pose, deg=5.0, cm=1.0, seed=0):
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    shift = rng.normal(size=3)
    return pose.replace(
        global_rotation=axis_angle_to_matrix(axis / np.linalg.norm(axis) * np.radians(deg)) @ pose.global_rotation,
        translation=pose.translation + 0.01 * cm * shift / np.linalg.norm(shift))


def test_sample_viewpoint(small_views):
    single = ViewpointSet(small_views.cameras[:1], small_views.targets[:1], seed=5)
    assert {sample_viewpoint(single, i)[0] for i in range(50)} == {0}
    assert sample_viewpoint(small_views, 17)[0] == sample_viewpoint(small_views, 17)[0]
    counts = np.bincount([sample_viewpoint(small_views, i)[0] for i in range(10000)], minlength=4)
    sigma = np.sqrt(10000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 2500) <= 3 * sigma), counts
    with pytest.raises(ValidationError):
        sample_viewpoint(ViewpointSet([], []), 0)


def test_viewpoint_set_validation(small_views):
    with pytest.raises(ValidationError):
        ViewpointSet(small_views.cameras[:2], small_views.targets[:1])
    with pytest.raises(ValidationError):
        ViewpointSet(small_views.cameras[:1], [np.zeros((10, 10, 3))])


def test_config_validation():
    with pytest.raises(ValidationError):
        RefineConfig(max_iterations=0)
    with pytest.raises(ValidationError):
        RefineConfig(lr_rotation=-1.0)
    with pytest.raises(ValidationError):
        RefineConfig(lambda_1=2.0)


def test_fixed_point_returns_immediately(rig, binding, box_object, gt_pose, small_views):
    rep = refine_pose(gt_pose, rig, binding, box_object, small_views)
    assert rep.iterations == 1 and rep.converged and not rep.diverged
    assert rep.loss_trace[0] < 1e-6
    assert len(rep.loss_trace) == rep.iterations
    np.testing.assert_array_equal(rep.final_pose.translation, gt_pose.translation)


def test_single_view_fixed_point_is_stable(rig, binding, box_object, gt_pose, small_views):
    views = ViewpointSet(small_views.cameras[:1], small_views.targets[:1])
    rep = refine_pose(gt_pose, rig, binding, box_object, views, RefineConfig(max_iterations=15))
    assert max(rep.loss_trace) <= 1e-6
    assert max(rep.per_view_loss) <= 1e-6


def test_adam_steps_away_from_an_unguarded_fixed_point(rig, binding, box_object, gt_pose, small_views):
    # Adam normalizes gradient magnitude, so a vanishing but nonzero gradient
    # still moves the pose by about one learning rate; the fixed-point stop is
    # what keeps an exact optimum in place
    views = ViewpointSet(small_views.cameras[:1], small_views.targets[:1])
    cfg = RefineConfig(max_iterations=5, fixed_point_tol=-1.0, convergence_window=100)
    rep = refine_pose(gt_pose, rig, binding, box_object, views, cfg)
    assert rep.loss_trace[0] <= 1e-6
    assert max(rep.loss_trace) > 1e-6


def test_zero_learning_rates_freeze_the_pose(rig, binding, box_object, gt_pose, small_views):
    init = perturbed(gt_pose)
    cfg = RefineConfig(max_iterations=6, lr_rotation=0.0, lr_translation=0.0)
    rep = refine_pose(init, rig, binding, box_object, small_views, cfg)
    assert rep.iterations == 6 and not rep.converged
    # re-orthonormalization may touch the last bit, nothing more
    np.testing.assert_allclose(rep.final_pose.global_rotation, init.global_rotation, atol=1e-12)
    np.testing.assert_array_equal(rep.final_pose.translation, init.translation)
    np.testing.assert_allclose(rep.final_pose.joint_rotations, init.joint_rotations, atol=1e-12)


def test_translation_gradient_matches_finite_differences(rig, binding, gt_pose):
    cam = orbit_cameras(size=40, count=1)[0]
    target = render_hand_scene(gt_pose, rig, binding, GaussianSet.empty(), cam, raster=SMOOTH_RASTER)[0].pixels
    pose = perturbed(gt_pose, deg=2.0, cm=0.5, seed=4)
    _, grads = photometric_pose_gradient(pose, rig, binding, GaussianSet.empty(), cam, target,
                                         raster=SMOOTH_RASTER)

    def loss(t):
        img, _ = render_hand_scene(pose.replace(translation=t), rig, binding, GaussianSet.empty(), cam,
                                   raster=SMOOTH_RASTER)
        return photometric_loss(img.pixels, target)

    def fd(h):
        return np.array([(loss(pose.translation + e) - loss(pose.translation - e)) / (2 * h)
                         for e in h * np.eye(3)])

    # relative error of the gradient vector at a 0.1 mm step
    g = grads["translation"]
    f = fd(1e-4)
    assert np.linalg.norm(g - f) <= 1e-2 * np.linalg.norm(f), (g, f)
    # with a tiny step every component agrees closely, including near-zero ones
    np.testing.assert_allclose(g, fd(1e-6), rtol=1e-4, atol=1e-6)


def test_rotation_gradients_match_finite_differences(rig, binding, gt_pose):
    cam = orbit_cameras(size=40, count=1)[0]
    target = render_hand_scene(gt_pose, rig, binding, GaussianSet.empty(), cam, raster=SMOOTH_RASTER)[0].pixels
    pose = perturbed(gt_pose, deg=2.0, cm=0.5, seed=4)
    _, grads = photometric_pose_gradient(pose, rig, binding, GaussianSet.empty(), cam, target,
                                         raster=SMOOTH_RASTER)

    def loss(p):
        img, _ = render_hand_scene(p, rig, binding, GaussianSet.empty(), cam, raster=SMOOTH_RASTER)
        return photometric_loss(img.pixels, target)

    h = 1e-5
    for a in range(3):
        d = np.zeros(3)
        d[a] = h
        Yp = pose.global_rotation @ axis_angle_to_matrix(d)
        Ym = pose.global_rotation @ axis_angle_to_matrix(-d)
        fd = (loss(pose.replace(global_rotation=Yp)) - loss(pose.replace(global_rotation=Ym))) / (2 * h)
        assert grads["global_tangent"][a] == pytest.approx(fd, rel=1e-2)
        h_p, h_m = pose.joint_rotations.copy(), pose.joint_rotations.copy()
        h_p[6] = h_p[6] @ axis_angle_to_matrix(d)
        h_m[6] = h_m[6] @ axis_angle_to_matrix(-d)
        fd = (loss(pose.replace(joint_rotations=h_p)) - loss(pose.replace(joint_rotations=h_m))) / (2 * h)
        assert grads["joint_tangent"][6, a] == pytest.approx(fd, rel=1e-2, abs=1e-6)


def test_short_refinement_improves_and_keeps_rotations_valid(rig, binding, box_object, gt_pose, small_views):
    errors = []

    def check(it, pose, loss, view):
        R = np.concatenate([pose.global_rotation[None], pose.joint_rotations])
        errors.append(np.max(np.abs(np.swapaxes(R, 1, 2) @ R - np.eye(3))))

    init = perturbed(gt_pose, seed=1)
    rep = refine_pose(init, rig, binding, box_object, small_views, RefineConfig(max_iterations=40), check)
    assert max(errors) <= 1e-5
    assert np.linalg.norm(rep.final_pose.translation - gt_pose.translation) < np.linalg.norm(
        init.translation - gt_pose.translation)
    per_view_init = [photometric_loss(render_hand_scene(init, rig, binding, box_object, c)[0].pixels, t)
                     for c, t in zip(small_views.cameras, small_views.targets)]
    assert np.mean(rep.per_view_loss) < np.mean(per_view_init)
    assert rep.view_trace == [sample_viewpoint(small_views, i)[0] for i in range(rep.iterations)]


def test_refinement_is_deterministic(rig, binding, box_object, gt_pose, small_views):
    init = perturbed(gt_pose, seed=2)
    a = refine_pose(init, rig, binding, box_object, small_views, RefineConfig(max_iterations=8))
    b = refine_pose(init, rig, binding, box_object, small_views, RefineConfig(max_iterations=8))
    assert a.loss_trace == b.loss_trace
    assert np.array_equal(a.final_pose.joint_rotations, b.final_pose.joint_rotations)


def test_degenerate_face_rolls_back(monkeypatch, rig, binding, box_object, gt_pose, small_views):
    real = refiner.photometric_pose_gradient
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 3:
            raise DegenerateFaceError(42)
        return real(*args, **kwargs)

    monkeypatch.setattr(refiner, "photometric_pose_gradient", flaky)
    rep = refine_pose(perturbed(gt_pose), rig, binding, box_object, small_views, RefineConfig(max_iterations=5))
    assert any("face 42" in d for d in rep.diagnostics)
    # the failed iteration contributes no loss sample
    assert rep.iterations == 4 and not rep.diverged


def test_nan_loss_marks_divergence(rig, binding, box_object, gt_pose, small_views):
    bad = [np.full_like(t, np.nan) for t in small_views.targets]
    init = perturbed(gt_pose)
    rep = refine_pose(init, rig, binding, box_object, ViewpointSet(small_views.cameras, bad))
    assert rep.diverged and not rep.converged
    assert rep.iterations == 0
    np.testing.assert_array_equal(rep.final_pose.translation, init.translation)


def test_root_joint_frozen_by_default(rig, binding, box_object, gt_pose, small_views):
    init = perturbed(gt_pose, seed=5)
    rep = refine_pose(init, rig, binding, box_object, small_views, RefineConfig(max_iterations=5))
    np.testing.assert_allclose(rep.final_pose.joint_rotations[0], init.joint_rotations[0], atol=1e-12)
    rep2 = refine_pose(init, rig, binding, box_object, small_views,
                       RefineConfig(max_iterations=5, optimize_fingers=False))
    np.testing.assert_allclose(rep2.final_pose.joint_rotations, init.joint_rotations, atol=1e-12)
    assert isinstance(rep2.final_pose, HandPose)


@pytest.fixture(scope="module")
def recovery_traces(rig, binding, box_object, gt_pose):
    task = RecoveryTask(rig, binding, box_object, gt_pose)
    return [task.run(seed).loss_trace for seed in range(10)]


@pytest.mark.slow
def test_loss_trend_after_warmup(recovery_traces):
    # the late loss sits well below the loss just after moment warm-up
    drops = [np.mean(t[-10:]) < 0.5 * np.mean(t[10:20]) for t in recovery_traces]
    assert sum(drops) >= 9, drops


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="each iteration scores a randomly drawn view and Adam keeps a fixed step "
                                       "size, so the per-iteration trace fluctuates near the optimum")
def test_loss_trace_non_increasing_after_warmup(recovery_traces):
    monotone = [np.all(np.diff(t[10:]) <= 0) for t in recovery_traces]
    assert sum(monotone) >= 9, monotone
