"""Objective, gradient, and solver behavior of the robust body fitter."""

import json

import numpy as np
import pytest

from shape_evade import bodymodel as bm
from shape_evade import synth
from shape_evade.errors import DegenerateViewError, FitFailureError
from shape_evade.fitter import (
    FitConfig,
    FitResult,
    _minimize,
    _REST_CENTROID,
    fit,
    fit_report,
    fit_shared,
    geman_mcclure,
    gradient,
    objective,
    objective_breakdown,
)


def subject_scene(seed, preset="calibration", size=(1024, 1024)):
    """Subject plus its ground-truth keypoint projections."""
    subject = synth.sample_subject(seed, image_size=size, preset=preset)
    joints = bm.pose_joints(subject.beta_gt, subject.pose_gt)
    pix = bm.project(subject.camera, joints[bm.OBSERVABLE_JOINTS])
    return subject, bm.KeypointSet.ground_truth(pix)


def random_params(seed, beta_cap=2.5, theta_cap=0.6):
    rng = np.random.default_rng(seed)
    beta = rng.uniform(-beta_cap, beta_cap, bm.NUM_BETAS)
    theta = rng.uniform(-theta_cap, theta_cap, (bm.NUM_JOINTS, 3))
    grot = rng.uniform(-0.4, 0.4, 3)
    gtrans = np.array([rng.uniform(-5, 5), rng.uniform(-95, -85),
                       rng.uniform(250, 350)])
    return bm.BodyParams(bm.ShapeParams(beta), bm.PoseParams(theta, grot, gtrans))


def wide_camera(size=1024):
    return bm.Camera(1.15 * size, np.array([(size - 1) / 2.0] * 2), (size, size))


# --------------------------------------------------------------------------
# Penalty function


def test_geman_mcclure_fixed_points():
    assert geman_mcclure(0.0, 10.0) == 0.0
    assert geman_mcclure(10.0, 10.0) == pytest.approx(0.5)
    assert geman_mcclure(100.0, 10.0) == pytest.approx(100.0 / 101.0)


def test_geman_mcclure_even_monotone_bounded():
    e = np.linspace(0.0, 400.0, 200)
    rho = geman_mcclure(e, 7.0)
    assert np.array_equal(rho, geman_mcclure(-e, 7.0))
    assert np.all(np.diff(rho) > 0)
    assert np.all(rho < 1.0)


def test_geman_mcclure_rejects_bad_sigma():
    with pytest.raises(ValueError):
        geman_mcclure(1.0, 0.0)
    with pytest.raises(ValueError):
        geman_mcclure(1.0, -2.0)


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(sigma_gm=0.0)
    with pytest.raises(ValueError):
        FitConfig(lambda_shape=-0.1)
    with pytest.raises(ValueError):
        FitConfig(lambda_pose=-1.0)
    with pytest.raises(ValueError):
        FitConfig(max_outer_iters=0)
    with pytest.raises(ValueError):
        FitConfig(restarts=0)
    with pytest.raises(ValueError):
        FitConfig(convergence_tol=-1e-9)
    FitConfig(lambda_shape=0.0, lambda_pose=0.0)  # zeros are allowed


# --------------------------------------------------------------------------
# Objective


def test_ground_truth_params_zero_data_term():
    subject, kps = subject_scene(0)
    params = bm.BodyParams(subject.beta_gt, subject.pose_gt)
    parts = objective_breakdown(params, subject.camera, kps, FitConfig())
    assert parts["data"] == pytest.approx(0.0, abs=1e-20)
    beta = subject.beta_gt.beta
    assert parts["shape_prior"] == pytest.approx(np.dot(beta, beta))
    total = objective(params, subject.camera, kps)
    assert total == pytest.approx(sum(parts.values()))


def test_zero_confidence_objective_is_priors_only():
    subject, kps = subject_scene(1)
    silent = bm.KeypointSet(kps.locations, np.zeros(bm.NUM_KEYPOINTS),
                            np.zeros(bm.NUM_KEYPOINTS, dtype=bool))
    params = random_params(5)
    cfg = FitConfig()
    parts = objective_breakdown(params, subject.camera, silent, cfg)
    assert parts["data"] == 0.0
    moved = bm.KeypointSet(kps.locations + 137.0, silent.confidence, silent.detected)
    assert objective(params, subject.camera, silent, cfg) == objective(
        params, subject.camera, moved, cfg
    )


def test_single_zero_weight_keypoint_is_literally_ignored():
    subject, kps = subject_scene(2)
    conf = np.ones(bm.NUM_KEYPOINTS)
    conf[7] = 0.0
    base = bm.KeypointSet(kps.locations, conf, kps.detected)
    loc = kps.locations.copy()
    loc[7] = [-4000.0, 9999.0]
    moved = bm.KeypointSet(loc, conf, kps.detected)
    params = random_params(9)
    for cfg in (FitConfig(), FitConfig(robust=False)):
        a = objective(params, subject.camera, base, cfg)
        b = objective(params, subject.camera, moved, cfg)
        assert a == b
        assert np.array_equal(gradient(params, subject.camera, base, cfg),
                              gradient(params, subject.camera, moved, cfg))


def test_objective_summation_oracle():
    subject, kps = subject_scene(3)
    rng = np.random.default_rng(17)
    conf = rng.uniform(0.1, 1.0, bm.NUM_KEYPOINTS)
    noisy = bm.KeypointSet(kps.locations + rng.normal(0, 8, (13, 2)), conf,
                           kps.detected)
    params = random_params(21)
    cfg = FitConfig(sigma_gm=12.0, lambda_shape=0.7, lambda_pose=1.3)

    joints = bm.pose_joints(params.shape, params.pose)
    pix = bm.project(subject.camera, joints[bm.OBSERVABLE_JOINTS])
    data = 0.0
    for i in range(bm.NUM_KEYPOINTS):
        e = np.linalg.norm(pix[i] - noisy.locations[i])
        data += conf[i] * geman_mcclure(e, cfg.sigma_gm)
    theta = params.pose.theta
    expected_pose = cfg.lambda_pose * (
        float(np.sum(theta * theta)) + float(np.sum(bm.hinge_violations(theta) ** 2))
    )
    parts = objective_breakdown(params, subject.camera, noisy, cfg)
    assert parts["data"] == pytest.approx(data, rel=1e-12)
    assert parts["pose_prior"] == pytest.approx(expected_pose, rel=1e-12)
    beta = params.shape.beta
    assert parts["shape_prior"] == pytest.approx(cfg.lambda_shape * np.dot(beta, beta))
    assert objective(params, subject.camera, noisy, cfg) == pytest.approx(
        data + expected_pose + parts["shape_prior"], rel=1e-12
    )


def test_degenerate_view_propagates():
    subject, kps = subject_scene(4)
    behind = bm.BodyParams(
        bm.ShapeParams(),
        bm.PoseParams(global_translation=np.array([0.0, -89.0, -50.0])),
    )
    with pytest.raises(DegenerateViewError):
        objective(behind, subject.camera, kps)


def test_gradient_matches_finite_differences():
    subject, kps = subject_scene(6)
    rng = np.random.default_rng(101)
    noisy = bm.KeypointSet(
        kps.locations + rng.normal(0, 6, (13, 2)),
        rng.uniform(0.2, 1.0, bm.NUM_KEYPOINTS),
        kps.detected,
    )
    h = 1e-6
    probes = 0
    for cfg in (FitConfig(), FitConfig(robust=False, lambda_pose=2.0)):
        for pseed in range(3):
            params = random_params(1000 + pseed, beta_cap=2.0, theta_cap=0.5)
            vec = bm.vector_from_params(params)
            g = gradient(params, subject.camera, noisy, cfg)
            gscale = np.abs(g).max()
            for i in rng.choice(bm.NUM_PARAMS, size=12, replace=False):
                vp, vm = vec.copy(), vec.copy()
                vp[i] += h
                vm[i] -= h
                fd = (
                    objective(bm.params_from_vector(vp), subject.camera, noisy, cfg)
                    - objective(bm.params_from_vector(vm), subject.camera, noisy, cfg)
                ) / (2 * h)
                # relative to the gradient's own scale so near-zero entries
                # (leaf rotations) don't blow up the quotient
                denom = max(abs(fd), 1e-6 * gscale)
                assert abs(fd - g[i]) / denom <= 1e-4
                probes += 1
    assert probes >= 50


# --------------------------------------------------------------------------
# Solver


def test_fit_prior_mode_when_all_undetected():
    subject, kps = subject_scene(7)
    silent = bm.KeypointSet(kps.locations, np.zeros(bm.NUM_KEYPOINTS),
                            np.zeros(bm.NUM_KEYPOINTS, dtype=bool))
    res = fit(silent, subject.camera)
    assert isinstance(res, FitResult)
    assert not res.converged
    assert res.restarts_used == 0
    assert np.array_equal(res.params.shape.beta, np.zeros(bm.NUM_BETAS))
    assert np.array_equal(res.params.pose.theta, np.zeros((bm.NUM_JOINTS, 3)))
    # zero weights, zero shape, rest pose: every term vanishes
    assert res.final_objective == 0.0
    assert res.data_term == 0.0


def test_fit_prior_mode_below_detection_floor():
    subject, kps = subject_scene(8)
    det = np.zeros(bm.NUM_KEYPOINTS, dtype=bool)
    det[[0, 5, 12]] = True  # three detections are not enough
    conf = det.astype(float)
    res = fit(bm.KeypointSet(kps.locations, conf, det), subject.camera)
    assert not res.converged
    assert res.restarts_used == 0


def test_fit_reaches_exact_keypoints():
    subject, kps = subject_scene(9)
    cfg = FitConfig(restarts=1, max_outer_iters=120, robust=False,
                    lambda_shape=0.0)
    res = fit(kps, subject.camera, cfg)
    refit = bm.project(
        subject.camera,
        bm.pose_joints(res.params.shape, res.params.pose)[bm.OBSERVABLE_JOINTS],
    )
    rms = float(np.sqrt(np.mean(np.sum((refit - kps.locations) ** 2, axis=1))))
    assert rms < 1.0
    assert res.converged


def test_fit_result_fields_are_consistent():
    subject, kps = subject_scene(10)
    cfg = FitConfig(restarts=2, max_outer_iters=40)
    res = fit(kps, subject.camera, cfg)
    assert res.restarts_used == 2
    recomputed = objective(res.params, subject.camera, kps, cfg)
    assert res.final_objective == pytest.approx(recomputed, rel=1e-12)
    assert res.final_objective == pytest.approx(
        res.data_term + res.shape_prior + res.pose_prior, rel=1e-12
    )


def test_fit_with_init_never_worse_than_init():
    subject, kps = subject_scene(11)
    cfg = FitConfig(max_outer_iters=30)
    start = bm.BodyParams(
        bm.ShapeParams(),
        bm.PoseParams(global_translation=np.array([0.0, 0.0, 300.0]) - _REST_CENTROID),
    )
    res = fit(kps, subject.camera, cfg, init=start)
    assert res.final_objective <= objective(start, subject.camera, kps, cfg)
    assert res.restarts_used == 1


def test_objective_trace_non_increasing():
    subject, kps = subject_scene(12)
    cfg = FitConfig(robust=False, max_outer_iters=60)
    vec0 = np.zeros(bm.NUM_PARAMS)
    vec0[bm.GTRANS_SLICE] = np.array([0.0, 0.0, 115.0]) - _REST_CENTROID
    trace = []
    out = _minimize(vec0, [subject.camera], [kps], cfg, trace=trace)
    assert out is not None
    assert len(trace) >= 2
    assert np.all(np.diff(trace) < 0)


def test_fit_deterministic():
    subject, kps = subject_scene(13)
    cfg = FitConfig(restarts=2, max_outer_iters=25)
    a = fit(kps, subject.camera, cfg)
    b = fit(kps, subject.camera, cfg)
    assert np.array_equal(a.params.shape.beta, b.params.shape.beta)
    assert np.array_equal(a.params.pose.theta, b.params.pose.theta)
    assert a.final_objective == b.final_objective


def test_robust_fit_resists_outlier_displacement():
    subject, kps = subject_scene(14)
    loc = kps.locations.copy()
    loc[11] += [100.0, 0.0]  # left wrist pushed far off
    outlier = bm.KeypointSet.ground_truth(loc)
    shifts = {}
    for robust in (True, False):
        cfg = FitConfig(robust=robust, restarts=1, max_outer_iters=80)
        clean_fit = fit(kps, subject.camera, cfg)
        bad_fit = fit(outlier, subject.camera, cfg)
        shifts[robust] = float(
            np.linalg.norm(bad_fit.params.shape.beta - clean_fit.params.shape.beta)
        )
    assert shifts[True] < shifts[False]


def test_mirror_symmetry():
    subject, kps = subject_scene(15)
    camera = subject.camera
    w = camera.image_size[0]
    mloc = kps.locations[bm.MIRROR_KEYPOINTS].copy()
    mloc[:, 0] = (w - 1) - mloc[:, 0]
    mirrored = bm.KeypointSet.ground_truth(mloc)
    cfg = FitConfig(restarts=4, max_outer_iters=60)
    res = fit(kps, camera, cfg)
    mres = fit(mirrored, camera, cfg)
    assert mres.final_objective == pytest.approx(res.final_objective, rel=1e-5, abs=1e-8)
    np.testing.assert_allclose(mres.params.shape.beta, res.params.shape.beta,
                               atol=1e-3)


def test_fit_failure_when_init_is_degenerate():
    subject, kps = subject_scene(16)
    bad = bm.BodyParams(
        bm.ShapeParams(),
        bm.PoseParams(global_translation=np.array([0.0, -89.0, -200.0])),
    )
    with pytest.raises(FitFailureError):
        fit(kps, subject.camera, init=bad)


# --------------------------------------------------------------------------
# Shared-shape fitting


def test_fit_shared_single_pose_matches_fit():
    subject, kps = subject_scene(17)
    cfg = FitConfig(restarts=2, max_outer_iters=30)
    single = fit(kps, subject.camera, cfg)
    shared = fit_shared([kps], [subject.camera], cfg)
    assert shared.final_objective == single.final_objective
    assert np.array_equal(shared.shape.beta, single.params.shape.beta)
    assert len(shared.poses) == 1


def test_fit_shared_rejects_mismatched_inputs():
    subject, kps = subject_scene(18)
    with pytest.raises(ValueError):
        fit_shared([kps, kps], [subject.camera])
    with pytest.raises(ValueError):
        fit_shared([], [])


def test_fit_shared_three_poses_smoke():
    import itertools

    entries = list(itertools.islice(
        synth.corpus_entries(5, 1, 3, (1024, 1024), "calibration"), 3))
    kp_sets, cams = [], []
    for _, _, subj in entries:
        joints = bm.pose_joints(subj.beta_gt, subj.pose_gt)
        kp_sets.append(bm.KeypointSet.ground_truth(
            bm.project(subj.camera, joints[bm.OBSERVABLE_JOINTS])))
        cams.append(subj.camera)
    cfg = FitConfig(restarts=1, max_outer_iters=60, robust=False, lambda_shape=0.0)
    res = fit_shared(kp_sets, cams, cfg)
    assert len(res.poses) == 3
    # every pose must reproject its own keypoints tightly with the shared shape
    for pose, kps, cam in zip(res.poses, kp_sets, cams):
        refit = bm.project(cam, bm.pose_joints(res.shape, pose)[bm.OBSERVABLE_JOINTS])
        rms = float(np.sqrt(np.mean(np.sum((refit - kps.locations) ** 2, axis=1))))
        assert rms < 2.0


def test_fit_report_serializes():
    subject, kps = subject_scene(19)
    res = fit(kps, subject.camera, FitConfig(restarts=1, max_outer_iters=10))
    report = fit_report(res)
    text = json.dumps(report)
    assert "final_objective" in text
    parsed = bm.params_from_text(report["params"])
    np.testing.assert_allclose(parsed.shape.beta, res.params.shape.beta,
                               atol=1e-12)
