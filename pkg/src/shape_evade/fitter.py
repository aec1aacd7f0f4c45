"""Robust 2D-to-3D body fitting.

Minimizes  sum_i w_i * rho(||project(joints_i) - keypoint_i||)
         + lambda_shape * ||beta||^2
         + lambda_pose * (||theta||^2 + hinge penalties)

with rho the Geman-McClure penalty (or plain squares when config.robust is
off).  The solver is iteratively-reweighted Gauss-Newton: robust weights are
frozen each outer iteration, the damped normal equations (Levenberg damping
on the scaled diagonal) give a step, and a backtracking line search accepts
it only on true-objective decrease.  Multi-start over coarse global-yaw
hypotheses; deterministic throughout.

fit_shared() fits several poses of one subject jointly with a single shared
beta; fit() is the one-pose case.  The parameter vector is [beta (6),
block_1, ..., block_R] with each 54-wide block holding (theta, global
rotation, global translation) for one pose, so for R=1 it coincides with the
bodymodel packing.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import bodymodel as bm
from .errors import DegenerateViewError, FitFailureError

_POSE_BLOCK = bm.NUM_PARAMS - bm.NUM_BETAS  # 54
_REST_CENTROID = bm.TEMPLATE[bm.OBSERVABLE_JOINTS].mean(axis=0)
_TORSO_CM = 45.0  # template mid-shoulders to mid-hips
_KP = {name: i for i, name in enumerate(bm.KEYPOINT_NAMES)}
_TORSO_KPS = [_KP["right_hip"], _KP["left_hip"],
              _KP["right_shoulder"], _KP["left_shoulder"]]
_Z_FALLBACK_CM = 300.0
_Z_MIN_CM = 60.0  # keeps every joint clear of the camera near plane
_MU_START = 1e-3
_MU_MAX = 1e12
_LINE_SEARCH_STEPS = 7  # alpha = 1, 1/2, ..., 2**-6
_MIN_DETECTED = 4

_HINGE_ROWS = []  # (flat theta offset within a pose block, lo, hi)
for _name, _box in bm.HINGE_LIMITS.items():
    for _axis in range(3):
        _HINGE_ROWS.append(
            (3 * bm.JOINT_INDEX[_name] + _axis, _box[_axis, 0], _box[_axis, 1])
        )


def geman_mcclure(residual, sigma: float):
    """rho(e) = e^2 / (e^2 + sigma^2); even, saturating to 1."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    sq = np.square(residual)
    return sq / (sq + sigma * sigma)


@dataclass(frozen=True)
class FitConfig:
    """Objective weights and solver controls."""

    sigma_gm: float = 10.0
    lambda_shape: float = 1.0
    lambda_pose: float = 0.5
    max_outer_iters: int = 80
    convergence_tol: float = 1e-9
    restarts: int = 4
    robust: bool = True  # off: plain squared penalty instead of Geman-McClure

    def __post_init__(self):
        if self.sigma_gm <= 0:
            raise ValueError(f"sigma_gm must be positive, got {self.sigma_gm}")
        if self.lambda_shape < 0 or self.lambda_pose < 0:
            raise ValueError("lambdas must be >= 0")
        if self.max_outer_iters < 1 or self.restarts < 1:
            raise ValueError("max_outer_iters and restarts must be >= 1")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be >= 0")


@dataclass(frozen=True)
class FitResult:
    """Best-restart solution with its objective breakdown."""

    params: bm.BodyParams
    final_objective: float
    data_term: float
    shape_prior: float
    pose_prior: float
    converged: bool
    restarts_used: int


@dataclass(frozen=True)
class SharedFitResult:
    """Joint multi-pose solution sharing one beta."""

    shape: bm.ShapeParams
    poses: tuple
    final_objective: float
    data_term: float
    shape_prior: float
    pose_prior: float
    converged: bool
    restarts_used: int


# --------------------------------------------------------------------------
# Objective terms


def _data_value(pix, keypoints: bm.KeypointSet, config: FitConfig) -> float:
    r = pix - keypoints.locations
    sq = np.sum(r * r, axis=1)
    if config.robust:
        rho = sq / (sq + config.sigma_gm ** 2)
    else:
        rho = sq
    return float(np.dot(keypoints.confidence, rho))


def _pose_prior_value(theta_flat: np.ndarray, config: FitConfig) -> float:
    value = float(np.dot(theta_flat, theta_flat))
    for offset, lo, hi in _HINGE_ROWS:
        t = theta_flat[offset]
        if t > hi:
            value += (t - hi) ** 2
        elif t < lo:
            value += (lo - t) ** 2
    return config.lambda_pose * value


def objective_breakdown(params: bm.BodyParams, camera: bm.Camera,
                        keypoints: bm.KeypointSet, config: FitConfig) -> dict:
    """data / shape_prior / pose_prior terms at params."""
    joints = bm.pose_joints(params.shape, params.pose)
    pix = bm.project(camera, joints[bm.OBSERVABLE_JOINTS])
    beta = params.shape.beta
    return {
        "data": _data_value(pix, keypoints, config),
        "shape_prior": config.lambda_shape * float(np.dot(beta, beta)),
        "pose_prior": _pose_prior_value(params.pose.theta.ravel(), config),
    }


def objective(params: bm.BodyParams, camera: bm.Camera,
              keypoints: bm.KeypointSet, config: FitConfig = FitConfig()) -> float:
    """Full fitting objective at params."""
    return float(sum(objective_breakdown(params, camera, keypoints, config).values()))


def gradient(params: bm.BodyParams, camera: bm.Camera,
             keypoints: bm.KeypointSet, config: FitConfig = FitConfig()) -> np.ndarray:
    """Analytic d(objective)/d(params vector), shape (NUM_PARAMS,)."""
    vec = bm.vector_from_params(params)
    grad = np.zeros(bm.NUM_PARAMS)
    _accumulate_pose(vec[bm.BETA_SLICE], vec[bm.NUM_BETAS:], camera, keypoints,
                     config, grad_out=(grad, slice(bm.NUM_BETAS, bm.NUM_PARAMS)))
    grad[bm.BETA_SLICE] += 2.0 * config.lambda_shape * vec[bm.BETA_SLICE]
    return grad


def _accumulate_pose(beta, block, camera, keypoints, config,
                     grad_out=None, system_out=None):
    """Data + pose-prior derivatives for one pose block.

    grad_out: (grad vector, block slice) to add gradient into.
    system_out: (H, g, block slice) to add the Gauss-Newton system into,
    where the block slice covers this pose's 54 columns and beta columns 0:6
    are implicit.  Returns the data-term value.
    """
    params = bm.BodyParams(
        bm.ShapeParams(np.clip(beta, -bm.BETA_RANGE, bm.BETA_RANGE)),
        bm.PoseParams(
            np.stack([bm.wrap_axis_angle(t)
                      for t in block[:3 * bm.NUM_JOINTS].reshape(-1, 3)]),
            bm.wrap_axis_angle(block[3 * bm.NUM_JOINTS:3 * bm.NUM_JOINTS + 3]),
            block[3 * bm.NUM_JOINTS + 3:],
        ),
    )
    joints, djoints = bm.pose_joints_with_jac(params.shape, params.pose)
    pix, pixjac = bm.project_with_jac(
        camera, joints[bm.OBSERVABLE_JOINTS], djoints[bm.OBSERVABLE_JOINTS]
    )
    r = pix - keypoints.locations  # (13, 2)
    sq = np.sum(r * r, axis=1)
    w = keypoints.confidence
    if config.robust:
        s2 = config.sigma_gm ** 2
        coef = 2.0 * w * s2 / (sq + s2) ** 2  # d(w*rho)/d(sq) * 2
        data = float(np.dot(w, sq / (sq + s2)))
    else:
        coef = 2.0 * w
        data = float(np.dot(w, sq))
    # pixjac columns are in single-pose layout: beta 0:6, pose block 6:60
    g_full = np.einsum("nap,na->p", pixjac, coef[:, None] * r)
    theta_flat = block[:3 * bm.NUM_JOINTS]

    if grad_out is not None:
        grad, block_slice = grad_out
        grad[bm.BETA_SLICE] += g_full[bm.BETA_SLICE]
        grad[block_slice] += g_full[bm.NUM_BETAS:]
        pose_g = np.zeros(_POSE_BLOCK)
        pose_g[:3 * bm.NUM_JOINTS] = 2.0 * config.lambda_pose * theta_flat
        for offset, lo, hi in _HINGE_ROWS:
            t = theta_flat[offset]
            if t > hi:
                pose_g[offset] += 2.0 * config.lambda_pose * (t - hi)
            elif t < lo:
                pose_g[offset] -= 2.0 * config.lambda_pose * (lo - t)
        grad[block_slice] += pose_g

    if system_out is not None:
        H, g, block_slice = system_out
        cols = np.r_[np.arange(bm.NUM_BETAS),
                     np.arange(block_slice.start, block_slice.stop)]
        Hd = np.einsum("nap,naq->pq", pixjac * coef[:, None, None], pixjac)
        H[np.ix_(cols, cols)] += Hd
        g[cols] += g_full
        # quadratic pose prior on theta, plus active hinge curvature
        tcols = np.arange(block_slice.start, block_slice.start + 3 * bm.NUM_JOINTS)
        H[tcols, tcols] += 2.0 * config.lambda_pose
        g[tcols] += 2.0 * config.lambda_pose * theta_flat
        for offset, lo, hi in _HINGE_ROWS:
            t = theta_flat[offset]
            if t > hi:
                H[tcols[offset], tcols[offset]] += 2.0 * config.lambda_pose
                g[tcols[offset]] += 2.0 * config.lambda_pose * (t - hi)
            elif t < lo:
                H[tcols[offset], tcols[offset]] += 2.0 * config.lambda_pose
                g[tcols[offset]] -= 2.0 * config.lambda_pose * (lo - t)
    return data


# --------------------------------------------------------------------------
# Shared-vector evaluation


def _block_slice(r: int) -> slice:
    start = bm.NUM_BETAS + r * _POSE_BLOCK
    return slice(start, start + _POSE_BLOCK)


def _shared_objective(vec, cameras, keypoint_sets, config) -> float:
    beta = np.clip(vec[bm.BETA_SLICE], -bm.BETA_RANGE, bm.BETA_RANGE)
    total = config.lambda_shape * float(np.dot(beta, beta))
    for r, (camera, kps) in enumerate(zip(cameras, keypoint_sets)):
        block = vec[_block_slice(r)]
        single = np.concatenate([beta, block])
        params = bm.params_from_vector(single)
        joints = bm.pose_joints(params.shape, params.pose)
        pix = bm.project(camera, joints[bm.OBSERVABLE_JOINTS])
        total += _data_value(pix, kps, config)
        total += _pose_prior_value(block[:3 * bm.NUM_JOINTS], config)
    return total


def _safe_objective(vec, cameras, keypoint_sets, config) -> float:
    if not np.all(np.isfinite(vec)):
        return np.inf
    try:
        value = _shared_objective(vec, cameras, keypoint_sets, config)
    except DegenerateViewError:
        return np.inf
    return value if np.isfinite(value) else np.inf


def _shared_system(vec, cameras, keypoint_sets, config):
    n = bm.NUM_BETAS + len(cameras) * _POSE_BLOCK
    H = np.zeros((n, n))
    g = np.zeros(n)
    beta = vec[bm.BETA_SLICE]
    data = 0.0
    for r, (camera, kps) in enumerate(zip(cameras, keypoint_sets)):
        data += _accumulate_pose(
            beta, vec[_block_slice(r)], camera, kps, config,
            system_out=(H, g, _block_slice(r)),
        )
    bcols = np.arange(bm.NUM_BETAS)
    H[bcols, bcols] += 2.0 * config.lambda_shape
    g[bcols] += 2.0 * config.lambda_shape * beta
    return H, g, data


# --------------------------------------------------------------------------
# Solver


def _minimize(vec0, cameras, keypoint_sets, config, trace=None):
    """Damped IRLS Gauss-Newton from one start; None if it cannot move at all.

    trace, when given, collects the objective value after every accepted step
    (line search admits only strict decreases, so it is non-increasing).
    """
    vec = np.array(vec0, dtype=np.float64)
    value = _safe_objective(vec, cameras, keypoint_sets, config)
    if not np.isfinite(value):
        return None
    if trace is not None:
        trace.append(value)
    mu = _MU_START
    converged = False
    for _ in range(config.max_outer_iters):
        try:
            H, g, _ = _shared_system(vec, cameras, keypoint_sets, config)
        except DegenerateViewError:
            break
        diag = np.maximum(np.diag(H), 1e-12)
        improved = False
        while mu <= _MU_MAX:
            try:
                step = np.linalg.solve(H + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            for k in range(_LINE_SEARCH_STEPS):
                cand = vec + step * (0.5 ** k)
                cand_value = _safe_objective(cand, cameras, keypoint_sets, config)
                if cand_value < value:
                    previous = value
                    vec, value = cand, cand_value
                    if trace is not None:
                        trace.append(value)
                    mu = max(mu * 0.5, 1e-12)
                    improved = True
                    break
            if improved:
                break
            mu *= 10.0
        if not improved:
            converged = True  # no direction yields decrease: local minimum
            break
        if previous - value < config.convergence_tol:
            converged = True
            break
    return vec, value, converged


def _init_translation(keypoints: bm.KeypointSet, camera: bm.Camera) -> np.ndarray:
    """Back-project the detected-keypoint centroid at a torso-scale depth."""
    f, (cx, cy) = camera.focal, camera.principal_point
    loc, mask = keypoints.locations, keypoints.detected
    z = None
    if all(mask[k] for k in _TORSO_KPS):
        mid_sh = 0.5 * (loc[_KP["right_shoulder"]] + loc[_KP["left_shoulder"]])
        mid_hip = 0.5 * (loc[_KP["right_hip"]] + loc[_KP["left_hip"]])
        torso2d = float(np.linalg.norm(mid_sh - mid_hip))
        if torso2d > 1e-6:
            z = f * _TORSO_CM / torso2d
    if z is None and mask.any():
        span = loc[mask, 1].max() - loc[mask, 1].min()
        if span > 1e-6:
            z = f * 120.0 / span
    if z is None:
        z = _Z_FALLBACK_CM
    z = float(np.clip(z, _Z_MIN_CM, 10_000.0))
    if mask.any():
        u, v = loc[mask].mean(axis=0)
    else:
        u, v = cx, cy
    anchor = np.array([(u - cx) * z / f, -(v - cy) * z / f, z])
    return anchor - _REST_CENTROID


def _yaw_starts(restarts: int):
    # evenly spaced yaw hypotheses; 4 gives 0, pi/2, pi, -pi/2
    return [bm.wrap_axis_angle(np.array([0.0, 2.0 * np.pi * k / restarts, 0.0]))
            for k in range(restarts)]


def _run_restarts(cameras, keypoint_sets, config, init_vec=None):
    n = bm.NUM_BETAS + len(cameras) * _POSE_BLOCK
    starts = []
    if init_vec is not None:
        starts.append(np.array(init_vec, dtype=np.float64))
    else:
        translations = [_init_translation(kps, camera)
                        for camera, kps in zip(cameras, keypoint_sets)]
        for yaw in _yaw_starts(config.restarts):
            vec = np.zeros(n)
            for r, t in enumerate(translations):
                block = vec[_block_slice(r)]
                block[3 * bm.NUM_JOINTS:3 * bm.NUM_JOINTS + 3] = yaw
                block[3 * bm.NUM_JOINTS + 3:] = t
            starts.append(vec)

    # The robust penalty saturates, so a limb more than a few sigma off pulls
    # almost nothing.  Warm every restart up under the squared penalty first
    # (long-range basin), then refine under the configured penalty.
    warmup = dataclasses.replace(config, robust=False) if config.robust else None

    best = None
    used = 0
    for hyp in starts:
        used += 1
        vec0 = hyp
        if warmup is not None:
            warm = _minimize(hyp, cameras, keypoint_sets, warmup)
            if warm is not None:
                vec0 = warm[0]
        outcome = _minimize(vec0, cameras, keypoint_sets, config)
        if outcome is not None and vec0 is not hyp:
            # the squared warmup endpoint, measured under the robust penalty,
            # must not leave us worse than the documented start itself
            if outcome[1] > _safe_objective(hyp, cameras, keypoint_sets, config):
                outcome = _minimize(hyp, cameras, keypoint_sets, config)
        if outcome is None:
            continue
        if best is None or outcome[1] < best[1]:
            best = outcome
    if best is None:
        raise FitFailureError(
            f"all {used} restarts failed to produce a finite objective"
        )
    return best, used


def _prior_mode_vec(cameras):
    n = bm.NUM_BETAS + len(cameras) * _POSE_BLOCK
    vec = np.zeros(n)
    default_t = np.array([0.0, 0.0, _Z_FALLBACK_CM]) - _REST_CENTROID
    for r in range(len(cameras)):
        vec[_block_slice(r)][3 * bm.NUM_JOINTS + 3:] = default_t
    return vec


def fit(keypoints: bm.KeypointSet, camera: bm.Camera,
        config: FitConfig = FitConfig(),
        init: Optional[bm.BodyParams] = None) -> FitResult:
    """Fit one pose to one keypoint set.

    With fewer than 4 detected keypoints the data term cannot constrain the
    pose, so the rest-pose prior mode is returned unoptimized and flagged
    unconverged.  An explicit init replaces the documented multi-start
    hypothesis set (rest pose at a torso-scale depth under `restarts` evenly
    spaced yaws) with that single start.
    """
    if keypoints.detected.sum() < _MIN_DETECTED:
        vec = _prior_mode_vec([camera])
        value = _safe_objective(vec, [camera], [keypoints], config)
        params = bm.params_from_vector(vec)
        parts = objective_breakdown(params, camera, keypoints, config)
        return FitResult(
            params=params,
            final_objective=float(value),
            data_term=parts["data"],
            shape_prior=parts["shape_prior"],
            pose_prior=parts["pose_prior"],
            converged=False,
            restarts_used=0,
        )
    init_vec = bm.vector_from_params(init) if init is not None else None
    (vec, value, converged), used = _run_restarts(
        [camera], [keypoints], config, init_vec
    )
    params = bm.params_from_vector(vec)
    parts = objective_breakdown(params, camera, keypoints, config)
    return FitResult(
        params=params,
        final_objective=float(value),
        data_term=parts["data"],
        shape_prior=parts["shape_prior"],
        pose_prior=parts["pose_prior"],
        converged=converged,
        restarts_used=used,
    )


def fit_shared(keypoint_sets, cameras, config: FitConfig = FitConfig()) -> SharedFitResult:
    """Fit several poses of one subject jointly with a single shared beta."""
    if len(keypoint_sets) != len(cameras) or not keypoint_sets:
        raise ValueError("need one camera per keypoint set, at least one pose")
    (vec, value, converged), used = _run_restarts(cameras, keypoint_sets, config)
    beta = np.clip(vec[bm.BETA_SLICE], -bm.BETA_RANGE, bm.BETA_RANGE)
    shape = bm.ShapeParams(beta)
    poses = []
    data = shape_prior = pose_prior = 0.0
    for r, (camera, kps) in enumerate(zip(cameras, keypoint_sets)):
        single = np.concatenate([beta, vec[_block_slice(r)]])
        params = bm.params_from_vector(single)
        poses.append(params.pose)
        parts = objective_breakdown(params, camera, kps, config)
        data += parts["data"]
        pose_prior += parts["pose_prior"]
        shape_prior = parts["shape_prior"]  # same beta every time
    return SharedFitResult(
        shape=shape,
        poses=tuple(poses),
        final_objective=float(value),
        data_term=data,
        shape_prior=shape_prior,
        pose_prior=pose_prior,
        converged=converged,
        restarts_used=used,
    )


def fit_report(result: FitResult) -> dict:
    """JSON-ready summary: body params in the text schema plus the breakdown."""
    return {
        "params": bm.params_to_text(result.params),
        "final_objective": result.final_objective,
        "data_term": result.data_term,
        "shape_prior": result.shape_prior,
        "pose_prior": result.pose_prior,
        "converged": result.converged,
        "restarts_used": result.restarts_used,
    }
