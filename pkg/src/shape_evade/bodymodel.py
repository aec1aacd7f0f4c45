"""Analytic parametric skeleton: shaped rest joints, forward kinematics, projection.

The skeleton is a 16-joint tree; 13 joints are observable keypoints (both sets of
ankles/knees/hips/wrists/elbows/shoulders plus the head top), while pelvis, spine
and neck are interior. Shape is a 6-vector of proportion deviations acting
multiplicatively on bone groups; pose is one axis-angle per joint plus a global
rotation (about the pelvis) and a translation in cm.

Coordinate conventions: y up, ground plane y=0 for the template, +x is the
subject's anatomical left. The camera sits at the origin looking down +z, so a
subject at positive z facing the camera shows their left side on the image's
right. Projection: u = cx + f*x/z, v = cy - f*y/z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateViewError

# --------------------------------------------------------------------------
# Skeleton topology (parents precede children)

JOINT_NAMES = [
    "pelvis", "spine", "neck", "head_top",
    "right_hip", "right_knee", "right_ankle",
    "left_hip", "left_knee", "left_ankle",
    "right_shoulder", "right_elbow", "right_wrist",
    "left_shoulder", "left_elbow", "left_wrist",
]
JOINT_INDEX = {name: i for i, name in enumerate(JOINT_NAMES)}
PARENTS = [
    -1, 0, 1, 2,
    0, 4, 5,
    0, 7, 8,
    2, 10, 11,
    2, 13, 14,
]
NUM_JOINTS = len(JOINT_NAMES)

# Observable keypoints in canonical report order.
KEYPOINT_NAMES = [
    "right_ankle", "right_knee", "right_hip",
    "left_hip", "left_knee", "left_ankle",
    "right_wrist", "right_elbow", "right_shoulder",
    "left_shoulder", "left_elbow", "left_wrist",
    "head_top",
]
KEYPOINT_INDEX = {name: i for i, name in enumerate(KEYPOINT_NAMES)}
OBSERVABLE_JOINTS = np.array([JOINT_INDEX[n] for n in KEYPOINT_NAMES])
NUM_KEYPOINTS = len(KEYPOINT_NAMES)

# Template joint positions in cm (y up, ground y=0, head top at 170).
# Small z offsets keep the rest pose off a single plane.
TEMPLATE = np.array([
    [0.0, 95.0, 0.0],      # pelvis
    [0.0, 120.0, 0.0],     # spine
    [0.0, 142.0, 0.0],     # neck
    [0.0, 170.0, 0.0],     # head_top
    [-17.0, 95.0, 0.0],    # right_hip
    [-17.0, 50.0, -3.0],   # right_knee
    [-17.0, 8.0, 2.0],     # right_ankle
    [17.0, 95.0, 0.0],     # left_hip
    [17.0, 50.0, -3.0],    # left_knee
    [17.0, 8.0, 2.0],      # left_ankle
    [-19.0, 140.0, 0.0],   # right_shoulder
    [-19.0, 112.0, -5.0],  # right_elbow
    [-19.0, 86.0, -12.0],  # right_wrist
    [19.0, 140.0, 0.0],    # left_shoulder
    [19.0, 112.0, -5.0],   # left_elbow
    [19.0, 86.0, -12.0],   # left_wrist
])

BETA_NAMES = ["height", "leg_length", "arm_length",
              "shoulder_width", "hip_width", "torso_length"]
NUM_BETAS = len(BETA_NAMES)
BETA_RANGE = 3.0  # standard-units box
BETA_GAIN = 0.1   # bone scale = prod(1 + BETA_GAIN*beta_k) over the bone's groups

# Which beta components scale the bone ending at each joint (height scales all).
_G = {name: i for i, name in enumerate(BETA_NAMES)}
BONE_GROUPS = [
    [],                            # pelvis (root, no bone)
    [_G["height"], _G["torso_length"]],    # spine
    [_G["height"], _G["torso_length"]],    # neck
    [_G["height"]],                        # head_top
    [_G["height"], _G["hip_width"]],       # right_hip
    [_G["height"], _G["leg_length"]],      # right_knee
    [_G["height"], _G["leg_length"]],      # right_ankle
    [_G["height"], _G["hip_width"]],       # left_hip
    [_G["height"], _G["leg_length"]],      # left_knee
    [_G["height"], _G["leg_length"]],      # left_ankle
    [_G["height"], _G["shoulder_width"]],  # right_shoulder
    [_G["height"], _G["arm_length"]],      # right_elbow
    [_G["height"], _G["arm_length"]],      # right_wrist
    [_G["height"], _G["shoulder_width"]],  # left_shoulder
    [_G["height"], _G["arm_length"]],      # left_elbow
    [_G["height"], _G["arm_length"]],      # left_wrist
]

NEAR_PLANE_CM = 10.0

# Parameter vector layout used by the fitter: beta, per-joint theta, global.
NUM_PARAMS = NUM_BETAS + 3 * NUM_JOINTS + 6
BETA_SLICE = slice(0, NUM_BETAS)
THETA_SLICE = slice(NUM_BETAS, NUM_BETAS + 3 * NUM_JOINTS)
GROT_SLICE = slice(THETA_SLICE.stop, THETA_SLICE.stop + 3)
GTRANS_SLICE = slice(GROT_SLICE.stop, GROT_SLICE.stop + 3)

# Hinge joints carry box limits per axis-angle component; the x component is
# the hinge axis (knee flexion negative, elbow flexion positive).
HINGE_LIMITS = {
    "right_knee": np.array([[-2.4, 0.05], [-0.3, 0.3], [-0.3, 0.3]]),
    "left_knee": np.array([[-2.4, 0.05], [-0.3, 0.3], [-0.3, 0.3]]),
    "right_elbow": np.array([[-0.05, 2.4], [-0.3, 0.3], [-0.3, 0.3]]),
    "left_elbow": np.array([[-0.05, 2.4], [-0.3, 0.3], [-0.3, 0.3]]),
}

_MIRROR_JOINT = {}
for _n in JOINT_NAMES:
    if _n.startswith("left_"):
        _MIRROR_JOINT[_n] = "right_" + _n[5:]
    elif _n.startswith("right_"):
        _MIRROR_JOINT[_n] = "left_" + _n[6:]
    else:
        _MIRROR_JOINT[_n] = _n
MIRROR_JOINTS = np.array([JOINT_INDEX[_MIRROR_JOINT[n]] for n in JOINT_NAMES])
MIRROR_KEYPOINTS = np.array(
    [KEYPOINT_INDEX[_MIRROR_JOINT[n]] for n in KEYPOINT_NAMES]
)

# --------------------------------------------------------------------------
# Parameter containers


@dataclass(frozen=True)
class ShapeParams:
    """Proportion deviations in standard units, one per BETA_NAMES entry."""

    beta: np.ndarray = field(default_factory=lambda: np.zeros(NUM_BETAS))

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        if b.shape != (NUM_BETAS,):
            raise ValueError(f"beta must have shape ({NUM_BETAS},), got {b.shape}")
        if not np.all(np.isfinite(b)):
            raise ValueError("beta contains non-finite values")
        if np.any(np.abs(b) > BETA_RANGE):
            raise ValueError(f"beta outside [-{BETA_RANGE}, {BETA_RANGE}]: {b}")
        object.__setattr__(self, "beta", b)


@dataclass(frozen=True)
class PoseParams:
    """Per-joint axis-angle rotations plus a global rigid transform (cm)."""

    theta: np.ndarray = field(default_factory=lambda: np.zeros((NUM_JOINTS, 3)))
    global_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    global_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=np.float64)
        gr = np.asarray(self.global_rotation, dtype=np.float64)
        gt = np.asarray(self.global_translation, dtype=np.float64)
        if th.shape != (NUM_JOINTS, 3):
            raise ValueError(f"theta must have shape ({NUM_JOINTS}, 3), got {th.shape}")
        if gr.shape != (3,) or gt.shape != (3,):
            raise ValueError("global rotation/translation must be 3-vectors")
        if not (np.all(np.isfinite(th)) and np.all(np.isfinite(gr))
                and np.all(np.isfinite(gt))):
            raise ValueError("pose contains non-finite values")
        mags = np.linalg.norm(th, axis=1)
        if np.any(mags > np.pi + 1e-9) or np.linalg.norm(gr) > np.pi + 1e-9:
            raise ValueError("axis-angle magnitude exceeds pi; wrap first")
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "global_rotation", gr)
        object.__setattr__(self, "global_translation", gt)


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics: focal length (px), principal point (px), image size."""

    focal: float
    principal_point: np.ndarray
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        pp = np.asarray(self.principal_point, dtype=np.float64)
        w, h = self.image_size
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if pp.shape != (2,):
            raise ValueError("principal_point must be a 2-vector")
        if not (0 <= pp[0] < w and 0 <= pp[1] < h):
            raise ValueError(f"principal point {pp} outside image {w}x{h}")
        object.__setattr__(self, "principal_point", pp)
        object.__setattr__(self, "image_size", (int(w), int(h)))


@dataclass(frozen=True)
class BodyParams:
    """Shape plus pose; the full argument of the skeleton model."""

    shape: ShapeParams = field(default_factory=ShapeParams)
    pose: PoseParams = field(default_factory=PoseParams)


@dataclass(frozen=True)
class KeypointSet:
    """2D keypoints in canonical order with confidences and detection flags."""

    locations: np.ndarray  # (13, 2) pixel coordinates (u, v)
    confidence: np.ndarray  # (13,) in [0, 1]
    detected: np.ndarray  # (13,) bool

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=np.float64)
        conf = np.asarray(self.confidence, dtype=np.float64)
        det = np.asarray(self.detected, dtype=bool)
        if loc.shape != (NUM_KEYPOINTS, 2):
            raise ValueError(f"locations must be ({NUM_KEYPOINTS}, 2), got {loc.shape}")
        if conf.shape != (NUM_KEYPOINTS,) or det.shape != (NUM_KEYPOINTS,):
            raise ValueError("confidence/detected must have one entry per keypoint")
        if np.any(conf < 0) or np.any(conf > 1):
            raise ValueError("confidence outside [0,1]")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "confidence", conf)
        object.__setattr__(self, "detected", det)

    @classmethod
    def ground_truth(cls, locations) -> "KeypointSet":
        loc = np.asarray(locations, dtype=np.float64)
        return cls(loc, np.ones(NUM_KEYPOINTS), np.ones(NUM_KEYPOINTS, dtype=bool))


# --------------------------------------------------------------------------
# Rotations


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


_EYE3 = np.eye(3)
_BASIS_SKEWS = np.stack([_skew(_EYE3[k]) for k in range(3)])


def rotation(omega: np.ndarray) -> np.ndarray:
    """Rodrigues rotation matrix for an axis-angle vector."""
    omega = np.asarray(omega, dtype=np.float64)
    angle_sq = float(omega @ omega)
    K = _skew(omega)
    if angle_sq < 1e-16:
        # second-order series, error O(theta^3)
        return _EYE3 + K + 0.5 * (K @ K)
    angle = np.sqrt(angle_sq)
    return _EYE3 + (np.sin(angle) / angle) * K + ((1.0 - np.cos(angle)) / angle_sq) * (K @ K)


def rotation_and_jac(omega: np.ndarray):
    """Rotation matrix and its derivative d R / d omega_k, shape (3, 3, 3)."""
    omega = np.asarray(omega, dtype=np.float64)
    R = rotation(omega)
    angle_sq = float(omega @ omega)
    dR = np.empty((3, 3, 3))
    if angle_sq < 1e-16:
        K = _skew(omega)
        for k in range(3):
            Ek = _BASIS_SKEWS[k]
            dR[k] = Ek + 0.5 * (Ek @ K + K @ Ek)
        return R, dR
    K = _skew(omega)
    for k in range(3):
        v = np.cross(omega, (_EYE3 - R)[:, k])
        dR[k] = ((omega[k] * K + _skew(v)) / angle_sq) @ R
    return R, dR


def wrap_axis_angle(omega: np.ndarray) -> np.ndarray:
    """Equivalent axis-angle with magnitude in [0, pi]."""
    omega = np.asarray(omega, dtype=np.float64)
    angle = float(np.linalg.norm(omega))
    if angle <= np.pi or angle == 0.0:
        return omega.copy()
    wrapped = np.remainder(angle + np.pi, 2.0 * np.pi) - np.pi  # in (-pi, pi]
    return omega * (wrapped / angle)


# --------------------------------------------------------------------------
# Shaped rest pose


def _bone_scales(beta: np.ndarray):
    """Per-joint bone scale factors and their d/d beta, shapes (16,), (16, 6)."""
    factors = 1.0 + BETA_GAIN * beta
    scales = np.ones(NUM_JOINTS)
    dscales = np.zeros((NUM_JOINTS, NUM_BETAS))
    for j in range(1, NUM_JOINTS):
        groups = BONE_GROUPS[j]
        s = 1.0
        for g in groups:
            s *= factors[g]
        scales[j] = s
        for g in groups:
            dscales[j, g] = BETA_GAIN * s / factors[g]
    return scales, dscales


def rest_joints_with_jac(shape: ShapeParams):
    """Shaped rest joints (16, 3) and their Jacobian w.r.t. beta (16, 3, 6)."""
    beta = shape.beta
    scales, dscales = _bone_scales(beta)
    joints = np.zeros((NUM_JOINTS, 3))
    jac = np.zeros((NUM_JOINTS, 3, NUM_BETAS))
    joints[0] = TEMPLATE[0]  # pelvis anchors the scaling
    for j in range(1, NUM_JOINTS):
        p = PARENTS[j]
        bone = TEMPLATE[j] - TEMPLATE[p]
        joints[j] = joints[p] + scales[j] * bone
        jac[j] = jac[p] + bone[:, None] * dscales[j][None, :]
    return joints, jac


def rest_joints(shape: ShapeParams) -> np.ndarray:
    """Shaped rest-pose joint positions in cm, (16, 3)."""
    return rest_joints_with_jac(shape)[0]


# --------------------------------------------------------------------------
# Forward kinematics


def pose_joints(shape: ShapeParams, pose: PoseParams) -> np.ndarray:
    """Posed joint positions in camera-frame cm, (16, 3)."""
    rest, _ = rest_joints_with_jac(shape)
    world_R = np.empty((NUM_JOINTS, 3, 3))
    joints = np.empty((NUM_JOINTS, 3))
    world_R[0] = rotation(pose.global_rotation) @ rotation(pose.theta[0])
    joints[0] = TEMPLATE[0] + pose.global_translation
    for j in range(1, NUM_JOINTS):
        p = PARENTS[j]
        bone = rest[j] - rest[p]
        joints[j] = joints[p] + world_R[p] @ bone
        world_R[j] = world_R[p] @ rotation(pose.theta[j])
    return joints


def pose_joints_with_jac(shape: ShapeParams, pose: PoseParams):
    """Posed joints (16, 3) and Jacobian (16, 3, NUM_PARAMS).

    Parameter order: beta (6), theta joint-major (48), global rotation (3),
    global translation (3). Forward-mode accumulation down the tree.
    """
    rest, drest = rest_joints_with_jac(shape)
    theta_cols = THETA_SLICE.start + 3 * np.arange(NUM_JOINTS)

    world_R = np.empty((NUM_JOINTS, 3, 3))
    dworld_R = np.zeros((NUM_JOINTS, 3, 3, NUM_PARAMS))
    joints = np.empty((NUM_JOINTS, 3))
    djoints = np.zeros((NUM_JOINTS, 3, NUM_PARAMS))

    Rg, dRg = rotation_and_jac(pose.global_rotation)
    R0, dR0 = rotation_and_jac(pose.theta[0])
    world_R[0] = Rg @ R0
    for k in range(3):
        dworld_R[0, :, :, GROT_SLICE.start + k] = dRg[k] @ R0
        dworld_R[0, :, :, theta_cols[0] + k] = Rg @ dR0[k]
    joints[0] = TEMPLATE[0] + pose.global_translation
    djoints[0, :, GTRANS_SLICE] = np.eye(3)

    for j in range(1, NUM_JOINTS):
        p = PARENTS[j]
        bone = rest[j] - rest[p]
        dbone = drest[j] - drest[p]  # (3, 6)
        joints[j] = joints[p] + world_R[p] @ bone
        djoints[j] = djoints[p] + np.einsum("abp,b->ap", dworld_R[p], bone)
        djoints[j, :, BETA_SLICE] += world_R[p] @ dbone

        Rj, dRj = rotation_and_jac(pose.theta[j])
        world_R[j] = world_R[p] @ Rj
        dworld_R[j] = np.einsum("abp,bc->acp", dworld_R[p], Rj)
        for k in range(3):
            dworld_R[j, :, :, theta_cols[j] + k] += world_R[p] @ dRj[k]

    return joints, djoints


# --------------------------------------------------------------------------
# Projection


def project(camera: Camera, joints: np.ndarray) -> np.ndarray:
    """Pinhole projection of (N, 3) cm points to (N, 2) pixel coordinates."""
    joints = np.asarray(joints, dtype=np.float64)
    z = joints[:, 2]
    if np.any(z <= NEAR_PLANE_CM):
        raise DegenerateViewError(
            f"joint at depth {z.min():.1f} cm is behind the near plane"
        )
    f, (cx, cy) = camera.focal, camera.principal_point
    u = cx + f * joints[:, 0] / z
    v = cy - f * joints[:, 1] / z
    return np.stack([u, v], axis=1)


def project_with_jac(camera: Camera, joints: np.ndarray, djoints: np.ndarray):
    """Projection (N, 2) plus chain-ruled Jacobian (N, 2, P) from a 3D Jacobian."""
    pix = project(camera, joints)
    f = camera.focal
    x, y, z = joints[:, 0], joints[:, 1], joints[:, 2]
    # rows: d(u,v)/d(x,y,z) per point
    A = np.zeros((joints.shape[0], 2, 3))
    A[:, 0, 0] = f / z
    A[:, 0, 2] = -f * x / z**2
    A[:, 1, 1] = -f / z
    A[:, 1, 2] = f * y / z**2
    return pix, np.einsum("nab,nbp->nap", A, djoints)


def observable(joints: np.ndarray) -> np.ndarray:
    """Select the 13 observable joints in canonical keypoint order."""
    return np.asarray(joints)[OBSERVABLE_JOINTS]


# --------------------------------------------------------------------------
# Mirroring and parameter vector helpers


def mirror_pose(pose: PoseParams) -> PoseParams:
    """Reflect a pose about the sagittal plane (x negation), swapping sides."""
    flip = np.array([1.0, -1.0, -1.0])  # axis-angle conjugated by diag(-1,1,1)
    theta = (pose.theta * flip)[MIRROR_JOINTS]
    grot = pose.global_rotation * flip
    gtrans = pose.global_translation * np.array([-1.0, 1.0, 1.0])
    return PoseParams(theta, grot, gtrans)


def pack_params(beta, theta, global_rotation, global_translation) -> np.ndarray:
    vec = np.empty(NUM_PARAMS)
    vec[BETA_SLICE] = beta
    vec[THETA_SLICE] = np.asarray(theta).reshape(-1)
    vec[GROT_SLICE] = global_rotation
    vec[GTRANS_SLICE] = global_translation
    return vec


def unpack_params(vec: np.ndarray):
    vec = np.asarray(vec, dtype=np.float64)
    return (
        vec[BETA_SLICE],
        vec[THETA_SLICE].reshape(NUM_JOINTS, 3),
        vec[GROT_SLICE],
        vec[GTRANS_SLICE],
    )


def params_from_vector(vec: np.ndarray) -> BodyParams:
    """Materialize validated BodyParams from a raw optimizer vector."""
    beta, theta, grot, gtrans = unpack_params(vec)
    beta = np.clip(beta, -BETA_RANGE, BETA_RANGE)
    theta = np.stack([wrap_axis_angle(t) for t in theta])
    return BodyParams(
        ShapeParams(beta),
        PoseParams(theta, wrap_axis_angle(grot), gtrans),
    )


def vector_from_params(params: BodyParams) -> np.ndarray:
    return pack_params(
        params.shape.beta,
        params.pose.theta,
        params.pose.global_rotation,
        params.pose.global_translation,
    )


def hinge_violations(theta: np.ndarray) -> np.ndarray:
    """Signed box violations for hinge-limited joints, (n_hinge*3,) >= 0 amounts."""
    out = []
    for name, box in HINGE_LIMITS.items():
        t = theta[JOINT_INDEX[name]]
        out.append(np.maximum(0.0, box[:, 0] - t))
        out.append(np.maximum(0.0, t - box[:, 1]))
    return np.concatenate(out)


def joint_limits_ok(pose: PoseParams) -> bool:
    """True when every hinge-limited component sits inside its box."""
    return bool(np.all(hinge_violations(pose.theta) == 0.0))


# --------------------------------------------------------------------------
# Text serialization (cm and radians, whitespace-separated key-value lines)


def params_to_text(params: BodyParams) -> str:
    def fmt(*values):
        return " ".join(repr(float(v)) for v in values)

    lines = []
    for name, value in zip(BETA_NAMES, params.shape.beta):
        lines.append(f"beta {name} {fmt(value)}")
    for name, row in zip(JOINT_NAMES, params.pose.theta):
        lines.append(f"joint {name} {fmt(*row)}")
    lines.append(f"global_rotation {fmt(*params.pose.global_rotation)}")
    lines.append(f"global_translation {fmt(*params.pose.global_translation)}")
    return "\n".join(lines) + "\n"


def params_from_text(text: str) -> BodyParams:
    beta = np.zeros(NUM_BETAS)
    theta = np.zeros((NUM_JOINTS, 3))
    grot = np.zeros(3)
    gtrans = np.zeros(3)
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "beta" and len(parts) == 3:
                beta[BETA_NAMES.index(parts[1])] = float(parts[2])
            elif parts[0] == "joint" and len(parts) == 5:
                theta[JOINT_INDEX[parts[1]]] = [float(x) for x in parts[2:5]]
            elif parts[0] == "global_rotation" and len(parts) == 4:
                grot[:] = [float(x) for x in parts[1:4]]
            elif parts[0] == "global_translation" and len(parts) == 4:
                gtrans[:] = [float(x) for x in parts[1:4]]
            else:
                raise ValueError(f"unrecognized body-params line {lineno}: {line!r}")
        except (ValueError, KeyError, IndexError) as exc:
            raise ValueError(f"bad body-params line {lineno}: {line!r}") from exc
        seen.add(parts[0])
    return BodyParams(ShapeParams(beta), PoseParams(theta, grot, gtrans))
