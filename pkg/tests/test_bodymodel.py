import numpy as np
import pytest

from shape_evade import bodymodel as bm
from shape_evade.errors import DegenerateViewError


def random_pose(rng, scale=0.6):
    theta = rng.uniform(-scale, scale, size=(bm.NUM_JOINTS, 3))
    grot = rng.uniform(-0.5, 0.5, size=3)
    gtrans = np.array([rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(250, 350)])
    return bm.PoseParams(theta, grot, gtrans)


def random_shape(rng):
    return bm.ShapeParams(rng.uniform(-2, 2, size=bm.NUM_BETAS))


def make_camera(size=96, focal=None):
    f = focal if focal is not None else 1.15 * size
    return bm.Camera(f, np.array([(size - 1) / 2, (size - 1) / 2]), (size, size))


class TestTopology:
    def test_parents_precede_children(self):
        for j, p in enumerate(bm.PARENTS):
            assert p < j

    def test_observable_covers_13(self):
        assert len(bm.KEYPOINT_NAMES) == 13
        names = {bm.JOINT_NAMES[j] for j in bm.OBSERVABLE_JOINTS}
        assert names == set(bm.KEYPOINT_NAMES)
        hidden = set(bm.JOINT_NAMES) - names
        assert hidden == {"pelvis", "spine", "neck"}

    def test_canonical_order(self):
        assert bm.KEYPOINT_NAMES[0] == "right_ankle"
        assert bm.KEYPOINT_NAMES[12] == "head_top"
        assert bm.KEYPOINT_NAMES[3] == "left_hip"


class TestRotation:
    def test_identity(self):
        assert np.allclose(bm.rotation(np.zeros(3)), np.eye(3))

    def test_orthonormal(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            R = bm.rotation(rng.uniform(-3, 3, 3))
            assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)

    def test_quarter_turn(self):
        R = bm.rotation(np.array([0.0, np.pi / 2, 0.0]))
        assert np.allclose(R @ np.array([0, 0, 1.0]), [1, 0, 0], atol=1e-12)

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        h = 1e-6
        for omega in [rng.uniform(-2, 2, 3), np.array([1e-9, -2e-9, 5e-10]),
                      np.array([0.0, 0.0, 0.0])]:
            _, dR = bm.rotation_and_jac(omega)
            for k in range(3):
                e = np.zeros(3)
                e[k] = h
                fd = (bm.rotation(omega + e) - bm.rotation(omega - e)) / (2 * h)
                assert np.allclose(dR[k], fd, atol=1e-8)

    def test_wrap(self):
        omega = np.array([0.0, 4.0, 0.0])
        w = bm.wrap_axis_angle(omega)
        assert np.linalg.norm(w) <= np.pi
        assert np.allclose(bm.rotation(w), bm.rotation(omega), atol=1e-12)


class TestRestJoints:
    def test_template_identity(self):
        joints = bm.rest_joints(bm.ShapeParams())
        assert np.array_equal(joints, bm.TEMPLATE)
        assert joints[bm.JOINT_INDEX["head_top"], 1] == 170.0

    def test_height_scaling_closed_form(self):
        for h in [1.0, 2.0, -1.5]:
            beta = np.zeros(bm.NUM_BETAS)
            beta[0] = h
            joints = bm.rest_joints(bm.ShapeParams(beta))
            expected = bm.TEMPLATE[0] + (1 + 0.1 * h) * (bm.TEMPLATE - bm.TEMPLATE[0])
            assert np.allclose(joints, expected, atol=1e-12)

    def test_limb_lengths_positive(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            joints = bm.rest_joints(bm.ShapeParams(rng.uniform(-3, 3, bm.NUM_BETAS)))
            for j in range(1, bm.NUM_JOINTS):
                assert np.linalg.norm(joints[j] - joints[bm.PARENTS[j]]) > 0

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        h = 1e-6
        beta = rng.uniform(-2, 2, bm.NUM_BETAS)
        _, jac = bm.rest_joints_with_jac(bm.ShapeParams(beta))
        for k in range(bm.NUM_BETAS):
            e = np.zeros(bm.NUM_BETAS)
            e[k] = h
            fd = (bm.rest_joints(bm.ShapeParams(beta + e))
                  - bm.rest_joints(bm.ShapeParams(beta - e))) / (2 * h)
            denom = np.maximum(np.abs(fd), 1.0)
            assert np.max(np.abs(jac[:, :, k] - fd) / denom) < 1e-5

    def test_beta_validation(self):
        with pytest.raises(ValueError):
            bm.ShapeParams(np.full(bm.NUM_BETAS, 3.5))
        with pytest.raises(ValueError):
            bm.ShapeParams(np.zeros(5))


class TestForwardKinematics:
    def test_identity_pose_is_rest(self):
        rng = np.random.default_rng(4)
        shape = random_shape(rng)
        joints = bm.pose_joints(shape, bm.PoseParams())
        assert np.allclose(joints, bm.rest_joints(shape), atol=1e-12)

    def test_translation_only(self):
        t = np.array([5.0, -3.0, 200.0])
        pose = bm.PoseParams(global_translation=t)
        joints = bm.pose_joints(bm.ShapeParams(), pose)
        assert np.allclose(joints, bm.TEMPLATE + t, atol=1e-12)

    def test_global_rotation_rigid(self):
        rng = np.random.default_rng(5)
        shape = random_shape(rng)
        rest = bm.rest_joints(shape)
        d0 = np.linalg.norm(rest[:, None] - rest[None, :], axis=2)
        pose = bm.PoseParams(global_rotation=np.array([0.3, 0.8, -0.2]))
        joints = bm.pose_joints(shape, pose)
        d1 = np.linalg.norm(joints[:, None] - joints[None, :], axis=2)
        assert np.allclose(d0, d1, atol=1e-9)

    def test_global_rotation_equivariance_same_axis(self):
        rng = np.random.default_rng(6)
        shape = random_shape(rng)
        t = np.array([0.0, 0.0, 300.0])
        a, b = 0.4, 0.7
        pose_a = bm.PoseParams(rng.uniform(-0.4, 0.4, (bm.NUM_JOINTS, 3)),
                               np.array([0.0, a, 0.0]), t)
        pose_ab = bm.PoseParams(pose_a.theta, np.array([0.0, a + b, 0.0]), t)
        ja = bm.pose_joints(shape, pose_a)
        jab = bm.pose_joints(shape, pose_ab)
        center = bm.TEMPLATE[0] + t
        R = bm.rotation(np.array([0.0, b, 0.0]))
        assert np.allclose(jab, (ja - center) @ R.T + center, atol=1e-9)

    def test_bone_lengths_invariant_under_pose(self):
        rng = np.random.default_rng(7)
        shape = random_shape(rng)
        rest = bm.rest_joints(shape)
        joints = bm.pose_joints(shape, random_pose(rng))
        for j in range(1, bm.NUM_JOINTS):
            p = bm.PARENTS[j]
            rest_len = np.linalg.norm(rest[j] - rest[p])
            posed_len = np.linalg.norm(joints[j] - joints[p])
            assert posed_len == pytest.approx(rest_len, rel=1e-9)

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        shape = random_shape(rng)
        pose = random_pose(rng)
        vec = bm.vector_from_params(bm.BodyParams(shape, pose))
        _, jac = bm.pose_joints_with_jac(shape, pose)
        h = 1e-6

        def joints_of(v):
            beta, theta, grot, gtrans = bm.unpack_params(v)
            return bm.pose_joints(bm.ShapeParams(beta),
                                  bm.PoseParams(theta, grot, gtrans))

        cols = np.concatenate([np.arange(6), rng.choice(48, 20, replace=False) + 6,
                               np.arange(54, 60)])
        for k in cols:
            e = np.zeros(bm.NUM_PARAMS)
            e[k] = h
            fd = (joints_of(vec + e) - joints_of(vec - e)) / (2 * h)
            assert np.max(np.abs(jac[:, :, k] - fd)) < 1e-6 * max(1.0, np.abs(fd).max())

    def test_mirror_symmetry(self):
        rng = np.random.default_rng(9)
        shape = random_shape(rng)
        pose = random_pose(rng)
        joints = bm.pose_joints(shape, pose)
        mirrored = bm.pose_joints(shape, bm.mirror_pose(pose))
        expected = joints[bm.MIRROR_JOINTS] * np.array([-1.0, 1.0, 1.0])
        assert np.allclose(mirrored, expected, atol=1e-9)


class TestProjection:
    def test_optical_axis_hits_principal_point(self):
        cam = make_camera(96)
        for z in [50.0, 123.0, 4000.0]:
            pix = bm.project(cam, np.array([[0.0, 0.0, z]]))
            assert np.allclose(pix[0], cam.principal_point, atol=1e-12)

    def test_similar_triangles(self):
        cam = make_camera(96)
        p1 = bm.project(cam, np.array([[10.0, 4.0, 100.0]]))[0]
        p2 = bm.project(cam, np.array([[10.0, 4.0, 200.0]]))[0]
        c = cam.principal_point
        assert np.allclose(p2 - c, (p1 - c) / 2, atol=1e-12)

    def test_v_axis_points_down(self):
        cam = make_camera(96)
        above = bm.project(cam, np.array([[0.0, 10.0, 100.0]]))[0]
        assert above[1] < cam.principal_point[1]

    def test_behind_camera_raises(self):
        cam = make_camera(96)
        with pytest.raises(DegenerateViewError):
            bm.project(cam, np.array([[0.0, 0.0, 5.0]]))

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        cam = make_camera(128)
        shape = random_shape(rng)
        pose = random_pose(rng)
        joints, jac3 = bm.pose_joints_with_jac(shape, pose)
        _, jac2 = bm.project_with_jac(cam, joints, jac3)
        vec = bm.vector_from_params(bm.BodyParams(shape, pose))
        h = 1e-6

        def pix_of(v):
            beta, theta, grot, gtrans = bm.unpack_params(v)
            return bm.project(cam, bm.pose_joints(
                bm.ShapeParams(beta), bm.PoseParams(theta, grot, gtrans)))

        for k in rng.choice(bm.NUM_PARAMS, 25, replace=False):
            e = np.zeros(bm.NUM_PARAMS)
            e[k] = h
            fd = (pix_of(vec + e) - pix_of(vec - e)) / (2 * h)
            denom = max(1.0, np.abs(fd).max())
            assert np.max(np.abs(jac2[:, :, k] - fd)) / denom < 1e-5

    def test_camera_validation(self):
        with pytest.raises(ValueError):
            bm.Camera(-5.0, np.array([10.0, 10.0]), (96, 96))
        with pytest.raises(ValueError):
            bm.Camera(100.0, np.array([200.0, 10.0]), (96, 96))


class TestSerialization:
    def test_text_roundtrip_exact(self):
        rng = np.random.default_rng(11)
        params = bm.BodyParams(random_shape(rng), random_pose(rng))
        text = bm.params_to_text(params)
        back = bm.params_from_text(text)
        assert np.array_equal(back.shape.beta, params.shape.beta)
        assert np.array_equal(back.pose.theta, params.pose.theta)
        assert np.array_equal(back.pose.global_rotation, params.pose.global_rotation)
        assert np.array_equal(back.pose.global_translation,
                              params.pose.global_translation)

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            bm.params_from_text("beta nope 1.0\n")
        with pytest.raises(ValueError):
            bm.params_from_text("what 1 2 3\n")

    def test_vector_roundtrip(self):
        rng = np.random.default_rng(12)
        params = bm.BodyParams(random_shape(rng), random_pose(rng))
        vec = bm.vector_from_params(params)
        back = bm.params_from_vector(vec)
        assert np.allclose(bm.vector_from_params(back), vec)


class TestJointLimits:
    def test_rest_pose_ok(self):
        assert bm.joint_limits_ok(bm.PoseParams())

    def test_violation_detected(self):
        theta = np.zeros((bm.NUM_JOINTS, 3))
        theta[bm.JOINT_INDEX["right_knee"], 0] = 1.0  # knee bent the wrong way
        assert not bm.joint_limits_ok(bm.PoseParams(theta))
        v = bm.hinge_violations(theta)
        assert v.max() == pytest.approx(0.95)
