import numpy as np
import pytest

from dynsplat.geometry import (CameraIntrinsics, Frame, Gaussian, GaussianMap,
                               MaskImage, SE3Pose, backproject, compose,
                               covariance_3d, project_points, quat_to_rotmat,
                               rotmat_to_quat, se3_log, se3_retract, so3_exp)

from conftest import random_unit_quat


def rot_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


class TestCompose:
    def test_identity(self):
        rng = np.random.default_rng(0)
        P = SE3Pose(quat_to_rotmat(random_unit_quat(rng)), rng.normal(size=3))
        out = compose(SE3Pose.identity(), P)
        assert out.is_close(P)

    def test_inverse(self):
        rng = np.random.default_rng(1)
        P = SE3Pose(quat_to_rotmat(random_unit_quat(rng)), rng.normal(size=3))
        out = compose(P, P.inverse())
        assert out.is_close(SE3Pose.identity(), tol=1e-9)

    def test_rot_z_twice(self):
        # matrix multiplication oracle: rot_z(90) . rot_z(90) = rot_z(180)
        P = SE3Pose(rot_z(np.pi / 2), np.zeros(3))
        out = compose(P, P)
        assert np.abs(out.rotation - rot_z(np.pi)).max() < 1e-12

    def test_applies_b_then_a(self):
        a = SE3Pose(rot_z(0.3), [1.0, 0, 0])
        b = SE3Pose(rot_z(-0.1), [0, 2.0, 0])
        p = np.array([0.5, -0.3, 1.2])
        assert np.allclose(compose(a, b).apply(p), a.apply(b.apply(p)))

    def test_associativity(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            ps = [SE3Pose(quat_to_rotmat(random_unit_quat(rng)), rng.normal(size=3))
                  for _ in range(3)]
            left = compose(compose(ps[0], ps[1]), ps[2])
            right = compose(ps[0], compose(ps[1], ps[2]))
            assert left.is_close(right, tol=1e-9)


class TestRetract:
    def test_zero_twist_identity(self):
        P = SE3Pose(rot_z(0.7), [1, 2, 3])
        out = se3_retract(P, np.zeros(6))
        assert np.array_equal(out.rotation, P.rotation)
        assert np.array_equal(out.translation, P.translation)

    def test_small_rotation_matches_rodrigues(self):
        theta = 0.01
        out = se3_retract(SE3Pose.identity(), np.array([0, 0, 0, 0, 0, theta]))
        assert np.abs(out.rotation - rot_z(theta)).max() < 1e-12

    def test_log_roundtrip(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            twist = rng.uniform(-0.5, 0.5, 6)
            twist *= min(1.0, 0.49 / max(np.linalg.norm(twist), 1e-9))
            pose = se3_retract(SE3Pose.identity(), twist)
            assert np.abs(se3_log(pose) - twist).max() < 1e-9

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            se3_retract(SE3Pose.identity(), np.array([np.nan, 0, 0, 0, 0, 0]))


class TestCovariance3D:
    def test_identity_unit_scale(self):
        assert np.allclose(covariance_3d([1, 0, 0, 0], [1, 1, 1]), np.eye(3))

    def test_diagonal(self):
        out = covariance_3d([1, 0, 0, 0], [2, 1, 1])
        assert np.allclose(out, np.diag([4.0, 1.0, 1.0]))

    def test_eigenvalues_are_squared_scales(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            q = random_unit_quat(rng)
            cov = covariance_3d(q, [2.0, 1.0, 0.5])
            ev = np.sort(np.linalg.eigvalsh(cov))
            assert np.abs(ev - [0.25, 1.0, 4.0]).max() < 1e-9

    def test_symmetric_positive_definite(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            cov = covariance_3d(random_unit_quat(rng), rng.uniform(0.01, 3.0, 3))
            assert np.abs(cov - cov.T).max() < 1e-12
            assert np.linalg.eigvalsh(cov).min() > 0


class TestQuaternions:
    def test_rotmat_roundtrip(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            q = random_unit_quat(rng)
            if q[0] < 0:
                q = -q
            q2 = rotmat_to_quat(quat_to_rotmat(q))
            assert np.abs(q2 - q).max() < 1e-9

    def test_so3_exp_ninety_degrees(self):
        R = so3_exp(np.array([0, 0, np.pi / 2]))
        assert np.abs(R - rot_z(np.pi / 2)).max() < 1e-12


class TestProjection:
    def test_backproject_project_roundtrip(self):
        k = CameraIntrinsics(70, 65, 31.5, 33.0, 64, 64)
        rng = np.random.default_rng(7)
        px = rng.uniform(0, 64, (100, 2))
        d = rng.uniform(0.5, 9.0, 100)
        pts = backproject(px, d, k)
        assert np.abs(project_points(pts, k) - px).max() < 1e-10
        assert np.abs(pts[:, 2] - d).max() == 0.0


class TestTypes:
    def test_gaussian_validation(self):
        with pytest.raises(ValueError):
            Gaussian([0, 0, 1], [1, 0, 0, 0], [0.1, -0.1, 0.1], 0.5, [0, 0, 0])
        with pytest.raises(ValueError):
            Gaussian([0, 0, 1], [1, 0, 0, 0], [0.1] * 3, 1.5, [0, 0, 0])
        with pytest.raises(ValueError):
            Gaussian([0, 0, 1], [2, 0, 0, 0], [0.1] * 3, 0.5, [0, 0, 0])

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(-1, 1, 5, 5, 10, 10)
        with pytest.raises(ValueError):
            CameraIntrinsics(10, 10, 20, 5, 10, 10)

    def test_mask_values(self):
        with pytest.raises(ValueError):
            MaskImage(np.array([[0, 2]]))

    def test_frame_depth_positive(self):
        with pytest.raises(ValueError):
            Frame(0, np.zeros((4, 4, 3)), est_depth=np.full((4, 4), -1.0))

    def test_map_ids_unique_and_kill(self):
        m = GaussianMap()
        g = Gaussian([0, 0, 1], [1, 0, 0, 0], [0.1] * 3, 0.5, [0, 0, 0])
        ids = [m.add(g) for _ in range(5)]
        assert len(set(ids)) == 5
        m.kill(np.array([ids[2]]))
        assert not m.get(ids[2]).alive
        assert m.n_alive == 4
