import numpy as np
import pytest

from dynsplat.geometry import CameraIntrinsics, Gaussian, GaussianMap, SE3Pose, se3_retract


def random_unit_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_map(n, seed, z_range=(2.0, 4.0), opacity_range=(0.2, 0.8)):
    """Random Gaussians in front of the camera, parameters away from clamps."""
    rng = np.random.default_rng(seed)
    m = GaussianMap()
    for _ in range(n):
        m.add(Gaussian(
            position=np.append(rng.uniform(-0.8, 0.8, 2), rng.uniform(*z_range)),
            rotation=random_unit_quat(rng),
            scale=rng.uniform(0.05, 0.3, 3),
            opacity=rng.uniform(*opacity_range),
            color=rng.uniform(0.1, 0.9, 3)))
    return m


def random_pose(rng, magnitude=0.05):
    return se3_retract(SE3Pose.identity(), magnitude * rng.normal(size=6))


@pytest.fixture
def small_intrinsics():
    return CameraIntrinsics(40.0, 42.0, 8.2, 7.9, 16, 16)


@pytest.fixture
def center_intrinsics():
    # principal point on a pixel center so on-axis points hit (32, 32) exactly
    return CameraIntrinsics(100.0, 100.0, 32.5, 32.5, 64, 64)
