"""Core geometric types shared by the whole pipeline.

Conventions (fixed across all modules):
  * image origin at the top-left corner, x rightward, y downward,
    pixel (ix, iy) has its center at (ix + 0.5, iy + 0.5)
  * quaternions are stored (w, x, y, z) and kept unit-norm
  * SE3Pose holds a 3x3 rotation matrix and a translation vector;
    camera poses used for rendering map world points into the camera
    frame, x_cam = R @ x_world + t
  * twist vectors are laid out (vx, vy, vz, wx, wy, wz), translation first
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

QUAT_NORM_TOL = 1e-9
ROT_ORTHO_TOL = 1e-9


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize zero or non-finite quaternion")
    return q / n


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; input is normalized first."""
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternion of a rotation matrix, w >= 0 (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
            q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                          (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
        elif i == 1:
            s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
            q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                          0.25 * s, (R[1, 2] + R[2, 1]) / s])
        else:
            s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
            q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                          (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula: rotation matrix of an axis-angle vector."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-12:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (inverse of so3_exp)."""
    cos_theta = max(-1.0, min(1.0, (np.trace(R) - 1.0) * 0.5))
    theta = math.acos(cos_theta)
    if theta < 1e-10:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) * 0.5
    if abs(math.pi - theta) < 1e-7:
        # near pi the off-diagonal formula degenerates; recover axis from R + I
        A = (R + np.eye(3)) * 0.5
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        # fix signs using the largest component
        k = int(np.argmax(axis))
        axis = axis * np.sign(A[k, :] / max(axis[k], 1e-12))
        axis[k] = abs(axis[k])
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * math.sin(theta)) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])


def _so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    a = (1.0 - math.cos(theta)) / t2
    b = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * K + b * (K @ K)


def _so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    half = 0.5 * theta
    cot = 1.0 / math.tan(half)
    a = (1.0 - half * cot) / (theta * theta)
    return np.eye(3) - 0.5 * K + a * (K @ K)


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    Ro = U @ Vt
    if np.linalg.det(Ro) < 0:
        U[:, -1] = -U[:, -1]
        Ro = U @ Vt
    return Ro


@dataclass
class SE3Pose:
    """Rigid transform: applies as x' = rotation @ x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.array(self.rotation, dtype=np.float64)
        self.translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if self.rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {self.rotation.shape}")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation is not a proper rotation matrix")
        if err > ROT_ORTHO_TOL:
            self.rotation = _orthonormalize(self.rotation)

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose()

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or many (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "SE3Pose":
        Rt = self.rotation.T
        return SE3Pose(Rt, -Rt @ self.translation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def copy(self) -> "SE3Pose":
        return SE3Pose(self.rotation.copy(), self.translation.copy())

    def is_close(self, other: "SE3Pose", tol: float = 1e-9) -> bool:
        return (np.abs(self.rotation - other.rotation).max() < tol
                and np.abs(self.translation - other.translation).max() < tol)


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """Composite transform that applies b first, then a."""
    R = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > ROT_ORTHO_TOL:
        R = _orthonormalize(R)
    return SE3Pose(R, t)


def se3_retract(pose: SE3Pose, twist: np.ndarray) -> SE3Pose:
    """Left-multiplicative exponential-map update: Exp(twist) composed onto pose.

    twist = (v, w); se3_retract(pose, 0) == pose exactly.
    """
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(twist)):
        raise ValueError("twist must be finite")
    if np.all(twist == 0.0):
        return pose.copy()
    v, w = twist[:3], twist[3:]
    dR = so3_exp(w)
    dt = _so3_left_jacobian(w) @ v
    return compose(SE3Pose(dR, dt), pose)


def se3_log(pose: SE3Pose) -> np.ndarray:
    """Twist (v, w) with se3_retract(identity, twist) == pose."""
    w = so3_log(pose.rotation)
    v = _so3_left_jacobian_inv(w) @ pose.translation
    return np.concatenate([v, w])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


def backproject(pixels: np.ndarray, depths: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points of pixel-center coordinates at given depths.

    pixels: (N, 2) continuous pixel coordinates (x, y); depths: (N,) camera-z.
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    x = (pixels[:, 0] - k.cx) / k.fx * depths
    y = (pixels[:, 1] - k.cy) / k.fy * depths
    return np.stack([x, y, depths], axis=1)


def project_points(points_cam: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame points to pixel coordinates."""
    p = np.atleast_2d(np.asarray(points_cam, dtype=np.float64))
    z = p[:, 2]
    return np.stack([k.fx * p[:, 0] / z + k.cx, k.fy * p[:, 1] / z + k.cy], axis=1)


@dataclass
class Gaussian:
    """One anisotropic 3D Gaussian map primitive."""

    position: np.ndarray
    rotation: np.ndarray          # unit quaternion (w, x, y, z)
    scale: np.ndarray             # per-axis stddev, meters, all > 0
    opacity: float
    color: np.ndarray             # rgb in [0, 1]
    anchor_keyframe: int = 0
    alive: bool = True

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        n = np.linalg.norm(self.rotation)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {n} too far from 1")
        if abs(n - 1.0) > QUAT_NORM_TOL:
            self.rotation = self.rotation / n
        if np.any(self.scale <= 0):
            raise ValueError("scale components must be positive")
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError("opacity must be in [0, 1]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("color components must be in [0, 1]")


def covariance_3d(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """3x3 covariance R S S^T R^T of a Gaussian with the given quaternion/scales."""
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise ValueError("scale components must be positive")
    R = quat_to_rotmat(rotation)
    RS = R * scale[None, :]
    return RS @ RS.T


class GaussianMap:
    """Ordered Gaussian storage with unique ids; struct-of-arrays inside.

    Single-writer by convention: only the mapper mutates an instance,
    everyone else works on snapshot() copies.
    """

    def __init__(self):
        self.next_id = 0
        self.ids = np.zeros(0, dtype=np.int64)
        self.positions = np.zeros((0, 3))
        self.quats = np.zeros((0, 4))
        self.scales = np.zeros((0, 3))
        self.opacities = np.zeros(0)
        self.colors = np.zeros((0, 3))
        self.anchors = np.zeros(0, dtype=np.int64)
        self.alive = np.zeros(0, dtype=bool)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_alive(self) -> int:
        return int(self.alive.sum())

    def add(self, g: Gaussian) -> int:
        gid = self.next_id
        self.next_id += 1
        self.ids = np.append(self.ids, gid)
        self.positions = np.vstack([self.positions, g.position[None]])
        self.quats = np.vstack([self.quats, g.rotation[None]])
        self.scales = np.vstack([self.scales, g.scale[None]])
        self.opacities = np.append(self.opacities, g.opacity)
        self.colors = np.vstack([self.colors, g.color[None]])
        self.anchors = np.append(self.anchors, g.anchor_keyframe)
        self.alive = np.append(self.alive, g.alive)
        return gid

    def add_batch(self, positions, quats, scales, opacities, colors, anchor: int) -> np.ndarray:
        n = len(positions)
        gids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        self.next_id += n
        self.ids = np.concatenate([self.ids, gids])
        self.positions = np.vstack([self.positions, np.asarray(positions, dtype=np.float64)])
        self.quats = np.vstack([self.quats, np.asarray(quats, dtype=np.float64)])
        self.scales = np.vstack([self.scales, np.asarray(scales, dtype=np.float64)])
        self.opacities = np.concatenate([self.opacities, np.asarray(opacities, dtype=np.float64)])
        self.colors = np.vstack([self.colors, np.asarray(colors, dtype=np.float64)])
        self.anchors = np.concatenate([self.anchors, np.full(n, anchor, dtype=np.int64)])
        self.alive = np.concatenate([self.alive, np.ones(n, dtype=bool)])
        return gids

    def get(self, gid: int) -> Gaussian:
        idx = int(np.searchsorted(self.ids, gid))
        if idx >= len(self.ids) or self.ids[idx] != gid:
            raise KeyError(f"no Gaussian with id {gid}")
        return Gaussian(self.positions[idx], self.quats[idx], self.scales[idx],
                        float(self.opacities[idx]), self.colors[idx],
                        int(self.anchors[idx]), bool(self.alive[idx]))

    def kill(self, gids: np.ndarray) -> None:
        idx = np.searchsorted(self.ids, gids)
        self.alive[idx] = False

    def snapshot(self) -> "GaussianMap":
        m = GaussianMap()
        m.next_id = self.next_id
        for name in ("ids", "positions", "quats", "scales", "opacities",
                     "colors", "anchors", "alive"):
            setattr(m, name, getattr(self, name).copy())
        return m

    def scene_extent(self) -> float:
        """Diagonal of the alive-Gaussian bounding box (used as a step-size scale)."""
        if self.n_alive == 0:
            return 1.0
        p = self.positions[self.alive]
        d = float(np.linalg.norm(p.max(axis=0) - p.min(axis=0)))
        return max(d, 1e-6)


@dataclass
class Frame:
    """One observation: color image plus optional estimated depth / forward flow."""

    index: int
    color: np.ndarray                     # H x W x 3 in [0, 1]
    est_depth: np.ndarray | None = None   # H x W, > 0 where valid
    flow_to_next: np.ndarray | None = None  # H x W x 2 pixel displacements
    is_keyframe: bool = False
    timestamp: float = 0.0

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=np.float64)
        if self.color.ndim != 3 or self.color.shape[2] != 3:
            raise ValueError("color must be H x W x 3")
        h, w = self.color.shape[:2]
        if self.est_depth is not None:
            self.est_depth = np.asarray(self.est_depth, dtype=np.float64)
            if self.est_depth.shape != (h, w):
                raise ValueError("est_depth shape mismatch")
            finite = np.isfinite(self.est_depth)
            if np.any(self.est_depth[finite] <= 0):
                raise ValueError("est_depth must be strictly positive where present")
        if self.flow_to_next is not None:
            self.flow_to_next = np.asarray(self.flow_to_next, dtype=np.float64)
            if self.flow_to_next.shape != (h, w, 2):
                raise ValueError("flow_to_next shape mismatch")

    @property
    def shape(self) -> tuple[int, int]:
        return self.color.shape[:2]


@dataclass
class MaskImage:
    """Per-pixel binary labeling; 1 = dynamic."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if not np.isin(b, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        self.bits = b.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def astype_bool(self) -> np.ndarray:
        return self.bits.astype(bool)


@dataclass
class FlowField:
    """H x W x 2 pixel displacement field."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 2:
            raise ValueError("flow must be H x W x 2")
        if not np.all(np.isfinite(v)):
            raise ValueError("flow must be finite")
        self.vectors = v

    @property
    def shape(self) -> tuple[int, int]:
        return self.vectors.shape[:2]
