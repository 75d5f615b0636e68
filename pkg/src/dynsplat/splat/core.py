"""Forward rendering of a Gaussian map and analytic gradients.

Pipeline per view:
  1. transform Gaussian centers into the camera frame, cull behind the
     near plane
  2. project: 2D mean by pinhole, 2D covariance J W Sigma W^T J^T with the
     affine (EWA) Jacobian J, inflated on the diagonal for invertibility
  3. sort front-to-back by center depth (ties by id) and build a CSR map
     pixel -> covering Gaussians using each Gaussian's k-sigma support box
  4. per-pixel alpha compositing in a swappable kernel (compiled or pure
     Python, bitwise-identical)

Color and depth композite as C = sum_i w_i c_i with w_i = g_i prod_{j<i}(1-g_j);
the depth image is the same weighted sum of center depths, deliberately not
renormalized by accumulated weight.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import (CameraIntrinsics, Gaussian, GaussianMap, SE3Pose,
                        covariance_3d, quat_to_rotmat, skew)
from . import _backend

_E0 = skew(np.array([1.0, 0.0, 0.0]))
_E1 = skew(np.array([0.0, 1.0, 0.0]))
_E2 = skew(np.array([0.0, 0.0, 1.0]))


@dataclass(frozen=True)
class RenderConfig:
    near_plane: float = 0.01
    cov_inflation: float = 0.3        # px^2 added to the 2D covariance diagonal
    support_sigma: float = 3.0        # k-sigma ellipse bounding box; None = whole image
    term_transmittance: float = 1e-4  # stop compositing when T drops below; 0 = never
    opacity_clamp: float = 0.999


DEFAULT_CONFIG = RenderConfig()


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    source_id: int


@dataclass
class RenderOutput:
    color: np.ndarray         # H x W x 3
    depth: np.ndarray         # H x W, weighted center depths
    weight_sum: np.ndarray    # H x W accumulated compositing weight
    contributors: np.ndarray  # H x W int count of composited Gaussians
    transmittance: np.ndarray  # H x W remaining transmittance


@dataclass
class MapGradients:
    """Loss gradients per map slot (map order, zeros for culled/pruned)."""

    position: np.ndarray   # N x 3
    rotation: np.ndarray   # N x 4, w.r.t. the stored (w,x,y,z) quaternion
    scale: np.ndarray      # N x 3
    opacity: np.ndarray    # N
    color: np.ndarray      # N x 3
    pose_twist: np.ndarray  # 6, left-multiplicative (v, w) on the camera pose


def _quats_to_rotmats(quats: np.ndarray) -> np.ndarray:
    q = quats / np.linalg.norm(quats, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass
class _Prepared:
    """Per-view projection state shared by forward, backward and weight queries.

    All per-Gaussian arrays are in compositing (front-to-back) order.
    """

    H: int
    W: int
    n_map: int
    map_slot: np.ndarray     # sorted position -> index into the map arrays
    x_cam: np.ndarray        # N x 3 camera-frame centers
    means2d: np.ndarray      # N x 2
    cov2d: np.ndarray        # N x 2 x 2 (inflated)
    prec: np.ndarray         # N x 3 packed inverse covariance (a, b, c)
    depths: np.ndarray       # N
    colors: np.ndarray       # N x 3
    opacities: np.ndarray    # N
    J: np.ndarray            # N x 2 x 3 projection Jacobians
    M: np.ndarray            # N x 2 x 3 = J @ W
    sigma3: np.ndarray       # N x 3 x 3 world covariances
    rotmats: np.ndarray      # N x 3 x 3 Gaussian rotations
    quats: np.ndarray        # N x 4 raw stored quaternions
    scales: np.ndarray       # N x 3
    W_rot: np.ndarray        # 3 x 3 world-to-camera rotation
    indptr: np.ndarray       # H*W + 1 CSR row pointers
    gidx: np.ndarray         # CSR entries, indices into the sorted arrays


def prepare_view(gmap: GaussianMap, pose: SE3Pose, k: CameraIntrinsics,
                 cfg: RenderConfig = DEFAULT_CONFIG) -> _Prepared:
    W_rot = pose.rotation
    t = pose.translation
    H, Wd = k.height, k.width
    alive_idx = np.flatnonzero(gmap.alive)
    pos = gmap.positions[alive_idx]
    x_cam = pos @ W_rot.T + t
    vis = x_cam[:, 2] > cfg.near_plane
    alive_idx = alive_idx[vis]
    x_cam = x_cam[vis]
    n = len(alive_idx)

    if n == 0:
        empty = np.zeros
        return _Prepared(H, Wd, len(gmap), alive_idx, x_cam,
                         empty((0, 2)), empty((0, 2, 2)), empty((0, 3)), empty(0),
                         empty((0, 3)), empty(0), empty((0, 2, 3)), empty((0, 2, 3)),
                         empty((0, 3, 3)), empty((0, 3, 3)), empty((0, 4)), empty((0, 3)),
                         W_rot, np.zeros(H * Wd + 1, dtype=np.int64),
                         empty(0, dtype=np.int64))

    x, y, z = x_cam[:, 0], x_cam[:, 1], x_cam[:, 2]
    means2d = np.stack([k.fx * x / z + k.cx, k.fy * y / z + k.cy], axis=1)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = k.fx / z
    J[:, 0, 2] = -k.fx * x / (z * z)
    J[:, 1, 1] = k.fy / z
    J[:, 1, 2] = -k.fy * y / (z * z)

    quats = gmap.quats[alive_idx]
    scales = gmap.scales[alive_idx]
    rotmats = _quats_to_rotmats(quats)
    RS = rotmats * scales[:, None, :]
    sigma3 = RS @ RS.transpose(0, 2, 1)

    M = J @ W_rot
    cov2d = M @ sigma3 @ M.transpose(0, 2, 1)
    cov2d[:, 0, 0] += cfg.cov_inflation
    cov2d[:, 1, 1] += cfg.cov_inflation

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    prec = np.stack([c / det, -b / det, a / det], axis=1)

    # front-to-back order, ties broken by id for determinism
    order = np.lexsort((gmap.ids[alive_idx], z))
    map_slot = alive_idx[order]
    x_cam = x_cam[order]
    means2d = means2d[order]
    cov2d = cov2d[order]
    prec = prec[order]
    depths = z[order]
    colors = gmap.colors[map_slot]
    opacities = gmap.opacities[map_slot]
    J = J[order]
    M = M[order]
    sigma3 = sigma3[order]
    rotmats = rotmats[order]
    quats = quats[order]
    scales = scales[order]

    indptr, gidx = _build_csr(means2d, cov2d, H, Wd, cfg.support_sigma)
    return _Prepared(H, Wd, len(gmap), map_slot, x_cam, means2d, cov2d, prec,
                     depths, colors, opacities, J, M, sigma3, rotmats, quats,
                     scales, W_rot, indptr, gidx)


def _build_csr(means2d, cov2d, H, W, support_sigma):
    """Pixel -> covering-Gaussian CSR, entries in compositing order."""
    n = len(means2d)
    if n == 0:
        return np.zeros(H * W + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    if support_sigma is None or not np.isfinite(support_sigma):
        rx = np.full(n, float(W))
        ry = np.full(n, float(H))
    else:
        rx = support_sigma * np.sqrt(cov2d[:, 0, 0])
        ry = support_sigma * np.sqrt(cov2d[:, 1, 1])
    # pixel ix is covered iff |ix + 0.5 - mu_x| <= rx
    x0 = np.maximum(np.ceil(means2d[:, 0] - rx - 0.5).astype(np.int64), 0)
    x1 = np.minimum(np.floor(means2d[:, 0] + rx - 0.5).astype(np.int64), W - 1)
    y0 = np.maximum(np.ceil(means2d[:, 1] - ry - 0.5).astype(np.int64), 0)
    y1 = np.minimum(np.floor(means2d[:, 1] + ry - 0.5).astype(np.int64), H - 1)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return np.zeros(H * W + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)

    keep = counts > 0
    starts = np.zeros(len(counts), dtype=np.int64)
    np.cumsum(counts[:-1], out=starts[1:])
    gauss_of_entry = np.repeat(np.arange(n, dtype=np.int64), counts)
    local = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    nx_r = np.repeat(nx[keep], counts[keep])
    px = np.repeat(x0[keep], counts[keep]) + local % nx_r
    py = np.repeat(y0[keep], counts[keep]) + local // nx_r
    pix = py * W + px

    perm = np.argsort(pix, kind="stable")  # stable keeps per-pixel depth order
    gidx = gauss_of_entry[perm]
    rowcount = np.bincount(pix, minlength=H * W)
    indptr = np.zeros(H * W + 1, dtype=np.int64)
    np.cumsum(rowcount, out=indptr[1:])
    return indptr, gidx


def project(g: Gaussian, pose: SE3Pose, k: CameraIntrinsics,
            cfg: RenderConfig = DEFAULT_CONFIG) -> ProjectedGaussian | None:
    """Project a single Gaussian; None if culled by the near plane."""
    x_cam = pose.rotation @ g.position + pose.translation
    z = x_cam[2]
    if z <= cfg.near_plane:
        return None
    mean2d = np.array([k.fx * x_cam[0] / z + k.cx, k.fy * x_cam[1] / z + k.cy])
    J = np.array([[k.fx / z, 0.0, -k.fx * x_cam[0] / (z * z)],
                  [0.0, k.fy / z, -k.fy * x_cam[1] / (z * z)]])
    M = J @ pose.rotation
    cov2d = M @ covariance_3d(g.rotation, g.scale) @ M.T
    cov2d[0, 0] += cfg.cov_inflation
    cov2d[1, 1] += cfg.cov_inflation
    return ProjectedGaussian(mean2d, cov2d, float(z), -1)


def pixel_weight(pg: ProjectedGaussian, opacity: float, pixel: np.ndarray,
                 cfg: RenderConfig = DEFAULT_CONFIG) -> float:
    """Un-composited Gaussian weight at a pixel coordinate, clamped for compositing."""
    d = np.asarray(pixel, dtype=np.float64) - pg.mean2d
    p = np.linalg.inv(pg.cov2d)
    g = opacity * np.exp(-0.5 * d @ p @ d)
    return float(np.clip(g, 0.0, cfg.opacity_clamp))


def render(gmap: GaussianMap, pose: SE3Pose, k: CameraIntrinsics,
           cfg: RenderConfig = DEFAULT_CONFIG, group: np.ndarray | None = None,
           prep: _Prepared | None = None):
    """Composite the map into color/depth images.

    `group` optionally marks map slots (bool per map entry); the summed
    compositing weight of marked Gaussians is returned as a second value.
    """
    if prep is None:
        prep = prepare_view(gmap, pose, k, cfg)
    group_sorted = None
    if group is not None:
        group_sorted = np.ascontiguousarray(np.asarray(group)[prep.map_slot], dtype=np.int8)
    color, depth, wsum, trans, ncon, groupw = _backend.kernel.composite_forward(
        prep.H, prep.W, prep.indptr, prep.gidx,
        np.ascontiguousarray(prep.means2d), np.ascontiguousarray(prep.prec),
        np.ascontiguousarray(prep.depths), np.ascontiguousarray(prep.colors),
        np.ascontiguousarray(prep.opacities),
        cfg.opacity_clamp, cfg.term_transmittance, group_sorted)
    out = RenderOutput(color, depth, wsum, ncon, trans)
    if group is not None:
        return out, groupw
    return out


def render_backward(gmap: GaussianMap, pose: SE3Pose, k: CameraIntrinsics,
                    loss_grad: np.ndarray, cfg: RenderConfig = DEFAULT_CONFIG,
                    prep: _Prepared | None = None) -> MapGradients:
    """Chain-rule gradients of a scalar loss through render().

    loss_grad is H x W x 4: channels 0..2 are dL/d(color), channel 3 dL/d(depth).
    Traversal replays the forward pass exactly (same order, same culling).
    """
    if prep is None:
        prep = prepare_view(gmap, pose, k, cfg)
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != (prep.H, prep.W, 4):
        raise ValueError(f"loss_grad must be H x W x 4, got {loss_grad.shape}")
    dldc = np.ascontiguousarray(loss_grad[:, :, :3])
    dldd = np.ascontiguousarray(loss_grad[:, :, 3])

    n_map = prep.n_map
    grads = MapGradients(np.zeros((n_map, 3)), np.zeros((n_map, 4)),
                         np.zeros((n_map, 3)), np.zeros(n_map),
                         np.zeros((n_map, 3)), np.zeros(6))
    n = len(prep.map_slot)
    if n == 0:
        return grads

    g_mean, g_prec, g_depth, g_opac, g_color = _backend.kernel.composite_backward(
        prep.H, prep.W, prep.indptr, prep.gidx,
        np.ascontiguousarray(prep.means2d), np.ascontiguousarray(prep.prec),
        np.ascontiguousarray(prep.depths), np.ascontiguousarray(prep.colors),
        np.ascontiguousarray(prep.opacities),
        cfg.opacity_clamp, cfg.term_transmittance, dldc, dldd)

    # packed precision grads -> symmetric gradient matrix w.r.t. the 2D covariance
    Ghat = np.empty((n, 2, 2))
    Ghat[:, 0, 0] = g_prec[:, 0]
    Ghat[:, 0, 1] = Ghat[:, 1, 0] = 0.5 * g_prec[:, 1]
    Ghat[:, 1, 1] = g_prec[:, 2]
    P = np.empty((n, 2, 2))
    P[:, 0, 0] = prep.prec[:, 0]
    P[:, 0, 1] = P[:, 1, 0] = prep.prec[:, 1]
    P[:, 1, 1] = prep.prec[:, 2]
    dSigma2 = -P @ Ghat @ P                       # d cov2d, symmetric

    dM = 2.0 * dSigma2 @ prep.M @ prep.sigma3     # d (J W)
    dSigma3 = prep.M.transpose(0, 2, 1) @ dSigma2 @ prep.M
    dJ = dM @ prep.W_rot.T

    # camera-frame center gradients: projection of the mean, center depth,
    # and the J(x, y, z) dependence of the 2D covariance
    dx_cam = np.einsum("nij,ni->nj", prep.J, g_mean)
    dx_cam[:, 2] += g_depth
    x, y, z = prep.x_cam[:, 0], prep.x_cam[:, 1], prep.x_cam[:, 2]
    z2 = z * z
    z3 = z2 * z
    dx_cam[:, 0] += dJ[:, 0, 2] * (-k.fx / z2)
    dx_cam[:, 1] += dJ[:, 1, 2] * (-k.fy / z2)
    dx_cam[:, 2] += (dJ[:, 0, 0] * (-k.fx / z2) + dJ[:, 0, 2] * (2 * k.fx * x / z3)
                     + dJ[:, 1, 1] * (-k.fy / z2) + dJ[:, 1, 2] * (2 * k.fy * y / z3))

    # world covariance = R diag(s^2) R^T
    A = prep.scales ** 2
    dR = 2.0 * dSigma3 @ (prep.rotmats * A[:, None, :])
    RtYR = prep.rotmats.transpose(0, 2, 1) @ dSigma3 @ prep.rotmats
    dscale = 2.0 * prep.scales * np.einsum("nkk->nk", RtYR)
    dquat = _quat_grad_from_rotmat_grad(prep.quats, dR)

    dpos_world = dx_cam @ prep.W_rot

    twist = np.zeros(6)
    twist[:3] = dx_cam.sum(axis=0)
    twist[3:] = np.cross(prep.x_cam, dx_cam).sum(axis=0)
    for kk, Ek in enumerate((_E0, _E1, _E2)):
        JEW = prep.J @ (Ek @ prep.W_rot)
        twist[3 + kk] += float(np.einsum("nij,nij->", dM, JEW))

    slot = prep.map_slot
    grads.position[slot] = dpos_world
    grads.rotation[slot] = dquat
    grads.scale[slot] = dscale
    grads.opacity[slot] = g_opac
    grads.color[slot] = g_color
    grads.pose_twist = twist
    return grads


def _quat_grad_from_rotmat_grad(quats: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull gradients w.r.t. the rotation matrix back to the raw quaternion.

    Includes the normalization Jacobian, so raw (unnormalized) quaternion
    perturbations match finite differences.
    """
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    u = quats / norms
    w, x, y, z = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
    zero = np.zeros_like(w)

    def mat(rows):
        return 2.0 * np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dRdw = mat([[zero, -z, y], [z, zero, -x], [-y, x, zero]])
    dRdx = mat([[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dRdy = mat([[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]])
    dRdz = mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]])

    du = np.stack([np.einsum("nij,nij->n", dR, d) for d in (dRdw, dRdx, dRdy, dRdz)],
                  axis=1)
    # project out the radial component and undo the norm scaling
    du = (du - u * np.sum(du * u, axis=1, keepdims=True)) / norms
    return du


def weights_at_pixel(prep: _Prepared, ix: int, iy: int,
                     cfg: RenderConfig = DEFAULT_CONFIG) -> list[tuple[int, float]]:
    """(map_index, compositing weight) of every Gaussian composited at one pixel."""
    pix = iy * prep.W + ix
    start, stop = int(prep.indptr[pix]), int(prep.indptr[pix + 1])
    px, py = ix + 0.5, iy + 0.5
    out = []
    T = 1.0
    for e in range(start, stop):
        gi = int(prep.gidx[e])
        dx = px - prep.means2d[gi, 0]
        dy = py - prep.means2d[gi, 1]
        a, b, c = prep.prec[gi]
        g = prep.opacities[gi] * np.exp(-0.5 * (a * dx * dx + 2 * b * dx * dy + c * dy * dy))
        g = min(g, cfg.opacity_clamp)
        out.append((int(prep.map_slot[gi]), g * T))
        T *= 1.0 - g
        if T < cfg.term_transmittance:
            break
    return out
