"""Camera tracking: masked scale-corrected flow, motion/tracking losses,
per-frame pose estimation, keyframe policy and local bundle adjustment.

Pose estimation minimizes the Huber-robustified reprojection residual of
static pixels carried by observed flow, by damped Gauss-Newton on a 6-dim
twist. One outer pass only: the dynamic mask is not re-estimated inside the
solver.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .geometry import (CameraIntrinsics, FlowField, GaussianMap, MaskImage,
                       SE3Pose, backproject, compose, se3_retract, skew)
from .splat import RenderConfig, render, render_backward
from .splat import DEFAULT_CONFIG as RENDER_DEFAULTS

KEYFRAME_EVERY = 10
MIN_BA_GROUP = 4


class TrackingLost(RuntimeError):
    pass


class ScaleUnobservable(RuntimeError):
    pass


@dataclass
class StaticDepthMask:
    bits: np.ndarray           # 1 = static pixel with valid estimated depth
    static_fraction: float

    @property
    def shape(self):
        return self.bits.shape


@dataclass
class ScaleFactor:
    s_n: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.s_n) and self.s_n > 0):
            raise ValueError(f"scale factor must be finite and positive, got {self.s_n}")


@dataclass
class TrackingLossTerms:
    l_o: float = 0.0       # flow endpoint error over static pixels
    l_u: float = 0.0       # mask segmentation cross-entropy
    l_m: float = 0.0       # camera motion loss
    lambda1: float = 1.0
    lambda2: float = 1.0
    epsilon: float = 1e-6


@dataclass
class KeyframeGroup:
    members: list = field(default_factory=list)   # frame indices
    poses: list = field(default_factory=list)     # SE3Pose per member (world-to-camera)

    def add(self, index: int, pose: SE3Pose):
        self.members.append(index)
        self.poses.append(pose)

    def window(self, size: int) -> "KeyframeGroup":
        return KeyframeGroup(self.members[-size:], self.poses[-size:])

    def __len__(self):
        return len(self.members)


@dataclass
class TrackStats:
    iterations: int
    initial_cost: float
    final_cost: float
    n_pixels: int
    diverged: bool = False


def static_mask(fused: MaskImage, est_depth: np.ndarray) -> StaticDepthMask:
    """Complement of the fused mask restricted to valid estimated depth."""
    if fused.shape != est_depth.shape:
        raise ValueError("mask/depth shapes differ")
    valid = np.isfinite(est_depth) & (est_depth > 0)
    bits = ((fused.bits == 0) & valid).astype(np.uint8)
    return StaticDepthMask(bits, float(bits.sum()) / bits.size)


def estimate_scale(est_depth: np.ndarray, ref_depth: np.ndarray,
                   m_ds: StaticDepthMask, min_pixels: int = 100) -> ScaleFactor:
    """Median ratio ref/est over static pixels; robust to moderate outliers."""
    sel = (m_ds.bits == 1) & np.isfinite(ref_depth) & (ref_depth > 0) \
        & np.isfinite(est_depth) & (est_depth > 0)
    n = int(sel.sum())
    if n < min_pixels:
        raise ScaleUnobservable(f"only {n} usable static pixels (need {min_pixels})")
    return ScaleFactor(float(np.median(ref_depth[sel] / est_depth[sel])))


def scaled_flow(f: FlowField, m_ds: StaticDepthMask, s: ScaleFactor) -> FlowField:
    """Static-masked, scale-corrected flow: zero on dynamic pixels, scaled elsewhere."""
    if f.shape != m_ds.shape:
        raise ValueError("flow/mask shapes differ")
    out = f.vectors * (m_ds.bits[:, :, None] * s.s_n)
    return FlowField(out)


def motion_loss(est: SE3Pose, ref: SE3Pose, s: ScaleFactor,
                m_ds: StaticDepthMask, epsilon: float = 1e-6) -> float:
    """Scale-normalized translation mismatch plus static-weighted rotation mismatch.

    The translation directions are compared after normalizing by the scaled
    magnitude (guarding with epsilon), which makes the term invariant to the
    scale of the estimated translation. The rotation Frobenius residual is
    weighted by the static pixel fraction.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    t_est, t_ref = est.translation, ref.translation
    ne = max(np.linalg.norm(t_est) * s.s_n, epsilon)
    nr = max(np.linalg.norm(t_ref) * s.s_n, epsilon)
    t_term = float(np.linalg.norm(t_est / ne - t_ref / nr))
    r_term = m_ds.static_fraction * float(np.linalg.norm(est.rotation - ref.rotation))
    return t_term + r_term


def tracking_loss(terms: TrackingLossTerms) -> float:
    return terms.lambda1 * terms.l_o + terms.lambda2 * terms.l_u + terms.l_m


def flow_endpoint_error(est_flow: FlowField, ref_flow: FlowField,
                        m_ds: StaticDepthMask) -> float:
    """Mean endpoint error over static pixels (0 when no static pixel exists)."""
    sel = m_ds.bits == 1
    if not sel.any():
        return 0.0
    d = np.linalg.norm(est_flow.vectors - ref_flow.vectors, axis=2)
    return float(d[sel].mean())


def mask_cross_entropy(pred: MaskImage, ref: MaskImage, eps: float = 1e-6) -> float:
    """Binary cross-entropy of a predicted mask against a reference mask."""
    p = np.clip(pred.bits.astype(np.float64), eps, 1.0 - eps)
    y = ref.bits.astype(np.float64)
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())


def keyframe_policy(frame_index: int) -> bool:
    if frame_index < 0:
        raise ValueError("frame index must be non-negative")
    return frame_index % KEYFRAME_EVERY == 0


def rigid_flow(depth: np.ndarray, rel_pose: SE3Pose, k: CameraIntrinsics) -> FlowField:
    """Flow a static scene would induce: backproject at depth, move by the
    relative camera pose, reproject, subtract. Invalid-depth pixels get zero."""
    h, w = depth.shape
    iy, ix = np.mgrid[0:h, 0:w]
    centers = np.stack([ix + 0.5, iy + 0.5], axis=-1).reshape(-1, 2)
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    ok = np.isfinite(d) & (d > 0)
    flow = np.zeros((h * w, 2))
    if ok.any():
        pts = backproject(centers[ok], d[ok], k)
        moved = rel_pose.apply(pts)
        z = np.maximum(moved[:, 2], 1e-9)
        proj = np.stack([k.fx * moved[:, 0] / z + k.cx,
                         k.fy * moved[:, 1] / z + k.cy], axis=1)
        flow[ok] = proj - centers[ok]
    return FlowField(flow.reshape(h, w, 2))


def warp_depth_forward(prev_depth: np.ndarray, flow: FlowField, rel_pose: SE3Pose,
                       k: CameraIntrinsics) -> np.ndarray:
    """Carry the previous frame's depth into the current view.

    Each previous pixel is backprojected, moved by the relative pose, and its
    new camera depth is splatted at the flow-displaced pixel; collisions keep
    the nearest surface. Unreached pixels are NaN.
    """
    h, w = prev_depth.shape
    iy, ix = np.mgrid[0:h, 0:w]
    centers = np.stack([ix + 0.5, iy + 0.5], axis=-1).reshape(-1, 2)
    d = np.asarray(prev_depth, dtype=np.float64).reshape(-1)
    ok = np.isfinite(d) & (d > 0)
    out = np.full((h, w), np.nan)
    if not ok.any():
        return out
    pts = backproject(centers[ok], d[ok], k)
    moved = rel_pose.apply(pts)
    z_new = moved[:, 2]
    targets = centers[ok] + flow.vectors.reshape(-1, 2)[ok]
    tx = np.floor(targets[:, 0]).astype(int)
    ty = np.floor(targets[:, 1]).astype(int)
    inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h) & (z_new > 0)
    flat = ty[inside] * w + tx[inside]
    zvals = z_new[inside]
    order = np.argsort(-zvals, kind="stable")  # nearest written last wins
    buf = out.reshape(-1)
    buf[flat[order]] = zvals[order]
    return out


def _huber_weights(r_norm: np.ndarray, delta: float) -> np.ndarray:
    w = np.ones_like(r_norm)
    big = r_norm > delta
    w[big] = delta / r_norm[big]
    return w


def _huber_cost(r_norm: np.ndarray, delta: float) -> float:
    c = np.where(r_norm <= delta, 0.5 * r_norm ** 2, delta * (r_norm - 0.5 * delta))
    return float(c.sum())


def estimate_pose(prev, curr, f_tilde: FlowField, m_ds: StaticDepthMask,
                  s: ScaleFactor, k: CameraIntrinsics, init: SE3Pose,
                  huber_delta: float = 1.0, max_iters: int = 30,
                  step_tol: float = 1e-8, min_pixels: int = 200,
                  divergence_factor: float = 5.0,
                  stride: int = 1) -> tuple[SE3Pose, TrackStats]:
    """Relative camera motion (prev -> curr) from masked flow by damped Gauss-Newton.

    Static pixels of the previous frame are backprojected at their scaled
    estimated depth, moved by the candidate motion, reprojected into the
    current view, and matched against the flow-displaced pixel position.
    f_tilde is the masked scaled flow (curr is carried for interface
    symmetry; the flow field already encodes the correspondence).
    """
    del curr
    if prev.est_depth is None:
        raise TrackingLost("previous frame has no estimated depth")
    prev_depth = prev.est_depth
    ys, xs = np.nonzero(m_ds.bits)
    if stride > 1:
        ys, xs = ys[::stride], xs[::stride]
    depths = prev_depth[ys, xs] * s.s_n
    ok = np.isfinite(depths) & (depths > 0)
    ys, xs, depths = ys[ok], xs[ok], depths[ok]
    if len(xs) < min_pixels:
        raise TrackingLost(f"only {len(xs)} static pixels with depth (need {min_pixels})")

    centers = np.stack([xs + 0.5, ys + 0.5], axis=1)
    pts = backproject(centers, depths, k)
    targets = centers + f_tilde.vectors[ys, xs] / s.s_n

    def residuals(pose: SE3Pose):
        pc = pts @ pose.rotation.T + pose.translation
        z = pc[:, 2]
        valid = z > 1e-6
        proj = np.stack([k.fx * pc[:, 0] / z + k.cx, k.fy * pc[:, 1] / z + k.cy], axis=1)
        r = proj - targets
        r[~valid] = 0.0
        return r, pc, valid

    pose = init.copy()
    r, pc, valid = residuals(pose)
    rn = np.linalg.norm(r, axis=1)
    cost = _huber_cost(rn, huber_delta)
    cost0 = cost
    lam = 1e-4
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        w = _huber_weights(np.maximum(rn, 1e-12), huber_delta)
        z = pc[:, 2]
        zs = np.where(valid, z, 1.0)
        Jp = np.zeros((len(pc), 2, 3))
        Jp[:, 0, 0] = k.fx / zs
        Jp[:, 0, 2] = -k.fx * pc[:, 0] / zs ** 2
        Jp[:, 1, 1] = k.fy / zs
        Jp[:, 1, 2] = -k.fy * pc[:, 1] / zs ** 2
        # d x_cam / d twist for a left-multiplicative update: [I | -skew(x_cam)]
        Jx = np.zeros((len(pc), 3, 6))
        Jx[:, 0, 0] = Jx[:, 1, 1] = Jx[:, 2, 2] = 1.0
        Jx[:, 0, 4] = pc[:, 2]
        Jx[:, 0, 5] = -pc[:, 1]
        Jx[:, 1, 3] = -pc[:, 2]
        Jx[:, 1, 5] = pc[:, 0]
        Jx[:, 2, 3] = pc[:, 1]
        Jx[:, 2, 4] = -pc[:, 0]
        J = Jp @ Jx
        J[~valid] = 0.0
        wJ = J * w[:, None, None]
        H = np.einsum("nij,nik->jk", wJ, J)
        b = -np.einsum("nij,ni->j", wJ, r)
        step = None
        for _try in range(8):
            try:
                step = np.linalg.solve(H + lam * np.diag(np.diag(H)) + 1e-12 * np.eye(6), b)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = se3_retract(pose, step)
            rc, pcc, vc = residuals(cand)
            rnc = np.linalg.norm(rc, axis=1)
            cc = _huber_cost(rnc, huber_delta)
            if cc < cost:
                pose, r, pc, valid, rn, cost = cand, rc, pcc, vc, rnc, cc
                lam = max(lam * 0.3, 1e-9)
                break
            lam *= 10
        else:
            break
        if step is not None and np.linalg.norm(step) < step_tol:
            break

    if cost > divergence_factor * cost0:
        return init.copy(), TrackStats(n_iter, cost0, cost, len(xs), diverged=True)
    return pose, TrackStats(n_iter, cost0, cost, len(xs))


def photometric_residual(gmap: GaussianMap, pose: SE3Pose, image: np.ndarray,
                         static_bits: np.ndarray, k: CameraIntrinsics,
                         cfg: RenderConfig = RENDER_DEFAULTS) -> float:
    """Mean squared color error over static pixels between a render and an image."""
    out = render(gmap, pose, k, cfg)
    sel = static_bits == 1
    n = int(sel.sum())
    if n == 0:
        return 0.0
    d = out.color[sel] - image[sel]
    return float((d * d).sum() / n)


def local_bundle_adjust(group: KeyframeGroup, gmap: GaussianMap, k: CameraIntrinsics,
                        images: list[np.ndarray], static_masks: list[np.ndarray],
                        cfg: RenderConfig = RENDER_DEFAULTS,
                        max_iters: int = 15) -> tuple[list[SE3Pose], float, float]:
    """Pose-only refinement of a keyframe window against the current map.

    Each pose independently minimizes its masked photometric residual with
    L-BFGS over a local twist, using analytic pose gradients from the
    renderer backward pass. Steps that do not improve the residual are
    rejected, so the total residual never increases.
    """
    if len(group) < MIN_BA_GROUP:
        raise ValueError(f"BA needs at least {MIN_BA_GROUP} keyframes, got {len(group)}")
    if not (len(images) == len(static_masks) == len(group)):
        raise ValueError("one image and static mask required per keyframe")

    refined = []
    total_before = 0.0
    total_after = 0.0
    for pose0, img, sb in zip(group.poses, images, static_masks):
        sel = sb == 1
        n = max(int(sel.sum()), 1)

        def cost_grad(xi, pose0=pose0, img=img, sel=sel, n=n):
            pose = se3_retract(pose0, xi)
            out = render(gmap, pose, k, cfg)
            d = out.color - img
            d[~sel] = 0.0
            c = float((d * d).sum() / n)
            lg = np.zeros(img.shape[:2] + (4,))
            lg[:, :, :3] = 2.0 * d / n
            grads = render_backward(gmap, pose, k, lg, cfg)
            # gradient w.r.t. a twist at xi, pulled back to the xi chart:
            # for small steps the left-trivialized gradient is a close
            # approximation; L-BFGS only needs a descent direction.
            return c, grads.pose_twist

        c0, _ = cost_grad(np.zeros(6))
        res = minimize(cost_grad, np.zeros(6), jac=True, method="L-BFGS-B",
                       options={"maxiter": max_iters, "ftol": 1e-14, "gtol": 1e-12})
        c1 = float(res.fun)
        if c1 < c0:
            refined.append(se3_retract(pose0, res.x))
            total_after += c1
        else:
            refined.append(pose0.copy())
            total_after += c0
        total_before += c0
    return refined, total_before, total_after
