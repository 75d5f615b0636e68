"""Gaussian map maintenance: keyframe-seeded insertion, dynamic-hit pruning,
and map optimization under masked photometric and depth losses.

The photometric and depth losses are partitioned sums: the dynamic-pixel and
static-pixel mean L1 residuals each enter with their pixel-count fraction and
a configurable penalty factor. With the default factors dynamic pixels are
excluded from supervision entirely.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (CameraIntrinsics, Frame, GaussianMap, MaskImage,
                       SE3Pose, backproject)
from .splat import RenderConfig, prepare_view, render, render_backward, weights_at_pixel
from .splat import DEFAULT_CONFIG as RENDER_DEFAULTS

SCALE_MIN = 1e-4
SCALE_MAX = 1e2


@dataclass
class MaskedLossWeights:
    lambda_d: float = 0.0   # photometric, dynamic partition
    lambda_s: float = 1.0   # photometric, static partition
    lambda_t: float = 0.0   # depth, dynamic partition
    lambda_m: float = 1.0   # depth, static partition
    lambda_g: float = 1.0   # depth-vs-color balance

    def __post_init__(self):
        for name in ("lambda_d", "lambda_s", "lambda_t", "lambda_m", "lambda_g"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class KeyframePacket:
    """Immutable tracker-to-mapper message for one keyframe."""

    frame: Frame
    pose: SE3Pose                 # world-to-camera
    fused_mask: MaskImage
    scaled_depth: np.ndarray      # s_n * est_depth, map-metric units

    def __post_init__(self):
        h, w = self.frame.shape
        if self.fused_mask.shape != (h, w) or self.scaled_depth.shape != (h, w):
            raise ValueError("packet shapes inconsistent")


def _partitioned_l1(residual: np.ndarray, dyn_sel: np.ndarray, valid: np.ndarray,
                    lam_dyn: float, lam_stat: float) -> float:
    n_total = int(valid.sum())
    if n_total == 0:
        raise ValueError("no valid pixels to compare")
    dyn = dyn_sel & valid
    stat = ~dyn_sel & valid
    n_dyn = int(dyn.sum())
    loss = 0.0
    if n_dyn:
        loss += lam_dyn * (n_dyn / n_total) * float(residual[dyn].mean())
    if n_total - n_dyn:
        loss += lam_stat * ((n_total - n_dyn) / n_total) * float(residual[stat].mean())
    return loss


def photometric_loss(c_render: np.ndarray, c_gt: np.ndarray, mask: MaskImage,
                     w: MaskedLossWeights) -> float:
    """Fraction-weighted mean L1 color error, dynamic and static partitions."""
    if c_render.shape != c_gt.shape or mask.shape != c_render.shape[:2]:
        raise ValueError("shape mismatch")
    residual = np.abs(c_render - c_gt).mean(axis=2)
    valid = np.ones(mask.shape, dtype=bool)
    return _partitioned_l1(residual, mask.bits == 1, valid, w.lambda_d, w.lambda_s)


def depth_loss(d_render: np.ndarray, d_est: np.ndarray, mask: MaskImage,
               w: MaskedLossWeights) -> float:
    """Same structure over |rendered - estimated| depth; invalid-depth pixels excluded."""
    if d_render.shape != d_est.shape or mask.shape != d_render.shape:
        raise ValueError("shape mismatch")
    valid = np.isfinite(d_est) & (d_est > 0)
    residual = np.where(valid, np.abs(d_render - d_est), 0.0)
    return _partitioned_l1(residual, mask.bits == 1, valid, w.lambda_t, w.lambda_m)


def map_loss(l_c: float, l_d: float, w: MaskedLossWeights) -> float:
    return l_c + w.lambda_g * l_d


def insert_gaussians(gmap: GaussianMap, pkt: KeyframePacket, k: CameraIntrinsics,
                     stride: int = 4, opacity: float = 0.5) -> np.ndarray:
    """Seed one Gaussian per stride-th static pixel with valid scaled depth.

    Position backprojects the pixel center; color copies the pixel; the
    isotropic scale matches the stride footprint at that depth. Dynamic
    pixels never seed Gaussians. Returns the new ids.
    """
    h, w = pkt.frame.shape
    iy, ix = np.mgrid[0:h:stride, 0:w:stride]
    iy, ix = iy.ravel(), ix.ravel()
    d = pkt.scaled_depth[iy, ix]
    ok = (pkt.fused_mask.bits[iy, ix] == 0) & np.isfinite(d) & (d > 0)
    iy, ix, d = iy[ok], ix[ok], d[ok]
    if len(ix) == 0:
        return np.zeros(0, dtype=np.int64)

    centers = np.stack([ix + 0.5, iy + 0.5], axis=1)
    cam_pts = backproject(centers, d, k)
    world = pkt.pose.inverse().apply(cam_pts)
    scales = np.clip(d * stride / k.fx, SCALE_MIN, SCALE_MAX)
    n = len(ix)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    colors = pkt.frame.color[iy, ix]
    return gmap.add_batch(world, quats, np.repeat(scales[:, None], 3, axis=1),
                          np.full(n, opacity), colors, pkt.frame.index)


def prune_dynamic(gmap: GaussianMap, pkt: KeyframePacket, k: CameraIntrinsics,
                  tau_w: float = 0.1, cfg: RenderConfig = RENDER_DEFAULTS) -> int:
    """Retire Gaussians whose projected center lands on a dynamic pixel with
    compositing weight above tau_w. Returns the number pruned."""
    prep = prepare_view(gmap, pkt.pose, k, cfg)
    if len(prep.map_slot) == 0:
        return 0
    px = np.floor(prep.means2d[:, 0]).astype(int)
    py = np.floor(prep.means2d[:, 1]).astype(int)
    h, w = pkt.fused_mask.shape
    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    on_dynamic = np.zeros(len(px), dtype=bool)
    on_dynamic[inside] = pkt.fused_mask.bits[py[inside], px[inside]] == 1

    by_pixel: dict[tuple[int, int], list[int]] = {}
    for sp in np.flatnonzero(on_dynamic):
        by_pixel.setdefault((int(px[sp]), int(py[sp])), []).append(int(sp))
    to_prune = []
    for (ix, iy), sps in by_pixel.items():
        weights = dict(weights_at_pixel(prep, ix, iy, cfg))
        for sp in sps:
            slot = int(prep.map_slot[sp])
            if weights.get(slot, 0.0) > tau_w:
                to_prune.append(slot)
    if to_prune:
        gmap.alive[np.array(to_prune, dtype=int)] = False
    return len(to_prune)


@dataclass
class AdamState:
    """Per-parameter first-order optimizer with bias-corrected moments."""

    lr: dict
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr_scale: float = 1.0) -> dict:
        self.t += 1
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            mh = m / (1 - self.beta1 ** self.t)
            vh = v / (1 - self.beta2 ** self.t)
            out[name] = p - lr_scale * self.lr[name] * mh / (np.sqrt(vh) + self.eps)
        return out


def _loss_and_grads(gmap: GaussianMap, packets: list[KeyframePacket],
                    k: CameraIntrinsics, w: MaskedLossWeights, cfg: RenderConfig):
    """Total masked map loss over packets and its analytic parameter gradients."""
    n = len(gmap)
    acc = {"position": np.zeros((n, 3)), "rotation": np.zeros((n, 4)),
           "scale": np.zeros((n, 3)), "opacity": np.zeros(n), "color": np.zeros((n, 3))}
    total = 0.0
    for pkt in packets:
        prep = prepare_view(gmap, pkt.pose, k, cfg)
        out = render(gmap, pkt.pose, k, cfg, prep=prep)
        mask = pkt.fused_mask
        h, wd = mask.shape
        n_total = h * wd
        dyn = mask.bits == 1
        n_dyn = int(dyn.sum())

        c_res = out.color - pkt.frame.color
        l_c = photometric_loss(out.color, pkt.frame.color, mask, w)
        lg = np.zeros((h, wd, 4))
        # d/dC of (lam * (n_part / n_total) * mean_part |res|) = lam * sign / (n_total*3)
        sign_c = np.sign(c_res) / (n_total * 3)
        if n_dyn:
            lg[dyn, :3] = w.lambda_d * sign_c[dyn]
        if n_total - n_dyn:
            lg[~dyn, :3] = w.lambda_s * sign_c[~dyn]

        valid = np.isfinite(pkt.scaled_depth) & (pkt.scaled_depth > 0)
        d_est = np.where(valid, pkt.scaled_depth, 1.0)
        d_res = out.depth - d_est
        l_d = depth_loss(out.depth, np.where(valid, pkt.scaled_depth, np.nan), mask, w)
        n_valid = int(valid.sum())
        if n_valid:
            sign_d = np.sign(d_res) / n_valid
            dyn_v = dyn & valid
            stat_v = ~dyn & valid
            lg[dyn_v, 3] = w.lambda_g * w.lambda_t * sign_d[dyn_v]
            lg[stat_v, 3] = w.lambda_g * w.lambda_m * sign_d[stat_v]

        total += map_loss(l_c, l_d, w)
        g = render_backward(gmap, pkt.pose, k, lg, cfg, prep=prep)
        acc["position"] += g.position
        acc["rotation"] += g.rotation
        acc["scale"] += g.scale
        acc["opacity"] += g.opacity
        acc["color"] += g.color
    return total, acc


def optimize_map(gmap: GaussianMap, packets: list[KeyframePacket], iters: int,
                 w: MaskedLossWeights = MaskedLossWeights(),
                 k: CameraIntrinsics | None = None,
                 cfg: RenderConfig = RENDER_DEFAULTS,
                 lr_position_per_extent: float = 1.6e-4, lr_color: float = 2.5e-3,
                 lr_opacity: float = 5e-2, lr_scale: float = 5e-3,
                 lr_rotation: float = 1e-3,
                 monotone: bool = False,
                 param_groups: tuple = ("position", "rotation", "scale",
                                        "opacity", "color")) -> tuple[list[float], bool]:
    """Adam steps on the selected Gaussian parameter groups against the
    masked map loss.

    Returns (per-iteration loss trace incl. the initial loss, converged flag);
    converged means the final loss did not exceed the initial one. With
    monotone=True, steps that increase the loss are rejected and retried at
    reduced length, so the trace is non-increasing.
    """
    if not packets:
        raise ValueError("optimize_map needs at least one keyframe packet")
    if k is None:
        raise ValueError("camera intrinsics required")
    opt = AdamState(lr={"position": lr_position_per_extent * gmap.scene_extent(),
                        "color": lr_color, "opacity": lr_opacity,
                        "scale": lr_scale, "rotation": lr_rotation})

    loss, grads = _loss_and_grads(gmap, packets, k, w, cfg)
    trace = [loss]
    lr_scale_factor = 1.0
    for _ in range(iters):
        all_params = {"position": gmap.positions, "rotation": gmap.quats,
                      "scale": gmap.scales, "opacity": gmap.opacities,
                      "color": gmap.colors}
        params = {n: p for n, p in all_params.items() if n in param_groups}
        snapshot = {n: p.copy() for n, p in params.items()} if monotone else None
        new = opt.step(params, {n: grads[n] for n in params}, lr_scale_factor)
        if "position" in new:
            gmap.positions = new["position"]
        if "rotation" in new:
            gmap.quats = new["rotation"] / np.linalg.norm(new["rotation"], axis=1,
                                                          keepdims=True)
        if "scale" in new:
            gmap.scales = np.clip(new["scale"], SCALE_MIN, SCALE_MAX)
        if "opacity" in new:
            gmap.opacities = np.clip(new["opacity"], 0.0, 1.0)
        if "color" in new:
            gmap.colors = np.clip(new["color"], 0.0, 1.0)

        new_loss, new_grads = _loss_and_grads(gmap, packets, k, w, cfg)
        if monotone and new_loss > trace[-1]:
            attr = {"position": "positions", "rotation": "quats", "scale": "scales",
                    "opacity": "opacities", "color": "colors"}
            for name, saved in snapshot.items():
                setattr(gmap, attr[name], saved)
            lr_scale_factor *= 0.5
            trace.append(trace[-1])
            if lr_scale_factor < 1e-6:
                break
            continue
        grads = new_grads
        trace.append(new_loss)
    converged = trace[-1] <= trace[0] + 1e-12
    return trace, converged
