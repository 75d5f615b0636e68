"""Deterministic synthetic dynamic-scene generator and sensor emulator.

Builds a desk-scale Gaussian scene (static clutter in a box, a coverage
backdrop wall, rigidly moving objects), renders ground-truth color/depth at
ground-truth camera poses, derives dynamic masks from compositing-weight
dominance and flow from a backproject-transform-reproject point oracle, then
corrupts depth/flow/masks into emulated "network outputs" with seeded noise.

Everything is a pure function of the config; the same config yields a
byte-identical bundle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (CameraIntrinsics, Frame, GaussianMap, Gaussian, SE3Pose,
                       backproject, compose, project_points, quat_to_rotmat,
                       rotmat_to_quat, so3_exp)
from .splat import RenderConfig, render

FPS = 30.0
DEPTH_PNG_SCALE = 5000  # 16-bit depth PNG units per meter


@dataclass(frozen=True)
class MotionSpec:
    """Declarative per-frame rigid motion.

    kind "static": no motion. "linear": displacement velocity * t.
    "sinusoid": displacement amplitude * sin(2 pi t / period + phase) per
    axis, plus an optional yaw oscillation about the +y axis.
    """

    kind: str = "static"
    velocity: tuple = (0.0, 0.0, 0.0)      # m/frame (linear)
    amplitude: tuple = (0.0, 0.0, 0.0)     # m (sinusoid)
    period: float = 60.0                   # frames
    phase: float = 0.0                     # radians
    yaw_amplitude: float = 0.0             # radians (sinusoid only)
    yaw_phase: float = 0.0

    def pose_at(self, t: int) -> SE3Pose:
        if self.kind == "static":
            return SE3Pose.identity()
        if self.kind == "linear":
            return SE3Pose(np.eye(3), np.asarray(self.velocity, dtype=np.float64) * t)
        if self.kind == "sinusoid":
            s = math.sin(2.0 * math.pi * t / self.period + self.phase)
            d = np.asarray(self.amplitude, dtype=np.float64) * s
            yaw = self.yaw_amplitude * math.sin(
                2.0 * math.pi * t / self.period + self.yaw_phase)
            R = so3_exp(np.array([0.0, yaw, 0.0]))
            return SE3Pose(R, d)
        raise ValueError(f"unknown motion kind {self.kind!r}")


@dataclass(frozen=True)
class ObjectSpec:
    n_gaussians: int = 30
    center: tuple = (0.0, 0.2, 3.5)
    extent: float = 0.55
    motion: MotionSpec = field(default_factory=lambda: MotionSpec(
        kind="sinusoid", amplitude=(0.9, 0.0, 0.0), period=60.0))

    def pose_at(self, t: int) -> SE3Pose:
        """World transform of the object's rest configuration at frame t
        (rotation taken about the object center)."""
        m = self.motion.pose_at(t)
        c = np.asarray(self.center, dtype=np.float64)
        return SE3Pose(m.rotation, c + m.translation - m.rotation @ c)


@dataclass(frozen=True)
class NoiseSpec:
    flow_sigma: float = 0.0            # px, additive Gaussian on flow
    depth_noise_rel: float = 0.0       # relative multiplicative depth noise
    depth_scale_range: tuple = (1.0, 1.0)  # per-frame unknown monocular scale
    mask_flip_fp: float = 0.0          # P(static -> dynamic) per mask pixel
    mask_flip_fn: float = 0.0          # P(dynamic -> static)

    def __post_init__(self):
        for r in (self.mask_flip_fp, self.mask_flip_fn):
            if not (0.0 <= r < 1.0):
                raise ValueError("mask flip rates must be in [0, 1)")


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    width: int = 64
    height: int = 64
    fx: float = 70.0
    fy: float = 70.0
    cx: float = 32.0
    cy: float = 32.0
    n_background: int = 200
    n_frames: int = 60
    objects: tuple = (ObjectSpec(),)
    camera: MotionSpec = field(default_factory=lambda: MotionSpec(
        kind="sinusoid", amplitude=(0.35, 0.12, 0.18), period=90.0,
        yaw_amplitude=0.05, yaw_phase=0.7))
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    background_box: tuple = ((-2.4, 2.4), (-1.8, 1.8), (3.2, 6.0))
    backdrop_z: float = 6.5
    far_depth: float = 7.0

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy,
                                self.width, self.height)


@dataclass
class SimBundle:
    config: SimConfig
    intrinsics: CameraIntrinsics
    gt_map: GaussianMap                  # static scene only
    object_rest: list                    # per object: dict of rest-pose arrays
    gt_c2w: list                         # camera-to-world SE3Pose per frame
    frames: list = field(default_factory=list)        # Frame per index
    gt_depth: list = field(default_factory=list)      # H x W metric depth
    gt_flow: list = field(default_factory=list)       # H x W x 2 (last = None)
    gt_dyn_mask: list = field(default_factory=list)   # H x W uint8
    est_depth: list = field(default_factory=list)
    est_flow: list = field(default_factory=list)
    est_flow_mask: list = field(default_factory=list)
    est_depth_mask: list = field(default_factory=list)

    def frame_map(self, t: int) -> tuple[GaussianMap, np.ndarray]:
        """Full scene map at frame t plus a bool flag per slot marking object
        Gaussians (all objects)."""
        m = self.gt_map.snapshot()
        flags = [np.zeros(len(m), dtype=bool)]
        for rest, spec in zip(self.object_rest, self.config.objects):
            pose = spec.pose_at(t)
            pos = pose.apply(rest["positions"])
            quats = np.array([rotmat_to_quat(pose.rotation @ quat_to_rotmat(q))
                              for q in rest["quats"]])
            ids = m.add_batch(pos, quats, rest["scales"], rest["opacities"],
                              rest["colors"], anchor=-1)
            flags.append(np.ones(len(ids), dtype=bool))
        return m, np.concatenate(flags)

    def object_id_image(self, t: int) -> np.ndarray:
        """Per-pixel dominant object index (-1 = static), by compositing weight."""
        k = self.intrinsics
        w2c = self.gt_c2w[t].inverse()
        m, _ = self.frame_map(t)
        n_static = len(self.gt_map)
        best = np.full((k.height, k.width), -1, dtype=np.int64)
        best_w = np.zeros((k.height, k.width))
        total = None
        start = n_static
        for oi, rest in enumerate(self.object_rest):
            n_obj = len(rest["positions"])
            group = np.zeros(len(m), dtype=bool)
            group[start:start + n_obj] = True
            start += n_obj
            out, gw = render(m, w2c, k, _SIM_RENDER_CFG, group=group)
            if total is None:
                total = out.weight_sum
            better = gw > best_w
            best[better] = oi
            best_w[better] = gw[better]
        dominant = best_w > 0.5 * np.maximum(total, 1e-12)
        best[~dominant] = -1
        return best


_SIM_RENDER_CFG = RenderConfig()


def _rng_for(seed: int, frame: int, channel: int) -> np.random.Generator:
    # frame -1/-2 are the scene/object sampling streams; offset keeps the
    # SeedSequence entropy non-negative
    return np.random.default_rng(np.random.SeedSequence((seed, frame + 16, channel)))


def _sample_static_scene(cfg: SimConfig) -> GaussianMap:
    rng = _rng_for(cfg.seed, -1, 0)
    m = GaussianMap()
    # backdrop wall guaranteeing full-frame coverage at every pose
    half_w = cfg.backdrop_z * max(cfg.cx, cfg.width - cfg.cx) / cfg.fx + 1.0
    half_h = cfg.backdrop_z * max(cfg.cy, cfg.height - cfg.cy) / cfg.fy + 1.0
    nx = max(int(np.ceil(2 * half_w / 0.45)), 4)
    ny = max(int(np.ceil(2 * half_h / 0.45)), 4)
    gx, gy = np.meshgrid(np.linspace(-half_w, half_w, nx),
                         np.linspace(-half_h, half_h, ny))
    n_wall = gx.size
    pos = np.stack([gx.ravel(), gy.ravel(), np.full(n_wall, cfg.backdrop_z)], axis=1)
    spacing = 2 * half_w / (nx - 1)
    m.add_batch(pos, np.tile([1.0, 0, 0, 0], (n_wall, 1)),
                np.full((n_wall, 3), spacing * 0.8),
                np.full(n_wall, 0.95), rng.uniform(0.15, 0.75, (n_wall, 3)),
                anchor=-1)
    # clutter in the box
    (x0, x1), (y0, y1), (z0, z1) = cfg.background_box
    pos = np.stack([rng.uniform(x0, x1, cfg.n_background),
                    rng.uniform(y0, y1, cfg.n_background),
                    rng.uniform(z0, z1, cfg.n_background)], axis=1)
    quats = rng.normal(size=(cfg.n_background, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    m.add_batch(pos, quats, rng.uniform(0.06, 0.2, (cfg.n_background, 3)),
                rng.uniform(0.55, 0.9, cfg.n_background),
                rng.uniform(0.1, 0.95, (cfg.n_background, 3)), anchor=-1)
    return m


def _sample_objects(cfg: SimConfig) -> list:
    rests = []
    for oi, spec in enumerate(cfg.objects):
        rng = _rng_for(cfg.seed, -2, oi)
        n = spec.n_gaussians
        u = rng.normal(size=(n, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r = spec.extent * rng.uniform(0.0, 1.0, n) ** (1 / 3)
        pos = np.asarray(spec.center) + u * r[:, None]
        quats = rng.normal(size=(n, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        base = rng.uniform(0.55, 0.95, 3)
        colors = np.clip(base + rng.normal(0, 0.06, (n, 3)), 0.0, 1.0)
        rests.append({
            "positions": pos,
            "quats": quats,
            "scales": rng.uniform(0.5, 0.9, (n, 3)) * spec.extent * 0.45,
            "opacities": rng.uniform(0.82, 0.95, n),
            "colors": colors,
        })
    return rests


def make_scene(cfg: SimConfig) -> SimBundle:
    """Ground-truth half of the bundle: frames, depth, flow, dynamic masks."""
    k = cfg.intrinsics()
    gt_map = _sample_static_scene(cfg)
    rests = _sample_objects(cfg)
    gt_c2w = [compose(SE3Pose.identity(), cfg.camera.pose_at(t))
              for t in range(cfg.n_frames)]
    bundle = SimBundle(cfg, k, gt_map, rests, gt_c2w)

    H, W = cfg.height, cfg.width
    iy, ix = np.mgrid[0:H, 0:W]
    centers = np.stack([ix + 0.5, iy + 0.5], axis=-1).reshape(-1, 2)

    colors, depths, masks, obj_ids = [], [], [], []
    for t in range(cfg.n_frames):
        m, flags = bundle.frame_map(t)
        w2c = gt_c2w[t].inverse()
        out, obj_w = render(m, w2c, k, _SIM_RENDER_CFG, group=flags)
        wsum = np.maximum(out.weight_sum, 1e-12)
        depth = np.where(out.weight_sum > 0.25, out.depth / wsum, cfg.far_depth)
        dyn = (obj_w > 0.5 * wsum).astype(np.uint8)
        colors.append(out.color)
        depths.append(depth)
        masks.append(dyn)
        obj_ids.append(bundle.object_id_image(t) if len(cfg.objects) > 1 else
                       np.where(dyn == 1, 0, -1))

    flows = []
    for t in range(cfg.n_frames - 1):
        X_cam = backproject(centers, depths[t].reshape(-1), k)
        X_world = gt_c2w[t].apply(X_cam)
        oid = obj_ids[t].reshape(-1)
        X_moved = X_world.copy()
        for o, spec in enumerate(cfg.objects):
            sel = oid == o
            if sel.any():
                rel = compose(spec.pose_at(t + 1), spec.pose_at(t).inverse())
                X_moved[sel] = rel.apply(X_world[sel])
        x_next = gt_c2w[t + 1].inverse().apply(X_moved)
        flow = (project_points(x_next, k) - centers).reshape(H, W, 2)
        flows.append(flow)
    flows.append(None)

    bundle.gt_depth = depths
    bundle.gt_flow = flows
    bundle.gt_dyn_mask = masks
    bundle.frames = [Frame(t, colors[t], timestamp=t / FPS) for t in range(cfg.n_frames)]
    return bundle


def emulate_sensors(bundle: SimBundle, cfg: SimConfig | None = None) -> SimBundle:
    """Fill the emulated depth/flow/mask outputs and attach them to the frames."""
    cfg = cfg or bundle.config
    n = cfg.n_frames
    noise = cfg.noise
    lo, hi = noise.depth_scale_range
    for t in range(n):
        rng = _rng_for(cfg.seed, t, 1)
        scale = rng.uniform(lo, hi) if hi > lo else lo
        mult = 1.0 + noise.depth_noise_rel * rng.standard_normal(bundle.gt_depth[t].shape)
        est_d = bundle.gt_depth[t] * scale * np.maximum(mult, 0.05)
        bundle.est_depth.append(est_d)

        if bundle.gt_flow[t] is not None:
            ef = bundle.gt_flow[t] + noise.flow_sigma * _rng_for(
                cfg.seed, t, 2).standard_normal(bundle.gt_flow[t].shape)
        else:
            ef = None
        bundle.est_flow.append(ef)

        gt_m = bundle.gt_dyn_mask[t]
        for channel, out in ((3, bundle.est_flow_mask), (4, bundle.est_depth_mask)):
            r = _rng_for(cfg.seed, t, channel)
            u = r.random(gt_m.shape)
            flip = np.where(gt_m == 1, u < noise.mask_flip_fn, u < noise.mask_flip_fp)
            out.append(np.where(flip, 1 - gt_m, gt_m).astype(np.uint8))

        bundle.frames[t] = Frame(t, bundle.frames[t].color, est_depth=est_d,
                                 flow_to_next=ef, timestamp=t / FPS,
                                 is_keyframe=bundle.frames[t].is_keyframe)
    return bundle


def simulate(cfg: SimConfig) -> SimBundle:
    return emulate_sensors(make_scene(cfg), cfg)
