"""Paired simulator experiments validating the system-level claims:
mask fusion quality, fusion's effect on tracking, and masked mapping's
effect on static rendering quality. Used by the acceptance suite and
reusable for ad-hoc studies.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evaluate import psnr
from .fusion import PosteriorParams, calibrate, fuse, mask_iou
from .geometry import GaussianMap, MaskImage
from .mapping import (KeyframePacket, MaskedLossWeights, insert_gaussians,
                      optimize_map, prune_dynamic)
from .pipeline import Pipeline, sequence_from_bundle
from .simulate import MotionSpec, NoiseSpec, SimConfig, simulate
from .splat import render
from .tracking import StaticDepthMask, estimate_scale

# camera sweep used by the tracking/mapping ablations: wide enough that the
# 1%-of-extent ATE budget clears the flow-noise drift floor of
# frame-to-frame monocular tracking
ABLATION_CAMERA = MotionSpec(kind="sinusoid", amplitude=(0.8, 0.25, 0.45),
                             period=90.0, yaw_amplitude=0.06, yaw_phase=0.7)

MODERATE_NOISE = NoiseSpec(flow_sigma=0.1, depth_noise_rel=0.02,
                           depth_scale_range=(0.7, 1.4),
                           mask_flip_fp=0.003, mask_flip_fn=0.003)


@dataclass
class FusionQualityResult:
    params: PosteriorParams
    iou_fused: list
    iou_flow_only: list

    @property
    def mean_iou_fused(self) -> float:
        return float(np.mean(self.iou_fused))

    @property
    def mean_iou_flow(self) -> float:
        return float(np.mean(self.iou_flow_only))

    @property
    def fused_beats_flow_everywhere(self) -> bool:
        return all(f >= o for f, o in zip(self.iou_fused, self.iou_flow_only))


def fusion_quality_experiment(seed: int = 0, n_frames: int = 60,
                              flip: float = 0.1) -> FusionQualityResult:
    """Default scene with flip noise on both emulated masks; compares fused
    vs flow-only IoU against ground truth, with calibrated sensor rates."""
    cfg = SimConfig(seed=seed, n_frames=n_frames,
                    noise=NoiseSpec(mask_flip_fp=flip, mask_flip_fn=flip))
    b = simulate(cfg)
    labeled = [(MaskImage(b.est_flow_mask[t]), MaskImage(b.est_depth_mask[t]),
                MaskImage(b.gt_dyn_mask[t])) for t in range(n_frames)]
    params = calibrate(PosteriorParams(), labeled)
    iou_f, iou_o = [], []
    for t in range(n_frames):
        fm = MaskImage(b.est_flow_mask[t])
        gm = MaskImage(b.gt_dyn_mask[t])
        fused, _ = fuse(fm, MaskImage(b.est_depth_mask[t]), params)
        iou_f.append(mask_iou(fused, gm))
        iou_o.append(mask_iou(fm, gm))
    return FusionQualityResult(params, iou_f, iou_o)


@dataclass
class TrackingAblationResult:
    ate_fusion_on: float
    ate_fusion_off: float
    trajectory_extent: float

    @property
    def ratio(self) -> float:
        return self.ate_fusion_off / max(self.ate_fusion_on, 1e-15)

    @property
    def relative_ate(self) -> float:
        return self.ate_fusion_on / self.trajectory_extent


def tracking_ablation(seed: int, n_frames: int = 60,
                      noise: NoiseSpec = MODERATE_NOISE) -> TrackingAblationResult:
    """Paired tracking-only runs (GT scale reference) with fusion on vs off."""
    cfg = SimConfig(seed=seed, n_frames=n_frames, camera=ABLATION_CAMERA, noise=noise)
    bundle = simulate(cfg)
    pos = np.array([p.translation for p in bundle.gt_c2w])
    extent = float(np.linalg.norm(pos.max(axis=0) - pos.min(axis=0)))
    base = {"mapping": "off", "scale_ref": "gt"}
    on = Pipeline({**base, "mask_fusion": "on"}).run(sequence_from_bundle(bundle))
    off = Pipeline({**base, "mask_fusion": "off"}).run(sequence_from_bundle(bundle))
    return TrackingAblationResult(on.report.ate_rmse_all, off.report.ate_rmse_all,
                                  extent)


@dataclass
class MappingAblationResult:
    psnr_masked: float
    psnr_unmasked: float

    @property
    def gap_db(self) -> float:
        return self.psnr_masked - self.psnr_unmasked


def mapping_ablation(seed: int = 0, n_frames: int = 60, iters: int = 60,
                     window: int = 3, stride: int = 4) -> MappingAblationResult:
    """Keyframe mapping at GT poses: dynamic pruning + masked losses vs the
    unmasked configuration; compares static-region PSNR of keyframe renders."""
    cfg = SimConfig(seed=seed, n_frames=n_frames,
                    noise=NoiseSpec(flow_sigma=0.1, depth_noise_rel=0.02,
                                    depth_scale_range=(0.7, 1.4),
                                    mask_flip_fp=0.01, mask_flip_fn=0.01))
    b = simulate(cfg)
    k = cfg.intrinsics()
    keyframes = [t for t in range(n_frames) if t % 10 == 0]
    params = PosteriorParams()
    all_static = StaticDepthMask(np.ones((cfg.height, cfg.width), dtype=np.uint8), 1.0)

    def run_arm(masked: bool) -> float:
        gmap = GaussianMap()
        packets = []
        for t in keyframes:
            w2c = b.gt_c2w[t].inverse()
            s = estimate_scale(b.est_depth[t], b.gt_depth[t], all_static)
            if masked:
                fm, _ = fuse(MaskImage(b.est_flow_mask[t]),
                             MaskImage(b.est_depth_mask[t]), params)
            else:
                fm = MaskImage(np.zeros((cfg.height, cfg.width), dtype=np.uint8))
            pkt = KeyframePacket(b.frames[t], w2c, fm, b.est_depth[t] * s.s_n)
            if masked and len(gmap):
                prune_dynamic(gmap, pkt, k)
            insert_gaussians(gmap, pkt, k, stride=stride)
            packets.append(pkt)
            optimize_map(gmap, packets[-window:], iters, MaskedLossWeights(), k=k)
        vals = []
        for t in keyframes:
            out = render(gmap, b.gt_c2w[t].inverse(), k)
            vals.append(psnr(out.color, b.frames[t].color, b.gt_dyn_mask[t] == 0))
        return float(np.mean(vals))

    return MappingAblationResult(run_arm(True), run_arm(False))
