"""Tracking + mapping pipeline over a frame sequence.

The tracker walks frame pairs: fuse dynamic masks, estimate the per-frame
monocular scale, solve the masked reprojection problem for the relative
pose, and hand keyframe packets to the mapper over a bounded queue. The
mapper (single writer of the map) prunes dynamic-hit Gaussians, inserts
static-pixel Gaussians, optimizes the map, and runs pose-only bundle
adjustment on the keyframe window.

Two execution modes: "sync" drains the queue at each keyframe on the caller
thread (deterministic, the default) and "threaded" runs the mapper on its
own thread (mirrors the two-thread design; BA corrections then apply to the
output trajectory only, not to live tracking).
"""
from __future__ import annotations

import json
import queue as queue_mod
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DEFAULTS
from .evaluate import EvalReport, ate_rmse, psnr
from .fusion import (PosteriorParams, depth_mask, flow_mask, fuse, mask_iou,
                     mask_precision_recall)
from .geometry import (CameraIntrinsics, FlowField, Frame, GaussianMap,
                       MaskImage, SE3Pose, compose)
from .io_files import (read_color_png, read_depth_png, read_flo, read_mask_png,
                       write_color_png, write_depth_png, write_flo,
                       write_mask_png, save_map)
from .mapping import (KeyframePacket, MaskedLossWeights, insert_gaussians,
                      optimize_map, prune_dynamic)
from .simulate import FPS, SimBundle
from .splat import RenderConfig, render
from .tracking import (KeyframeGroup, ScaleFactor, ScaleUnobservable,
                       StaticDepthMask, TrackingLost, estimate_pose,
                       estimate_scale, keyframe_policy, local_bundle_adjust,
                       rigid_flow, scaled_flow, static_mask, warp_depth_forward)
from .trajectory import Trajectory, write_tum


@dataclass
class SequenceData:
    """Uniform frame-sequence view over a simulator bundle or a dataset dir."""

    intrinsics: CameraIntrinsics
    frames: list                       # Frame, with est_depth / flow_to_next
    flow_masks: list | None = None     # per-frame file masks (uint8 H x W), or None
    depth_masks: list | None = None    # emulated depth masks, optional
    gt_trajectory: Trajectory | None = None
    gt_depth: list | None = None
    gt_dyn_mask: list | None = None

    def __len__(self):
        return len(self.frames)


def sequence_from_bundle(bundle: SimBundle) -> SequenceData:
    gt = Trajectory()
    for t, pose in enumerate(bundle.gt_c2w):
        gt.append(t / FPS, pose)
    return SequenceData(
        intrinsics=bundle.intrinsics,
        frames=bundle.frames,
        flow_masks=[m.copy() for m in bundle.est_flow_mask],
        depth_masks=[m.copy() for m in bundle.est_depth_mask],
        gt_trajectory=gt,
        gt_depth=bundle.gt_depth,
        gt_dyn_mask=bundle.gt_dyn_mask)


def export_bundle(bundle: SimBundle, out_dir) -> None:
    """Write the dataset layout the pipeline ingests.

    depth/flow/mask hold the emulated sensor outputs (what a real run would
    see); ground truth goes to gt_* subdirectories and groundtruth.txt.
    """
    out = Path(out_dir)
    for sub in ("rgb", "depth", "flow", "mask", "mask_depth",
                "gt_depth", "gt_flow", "gt_mask"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    k = bundle.intrinsics
    n = len(bundle.frames)
    for t in range(n):
        write_color_png(out / "rgb" / f"{t:06d}.png", bundle.frames[t].color)
        write_depth_png(out / "depth" / f"{t:06d}.png", bundle.est_depth[t])
        write_depth_png(out / "gt_depth" / f"{t:06d}.png", bundle.gt_depth[t])
        write_mask_png(out / "mask" / f"{t:06d}.png", MaskImage(bundle.est_flow_mask[t]))
        write_mask_png(out / "mask_depth" / f"{t:06d}.png",
                       MaskImage(bundle.est_depth_mask[t]))
        write_mask_png(out / "gt_mask" / f"{t:06d}.png", MaskImage(bundle.gt_dyn_mask[t]))
        if bundle.est_flow[t] is not None:
            write_flo(out / "flow" / f"{t:06d}.flo", FlowField(bundle.est_flow[t]))
            write_flo(out / "gt_flow" / f"{t:06d}.flo", FlowField(bundle.gt_flow[t]))
    gt = Trajectory()
    for t, pose in enumerate(bundle.gt_c2w):
        gt.append(t / FPS, pose)
    write_tum(out / "groundtruth.txt", gt)
    meta = {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
            "width": k.width, "height": k.height, "fps": FPS, "n_frames": n}
    (out / "intrinsics.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_dataset(data_dir) -> SequenceData:
    root = Path(data_dir)
    meta = json.loads((root / "intrinsics.json").read_text())
    k = CameraIntrinsics(meta["fx"], meta["fy"], meta["cx"], meta["cy"],
                         meta["width"], meta["height"])
    fps = meta.get("fps", FPS)
    rgb_files = sorted((root / "rgb").glob("*.png"))
    if not rgb_files:
        raise FileNotFoundError(f"no rgb frames under {root}")

    frames, flow_masks, depth_masks = [], [], []
    gt_depth, gt_dyn = [], []
    for t, rgb_path in enumerate(rgb_files):
        stem = rgb_path.stem
        color = read_color_png(rgb_path)
        depth_path = root / "depth" / f"{stem}.png"
        est_depth = read_depth_png(depth_path) if depth_path.exists() else None
        flow_path = root / "flow" / f"{stem}.flo"
        flow = read_flo(flow_path).vectors if flow_path.exists() else None
        frames.append(Frame(t, color, est_depth=est_depth, flow_to_next=flow,
                            timestamp=t / fps))
        mask_path = root / "mask" / f"{stem}.png"
        flow_masks.append(read_mask_png(mask_path).bits if mask_path.exists() else None)
        dm_path = root / "mask_depth" / f"{stem}.png"
        depth_masks.append(read_mask_png(dm_path).bits if dm_path.exists() else None)
        g_path = root / "gt_depth" / f"{stem}.png"
        gt_depth.append(read_depth_png(g_path) if g_path.exists() else None)
        gm_path = root / "gt_mask" / f"{stem}.png"
        gt_dyn.append(read_mask_png(gm_path).bits if gm_path.exists() else None)

    gt_traj = None
    gt_file = root / "groundtruth.txt"
    if gt_file.exists():
        from .trajectory import read_tum
        gt_traj = read_tum(gt_file)
    if all(m is None for m in flow_masks):
        flow_masks = None
    if all(m is None for m in depth_masks):
        depth_masks = None
    if all(d is None for d in gt_depth):
        gt_depth = None
    if all(m is None for m in gt_dyn):
        gt_dyn = None
    return SequenceData(k, frames, flow_masks, depth_masks, gt_traj, gt_depth, gt_dyn)


@dataclass
class PipelineResult:
    trajectory: Trajectory                 # camera-to-world, all frames
    keyframe_trajectory: Trajectory
    gmap: GaussianMap
    fused_masks: list
    report: EvalReport
    keyframe_indices: list = field(default_factory=list)
    tracking_warnings: int = 0


class _Mapper:
    """Single writer of the map; consumes keyframe packets."""

    def __init__(self, cfg: dict, k: CameraIntrinsics, rcfg: RenderConfig):
        self.cfg = cfg
        self.k = k
        self.rcfg = rcfg
        self.gmap = GaussianMap()
        self.packets: list[KeyframePacket] = []
        self.weights = MaskedLossWeights(cfg["lambda_d"], cfg["lambda_s"],
                                         cfg["lambda_t"], cfg["lambda_m"],
                                         cfg["lambda_g"])
        self.n_pruned = 0
        self._lock = threading.Lock()
        self._snapshot: GaussianMap | None = None

    def process(self, pkt: KeyframePacket) -> None:
        if len(self.gmap):
            self.n_pruned += prune_dynamic(self.gmap, pkt, self.k,
                                           self.cfg["prune_tau_w"], self.rcfg)
        insert_gaussians(self.gmap, pkt, self.k, self.cfg["insert_stride"],
                         self.cfg["insert_opacity"])
        self.packets.append(pkt)
        window = self.packets[-self.cfg["map_window"]:]
        optimize_map(self.gmap, window, self.cfg["map_iters_per_keyframe"],
                     self.weights, k=self.k, cfg=self.rcfg,
                     lr_position_per_extent=self.cfg["lr_position"],
                     lr_color=self.cfg["lr_color"], lr_opacity=self.cfg["lr_opacity"],
                     lr_scale=self.cfg["lr_scale"], lr_rotation=self.cfg["lr_rotation"])
        with self._lock:
            self._snapshot = self.gmap.snapshot()

    def snapshot(self) -> GaussianMap | None:
        with self._lock:
            return self._snapshot


class Pipeline:
    def __init__(self, cfg: dict | None = None):
        self.cfg = dict(DEFAULTS)
        if cfg:
            self.cfg.update(cfg)
        c = self.cfg
        self.rcfg = RenderConfig(c["near_plane"], c["cov_inflation"],
                                 c["support_sigma"], c["term_transmittance"],
                                 c["opacity_clamp"])
        self.posterior_params = PosteriorParams(
            c["prior"], c["tpr_f"], c["fpr_f"], c["tpr_d"], c["fpr_d"],
            c["fusion_threshold"])

    # -- mask construction ------------------------------------------------

    def _flow_mask_bits(self, seq: SequenceData, t: int, scaled_depth: np.ndarray,
                        rel_guess: SE3Pose) -> np.ndarray:
        c = self.cfg
        frame = seq.frames[t]
        if c["flow_mask_source"] == "file" and seq.flow_masks is not None \
                and seq.flow_masks[t] is not None:
            return seq.flow_masks[t]
        if frame.flow_to_next is not None:
            rf = rigid_flow(scaled_depth, rel_guess, seq.intrinsics)
            return flow_mask(FlowField(frame.flow_to_next), rf, c["tau_f"]).bits
        return None  # last frame in residual mode: caller reuses previous

    def _fused_mask(self, seq: SequenceData, t: int, scaled_depth: np.ndarray,
                    warped_prev: np.ndarray | None, rel_guess: SE3Pose,
                    prev_flow_bits: np.ndarray | None) -> MaskImage:
        c = self.cfg
        h, w = seq.frames[t].shape
        if c["mask_fusion"] == "off":
            return MaskImage(np.zeros((h, w), dtype=np.uint8))
        fbits = self._flow_mask_bits(seq, t, scaled_depth, rel_guess)
        if fbits is None:
            fbits = prev_flow_bits if prev_flow_bits is not None \
                else np.zeros((h, w), dtype=np.uint8)
        if seq.depth_masks is not None and seq.depth_masks[t] is not None:
            dbits = seq.depth_masks[t]
        elif warped_prev is not None:
            dbits = depth_mask(scaled_depth, warped_prev, c["tau_d"]).bits
        else:
            dbits = np.zeros((h, w), dtype=np.uint8)
        fused, _ = fuse(MaskImage(fbits), MaskImage(dbits), self.posterior_params,
                        c["k_max"])
        return fused

    # -- scale ------------------------------------------------------------

    def _reference_depth(self, seq: SequenceData, t: int, pose_w2c: SE3Pose,
                         mapper: _Mapper | None) -> np.ndarray | None:
        if self.cfg["scale_ref"] == "gt":
            if seq.gt_depth is None or seq.gt_depth[t] is None:
                return None
            return seq.gt_depth[t]
        gmap = mapper.snapshot() if mapper is not None else None
        if gmap is None or gmap.n_alive == 0:
            return None
        out = render(gmap, pose_w2c, seq.intrinsics, self.rcfg)
        cov = out.weight_sum > 0.5
        ref = np.where(cov, out.depth / np.maximum(out.weight_sum, 1e-12), np.nan)
        return ref

    # -- main loop ---------------------------------------------------------

    def run(self, seq: SequenceData, progress=None) -> PipelineResult:
        c = self.cfg
        k = seq.intrinsics
        n = len(seq)
        if n == 0:
            raise ValueError("empty sequence")
        t_start = time.time()

        mapping_on = c["mapping"] == "on"
        mapper = _Mapper(c, k, self.rcfg) if mapping_on else None
        threaded = mapping_on and c["threads"] == "threaded"
        pkt_queue: queue_mod.Queue = queue_mod.Queue(maxsize=4)
        map_thread = None
        if threaded:
            def _consume():
                while True:
                    pkt = pkt_queue.get()
                    if pkt is None:
                        return
                    mapper.process(pkt)
            map_thread = threading.Thread(target=_consume, daemon=True)
            map_thread.start()

        poses_w2c: list[SE3Pose] = []
        fused_masks: list[MaskImage] = []
        scales: list[ScaleFactor] = []
        kf_group = KeyframeGroup()
        kf_packets: list[KeyframePacket] = []
        kf_indices: list[int] = []
        warnings = 0
        track_time = 0.0
        map_time = 0.0

        rel_prev = SE3Pose.identity()
        prev_flow_bits = None

        for t in range(n):
            frame = seq.frames[t]
            if frame.est_depth is None:
                raise TrackingLost(f"frame {t} has no estimated depth")

            if t == 0:
                pose = SE3Pose.identity()
                s_t = ScaleFactor(1.0)
                if c["scale_ref"] == "gt":
                    s_t = self._try_scale(seq, t, pose, mapper, None, s_t)
                fused = self._fused_mask(seq, t, frame.est_depth * s_t.s_n, None,
                                         rel_prev, None)
            else:
                prev = seq.frames[t - 1]
                m_ds_prev = static_mask(fused_masks[t - 1], prev.est_depth)
                f_tilde = scaled_flow(FlowField(prev.flow_to_next), m_ds_prev,
                                      scales[t - 1])
                t0 = time.time()
                rel, stats = estimate_pose(
                    prev, frame, f_tilde, m_ds_prev, scales[t - 1], k, rel_prev,
                    huber_delta=c["huber_delta"], max_iters=c["track_max_iters"],
                    min_pixels=c["track_min_pixels"], stride=c["track_stride"])
                track_time += time.time() - t0
                if stats.diverged:
                    warnings += 1
                pose = compose(rel, poses_w2c[t - 1])
                rel_prev = rel

                s_t = self._try_scale(seq, t, pose, mapper,
                                      static_mask(fused_masks[t - 1], frame.est_depth),
                                      scales[t - 1])
                warped = warp_depth_forward(prev.est_depth * scales[t - 1].s_n,
                                            FlowField(prev.flow_to_next), rel, k)
                fused = self._fused_mask(seq, t, frame.est_depth * s_t.s_n, warped,
                                         rel, prev_flow_bits)
                m_ds_t = static_mask(fused, frame.est_depth)
                s_t = self._try_scale(seq, t, pose, mapper, m_ds_t, s_t)

            poses_w2c.append(pose)
            fused_masks.append(fused)
            scales.append(s_t)
            fbits_now = self._flow_mask_bits(seq, t, frame.est_depth * s_t.s_n, rel_prev)
            if fbits_now is not None:
                prev_flow_bits = fbits_now

            if keyframe_policy(t):
                frame.is_keyframe = True
                pkt = KeyframePacket(frame, pose.copy(), fused,
                                     frame.est_depth * s_t.s_n)
                kf_indices.append(t)
                kf_group.add(t, pose.copy())
                kf_packets.append(pkt)
                if mapping_on:
                    t0 = time.time()
                    if threaded:
                        pkt_queue.put(pkt)
                    else:
                        mapper.process(pkt)
                        if len(kf_group) >= c["ba_window"]:
                            self._run_ba(kf_group, kf_packets, mapper, k,
                                         poses_w2c, kf_indices)
                            rel_prev = compose(poses_w2c[-1],
                                               poses_w2c[-2].inverse()) \
                                if t > 0 else rel_prev
                    map_time += time.time() - t0
            if progress:
                progress(t, n)

        if threaded:
            pkt_queue.put(None)
            map_thread.join()
            if len(kf_group) >= c["ba_window"]:
                t0 = time.time()
                self._run_ba(kf_group, kf_packets, mapper, k, poses_w2c, kf_indices)
                map_time += time.time() - t0

        traj = Trajectory()
        traj_kf = Trajectory()
        for t, pose in enumerate(poses_w2c):
            c2w = pose.inverse()
            ts = seq.frames[t].timestamp
            traj.append(ts, c2w)
            if t in kf_indices:
                traj_kf.append(ts, c2w)

        report = self._build_report(seq, traj, traj_kf, poses_w2c, fused_masks,
                                    mapper, kf_indices, t_start, track_time,
                                    map_time, warnings)
        return PipelineResult(traj, traj_kf, mapper.gmap if mapper else GaussianMap(),
                              fused_masks, report, kf_indices, warnings)

    def _try_scale(self, seq, t, pose, mapper, m_ds, fallback: ScaleFactor):
        if m_ds is None:
            h, w = seq.frames[t].shape
            m_ds = StaticDepthMask(np.ones((h, w), dtype=np.uint8), 1.0)
        ref = self._reference_depth(seq, t, pose, mapper)
        if ref is None:
            return fallback
        try:
            return estimate_scale(seq.frames[t].est_depth, ref, m_ds)
        except ScaleUnobservable:
            return fallback

    def _run_ba(self, kf_group, kf_packets, mapper, k, poses_w2c, kf_indices):
        c = self.cfg
        w = c["ba_window"]
        window = kf_group.window(w)
        pkts = kf_packets[-w:]
        images = [p.frame.color for p in pkts]
        masks = [(p.fused_mask.bits == 0).astype(np.uint8) for p in pkts]
        refined, before, after = local_bundle_adjust(
            window, mapper.gmap, k, images, masks, self.rcfg,
            max_iters=c["ba_max_iters"])
        assert after <= before + 1e-12
        for pose, member in zip(refined, window.members):
            slot = kf_group.members.index(member)
            kf_group.poses[slot] = pose
            poses_w2c[member] = pose
        # refresh packet poses so later map optimization sees the corrections
        for pkt, pose in zip(pkts, refined):
            pkt.pose = pose

    def _build_report(self, seq, traj, traj_kf, poses_w2c, fused_masks, mapper,
                      kf_indices, t_start, track_time, map_time, warnings):
        c = self.cfg
        report = EvalReport(alignment=c["align"])
        report.n_frames = len(seq)
        report.n_keyframes = len(kf_indices)
        report.config = {key: c[key] for key in
                         ("mask_fusion", "mapping", "scale_ref", "threads",
                          "flow_mask_source", "seed", "fusion_threshold")}
        if seq.gt_trajectory is not None and len(traj) >= 3:
            report.ate_rmse_all = ate_rmse(traj, seq.gt_trajectory, c["align"])
            if len(traj_kf) >= 3:
                report.ate_rmse_keyframes = ate_rmse(traj_kf, seq.gt_trajectory,
                                                     c["align"])
        if seq.gt_dyn_mask is not None:
            ious, precs, recs = [], [], []
            for fm, gm in zip(fused_masks, seq.gt_dyn_mask):
                if gm is None:
                    continue
                gmask = MaskImage(gm)
                ious.append(mask_iou(fm, gmask))
                p, r = mask_precision_recall(fm, gmask)
                precs.append(p)
                recs.append(r)
            if ious:
                report.mask_iou = float(np.mean(ious))
                report.mask_precision = float(np.mean(precs))
                report.mask_recall = float(np.mean(recs))
        if mapper is not None and mapper.gmap.n_alive > 0 and kf_indices:
            vals = []
            for t in kf_indices:
                out = render(mapper.gmap, poses_w2c[t], seq.intrinsics, self.rcfg)
                if seq.gt_dyn_mask is not None and seq.gt_dyn_mask[t] is not None:
                    static = seq.gt_dyn_mask[t] == 0
                else:
                    static = fused_masks[t].bits == 0
                vals.append(psnr(out.color, seq.frames[t].color, static))
            finite = [v for v in vals if np.isfinite(v)]
            report.psnr_static = float(np.mean(finite)) if finite else float("inf")
            report.n_gaussians = mapper.gmap.n_alive
            report.n_pruned = mapper.n_pruned
        report.runtime_seconds = {
            "total": round(time.time() - t_start, 3),
            "tracking": round(track_time, 3),
            "mapping": round(map_time, 3)}
        return report


def save_result(result: PipelineResult, out_dir, seq: SequenceData | None = None,
                render_keyframes: bool = True) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "trajectory.txt", result.trajectory)
    write_tum(out / "trajectory_keyframes.txt", result.keyframe_trajectory)
    save_map(out / "map.txt", result.gmap)
    result.report.save(out / "report.json")
    if render_keyframes and seq is not None and result.gmap.n_alive > 0:
        rdir = out / "renders"
        rdir.mkdir(exist_ok=True)
        for t in result.keyframe_indices:
            pose = result.trajectory.entries[t][1].inverse()
            img = render(result.gmap, pose, seq.intrinsics)
            write_color_png(rdir / f"{t:06d}.png", img.color)
            write_depth_png(rdir / f"{t:06d}_depth.png", img.depth)
        mdir = out / "masks"
        mdir.mkdir(exist_ok=True)
        for t, fm in enumerate(result.fused_masks):
            write_mask_png(mdir / f"{t:06d}.png", fm)
