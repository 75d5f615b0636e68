import pickle

import numpy as np
import pytest

from dynsplat.geometry import backproject, project_points
from dynsplat.simulate import (MotionSpec, NoiseSpec, ObjectSpec, SimConfig,
                               emulate_sensors, make_scene, simulate)
from dynsplat.tracking import StaticDepthMask, estimate_scale

FAST = dict(n_frames=6, n_background=120)


class TestSceneGeneration:
    def test_zero_motion_zero_flow(self):
        cfg = SimConfig(seed=1, objects=(), camera=MotionSpec("static"), **FAST)
        b = make_scene(cfg)
        assert np.abs(b.gt_flow[0]).max() < 1e-12

    def test_empty_objects_empty_mask(self):
        cfg = SimConfig(seed=2, objects=(), **FAST)
        b = make_scene(cfg)
        assert all(m.sum() == 0 for m in b.gt_dyn_mask)

    def test_flow_geometry_consistency(self):
        # independent backproject-transform-reproject oracle on static pixels
        cfg = SimConfig(seed=3, **FAST)
        b = make_scene(cfg)
        k = cfg.intrinsics()
        H, W = cfg.height, cfg.width
        iy, ix = np.mgrid[0:H, 0:W]
        centers = np.stack([ix + 0.5, iy + 0.5], -1).reshape(-1, 2)
        for t in (0, 3):
            pts = backproject(centers, b.gt_depth[t].reshape(-1), k)
            world = b.gt_c2w[t].apply(pts)
            nxt = b.gt_c2w[t + 1].inverse().apply(world)
            flow = (project_points(nxt, k) - centers).reshape(H, W, 2)
            static = b.gt_dyn_mask[t] == 0
            assert np.abs(flow - b.gt_flow[t])[static].max() < 1e-6

    def test_pure_rotation_flow_matches_homography(self):
        # rotational flow is depth-independent: x' ~ K R^T K^-1 x
        cfg = SimConfig(seed=4, objects=(),
                        camera=MotionSpec(kind="sinusoid", amplitude=(0, 0, 0),
                                          period=8.0, yaw_amplitude=0.04),
                        **FAST)
        b = make_scene(cfg)
        k = cfg.intrinsics()
        Km = k.matrix()
        H, W = cfg.height, cfg.width
        iy, ix = np.mgrid[0:H, 0:W]
        centers = np.stack([ix + 0.5, iy + 0.5], -1).reshape(-1, 2)
        t = 2
        R_rel = b.gt_c2w[t + 1].inverse().rotation @ b.gt_c2w[t].rotation
        Hm = Km @ R_rel @ np.linalg.inv(Km)
        ones = np.ones((centers.shape[0], 1))
        x = np.hstack([centers, ones]) @ Hm.T
        mapped = x[:, :2] / x[:, 2:3]
        flow_h = (mapped - centers).reshape(H, W, 2)
        assert np.abs(flow_h - b.gt_flow[t]).max() < 0.1

    def test_lateral_object_flow(self):
        # object translating laterally at constant depth: flow on the object
        # = camera-induced flow + fx * dx / z
        obj = ObjectSpec(n_gaussians=25, center=(0.0, 0.0, 3.5), extent=0.5,
                         motion=MotionSpec(kind="linear", velocity=(0.05, 0, 0)))
        cfg = SimConfig(seed=5, objects=(obj,), camera=MotionSpec("static"),
                        n_frames=4, n_background=120)
        b = make_scene(cfg)
        t = 1
        dyn = b.gt_dyn_mask[t] == 1
        assert dyn.sum() > 50
        # camera static: static-pixel flow is zero; object flow = fx*v/z
        expected = cfg.fx * 0.05 / 3.5
        flow_x = b.gt_flow[t][:, :, 0]
        med = np.median(flow_x[dyn])
        assert abs(med - expected) < 0.25
        static = ~dyn
        assert np.abs(b.gt_flow[t][static]).max() < 1e-9

    def test_object_size_within_target_band(self):
        cfg = SimConfig(seed=6, n_frames=6)
        b = make_scene(cfg)
        fracs = [m.mean() for m in b.gt_dyn_mask]
        assert 0.08 <= np.mean(fracs) <= 0.22

    def test_depth_positive_everywhere(self):
        cfg = SimConfig(seed=7, **FAST)
        b = make_scene(cfg)
        for d in b.gt_depth:
            assert np.all(np.isfinite(d)) and d.min() > 0


class TestEmulation:
    def test_no_noise_equals_ground_truth(self):
        cfg = SimConfig(seed=8, noise=NoiseSpec(), **FAST)
        b = simulate(cfg)
        for t in range(cfg.n_frames):
            assert np.array_equal(b.est_depth[t], b.gt_depth[t])
            assert np.array_equal(b.est_flow_mask[t], b.gt_dyn_mask[t])
            if b.gt_flow[t] is not None:
                assert np.array_equal(b.est_flow[t], b.gt_flow[t])

    def test_flip_frequencies(self):
        cfg = SimConfig(seed=9, n_frames=30,
                        noise=NoiseSpec(mask_flip_fp=0.1, mask_flip_fn=0.1))
        b = simulate(cfg)
        flips_on_static, flips_on_dyn, n_static, n_dyn = 0, 0, 0, 0
        for em, gm in zip(b.est_flow_mask, b.gt_dyn_mask):
            stat, dyn = gm == 0, gm == 1
            flips_on_static += int((em[stat] == 1).sum())
            flips_on_dyn += int((em[dyn] == 0).sum())
            n_static += int(stat.sum())
            n_dyn += int(dyn.sum())
        assert n_static + n_dyn >= 1e5
        assert abs(flips_on_static / n_static - 0.1) < 0.01
        assert abs(flips_on_dyn / n_dyn - 0.1) < 0.01

    def test_depth_scale_recovered_via_tracker(self):
        cfg = SimConfig(seed=10, noise=NoiseSpec(depth_scale_range=(0.5, 0.5)), **FAST)
        b = simulate(cfg)
        m = StaticDepthMask(np.ones((cfg.height, cfg.width), dtype=np.uint8), 1.0)
        s = estimate_scale(b.est_depth[0], b.gt_depth[0], m)
        assert abs(s.s_n - 2.0) < 0.02

    def test_flow_noise_sigma(self):
        cfg = SimConfig(seed=11, n_frames=20, noise=NoiseSpec(flow_sigma=0.4))
        b = simulate(cfg)
        resid = np.concatenate([(b.est_flow[t] - b.gt_flow[t]).ravel()
                                for t in range(19)])
        assert abs(resid.std() - 0.4) < 0.01


class TestDeterminism:
    def test_byte_identical_bundles(self):
        cfg = SimConfig(seed=12, n_frames=5,
                        noise=NoiseSpec(flow_sigma=0.3, depth_noise_rel=0.02,
                                        depth_scale_range=(0.7, 1.4),
                                        mask_flip_fp=0.1, mask_flip_fn=0.05))
        a = simulate(cfg)
        b = simulate(cfg)

        def blob(x):
            return pickle.dumps([
                [f.color for f in x.frames], x.gt_depth, x.gt_dyn_mask,
                [f for f in x.gt_flow if f is not None],
                x.est_depth, [f for f in x.est_flow if f is not None],
                x.est_flow_mask, x.est_depth_mask,
                [(p.rotation, p.translation) for p in x.gt_c2w]])
        assert blob(a) == blob(b)

    def test_seed_changes_output(self):
        a = simulate(SimConfig(seed=1, **FAST))
        b = simulate(SimConfig(seed=2, **FAST))
        assert not np.array_equal(a.frames[0].color, b.frames[0].color)


class TestValidation:
    def test_bad_motion_kind(self):
        with pytest.raises(ValueError):
            MotionSpec(kind="warp9").pose_at(0)

    def test_bad_flip_rate(self):
        with pytest.raises(ValueError):
            NoiseSpec(mask_flip_fp=1.0)
