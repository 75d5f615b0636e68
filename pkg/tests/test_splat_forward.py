import numpy as np
import pytest

from dynsplat.geometry import CameraIntrinsics, Gaussian, GaussianMap, SE3Pose
from dynsplat.splat import (RenderConfig, get_kernels, pixel_weight, prepare_view,
                            project, render, weights_at_pixel)

from conftest import random_map, random_pose

NO_CUTOFF = RenderConfig(support_sigma=None, term_transmittance=0.0)


def on_axis_gaussian(z=2.0, scale=0.1, opacity=0.7, color=(1, 0, 0)):
    return Gaussian([0, 0, z], [1, 0, 0, 0], [scale] * 3, opacity, color)


class TestProject:
    def test_hand_evaluated_covariance(self):
        # fx=fy=100, z=2, isotropic sigma 0.1 -> cov2d = (100*0.1/2)^2 + 0.3
        k = CameraIntrinsics(100, 100, 32, 32, 64, 64)
        pg = project(on_axis_gaussian(), SE3Pose.identity(), k)
        assert np.allclose(pg.mean2d, [32.0, 32.0])
        assert np.allclose(pg.cov2d, np.diag([25.3, 25.3]))
        assert pg.depth == 2.0

    def test_behind_camera_culled(self):
        k = CameraIntrinsics(100, 100, 32, 32, 64, 64)
        assert project(on_axis_gaussian(z=-1.0), SE3Pose.identity(), k) is None

    def test_on_axis_hits_principal_point(self):
        k = CameraIntrinsics(80, 120, 20.7, 40.1, 64, 64)
        pg = project(on_axis_gaussian(z=3.7), SE3Pose.identity(), k)
        assert np.allclose(pg.mean2d, [20.7, 40.1])


class TestPixelWeight:
    def test_at_mean_equals_opacity(self, center_intrinsics):
        pg = project(on_axis_gaussian(opacity=0.7), SE3Pose.identity(), center_intrinsics)
        assert pixel_weight(pg, 0.7, pg.mean2d) == pytest.approx(0.7, abs=1e-15)

    def test_mahalanobis_three(self, center_intrinsics):
        pg = project(on_axis_gaussian(), SE3Pose.identity(), center_intrinsics)
        d = np.array([3.0 * np.sqrt(pg.cov2d[0, 0]), 0.0])
        w = pixel_weight(pg, 1.0, pg.mean2d + d)
        assert w == pytest.approx(np.exp(-4.5), rel=1e-12)

    def test_zero_opacity(self, center_intrinsics):
        pg = project(on_axis_gaussian(), SE3Pose.identity(), center_intrinsics)
        for dx in (0.0, 1.0, 5.0):
            assert pixel_weight(pg, 0.0, pg.mean2d + [dx, 0]) == 0.0

    def test_clamped_at_high_opacity(self, center_intrinsics):
        pg = project(on_axis_gaussian(opacity=1.0), SE3Pose.identity(), center_intrinsics)
        assert pixel_weight(pg, 1.0, pg.mean2d) == 0.999


class TestRender:
    def test_single_gaussian_half_opacity(self, center_intrinsics):
        m = GaussianMap()
        m.add(Gaussian([0, 0, 2.0], [1, 0, 0, 0], [0.001] * 3, 0.5, [1.0, 0.2, 0.0]))
        out = render(m, SE3Pose.identity(), center_intrinsics, NO_CUTOFF)
        assert np.allclose(out.color[32, 32], [0.5, 0.1, 0.0])
        assert out.depth[32, 32] == pytest.approx(1.0)  # 0.5 * 2.0, unnormalized
        assert out.weight_sum[32, 32] == pytest.approx(0.5)

    def test_two_coincident_gaussians(self, center_intrinsics):
        m = GaussianMap()
        m.add(Gaussian([0, 0, 1.0], [1, 0, 0, 0], [0.001] * 3, 0.5, [1.0, 0.0, 0.0]))
        m.add(Gaussian([0, 0, 2.0], [1, 0, 0, 0], [0.001] * 3, 0.5, [0.0, 1.0, 0.0]))
        out = render(m, SE3Pose.identity(), center_intrinsics, NO_CUTOFF)
        # Eq-style two-term expansion: w1 = 0.5, w2 = 0.5 * (1 - 0.5)
        assert np.allclose(out.color[32, 32], [0.5, 0.25, 0.0])
        assert out.depth[32, 32] == pytest.approx(0.5 * 1.0 + 0.25 * 2.0)
        assert out.contributors[32, 32] == 2

    def test_depth_swap_dominance(self, center_intrinsics):
        m = GaussianMap()
        m.add(Gaussian([0, 0, 1.0], [1, 0, 0, 0], [0.001] * 3, 0.6, [1, 0, 0]))
        m.add(Gaussian([0, 0, 2.0], [1, 0, 0, 0], [0.001] * 3, 0.6, [0, 1, 0]))
        out = render(m, SE3Pose.identity(), center_intrinsics, NO_CUTOFF)
        # front gaussian dominates; swapping depths swaps dominance
        m2 = GaussianMap()
        m2.add(Gaussian([0, 0, 2.0], [1, 0, 0, 0], [0.001] * 3, 0.6, [1, 0, 0]))
        m2.add(Gaussian([0, 0, 1.0], [1, 0, 0, 0], [0.001] * 3, 0.6, [0, 1, 0]))
        out2 = render(m2, SE3Pose.identity(), center_intrinsics, NO_CUTOFF)
        assert out.color[32, 32, 0] > out.color[32, 32, 1]
        assert out2.color[32, 32, 1] > out2.color[32, 32, 0]
        assert out.color[32, 32, 0] == pytest.approx(out2.color[32, 32, 1])

    def test_empty_map(self, center_intrinsics):
        out = render(GaussianMap(), SE3Pose.identity(), center_intrinsics)
        assert out.color.max() == 0.0
        assert out.depth.max() == 0.0
        assert out.weight_sum.max() == 0.0
        assert out.transmittance.min() == 1.0

    def test_pruned_never_rendered(self, center_intrinsics):
        m = GaussianMap()
        gid = m.add(Gaussian([0, 0, 2.0], [1, 0, 0, 0], [0.3] * 3, 0.9, [1, 0, 0]))
        before = render(m, SE3Pose.identity(), center_intrinsics)
        m.kill(np.array([gid]))
        after = render(m, SE3Pose.identity(), center_intrinsics)
        assert before.color.max() > 0
        assert after.color.max() == 0.0

    def test_weight_sum_bounded(self, small_intrinsics):
        rng = np.random.default_rng(0)
        for seed in range(5):
            m = random_map(30, seed, opacity_range=(0.5, 1.0))
            out = render(m, random_pose(rng), small_intrinsics)
            assert out.weight_sum.max() <= 1.0 + 1e-12
            assert out.weight_sum.min() >= 0.0


class TestCompositingInvariants:
    def test_telescoping_identity(self, small_intrinsics):
        # independent reconstruction of per-pixel weights from the projection
        rng = np.random.default_rng(1)
        cfg = RenderConfig(term_transmittance=0.0)
        for seed in range(10):
            m = random_map(25, seed, opacity_range=(0.3, 1.0))
            pose = random_pose(rng)
            prep = prepare_view(m, pose, small_intrinsics, cfg)
            out = render(m, pose, small_intrinsics, cfg, prep=prep)
            for _ in range(25):
                ix = int(rng.integers(0, 16))
                iy = int(rng.integers(0, 16))
                lo, hi = prep.indptr[iy * 16 + ix], prep.indptr[iy * 16 + ix + 1]
                T = 1.0
                for e in range(lo, hi):
                    gi = prep.gidx[e]
                    d = np.array([ix + 0.5, iy + 0.5]) - prep.means2d[gi]
                    a, b, c = prep.prec[gi]
                    g = prep.opacities[gi] * np.exp(
                        -0.5 * (a * d[0] ** 2 + 2 * b * d[0] * d[1] + c * d[1] ** 2))
                    T *= 1.0 - min(g, cfg.opacity_clamp)
                assert abs(out.weight_sum[iy, ix] - (1.0 - T)) < 1e-9

    def test_insertion_order_invariance_bitwise(self, small_intrinsics):
        rng = np.random.default_rng(2)
        base = random_map(20, 7)
        pose = random_pose(rng)
        ref = render(base, pose, small_intrinsics)
        for trial in range(5):
            perm = np.random.default_rng(trial).permutation(20)
            shuffled = GaussianMap()
            for i in perm:
                shuffled.add(base.get(int(base.ids[i])))
            out = render(shuffled, pose, small_intrinsics)
            assert np.array_equal(out.color, ref.color)
            assert np.array_equal(out.depth, ref.depth)
            assert np.array_equal(out.weight_sum, ref.weight_sum)


class TestBackendParity:
    def test_forward_and_backward_bitwise(self, small_intrinsics):
        kernels = get_kernels()
        if set(kernels) == {"python"}:
            pytest.skip("compiled kernel not built")
        rng = np.random.default_rng(3)
        cfg = RenderConfig()
        for seed in range(5):
            m = random_map(20, seed)
            prep = prepare_view(m, random_pose(rng), small_intrinsics, cfg)
            args = (prep.H, prep.W, prep.indptr, prep.gidx,
                    np.ascontiguousarray(prep.means2d), np.ascontiguousarray(prep.prec),
                    np.ascontiguousarray(prep.depths), np.ascontiguousarray(prep.colors),
                    np.ascontiguousarray(prep.opacities),
                    cfg.opacity_clamp, cfg.term_transmittance)
            f_py = kernels["python"].composite_forward(*args, None)
            f_cy = kernels["cython"].composite_forward(*args, None)
            for a, b in zip(f_py, f_cy):
                assert np.array_equal(a, b)
            lg = rng.normal(size=(16, 16, 4))
            b_py = kernels["python"].composite_backward(
                *args, np.ascontiguousarray(lg[:, :, :3]), np.ascontiguousarray(lg[:, :, 3]))
            b_cy = kernels["cython"].composite_backward(
                *args, np.ascontiguousarray(lg[:, :, :3]), np.ascontiguousarray(lg[:, :, 3]))
            for a, b in zip(b_py, b_cy):
                assert np.array_equal(a, b)


class TestWeightsAtPixel:
    def test_matches_render_weight_sum(self, center_intrinsics):
        m = random_map(15, 11, opacity_range=(0.4, 0.9))
        cfg = RenderConfig()
        prep = prepare_view(m, SE3Pose.identity(), center_intrinsics, cfg)
        out = render(m, SE3Pose.identity(), center_intrinsics, cfg, prep=prep)
        for (ix, iy) in [(32, 32), (20, 40), (5, 5)]:
            ws = weights_at_pixel(prep, ix, iy, cfg)
            assert sum(w for _, w in ws) == pytest.approx(out.weight_sum[iy, ix], abs=1e-12)
