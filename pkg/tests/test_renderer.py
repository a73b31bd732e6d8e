"""Splat renderer: projection math, compositing closed forms, adjoint
correctness, determinism, and the non-differentiable reference rasterizer."""

import numpy as np
import pytest

from gsdistill.errors import RenderError
from gsdistill.renderer import (DEFAULT_OPTIONS, RenderGradients, RenderOptions,
                                project, render, render_backward,
                                render_reference, render_with_context)
from gsdistill.scene import (CameraPose, GaussianScene, ReferenceAsset,
                             camera_from_angles, sigmoid)

from conftest import (FD_BACKGROUND, boundary_safe_weights, fd_camera,
                      fd_max_rel_error, front_camera, make_scene, random_scene,
                      weighted_half_sq_loss)


def single_gaussian_scene(mean=(0.0, 0.0, 0.0), scale=0.3, opacity=0.8,
                          color=(0.9, 0.5, 0.1)):
    return make_scene(
        means=[mean], log_scales=[[np.log(scale)] * 3],
        quats=[[1.0, 0.0, 0.0, 0.0]],
        logit_opacities=[np.log(opacity / (1.0 - opacity))],
        colors=[color])


class TestProjection:
    def test_centered_gaussian_projects_to_image_center(self):
        cam = front_camera(width=33, height=33, distance=2.0)
        scene = single_gaussian_scene()
        out = project(scene[0], cam)
        assert out is not None
        mean2d, cov2d, depth = out
        assert np.allclose(mean2d, [16.5, 16.5], atol=1e-12)
        assert depth == pytest.approx(2.0)

    def test_isotropic_covariance_from_pinhole_formula(self):
        # on-axis isotropic Gaussian: cov2d = (f * s / tz)^2 I + floor I
        cam = front_camera(distance=2.0)
        s = 0.3
        scene = single_gaussian_scene(scale=s)
        _m, cov2d, _d = project(scene[0], cam)
        expected = (cam.focal_px * s / 2.0) ** 2
        assert np.allclose(cov2d, np.diag([expected + 0.3, expected + 0.3]),
                           atol=1e-9)

    def test_off_axis_mean_follows_perspective_divide(self):
        cam = front_camera(width=64, height=64, distance=2.0)
        scene = single_gaussian_scene(mean=(0.4, 0.0, 0.25))
        mean2d, _c, depth = project(scene[0], cam)
        f = cam.focal_px
        # camera axes: x -> +x, y -> -z, z -> +y (position (0,-2,0), z up)
        tx, ty, tz = 0.4, -0.25, 2.0
        assert np.allclose(mean2d, [f * tx / tz + 32.0, f * ty / tz + 32.0],
                           atol=1e-12)
        assert depth == pytest.approx(tz)

    def test_behind_camera_is_culled(self):
        cam = front_camera(distance=2.0)
        scene = single_gaussian_scene(mean=(0.0, -5.0, 0.0))
        assert project(scene[0], cam) is None


class TestForwardClosedForms:
    def test_empty_scene_is_background(self):
        cam = front_camera()
        img = render(None, cam, (0.2, 0.4, 0.6))
        assert np.all(img.rgb == np.array([0.2, 0.4, 0.6]))
        assert np.all(img.alpha == 0.0)
        assert np.all(img.depth == cam.far)

    def test_center_pixel_single_gaussian(self):
        # odd image width puts a pixel center exactly on the optical axis,
        # where the Gaussian footprint evaluates to exactly 1
        cam = front_camera(width=33, height=33)
        opacity = 0.8
        color = np.array([0.9, 0.5, 0.1])
        bg = np.array([0.05, 0.0, 0.25])
        scene = single_gaussian_scene(opacity=opacity, color=color)
        img = render(scene, cam, tuple(bg))
        o = sigmoid(scene.logit_opacities[0])
        expected = o * color + (1.0 - o) * bg
        assert np.array_equal(img.rgb[16, 16], expected)
        assert img.alpha[16, 16] == o

    def test_two_layer_compositing_front_to_back(self):
        cam = front_camera(width=33, height=33)
        scene = make_scene(
            means=[[0.0, -0.5, 0.0], [0.0, 0.5, 0.0]],
            log_scales=np.full((2, 3), np.log(0.4)),
            quats=[[1.0, 0, 0, 0], [1.0, 0, 0, 0]],
            logit_opacities=[0.0, 0.0],     # opacity exactly 0.5
            colors=[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        bg = 0.1
        img = render(scene, cam, (bg, bg, bg))
        front = np.array([1.0, 0.0, 0.0])
        back = np.array([0.0, 1.0, 0.0])
        expected = 0.5 * front + 0.5 * (0.5 * back + 0.5 * bg)
        assert np.array_equal(img.rgb[16, 16], expected)
        # depth at the center is the alpha-weighted mean of the two layers
        w1, w2 = 0.5, 0.25
        assert img.depth[16, 16] == pytest.approx((w1 * 1.5 + w2 * 2.5) / (w1 + w2))

    def test_order_independence_of_input_ordering(self, rng):
        # compositing sorts by depth, so permuting the input must not matter
        cam = fd_camera(64, 64)
        scene = random_scene(rng, 40)
        img = render(scene, cam, FD_BACKGROUND)
        perm = rng.permutation(40)
        shuffled = make_scene(scene.means[perm], scene.log_scales[perm],
                              scene.quats[perm], scene.logit_opacities[perm],
                              scene.colors[perm])
        img2 = render(shuffled, cam, FD_BACKGROUND)
        assert np.allclose(img.rgb, img2.rgb, atol=1e-12)
        assert np.allclose(img.depth, img2.depth, atol=1e-12)

    def test_truncation_radius_cuts_footprint(self):
        cam = front_camera(width=65, height=65)
        scene = single_gaussian_scene(scale=0.05, opacity=0.95)
        img = render(scene, cam, (0.0, 0.0, 0.0))
        mean2d, cov2d, _d = project(scene[0], cam)
        q = np.linalg.inv(cov2d)
        ys, xs = np.mgrid[0:65, 0:65]
        dx = xs + 0.5 - mean2d[0]
        dy = ys + 0.5 - mean2d[1]
        maha = q[0, 0] * dx ** 2 + 2 * q[0, 1] * dx * dy + q[1, 1] * dy ** 2
        outside = maha > DEFAULT_OPTIONS.trunc_sigma ** 2
        assert np.all(img.rgb[outside] == 0.0)
        assert np.all(img.alpha[outside] == 0.0)
        assert np.any(img.alpha[~outside] > 0.0)

    def test_alpha_clamp_keeps_transmittance_positive(self):
        cam = front_camera(width=33, height=33)
        scene = single_gaussian_scene(opacity=0.999999, scale=0.5)
        img = render(scene, cam, (1.0, 1.0, 1.0))
        assert img.alpha.max() <= DEFAULT_OPTIONS.alpha_clamp
        # background still leaks through the clamped layer
        assert img.rgb[16, 16, 2] >= (1.0 - DEFAULT_OPTIONS.alpha_clamp) * 1.0 - 1e-15

    def test_depth_sentinel_below_alpha_eps(self):
        cam = front_camera(width=33, height=33)
        scene = single_gaussian_scene(scale=0.02, opacity=0.9)
        img = render(scene, cam, (0.0, 0.0, 0.0))
        empty = img.alpha <= DEFAULT_OPTIONS.alpha_eps
        assert np.any(empty)
        assert np.all(img.depth[empty] == cam.far)

    def test_rejects_non_finite_parameters(self):
        scene = single_gaussian_scene()
        scene.means[0, 0] = np.nan
        with pytest.raises(RenderError):
            render(scene, front_camera(), (0.0, 0.0, 0.0))


class TestDeterminism:
    def test_thread_count_invariance(self, rng):
        cam = fd_camera(64, 64)
        scene = random_scene(rng, 120)
        base = None
        for threads in (1, 2, 4):
            opts = RenderOptions(threads=threads)
            img = render(scene, cam, FD_BACKGROUND, opts)
            grads = render_backward(scene, cam, FD_BACKGROUND,
                                    np.ones((64, 64, 3)), opts,
                                    accumulate_viewspace=False)
            if base is None:
                base = (img, grads)
                continue
            assert np.array_equal(base[0].rgb, img.rgb)
            assert np.array_equal(base[0].depth, img.depth)
            assert np.array_equal(base[0].alpha, img.alpha)
            assert np.array_equal(base[1].d_means, grads.d_means)
            assert np.array_equal(base[1].d_quats, grads.d_quats)
            assert np.array_equal(base[1].d_colors, grads.d_colors)

    def test_repeat_render_is_bit_identical(self, rng):
        cam = fd_camera(48, 48)
        scene = random_scene(rng, 60)
        a = render(scene, cam, FD_BACKGROUND)
        b = render(scene, cam, FD_BACKGROUND)
        assert np.array_equal(a.rgb, b.rgb)

    def test_tile_size_changes_stay_within_float_noise(self, rng):
        cam = fd_camera(64, 64)
        scene = random_scene(rng, 80)
        imgs = [render(scene, cam, FD_BACKGROUND, RenderOptions(tile_size=ts))
                for ts in (8, 16, 64)]
        for other in imgs[1:]:
            assert np.allclose(imgs[0].rgb, other.rgb, atol=1e-12)

    def test_context_reuse_is_bit_identical(self, rng):
        cam = fd_camera(48, 48)
        scene = random_scene(rng, 50)
        loss_grad = rng.normal(size=(48, 48, 3))
        img, ctx = render_with_context(scene, cam, FD_BACKGROUND)
        direct = render(scene, cam, FD_BACKGROUND)
        assert np.array_equal(img.rgb, direct.rgb)
        with_ctx = render_backward(scene, cam, FD_BACKGROUND, loss_grad,
                                   accumulate_viewspace=False, ctx=ctx)
        without = render_backward(scene, cam, FD_BACKGROUND, loss_grad,
                                  accumulate_viewspace=False)
        for field in ("d_means", "d_log_scales", "d_quats",
                      "d_logit_opacities", "d_colors", "viewspace_norms"):
            assert np.array_equal(getattr(with_ctx, field), getattr(without, field))


class TestBackward:
    def test_color_gradient_closed_form(self):
        # d(loss)/d(color) for a unit loss gradient is the compositing weight
        cam = front_camera(width=33, height=33)
        scene = single_gaussian_scene(opacity=0.8)
        loss_grad = np.zeros((33, 33, 3))
        loss_grad[16, 16, 0] = 1.0
        grads = render_backward(scene, cam, (0.0, 0.0, 0.0), loss_grad,
                                accumulate_viewspace=False)
        o = sigmoid(scene.logit_opacities[0])
        assert grads.d_colors[0, 0] == pytest.approx(o, abs=1e-15)
        assert grads.d_colors[0, 1] == 0.0

    def test_finite_differences_on_random_scenes(self, rng):
        checked = 0
        while checked < 4:
            scene = random_scene(rng, int(rng.integers(3, 9)))
            cam = fd_camera()
            weights = boundary_safe_weights(scene, cam)
            if weights is None or weights.sum() < 50:
                continue
            checked += 1
            assert fd_max_rel_error(scene, cam, weights) < 1e-4

    def test_background_gradient_flows_through_transmittance(self):
        # loss = sum(rgb): opacity gradient must include the -bg*T term,
        # checked against a plain finite difference on an interior pixel
        cam = front_camera(width=33, height=33)
        scene = single_gaussian_scene(opacity=0.6, color=(0.0, 0.0, 0.0))
        weights = np.zeros((33, 33))
        weights[16, 16] = 1.0
        _l, pixel_grad = weighted_half_sq_loss(scene, cam, weights,
                                               background=(1.0, 1.0, 1.0))
        grads = render_backward(scene, cam, (1.0, 1.0, 1.0), pixel_grad,
                                accumulate_viewspace=False)
        h = 1e-6
        base = scene.logit_opacities[0]
        scene.logit_opacities[0] = base + h
        up, _ = weighted_half_sq_loss(scene, cam, weights, background=(1.0, 1.0, 1.0))
        scene.logit_opacities[0] = base - h
        dn, _ = weighted_half_sq_loss(scene, cam, weights, background=(1.0, 1.0, 1.0))
        scene.logit_opacities[0] = base
        fd = (up - dn) / (2 * h)
        assert grads.d_logit_opacities[0] == pytest.approx(fd, rel=1e-6)

    def test_viewspace_norm_accumulation(self, rng):
        cam = fd_camera(48, 48)
        scene = random_scene(rng, 10)
        scene.grad_accum[:] = 0.0
        grads = render_backward(scene, cam, FD_BACKGROUND,
                                np.ones((48, 48, 3)), accumulate_viewspace=True)
        assert np.array_equal(scene.grad_accum, grads.viewspace_norms)
        render_backward(scene, cam, FD_BACKGROUND, np.ones((48, 48, 3)),
                        accumulate_viewspace=True)
        assert np.allclose(scene.grad_accum, 2.0 * grads.viewspace_norms)

    def test_gradients_zero_for_fully_occluded_gaussian(self):
        # a Gaussian behind an opaque-clamped front layer gets weight ~0.01;
        # its color gradient must equal that residual transmittance exactly
        cam = front_camera(width=33, height=33)
        scene = make_scene(
            means=[[0.0, -0.5, 0.0], [0.0, 0.5, 0.0]],
            log_scales=np.full((2, 3), np.log(0.5)),
            quats=[[1.0, 0, 0, 0], [1.0, 0, 0, 0]],
            logit_opacities=[30.0, 0.0],    # front alpha clamps at 0.99
            colors=[[1.0, 0, 0], [0.0, 1, 0]])
        loss_grad = np.zeros((33, 33, 3))
        loss_grad[16, 16, 1] = 1.0
        grads = render_backward(scene, cam, (0.0, 0.0, 0.0), loss_grad,
                                accumulate_viewspace=False)
        assert grads.d_colors[1, 1] == pytest.approx(0.01 * 0.5, abs=1e-12)
        # the clamped front Gaussian's opacity gradient is exactly zero
        assert grads.d_logit_opacities[0] == 0.0

    def test_gradient_shapes_and_zero_initialization(self):
        grads = RenderGradients.zeros(7)
        assert grads.d_means.shape == (7, 3)
        assert grads.d_quats.shape == (7, 4)
        assert not np.any(grads.d_colors)

    def test_rejects_wrong_loss_grad_shape(self, rng):
        scene = random_scene(rng, 3)
        with pytest.raises(Exception):
            render_backward(scene, fd_camera(), FD_BACKGROUND,
                            np.ones((8, 8, 3)))


class TestReferenceRenderer:
    def test_single_point_matches_brute_force_winner(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-0.8, 0.8, (200, 3))
        cols = rng.uniform(0, 1, (200, 3))
        asset = ReferenceAsset(points=pts, colors=cols, caption="dots")
        cam = fd_camera(48, 48)
        img = render_reference(asset, cam, (0.0, 0.0, 0.0))

        # brute force z-buffer over every pixel/point pair
        t = cam.world_to_cam(pts)
        f = cam.focal_px
        u = f * t[:, 0] / t[:, 2] + 24.0
        v = f * t[:, 1] / t[:, 2] + 24.0
        rho = DEFAULT_OPTIONS.point_radius_px
        expected = np.zeros((48, 48, 3))
        depth = np.full((48, 48), cam.far)
        for i in range(48):
            for j in range(48):
                best, bz = -1, np.inf
                for k in range(200):
                    if t[k, 2] <= cam.near:
                        continue
                    if (j + 0.5 - u[k]) ** 2 + (i + 0.5 - v[k]) ** 2 <= rho ** 2 \
                            and t[k, 2] < bz:
                        best, bz = k, t[k, 2]
                if best >= 0:
                    expected[i, j] = cols[best]
                    depth[i, j] = bz
        assert np.array_equal(img.rgb, expected)
        assert np.array_equal(img.depth, depth)

    def test_mesh_triangle_covers_center(self):
        verts = np.array([[-0.5, 0.0, -0.4], [0.5, 0.0, -0.4], [0.0, 0.0, 0.6]])
        asset = ReferenceAsset(points=verts, colors=np.full((3, 3), 0.5),
                               caption="tri", mesh_vertices=verts,
                               mesh_faces=np.array([[0, 1, 2]]),
                               mesh_colors=np.full((3, 3), 0.5))
        cam = front_camera(width=33, height=33)
        img = render_reference(asset, cam, (0.0, 0.0, 0.0))
        assert img.alpha[16, 16] == 1.0
        assert np.allclose(img.rgb[16, 16], 0.5)
        assert img.alpha[0, 0] == 0.0

    def test_empty_asset_renders_background(self):
        asset = ReferenceAsset(points=np.zeros((1, 3)) + 50.0,
                               colors=np.ones((1, 3)), caption="far away")
        cam = front_camera()
        img = render_reference(asset, cam, (0.3, 0.3, 0.3))
        assert np.all(img.rgb == 0.3)
