"""Shared fixtures and independent oracles used across the suite.

The oracles here deliberately avoid the library's own vectorized kernels:
moments are brute-force double sums, finite differences perturb one scalar
at a time, and reference constructions are written out longhand so a bug in
the production code cannot hide in its own test harness.
"""

import numpy as np
import pytest

from gsdistill.renderer import DEFAULT_OPTIONS, RenderOptions, render, render_backward
from gsdistill.scene import CameraPose, GaussianScene

FD_BACKGROUND = (0.15, 0.1, 0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(20250814)


def make_scene(means, log_scales, quats, logit_opacities, colors) -> GaussianScene:
    return GaussianScene(
        means=np.asarray(means, dtype=np.float64),
        log_scales=np.asarray(log_scales, dtype=np.float64),
        quats=np.asarray(quats, dtype=np.float64),
        logit_opacities=np.asarray(logit_opacities, dtype=np.float64),
        colors=np.asarray(colors, dtype=np.float64),
    )


def random_scene(rng: np.random.Generator, n: int) -> GaussianScene:
    """Moderate-size random scene inside the standard camera frustum."""
    return make_scene(
        means=rng.uniform(-0.6, 0.6, (n, 3)),
        log_scales=np.log(rng.uniform(0.08, 0.35, (n, 3))),
        quats=rng.normal(size=(n, 4)) * np.array([2.0, 1.0, 1.0, 1.0]),
        logit_opacities=rng.uniform(-1.5, 2.0, n),
        colors=rng.uniform(0.05, 0.95, (n, 3)),
    )


def fd_camera(width: int = 32, height: int = 32) -> CameraPose:
    return CameraPose(position=np.array([0.3, -2.8, 0.4]), target=np.zeros(3),
                      up=np.array([0.0, 0.0, 1.0]), fov_y=np.deg2rad(45.0),
                      width=width, height=height)


def front_camera(width: int = 33, height: int = 33, distance: float = 2.0) -> CameraPose:
    """Camera straight down the -y axis; odd default size puts a pixel center
    exactly on the optical axis."""
    return CameraPose(position=np.array([0.0, -distance, 0.0]), target=np.zeros(3),
                      up=np.array([0.0, 0.0, 1.0]), fov_y=np.deg2rad(45.0),
                      width=width, height=height)


def boundary_safe_weights(scene: GaussianScene, camera: CameraPose,
                          options: RenderOptions = DEFAULT_OPTIONS):
    """Per-pixel loss weights for finite-difference checks.

    Central differences step a projected footprint across its hard edges
    (the trunc_sigma cutoff and the alpha clamp), where the true derivative
    is one-sided.  Pixels within a small margin of any Gaussian's edge get
    weight zero, so the differentiable interior is what gets compared.
    Returns None when the scene has nearly coincident projected depths
    (the sort order itself could flip under perturbation).
    """
    from gsdistill.renderer import _SceneProjection

    proj = _SceneProjection(scene, camera, options)
    W, H = camera.width, camera.height
    keep = np.ones((H, W), dtype=bool)
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    trunc2 = options.trunc_sigma ** 2
    for k in range(proj.count):
        dx = xs[None, :] - proj.mean2d[k, 0]
        dy = ys[:, None] - proj.mean2d[k, 1]
        q = proj.Q[k]
        maha = q[0, 0] * dx ** 2 + 2.0 * q[0, 1] * dx * dy + q[1, 1] * dy ** 2
        keep &= np.abs(maha - trunc2) > 0.05
        alpha = proj.opac[k] * np.exp(-0.5 * np.minimum(maha, trunc2)) * (maha <= trunc2)
        keep &= np.abs(alpha - options.alpha_clamp) > 0.02
    if proj.count >= 2:
        gaps = np.diff(np.sort(proj.depth))
        if gaps.size and float(np.min(gaps)) <= 5e-3:
            return None
    return keep.astype(np.float64)


def weighted_half_sq_loss(scene, camera, weights, background=FD_BACKGROUND,
                          options=DEFAULT_OPTIONS):
    img = render(scene, camera, background, options)
    loss = 0.5 * float(np.sum(weights[:, :, None] * img.rgb ** 2))
    return loss, weights[:, :, None] * img.rgb


def fd_max_rel_error(scene, camera, weights, h: float = 1e-4,
                     background=FD_BACKGROUND, options=DEFAULT_OPTIONS):
    """Worst relative error between analytic gradients and central
    differences over every scalar parameter of the scene."""
    _loss, pixel_grad = weighted_half_sq_loss(scene, camera, weights,
                                              background, options)
    grads = render_backward(scene, camera, background, pixel_grad, options,
                            accumulate_viewspace=False)
    pairs = [(scene.means, grads.d_means),
             (scene.log_scales, grads.d_log_scales),
             (scene.quats, grads.d_quats),
             (scene.logit_opacities, grads.d_logit_opacities),
             (scene.colors, grads.d_colors)]
    worst = 0.0
    for arr, analytic in pairs:
        flat = arr.reshape(-1)
        aflat = np.asarray(analytic).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, _ = weighted_half_sq_loss(scene, camera, weights, background, options)
            flat[i] = orig - h
            dn, _ = weighted_half_sq_loss(scene, camera, weights, background, options)
            flat[i] = orig
            fd = (up - dn) / (2.0 * h)
            denom = max(abs(fd), abs(aflat[i]), 1e-6)
            worst = max(worst, abs(fd - aflat[i]) / denom)
    return worst


def brute_raw_moments(gray: np.ndarray, order: int) -> np.ndarray:
    """Independent double-sum m_pq table on the unit square with pixel
    centers at ((j+0.5)/W, (i+0.5)/H), normalized by the pixel count."""
    h, w = gray.shape
    table = np.zeros((order + 1, order + 1))
    for p in range(order + 1):
        for q in range(order + 1):
            acc = 0.0
            for i in range(h):
                y = (i + 0.5) / h
                for j in range(w):
                    x = (j + 0.5) / w
                    acc += gray[i, j] * x ** p * y ** q
            table[p, q] = acc / (w * h)
    return table


def bilinear_rotate(gray: np.ndarray, degrees: float) -> np.ndarray:
    """scipy bilinear rotation about the image center (independent of the
    library; used for the Hu-invariant drift check)."""
    from scipy.ndimage import rotate

    return np.clip(rotate(gray, degrees, reshape=False, order=1, mode="constant",
                          cval=0.0, prefilter=False), 0.0, None)


def luminance(rgb: np.ndarray) -> np.ndarray:
    return rgb @ np.array([0.299, 0.587, 0.114])
