"""Differentiable splatting renderer and the non-differentiable reference
renderer.

Forward model, per pixel, Gaussians sorted by camera depth (stable sort,
index tie-break):

    alpha_i = opacity_i * exp(-0.5 d^T cov2d^-1 d), clamped to [0, 0.99]
    C = sum_i c_i alpha_i T_i + background * T_N,  T_i = prod_{j<i}(1 - alpha_j)

with the 2D covariance from an EWA-style projection
cov2d = J W Sigma W^T J^T + cov_floor * I and per-Gaussian footprints
truncated at trunc_sigma Mahalanobis units.  Depth is alpha-weighted
expected camera-space z; pixels whose accumulated alpha stays below
alpha_eps get the camera far value as background sentinel.

The backward pass is the exact analytic adjoint of this forward model
(ordering treated as locally constant).  Work is split over a fixed grid of
pixel tiles, each compositing its depth-ordered Gaussian list; per-tile
partial reductions are combined in fixed tile order, so results are
bit-stable for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError, RenderError
from .scene import CameraPose, Gaussian3D, GaussianScene, ReferenceAsset, quat_to_rotmat


@dataclass
class RenderOptions:
    alpha_clamp: float = 0.99
    trunc_sigma: float = 3.0
    cov_floor: float = 0.3      # pixel^2, added to cov2d
    alpha_eps: float = 1e-4     # accumulated-alpha cutoff for the depth map
    point_radius_px: float = 1.75
    tile_size: int = 16         # fixed pixel-tile grid (determinism anchor)
    threads: int = 1


DEFAULT_OPTIONS = RenderOptions()


@dataclass
class RenderedImage:
    width: int
    height: int
    rgb: np.ndarray     # (H, W, 3) in [0, 1]
    depth: np.ndarray   # (H, W) camera-space z; far sentinel on background
    alpha: np.ndarray   # (H, W) accumulated opacity in [0, 1]


@dataclass
class RenderGradients:
    """Loss partials w.r.t. optimization-space scene parameters."""

    d_means: np.ndarray             # (N, 3)
    d_log_scales: np.ndarray        # (N, 3)
    d_quats: np.ndarray             # (N, 4) w.r.t. unnormalized quaternions
    d_logit_opacities: np.ndarray   # (N,)
    d_colors: np.ndarray            # (N, 3)
    viewspace_norms: np.ndarray     # (N,) NDC-space positional gradient norms

    @classmethod
    def zeros(cls, n: int) -> "RenderGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)),
                   np.zeros(n), np.zeros((n, 3)), np.zeros(n))

    def scaled(self, factor: float) -> "RenderGradients":
        return RenderGradients(self.d_means * factor, self.d_log_scales * factor,
                               self.d_quats * factor, self.d_logit_opacities * factor,
                               self.d_colors * factor, self.viewspace_norms.copy())

    def add_(self, other: "RenderGradients") -> "RenderGradients":
        self.d_means += other.d_means
        self.d_log_scales += other.d_log_scales
        self.d_quats += other.d_quats
        self.d_logit_opacities += other.d_logit_opacities
        self.d_colors += other.d_colors
        self.viewspace_norms += other.viewspace_norms
        return self


# ---------------------------------------------------------------------------
# projection


def project(g: Gaussian3D, camera: CameraPose,
            cov_floor: float = DEFAULT_OPTIONS.cov_floor):
    """Project one Gaussian; returns (mean2d, cov2d, depth) or None if culled
    (mean behind the near plane)."""
    t = camera.world_to_cam(g.mean)[0]
    if t[2] <= camera.near:
        return None
    f = camera.focal_px
    tx, ty, tz = t
    mean2d = np.array([f * tx / tz + camera.width / 2.0,
                       f * ty / tz + camera.height / 2.0])
    J = np.array([[f / tz, 0.0, -f * tx / tz ** 2],
                  [0.0, f / tz, -f * ty / tz ** 2]])
    M = J @ camera.rotation
    cov2d = M @ g.covariance @ M.T + cov_floor * np.eye(2)
    return mean2d, cov2d, float(tz)


class _SceneProjection:
    """Vectorized projection of every visible Gaussian, depth-sorted."""

    def __init__(self, scene: GaussianScene, camera: CameraPose, options: RenderOptions):
        _check_finite(scene)
        n = len(scene)
        t = camera.world_to_cam(scene.means)           # (N, 3)
        front = t[:, 2] > camera.near
        f = camera.focal_px
        W, H = camera.width, camera.height

        idx = np.nonzero(front)[0]
        t = t[idx]
        tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
        mean2d = np.stack([f * tx / tz + W / 2.0, f * ty / tz + H / 2.0], axis=1)
        zero = np.zeros_like(tz)
        J = np.stack([
            np.stack([f / tz, zero, -f * tx / tz ** 2], axis=1),
            np.stack([zero, f / tz, -f * ty / tz ** 2], axis=1),
        ], axis=1)                                      # (M, 2, 3)
        Rcam = camera.rotation
        Mmat = J @ Rcam                                 # (M, 2, 3)
        qhat = scene.quats[idx]
        qnorm = np.linalg.norm(qhat, axis=1)
        qhat = qhat / qnorm[:, None]
        R = quat_to_rotmat(qhat)                        # (M, 3, 3)
        s = np.exp(scene.log_scales[idx])               # (M, 3)
        Sigma = np.einsum("mij,mj,mkj->mik", R, s ** 2, R)
        cov2d = np.einsum("mij,mjk,mlk->mil", Mmat, Sigma, Mmat)
        cov2d[:, 0, 0] += options.cov_floor
        cov2d[:, 1, 1] += options.cov_floor

        a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
        det = a * c - b * b
        Q = np.empty_like(cov2d)
        Q[:, 0, 0] = c / det
        Q[:, 0, 1] = Q[:, 1, 0] = -b / det
        Q[:, 1, 1] = a / det

        lam_max = (a + c) / 2.0 + np.sqrt(((a - c) / 2.0) ** 2 + b * b)
        r_px = options.trunc_sigma * np.sqrt(lam_max)
        c0 = np.clip(np.floor(mean2d[:, 0] - r_px).astype(np.int64) - 1, 0, W)
        c1 = np.clip(np.ceil(mean2d[:, 0] + r_px).astype(np.int64) + 1, 0, W)
        r0 = np.clip(np.floor(mean2d[:, 1] - r_px).astype(np.int64) - 1, 0, H)
        r1 = np.clip(np.ceil(mean2d[:, 1] + r_px).astype(np.int64) + 1, 0, H)

        onscreen = (c0 < c1) & (r0 < r1)
        order = np.argsort(tz, kind="stable")
        order = order[onscreen[order]]

        self.idx = idx[order]
        self.mean2d = mean2d[order]
        self.depth = tz[order]
        self.Q = Q[order]
        self.bbox = np.stack([r0, r1, c0, c1], axis=1)[order]
        self.J = J[order]
        self.Mmat = Mmat[order]
        self.Sigma = Sigma[order]
        self.R = R[order]
        self.s = s[order]
        self.qhat = qhat[order]
        self.qnorm = qnorm[order]
        self.t = t[order]
        self.opac = scene.opacities[self.idx]
        self.color = scene.colors[self.idx]
        self.count = self.idx.shape[0]


def _check_finite(scene: GaussianScene):
    for name, arr in (("mean", scene.means), ("log_scale", scene.log_scales),
                      ("quat", scene.quats), ("logit_opacity", scene.logit_opacities),
                      ("color", scene.colors)):
        bad = ~np.isfinite(arr)
        if bad.any():
            i = int(np.nonzero(bad.reshape(len(scene), -1).any(axis=1))[0][0])
            raise RenderError(f"non-finite {name} in Gaussian {i}")


def _tile_ranges(height: int, width: int, tile: int):
    return [(r, min(r + tile, height), c, min(c + tile, width))
            for r in range(0, height, tile) for c in range(0, width, tile)]


_GAUSS_BLOCK = 256  # fixed compositing block inside a tile (determinism anchor)


def _tile_blocks(proj, r0, r1, c0, c1):
    """Depth-ordered Gaussian blocks intersecting a tile, each with the
    union bounding rectangle of its members clipped to the tile."""
    box = proj.bbox
    sub = np.nonzero((box[:, 0] < r1) & (box[:, 1] > r0)
                     & (box[:, 2] < c1) & (box[:, 3] > c0))[0]
    blocks = []
    for b0 in range(0, sub.shape[0], _GAUSS_BLOCK):
        blk = sub[b0:b0 + _GAUSS_BLOCK]
        bb = box[blk]
        rb0 = max(int(bb[:, 0].min()), r0)
        rb1 = min(int(bb[:, 1].max()), r1)
        cb0 = max(int(bb[:, 2].min()), c0)
        cb1 = min(int(bb[:, 3].max()), c1)
        blocks.append((blk, rb0, rb1, cb0, cb1))
    return sub, blocks


def _alpha_block(proj, blk, rb0, rb1, cb0, cb1, options):
    """Vectorized footprints for a depth-ordered block of Gaussians over its
    union rectangle.  Truncated pixels get g = 0, so evaluating the shared
    rectangle instead of per-Gaussian boxes changes nothing numerically."""
    mean = proj.mean2d[blk]
    q = proj.Q[blk]
    xs = np.arange(cb0, cb1, dtype=np.float64) + 0.5
    ys = np.arange(rb0, rb1, dtype=np.float64) + 0.5
    dx = xs[None, :] - mean[:, 0][:, None]          # (B, w)
    dy = ys[None, :] - mean[:, 1][:, None]          # (B, h)
    trunc2 = options.trunc_sigma ** 2
    maha = np.multiply(dy[:, :, None], dx[:, None, :])
    maha *= (2.0 * q[:, 0, 1])[:, None, None]
    maha += (q[:, 0, 0][:, None] * dx ** 2)[:, None, :]
    maha += (q[:, 1, 1][:, None] * dy ** 2)[:, :, None]
    inside = maha <= trunc2
    g = maha
    np.minimum(g, trunc2, out=g)
    g *= -0.5
    np.exp(g, out=g)
    g *= inside
    alpha = proj.opac[blk][:, None, None] * g
    np.minimum(alpha, options.alpha_clamp, out=alpha)
    return dx, dy, g, alpha


class _TileContext:
    """Forward-pass footprints of one tile, reusable by the adjoint."""

    __slots__ = ("blocks", "hits", "T_starts", "T_final")

    def __init__(self, blocks, hits, T_starts, T_final):
        self.blocks = blocks
        self.hits = hits
        self.T_starts = T_starts
        self.T_final = T_final


class RenderContext:
    """Projection plus per-tile forward state shared with render_backward."""

    def __init__(self, proj, tiles, tile_ctx):
        self.proj = proj
        self.tiles = tiles
        self.tile_ctx = tile_ctx


def _forward_tile(proj, r0, r1, c0, c1, background, options, keep=False):
    h, wd = r1 - r0, c1 - c0
    T = np.ones((h, wd))
    C = np.zeros((h, wd, 3))
    A = np.zeros((h, wd))
    Dnum = np.zeros((h, wd))
    _sub, blocks = _tile_blocks(proj, r0, r1, c0, c1)
    hits = [] if keep else None
    T_starts = [] if keep else None
    for blk, rb0, rb1, cb0, cb1 in blocks:
        hit = _alpha_block(proj, blk, rb0, rb1, cb0, cb1, options)
        alpha = hit[3]
        Tl = T[rb0 - r0:rb1 - r0, cb0 - c0:cb1 - c0]
        if keep:
            hits.append(hit)
            T_starts.append(Tl.copy())
        trans = np.subtract(1.0, alpha)
        np.multiply.accumulate(trans, axis=0, out=trans)
        Tbefore = np.empty_like(alpha)
        Tbefore[0] = Tl
        np.multiply(Tl, trans[:-1], out=Tbefore[1:])
        w = alpha * Tbefore
        flat = w.reshape(blk.shape[0], -1)
        rows, cols = slice(rb0 - r0, rb1 - r0), slice(cb0 - c0, cb1 - c0)
        C[rows, cols] += (flat.T @ proj.color[blk]).reshape(rb1 - rb0, cb1 - cb0, 3)
        A[rows, cols] += w.sum(axis=0)
        Dnum[rows, cols] += (flat.T @ proj.depth[blk]).reshape(rb1 - rb0, cb1 - cb0)
        Tl *= trans[-1]
    C += T[:, :, None] * background
    ctx = _TileContext(blocks, hits, T_starts, T) if keep else None
    return C, A, Dnum, T, ctx


def render(scene: Optional[GaussianScene], camera: CameraPose,
           background=(0.0, 0.0, 0.0),
           options: RenderOptions = DEFAULT_OPTIONS) -> RenderedImage:
    """Forward splatting render.  ``scene=None`` gives a pure-background
    image with zero alpha."""
    img, _ = render_with_context(scene, camera, background, options, keep=False)
    return img


def render_with_context(scene: Optional[GaussianScene], camera: CameraPose,
                        background=(0.0, 0.0, 0.0),
                        options: RenderOptions = DEFAULT_OPTIONS,
                        keep: bool = True):
    """Forward render returning a :class:`RenderContext` that
    :func:`render_backward` can reuse to skip recomputing footprints."""
    W, H = camera.width, camera.height
    background = np.asarray(background, dtype=np.float64)
    if scene is None or len(scene) == 0:
        img = RenderedImage(W, H, np.tile(background, (H, W, 1)),
                            np.full((H, W), camera.far), np.zeros((H, W)))
        return img, None
    proj = _SceneProjection(scene, camera, options)
    rgb = np.empty((H, W, 3))
    A = np.empty((H, W))
    Dnum = np.empty((H, W))
    tiles = _tile_ranges(H, W, options.tile_size)

    def work(tile):
        return _forward_tile(proj, *tile, background, options, keep=keep)

    results = _run_chunks(work, tiles, options.threads)
    tile_ctx = []
    for (r0, r1, c0, c1), (C, Ac, Dc, _T, tctx) in zip(tiles, results):
        rgb[r0:r1, c0:c1] = C
        A[r0:r1, c0:c1] = Ac
        Dnum[r0:r1, c0:c1] = Dc
        tile_ctx.append(tctx)
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(A > options.alpha_eps, Dnum / np.maximum(A, 1e-300), camera.far)
    img = RenderedImage(W, H, rgb, depth, A)
    return img, (RenderContext(proj, tiles, tile_ctx) if keep else None)


_POOLS: dict = {}


def _run_chunks(work, units, threads):
    if threads <= 1 or len(units) == 1:
        return [work(u) for u in units]
    pool = _POOLS.get(threads)
    if pool is None:
        pool = _POOLS[threads] = ThreadPoolExecutor(max_workers=threads)
    return list(pool.map(work, units))


def _backward_tile(proj, r0, r1, c0, c1, background, loss_grad, options, tctx=None):
    """Per-tile pixel-level adjoint: returns per-Gaussian partial sums over
    the tile's Gaussian list.

    Two sweeps over depth-ordered blocks: one forward recording the tile
    transmittance entering each block (reused from the render context when
    available), one in reverse maintaining the suffix sum
    S_i = sum_{j>i} c_j alpha_j T_j + background * T_N contracted with the
    pixel loss gradient, from which dC/dalpha_i = c_i T_i - S_i/(1-alpha_i).
    """
    h, wd = r1 - r0, c1 - c0
    gpx = loss_grad[r0:r1, c0:c1]
    if tctx is None:
        _C, _A, _D, T_final, tctx = _forward_tile(
            proj, r0, r1, c0, c1, background, options, keep=True)
    blocks = tctx.blocks
    nsub = sum(b.shape[0] for b, *_ in blocks)
    d_color = np.zeros((nsub, 3))
    d_opac = np.zeros(nsub)
    d_mean2d = np.zeros((nsub, 2))
    d_Q = np.zeros((nsub, 2, 2))
    sub_idx = np.concatenate([b for b, *_ in blocks]) if blocks else np.zeros(0, np.int64)

    # suffix of (color sums . loss grad), shared across later Gaussians
    S_scalar = np.einsum("hwc,hwc->hw", tctx.T_final[:, :, None] * background, gpx)
    pos = nsub
    for k in range(len(blocks) - 1, -1, -1):
        blk, rb0, rb1, cb0, cb1 = blocks[k]
        dx, dy, g, alpha = tctx.hits[k]
        b = blk.shape[0]
        pos -= b
        rows, cols = slice(rb0 - r0, rb1 - r0), slice(cb0 - c0, cb1 - c0)
        gp = gpx[rows, cols]
        Ssub = S_scalar[rows, cols]
        trans = np.subtract(1.0, alpha)
        np.multiply.accumulate(trans, axis=0, out=trans)
        Tbefore = np.empty_like(alpha)
        Tbefore[0] = tctx.T_starts[k]
        np.multiply(tctx.T_starts[k], trans[:-1], out=Tbefore[1:])
        w = alpha * Tbefore
        colors = proj.color[blk]
        gp_flat = gp.reshape(-1, 3)
        d_color[pos:pos + b] = w.reshape(b, -1) @ gp_flat
        cg = (colors @ gp_flat.T).reshape(b, rb1 - rb0, cb1 - cb0)
        u = w * cg                                   # per-Gaussian own term
        cs = np.cumsum(u[::-1], axis=0)[::-1]        # suffix including own
        dalpha = cg * Tbefore - (cs - u + Ssub) / (1.0 - alpha)
        dalpha *= proj.opac[blk][:, None, None] * g < options.alpha_clamp
        du = dalpha * g                              # d/d(opacity) integrand
        d_opac[pos:pos + b] = du.sum(axis=(1, 2))
        scale = -0.5 * proj.opac[blk]
        # spatial reductions of dmaha = scale * du against the quadratic form
        A1 = (du @ dx[:, :, None])[:, :, 0]          # (B, h): sum_w du * dx
        A3 = (du @ (dx ** 2)[:, :, None])[:, :, 0]
        Rh = du.sum(axis=2)                          # (B, h)
        Sx = A1.sum(axis=1)
        Sy = (Rh * dy).sum(axis=1)
        q = proj.Q[blk]
        d_mean2d[pos:pos + b, 0] = -2.0 * scale * (q[:, 0, 0] * Sx + q[:, 0, 1] * Sy)
        d_mean2d[pos:pos + b, 1] = -2.0 * scale * (q[:, 1, 0] * Sx + q[:, 1, 1] * Sy)
        d_Q[pos:pos + b, 0, 0] = scale * A3.sum(axis=1)
        mxy = scale * (A1 * dy).sum(axis=1)
        d_Q[pos:pos + b, 0, 1] = mxy
        d_Q[pos:pos + b, 1, 0] = mxy
        d_Q[pos:pos + b, 1, 1] = scale * (Rh * dy ** 2).sum(axis=1)
        Ssub += cs[0]
    return sub_idx, d_color, d_opac, d_mean2d, d_Q


def _quat_rot_derivatives(qhat):
    """(M, 4, 3, 3) array of dR/dq_hat for unit quaternions (w, x, y, z)."""
    w, x, y, z = qhat[:, 0], qhat[:, 1], qhat[:, 2], qhat[:, 3]
    o = np.zeros_like(w)
    dw = np.stack([o, -z, y, z, o, -x, -y, x, o], axis=1)
    dx = np.stack([o, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1)
    dy = np.stack([-2 * y, x, w, x, o, z, -w, z, -2 * y], axis=1)
    dz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, o], axis=1)
    return 2.0 * np.stack([dw, dx, dy, dz], axis=1).reshape(-1, 4, 3, 3)


def render_backward(scene: GaussianScene, camera: CameraPose, background,
                    loss_grad: np.ndarray,
                    options: RenderOptions = DEFAULT_OPTIONS,
                    accumulate_viewspace: bool = True,
                    ctx: Optional[RenderContext] = None) -> RenderGradients:
    """Exact adjoint of :func:`render` for a per-pixel rgb loss gradient.

    Pass the :class:`RenderContext` from :func:`render_with_context` to reuse
    the forward pass's projection and footprints.  Also accumulates each
    Gaussian's NDC-space positional gradient norm into ``scene.grad_accum``
    (densification statistic) unless disabled.
    """
    W, H = camera.width, camera.height
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != (H, W, 3):
        raise ContractError(f"loss_grad shape {loss_grad.shape} != {(H, W, 3)}")
    background = np.asarray(background, dtype=np.float64)
    grads = RenderGradients.zeros(len(scene))
    proj = ctx.proj if ctx is not None else _SceneProjection(scene, camera, options)
    if proj.count == 0:
        return grads
    tiles = ctx.tiles if ctx is not None else _tile_ranges(H, W, options.tile_size)
    tile_ctx = ctx.tile_ctx if ctx is not None else [None] * len(tiles)

    def work(item):
        (r0, r1, c0, c1), tctx = item
        return _backward_tile(proj, r0, r1, c0, c1, background, loss_grad,
                              options, tctx=tctx)

    d_color = np.zeros((proj.count, 3))
    d_opac = np.zeros(proj.count)
    d_mean2d = np.zeros((proj.count, 2))
    d_Q = np.zeros((proj.count, 2, 2))
    # per-tile partials combined in fixed tile order: thread-count invariant
    for sub, dc, do, dm, dq in _run_chunks(work, list(zip(tiles, tile_ctx)),
                                           options.threads):
        d_color[sub] += dc
        d_opac[sub] += do
        d_mean2d[sub] += dm
        d_Q[sub] += dq

    # inverse: dL/dcov2d = -Q dQ Q
    G2 = -np.einsum("mij,mjk,mkl->mil", proj.Q, d_Q, proj.Q)
    # cov2d = M Sigma M^T (+ floor): dSigma = M^T G2 M, dM = 2 G2 M Sigma
    G3 = np.einsum("mji,mjk,mkl->mil", proj.Mmat, G2, proj.Mmat)
    dM = 2.0 * np.einsum("mij,mjk,mkl->mil", G2, proj.Mmat, proj.Sigma)
    dJ = np.einsum("mij,kj->mik", dM, camera.rotation)

    f = camera.focal_px
    tx, ty, tz = proj.t[:, 0], proj.t[:, 1], proj.t[:, 2]
    dt = np.einsum("mji,mj->mi", proj.J, d_mean2d)     # mean2d path (rows of J)
    dt[:, 0] += dJ[:, 0, 2] * (-f / tz ** 2)
    dt[:, 1] += dJ[:, 1, 2] * (-f / tz ** 2)
    dt[:, 2] += (dJ[:, 0, 0] + dJ[:, 1, 1]) * (-f / tz ** 2) \
        + dJ[:, 0, 2] * (2.0 * f * tx / tz ** 3) + dJ[:, 1, 2] * (2.0 * f * ty / tz ** 3)
    d_mean = dt @ camera.rotation

    # Sigma = R diag(s^2) R^T
    B = np.einsum("mji,mjk,mkl->mil", proj.R, G3, proj.R)
    d_log_s = 2.0 * proj.s ** 2 * np.einsum("mii->mi", B)
    dR = 2.0 * np.einsum("mij,mjk->mik", G3, proj.R) * (proj.s ** 2)[:, None, :]
    P = _quat_rot_derivatives(proj.qhat)
    d_qhat = np.einsum("mij,mkij->mk", dR, P)
    d_quat = (d_qhat - proj.qhat * np.einsum("mk,mk->m", proj.qhat, d_qhat)[:, None]) \
        / proj.qnorm[:, None]

    opac = proj.opac
    d_logit = d_opac * opac * (1.0 - opac)
    ndc = d_mean2d * np.array([W / 2.0, H / 2.0])
    vnorm = np.linalg.norm(ndc, axis=1)

    grads.d_means[proj.idx] = d_mean
    grads.d_log_scales[proj.idx] = d_log_s
    grads.d_quats[proj.idx] = d_quat
    grads.d_logit_opacities[proj.idx] = d_logit
    grads.d_colors[proj.idx] = d_color
    grads.viewspace_norms[proj.idx] = vnorm
    if accumulate_viewspace:
        scene.grad_accum[proj.idx] += vnorm
    return grads


# ---------------------------------------------------------------------------
# reference renderer (non-differentiable)


def render_reference(asset: ReferenceAsset, camera: CameraPose,
                     background=(0.0, 0.0, 0.0),
                     options: RenderOptions = DEFAULT_OPTIONS) -> RenderedImage:
    """Render the reference asset at the given camera: mesh rasterization
    when a mesh is present, z-buffered point splatting otherwise."""
    if asset.has_mesh:
        return _render_mesh(asset, camera, background)
    return _render_points(asset, camera, background, options)


def _render_points(asset, camera, background, options):
    W, H = camera.width, camera.height
    background = np.asarray(background, dtype=np.float64)
    t = camera.world_to_cam(asset.points)
    front = t[:, 2] > camera.near
    f = camera.focal_px
    tx, ty, tz = t[front, 0], t[front, 1], t[front, 2]
    colors = asset.colors[front]
    u = f * tx / tz + W / 2.0
    v = f * ty / tz + H / 2.0
    rho = options.point_radius_px
    span = int(np.floor(rho + 0.5))  # |pixel center - point| <= rho bounds offsets
    n = tz.shape[0]

    rgb = np.tile(background, (H, W, 1))
    depth = np.full((H, W), camera.far)
    alpha = np.zeros((H, W))
    if n == 0:
        return RenderedImage(W, H, rgb, depth, alpha)

    base_i = np.floor(u).astype(np.int64)
    base_j = np.floor(v).astype(np.int64)
    offs = np.arange(-span, span + 1)
    oi, oj = np.meshgrid(offs, offs, indexing="xy")
    oi, oj = oi.ravel(), oj.ravel()
    pi = base_i[:, None] + oi[None, :]           # (n, k) candidate columns
    pj = base_j[:, None] + oj[None, :]
    inside = ((pi + 0.5 - u[:, None]) ** 2 + (pj + 0.5 - v[:, None]) ** 2 <= rho ** 2) \
        & (pi >= 0) & (pi < W) & (pj >= 0) & (pj < H)
    pt_idx = np.broadcast_to(np.arange(n)[:, None], pi.shape)[inside]
    flat = (pj[inside] * W + pi[inside])
    z = tz[pt_idx]
    # winner per pixel: smallest depth, ties to the lowest point index
    order = np.lexsort((pt_idx, z, flat))
    flat, z, pt_idx = flat[order], z[order], pt_idx[order]
    first = np.ones(flat.shape[0], dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    sel_flat, sel_z, sel_idx = flat[first], z[first], pt_idx[first]
    rows, cols = sel_flat // W, sel_flat % W
    rgb[rows, cols] = colors[sel_idx]
    depth[rows, cols] = sel_z
    alpha[rows, cols] = 1.0
    return RenderedImage(W, H, rgb, depth, alpha)


def _render_mesh(asset, camera, background):
    W, H = camera.width, camera.height
    background = np.asarray(background, dtype=np.float64)
    verts = np.asarray(asset.mesh_vertices, dtype=np.float64)
    faces = np.asarray(asset.mesh_faces, dtype=np.int64)
    vcol = asset.mesh_colors if asset.mesh_colors is not None else np.full_like(verts, 0.7)
    t = camera.world_to_cam(verts)
    f = camera.focal_px
    with np.errstate(divide="ignore", invalid="ignore"):
        u = f * t[:, 0] / t[:, 2] + W / 2.0
        v = f * t[:, 1] / t[:, 2] + H / 2.0
    z = t[:, 2]
    rgb = np.tile(background, (H, W, 1))
    depth = np.full((H, W), camera.far)
    alpha = np.zeros((H, W))
    zbuf = np.full((H, W), np.inf)
    for tri in faces:
        if np.any(z[tri] <= camera.near):
            continue  # no near-plane clipping at desk scale
        ux, vy, zz = u[tri], v[tri], z[tri]
        c0 = max(int(np.floor(ux.min() - 0.5)), 0)
        c1 = min(int(np.ceil(ux.max() + 0.5)), W)
        r0 = max(int(np.floor(vy.min() - 0.5)), 0)
        r1 = min(int(np.ceil(vy.max() + 0.5)), H)
        if c0 >= c1 or r0 >= r1:
            continue
        area = (ux[1] - ux[0]) * (vy[2] - vy[0]) - (ux[2] - ux[0]) * (vy[1] - vy[0])
        if abs(area) < 1e-12:
            continue
        px = np.arange(c0, c1) + 0.5
        py = (np.arange(r0, r1) + 0.5)[:, None]
        # barycentric via edge functions
        l0 = ((ux[1] - px) * (vy[2] - py) - (ux[2] - px) * (vy[1] - py)) / area
        l1 = ((ux[2] - px) * (vy[0] - py) - (ux[0] - px) * (vy[2] - py)) / area
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        inv_z = l0 / zz[0] + l1 / zz[1] + l2 / zz[2]
        z_px = 1.0 / inv_z
        rr, cc = np.nonzero(inside)
        zi = z_px[rr, cc]
        better = zi < zbuf[r0 + rr, c0 + cc]
        rr, cc, zi = rr[better], cc[better], zi[better]
        if rr.size == 0:
            continue
        li = np.stack([l0[rr, cc], l1[rr, cc], l2[rr, cc]], axis=1) / zz[None, :]
        li = li / li.sum(axis=1, keepdims=True)       # perspective-correct
        zbuf[r0 + rr, c0 + cc] = zi
        depth[r0 + rr, c0 + cc] = zi
        rgb[r0 + rr, c0 + cc] = li @ vcol[tri]
        alpha[r0 + rr, c0 + cc] = 1.0
    return RenderedImage(W, H, rgb, depth, alpha)
