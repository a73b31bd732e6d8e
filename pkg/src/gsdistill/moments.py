"""Geometric image moments, Hu invariants, and the multi-scale moment
feature stack with its shape-consistency loss.

Coordinate convention: a W x H image lives on [0, 1)^2 with pixel centers at
x = (col + 0.5) / W, y = (row + 0.5) / H and area weight 1 / (W * H), so

    m_pq = sum_pixels f(x, y) * x^p * y^q / (W * H)

is the Riemann sum of the continuous moment integral.  Central moments are
taken about the centroid and eta_pq = mu_pq / m_00^(1 + (p+q)/2) removes
overall scale/brightness.

The feature stack is the fixed-basis stand-in for a learned shape
descriptor: an L-level average pyramid of the luminance image; per level one
global eta vector plus a g x g grid of windows with 50% overlap, each
contributing its own eta vector (window-local coordinates).  Windows whose
mass falls below ``DEGENERATE_MASS`` emit zeros.  ``moment_loss`` is the L2
norm of the stack difference with an exact analytic gradient back to the
render's rgb pixels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DegenerateImageError

MAX_ORDER = 8
DEGENERATE_MASS = 1e-8
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
_MAGIC = b"GMFS"


def moment_index_pairs(order: int):
    """Canonical (p, q) ordering of all entries with p + q <= order."""
    return [(p, q) for p in range(order + 1) for q in range(order + 1 - p)]


@dataclass
class MomentVector:
    order: int
    values: np.ndarray  # flat, canonical (p, q) ordering

    def __post_init__(self):
        expect = (self.order + 1) * (self.order + 2) // 2
        if self.values.shape != (expect,):
            raise ContractError(
                f"moment vector for order {self.order} needs {expect} entries, "
                f"got shape {self.values.shape}")

    def get(self, p: int, q: int) -> float:
        if p < 0 or q < 0 or p + q > self.order:
            raise ContractError(f"moment index ({p},{q}) out of range for order {self.order}")
        offset = sum(self.order + 1 - k for k in range(p)) + q
        return float(self.values[offset])


def _as_gray(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 3:
        arr = arr @ LUMA_WEIGHTS
    if arr.ndim != 2:
        raise ContractError(f"expected a grayscale or rgb image, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ContractError("image contains non-finite values")
    return arr


def _check_order(order: int):
    if not 0 <= order <= MAX_ORDER:
        raise ConfigError(f"moment order must be in [0, {MAX_ORDER}], got {order}")


def _coord_powers(n: int, scale: int, order: int) -> np.ndarray:
    """(order+1, n) array of ((i + 0.5) / scale)^p."""
    x = (np.arange(n) + 0.5) / scale
    return np.vander(x, order + 1, increasing=True).T


def _raw_table(gray: np.ndarray, order: int) -> np.ndarray:
    """Full (order+1, order+1) table of m_pq (entries with p+q > order included;
    they cost nothing and simplify the central-moment binomial sums)."""
    h, w = gray.shape
    xp = _coord_powers(w, w, order)   # (P+1, w)
    yq = _coord_powers(h, h, order)   # (P+1, h)
    return np.einsum("ph,qh->pq", xp @ gray.T, yq) / (w * h)


def _flatten(table: np.ndarray, order: int) -> np.ndarray:
    return np.array([table[p, q] for p, q in moment_index_pairs(order)])


def raw_moments(image, order: int) -> MomentVector:
    _check_order(order)
    gray = _as_gray(image)
    return MomentVector(order, _flatten(_raw_table(gray, order), order))


def _central_table(gray: np.ndarray, order: int):
    h, w = gray.shape
    m = _raw_table(gray, order)
    if m[0, 0] <= 0.0:
        raise DegenerateImageError("cannot take central moments of a blank image (m_00 <= 0)")
    xbar = m[1, 0] / m[0, 0]
    ybar = m[0, 1] / m[0, 0]
    xs = (np.arange(w) + 0.5) / w - xbar
    ys = (np.arange(h) + 0.5) / h - ybar
    xcp = np.vander(xs, order + 1, increasing=True).T
    ycq = np.vander(ys, order + 1, increasing=True).T
    mu = np.einsum("ph,qh->pq", xcp @ gray.T, ycq) / (w * h)
    return mu, m, xbar, ybar


def central_moments(image, order: int) -> MomentVector:
    _check_order(order)
    gray = _as_gray(image)
    mu, _m, _xb, _yb = _central_table(gray, order)
    return MomentVector(order, _flatten(mu, order))


def _eta_table(gray: np.ndarray, order: int):
    mu, m, xbar, ybar = _central_table(gray, order)
    p = np.arange(order + 1)
    gamma = 1.0 + (p[:, None] + p[None, :]) / 2.0
    eta = mu / m[0, 0] ** gamma
    return eta, mu, m, gamma, xbar, ybar


def scale_normalized_moments(image, order: int) -> MomentVector:
    _check_order(order)
    gray = _as_gray(image)
    eta = _eta_table(gray, order)[0]
    return MomentVector(order, _flatten(eta, order))


def hu_from_eta(eta) -> np.ndarray:
    """Hu's seven invariants from anything exposing eta[p, q] up to order 3."""
    n20, n02, n11 = eta[2, 0], eta[0, 2], eta[1, 1]
    n30, n03, n21, n12 = eta[3, 0], eta[0, 3], eta[2, 1], eta[1, 2]
    a = n30 + n12
    b = n21 + n03
    c = n30 - 3 * n12
    d = 3 * n21 - n03
    return np.array([
        n20 + n02,
        (n20 - n02) ** 2 + 4 * n11 ** 2,
        c ** 2 + d ** 2,
        a ** 2 + b ** 2,
        c * a * (a ** 2 - 3 * b ** 2) + d * b * (3 * a ** 2 - b ** 2),
        (n20 - n02) * (a ** 2 - b ** 2) + 4 * n11 * a * b,
        d * a * (a ** 2 - 3 * b ** 2) - c * b * (3 * a ** 2 - b ** 2),
    ])


def hu_invariants(image) -> np.ndarray:
    gray = _as_gray(image)
    eta = _eta_table(gray, 3)[0]
    return hu_from_eta(eta)


# ---------------------------------------------------------------------------
# feature stack


@dataclass
class StackConfig:
    levels: int = 3
    order: int = 4
    grid: int = 4

    def __post_init__(self):
        if self.levels < 1 or self.grid < 1:
            raise ConfigError("pyramid levels and window grid must be >= 1")
        _check_order(self.order)

    @property
    def base_len(self) -> int:
        return (self.order + 1) * (self.order + 2) // 2

    @property
    def windows_per_level(self) -> int:
        return self.grid * self.grid + 1  # one global window + the overlap grid


DEFAULT_STACK = StackConfig()


@dataclass
class MomentFeatureStack:
    config: StackConfig
    features: np.ndarray  # (levels, windows_per_level, base_len)

    @property
    def vector(self) -> np.ndarray:
        return self.features.reshape(-1)

    def level_global(self, level: int) -> MomentVector:
        return MomentVector(self.config.order, self.features[level, 0].copy())

    def window_features(self, level: int) -> np.ndarray:
        """(grid*grid, base_len) eta vectors of the overlap windows."""
        return self.features[level, 1:].copy()

    def global_hu(self, level: int) -> np.ndarray:
        """Hu invariants recomposed from a level's global eta vector."""
        mv = self.level_global(level)
        eta = np.zeros((4, 4))
        for p in range(4):
            for q in range(4 - p):
                eta[p, q] = mv.get(p, q)
        return hu_from_eta(eta)

    def serialize(self) -> bytes:
        cfg = self.config
        head = struct.pack("<4sIIII", _MAGIC, cfg.levels, cfg.order, cfg.grid,
                           self.vector.size)
        return head + self.vector.astype("<f8").tobytes()

    @classmethod
    def deserialize(cls, blob: bytes) -> "MomentFeatureStack":
        if len(blob) < 20 or blob[:4] != _MAGIC:
            raise ConfigError("not a moment feature stack blob")
        _magic, levels, order, grid, count = struct.unpack("<4sIIII", blob[:20])
        cfg = StackConfig(levels=levels, order=order, grid=grid)
        expect = levels * cfg.windows_per_level * cfg.base_len
        if count != expect or len(blob) != 20 + 8 * count:
            raise ConfigError("moment feature stack blob has inconsistent length")
        vec = np.frombuffer(blob[20:], dtype="<f8").astype(np.float64)
        return cls(cfg, vec.reshape(levels, cfg.windows_per_level, cfg.base_len))


def _window_spans(size: int, grid: int):
    """Start offsets and width for `grid` windows with 50% overlap."""
    w = int(round(2.0 * size / (grid + 1)))
    if w < 1 or size < w:
        raise ConfigError(f"image extent {size} too small for a {grid}-window grid")
    if grid == 1:
        return [0], size
    starts = np.rint(np.linspace(0, size - w, grid)).astype(int)
    return list(starts), w


def _window_boxes(h: int, w: int, grid: int):
    """All windows of a level: the global box first, then the overlap grid in
    row-major order."""
    boxes = [(0, h, 0, w)]
    rows, wh = _window_spans(h, grid)
    cols, ww = _window_spans(w, grid)
    for r in rows:
        for c in cols:
            boxes.append((r, r + wh, c, c + ww))
    return boxes


def _pool2(img: np.ndarray) -> np.ndarray:
    """2x2 average pooling; odd trailing row/column is trimmed."""
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ConfigError("image too small to pool")
    v = img[:2 * h2, :2 * w2].reshape(h2, 2, w2, 2)
    return v.mean(axis=(1, 3))


def _eta_window_forward(f: np.ndarray, order: int):
    """Eta vector of one window plus the cache needed for its adjoint."""
    h, w = f.shape
    aw = 1.0 / (w * h)
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    m00 = float(f.sum() * aw)
    if m00 < DEGENERATE_MASS:
        base = (order + 1) * (order + 2) // 2
        return np.zeros(base), None
    xbar = float((f @ xs).sum() * aw / m00)
    ybar = float((ys @ f).sum() * aw / m00)
    xc = xs - xbar
    yc = ys - ybar
    xcp = np.vander(xc, order + 1, increasing=True).T   # (P+1, w)
    ycq = np.vander(yc, order + 1, increasing=True).T   # (P+1, h)
    mu = np.einsum("ph,qh->pq", xcp @ f.T, ycq) * aw
    p = np.arange(order + 1, dtype=np.float64)
    gamma = 1.0 + (p[:, None] + p[None, :]) / 2.0
    eta = mu / m00 ** gamma
    cache = (f.shape, aw, m00, mu, eta, gamma, xc, yc, xcp, ycq)
    return _flatten(eta, order), cache


def _eta_window_backward(cache, grad_flat: np.ndarray, order: int) -> np.ndarray:
    """Pixel gradient of sum_pq grad_pq * eta_pq for one window."""
    (shape, aw, m00, mu, eta, gamma, xc, yc, xcp, ycq) = cache
    G = np.zeros((order + 1, order + 1))
    for (p, q), g in zip(moment_index_pairs(order), grad_flat):
        G[p, q] = g
    scaled = G / m00 ** gamma                         # dL/dmu_pq (direct part)
    # polynomial term: sum_pq scaled_pq * xc^p * yc^q per pixel
    grad = np.einsum("pq,pw,qh->hw", scaled, xcp, ycq)
    # centroid terms: d mu_pq / d xbar = -p mu_{p-1,q}, d xbar / df = aw*xc/m00
    p_idx = np.arange(order + 1)
    mu_xm = np.zeros_like(mu)
    mu_xm[1:, :] = mu[:-1, :]
    mu_ym = np.zeros_like(mu)
    mu_ym[:, 1:] = mu[:, :-1]
    cx = float(np.sum(scaled * p_idx[:, None] * mu_xm)) / m00
    cy = float(np.sum(scaled * p_idx[None, :] * mu_ym)) / m00
    grad -= cx * xc[None, :] + cy * yc[:, None]
    # mass term: d eta / d m00 = -gamma * eta / m00
    grad -= float(np.sum(G * gamma * eta)) / m00
    return grad * aw


def _flatten_batch(tables: np.ndarray, order: int) -> np.ndarray:
    pairs = moment_index_pairs(order)
    return np.stack([tables[:, p, q] for p, q in pairs], axis=1)


def _eta_batch_forward(F: np.ndarray, order: int):
    """Eta vectors of a batch of equal-sized windows (B, h, w); batched
    counterpart of :func:`_eta_window_forward` with one shared cache."""
    B, h, w = F.shape
    aw = 1.0 / (w * h)
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    m00 = F.sum(axis=(1, 2)) * aw                       # (B,)
    live = m00 >= DEGENERATE_MASS
    m00s = np.where(live, m00, 1.0)
    xbar = (F @ xs).sum(axis=1) * aw / m00s
    ybar = (ys @ F).sum(axis=1) * aw / m00s
    xc = xs[None, :] - xbar[:, None]                    # (B, w)
    yc = ys[None, :] - ybar[:, None]                    # (B, h)
    P = order + 1
    xcp = np.cumprod(np.concatenate(
        [np.ones((B, 1, w)), np.repeat(xc[:, None, :], order, axis=1)], axis=1), axis=1)
    ycq = np.cumprod(np.concatenate(
        [np.ones((B, 1, h)), np.repeat(yc[:, None, :], order, axis=1)], axis=1), axis=1)
    t = xcp @ F.transpose(0, 2, 1)                      # (B, P, h)
    mu = (t @ ycq.transpose(0, 2, 1)) * aw              # (B, P, P)
    p = np.arange(P, dtype=np.float64)
    gamma = 1.0 + (p[:, None] + p[None, :]) / 2.0
    eta = mu / m00s[:, None, None] ** gamma
    eta[~live] = 0.0
    flat = _flatten_batch(eta, order)
    cache = (aw, live, m00s, mu, eta, gamma, xc, yc, xcp, ycq)
    return flat, cache


def _eta_batch_backward(cache, grad_flat: np.ndarray, order: int) -> np.ndarray:
    """Pixel gradients (B, h, w) of sum grad * eta for a window batch."""
    (aw, live, m00, mu, eta, gamma, xc, yc, xcp, ycq) = cache
    B = m00.shape[0]
    P = order + 1
    G = np.zeros((B, P, P))
    for k, (p, q) in enumerate(moment_index_pairs(order)):
        G[:, p, q] = grad_flat[:, k]
    G[~live] = 0.0
    scaled = G / m00[:, None, None] ** gamma
    u = scaled.transpose(0, 2, 1) @ xcp                 # (B, q, w)
    grad = ycq.transpose(0, 2, 1) @ u                   # (B, h, w)
    p_idx = np.arange(P, dtype=np.float64)
    mu_xm = np.zeros_like(mu)
    mu_xm[:, 1:, :] = mu[:, :-1, :]
    mu_ym = np.zeros_like(mu)
    mu_ym[:, :, 1:] = mu[:, :, :-1]
    cx = (scaled * p_idx[None, :, None] * mu_xm).sum(axis=(1, 2)) / m00
    cy = (scaled * p_idx[None, None, :] * mu_ym).sum(axis=(1, 2)) / m00
    grad -= cx[:, None, None] * xc[:, None, :] + cy[:, None, None] * yc[:, :, None]
    grad -= ((G * gamma * eta).sum(axis=(1, 2)) / m00)[:, None, None]
    grad *= aw
    return grad


def _grid_stack(level_img: np.ndarray, boxes) -> np.ndarray:
    """Gather the (equal-sized) overlap windows into one (B, h, w) batch."""
    r0, r1, c0, c1 = boxes[1]
    F = np.empty((len(boxes) - 1, r1 - r0, c1 - c0))
    for i, (a, b, c, d) in enumerate(boxes[1:]):
        F[i] = level_img[a:b, c:d]
    return F


def dgm_features(image, config: StackConfig = DEFAULT_STACK) -> MomentFeatureStack:
    gray = _as_gray(image)
    feats, _levels, _caches, _boxes = _dgm_forward_with_caches(gray, config)
    return MomentFeatureStack(config, feats)


def _dgm_forward_with_caches(gray: np.ndarray, config: StackConfig):
    feats = np.zeros((config.levels, config.windows_per_level, config.base_len))
    levels, caches, boxes_per_level = [], [], []
    level_img = gray
    for lv in range(config.levels):
        if lv > 0:
            level_img = _pool2(level_img)
        levels.append(level_img)
        boxes = _window_boxes(*level_img.shape, config.grid)
        boxes_per_level.append(boxes)
        g_feat, g_cache = _eta_window_forward(level_img, config.order)
        feats[lv, 0] = g_feat
        if len(boxes) > 1:
            F = _grid_stack(level_img, boxes)
            feats[lv, 1:], b_cache = _eta_batch_forward(F, config.order)
        else:
            b_cache = None
        caches.append((g_cache, b_cache))
    return feats, levels, caches, boxes_per_level


def _unpool_into(grad_level: np.ndarray, parent_shape) -> np.ndarray:
    """Adjoint of 2x2 average pooling (trimmed odd edges receive zero)."""
    out = np.zeros(parent_shape)
    h2, w2 = grad_level.shape
    out[:2 * h2, :2 * w2] = np.kron(grad_level, np.full((2, 2), 0.25))
    return out


def moment_loss(render, reference, config: StackConfig = DEFAULT_STACK):
    """L2 norm of the moment-stack difference and its gradient w.r.t. the
    render's rgb pixels."""
    rgb = np.asarray(render.rgb if hasattr(render, "rgb") else render, dtype=np.float64)
    ref_rgb = np.asarray(reference.rgb if hasattr(reference, "rgb") else reference,
                         dtype=np.float64)
    if rgb.shape != ref_rgb.shape:
        raise ContractError(f"image shapes differ: {rgb.shape} vs {ref_rgb.shape}")
    gray = _as_gray(rgb)
    feats, levels, caches, boxes_per_level = _dgm_forward_with_caches(gray, config)
    ref_feats = dgm_features(ref_rgb, config).features
    diff = feats - ref_feats
    loss = float(np.linalg.norm(diff.reshape(-1)))
    grad_rgb = np.zeros_like(rgb)
    if loss == 0.0:
        return loss, grad_rgb
    up = diff / loss  # dL/dfeature

    grad_levels = [np.zeros_like(lv) for lv in levels]
    for lv in range(config.levels):
        g_cache, b_cache = caches[lv]
        if g_cache is not None:
            grad_levels[lv] += _eta_window_backward(g_cache, up[lv, 0], config.order)
        if b_cache is not None:
            gw = _eta_batch_backward(b_cache, up[lv, 1:], config.order)
            for i, (r0, r1, c0, c1) in enumerate(boxes_per_level[lv][1:]):
                grad_levels[lv][r0:r1, c0:c1] += gw[i]
    # collapse the pyramid back to level 0
    grad_gray = grad_levels[-1]
    for lv in range(config.levels - 2, -1, -1):
        grad_gray = grad_levels[lv] + _unpool_into(grad_gray, levels[lv].shape)
    grad_rgb[:] = grad_gray[:, :, None] * LUMA_WEIGHTS[None, None, :]
    return loss, grad_rgb
