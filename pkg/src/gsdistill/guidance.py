"""Noise schedule, score oracles, and the distillation gradients.

The heavy pre-trained networks are replaced by two pluggable pieces:

* ``ReferenceScoreOracle`` — a deterministic depth-conditioned oracle whose
  noise prediction pulls renders toward the matching reference view:
  eps_hat = (r_t - alpha_t * x_ref) / sigma_t, so the distillation residual
  is (alpha_t / sigma_t) * (x - x_ref).
* ``NoiseSurrogate`` — a small convolutional noise predictor trained online
  (on this module's own autodiff) that plays the adapted-model role in the
  variational residual.

The control residual interpolates between the sampled noise and the
surrogate's prediction:

    residual = eps_hat_oracle - (lora * eps_hat_surrogate + (1 - lora) * eps)

so ``lora = 0`` is exactly the score-distillation path (bit-for-bit) and
``lora = 1`` is the fully variational residual.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, ContractError, TimestepRangeError
from .optim import Adam
from .renderer import (DEFAULT_OPTIONS, RenderGradients, RenderOptions, render,
                       render_backward, render_reference)
from .scene import CameraPose, GaussianScene, PromptEmbedding, ReferenceAsset

_SUR_MAGIC = b"GSUR"


# ---------------------------------------------------------------------------
# schedule


class NoiseSchedule:
    """Variance-preserving cosine schedule: alpha_t^2 + sigma_t^2 = 1."""

    def __init__(self, T: int = 1000, s: float = 0.008,
                 t_min_frac: float = 0.02, t_max_frac: float = 0.98):
        if T < 2:
            raise ConfigError(f"schedule needs T >= 2, got {T}")
        if not 0.0 <= t_min_frac < t_max_frac <= 1.0:
            raise ConfigError("timestep sampling range must satisfy "
                              f"0 <= min < max <= 1, got [{t_min_frac}, {t_max_frac}]")
        self.T = T
        t = np.arange(T + 1, dtype=np.float64)
        f = np.cos((t / T + s) / (1.0 + s) * np.pi / 2.0) ** 2
        alpha_bar = f / f[0]
        self.alphas = np.sqrt(alpha_bar)
        self.sigmas = np.sqrt(1.0 - alpha_bar)
        self.t_min = int(np.ceil(t_min_frac * T))
        self.t_max = int(np.floor(t_max_frac * T))

    def _check(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.T:
            raise TimestepRangeError(f"timestep {t} outside [0, {self.T}]")
        return t

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check(t)])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[self._check(t)])

    def omega(self, t: int) -> float:
        return float(self.sigmas[self._check(t)] ** 2)

    def omega_p(self, t: int) -> float:
        return self.omega(t)

    def check_sampling_range(self, t: int) -> int:
        t = self._check(t)
        if not self.t_min <= t <= self.t_max:
            raise TimestepRangeError(
                f"timestep {t} outside the sampling range "
                f"[{self.t_min}, {self.t_max}] (sigma_0 = 0 is excluded)")
        return t

    def sample_t(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.t_min, self.t_max + 1))


@dataclass
class DiffusionSample:
    x: np.ndarray
    eps: np.ndarray
    t: int
    r_t: np.ndarray

    @classmethod
    def from_clean(cls, x: np.ndarray, eps: np.ndarray, t: int,
                   schedule: NoiseSchedule) -> "DiffusionSample":
        if x.shape != eps.shape:
            raise ContractError(f"noise shape {eps.shape} != image shape {x.shape}")
        return cls(x, eps, t, schedule.alpha(t) * x + schedule.sigma(t) * eps)


# ---------------------------------------------------------------------------
# oracles


@dataclass
class DepthCondition:
    """Depth conditioning signal plus the camera it was rendered from.
    ``reference_rgb`` caches the matching reference view when available so
    oracles need not re-render it."""

    camera: CameraPose
    depth: np.ndarray
    reference_rgb: Optional[np.ndarray] = None

    def normalized_depth(self) -> np.ndarray:
        c = self.camera
        return np.clip((self.depth - c.near) / (c.far - c.near), 0.0, 1.0)


class ScoreOracle:
    """Deterministic map (noisy image, timestep, condition, prompt) -> noise."""

    def predict(self, r_t: np.ndarray, t: int, condition: Optional[DepthCondition],
                y: PromptEmbedding) -> np.ndarray:
        raise NotImplementedError


class ReferenceScoreOracle(ScoreOracle):
    """Depth-conditioned oracle anchored to reference-asset views."""

    def __init__(self, asset: ReferenceAsset, schedule: NoiseSchedule,
                 background=(0.0, 0.0, 0.0), options: RenderOptions = DEFAULT_OPTIONS):
        self.asset = asset
        self.schedule = schedule
        self.background = np.asarray(background, dtype=np.float64)
        self.options = options

    def make_condition(self, camera: CameraPose) -> DepthCondition:
        ref = render_reference(self.asset, camera, self.background, self.options)
        return DepthCondition(camera, ref.depth, ref.rgb)

    def predict(self, r_t, t, condition, y):
        if condition is None:
            raise ContractError("reference oracle requires a depth condition")
        t = self.schedule.check_sampling_range(t)
        if condition.reference_rgb is not None:
            x_ref = condition.reference_rgb
        else:
            x_ref = render_reference(self.asset, condition.camera,
                                     self.background, self.options).rgb
        a, s = self.schedule.alpha(t), self.schedule.sigma(t)
        return (r_t - a * x_ref) / s


def reference_score_oracle(asset: ReferenceAsset, schedule: NoiseSchedule,
                           background=(0.0, 0.0, 0.0),
                           options: RenderOptions = DEFAULT_OPTIONS) -> ReferenceScoreOracle:
    return ReferenceScoreOracle(asset, schedule, background, options)


# ---------------------------------------------------------------------------
# noise surrogate: a 3-layer conv net on a hand-rolled autodiff


_OFFSETS = [(di, dj) for di in range(3) for dj in range(3)]


def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (C*9, H*W) patches for a 3x3 same-padding convolution."""
    c, h, w = x.shape
    pad = np.zeros((c, h + 2, w + 2), dtype=x.dtype)
    pad[:, 1:h + 1, 1:w + 1] = x
    cols = np.empty((c, 9, h, w), dtype=x.dtype)
    for k, (di, dj) in enumerate(_OFFSETS):
        cols[:, k] = pad[:, di:di + h, dj:dj + w]
    return cols.reshape(c * 9, h * w)


def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
    c, h, w = shape
    dcols = dcols.reshape(c, 9, h, w)
    dpad = np.zeros((c, h + 2, w + 2), dtype=dcols.dtype)
    for k, (di, dj) in enumerate(_OFFSETS):
        dpad[:, di:di + h, dj:dj + w] += dcols[:, k]
    return dpad[:, 1:h + 1, 1:w + 1]


class _Conv3x3:
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 dtype=np.float32):
        fan_in = c_in * 9
        self.c_in, self.c_out = c_in, c_out
        self.dtype = np.dtype(dtype)
        self.weight = rng.standard_normal((c_out, fan_in)) / np.sqrt(fan_in)
        self.bias = np.zeros(c_out)

    def forward(self, x: np.ndarray):
        cols = _im2col(x)
        h, w = x.shape[1:]
        out = (self.weight.astype(self.dtype) @ cols
               + self.bias.astype(self.dtype)[:, None]).reshape(self.c_out, h, w)
        return out, (cols, x.shape)

    def backward(self, dout: np.ndarray, cache, need_dx: bool = True):
        cols, xshape = cache
        d2 = dout.reshape(self.c_out, -1)
        dw = d2 @ cols.T
        db = d2.sum(axis=1)
        dx = _col2im(self.weight.astype(self.dtype).T @ d2, xshape) if need_dx else None
        return dx, dw, db


def timestep_embedding(t: int, T: int) -> np.ndarray:
    """4-dim sinusoidal embedding of the normalized timestep."""
    tau = t / T
    return np.array([np.sin(np.pi * tau), np.cos(np.pi * tau),
                     np.sin(2.0 * np.pi * tau), np.cos(2.0 * np.pi * tau)])


class NoiseSurrogate(ScoreOracle):
    """Trainable conv predictor of the injected noise.

    Input: channel-stacked (r_t rgb, normalized depth, 4-dim timestep
    embedding broadcast over pixels) = 8 channels.  Two hidden tanh layers of
    width 16, linear 3-channel output.  All gradients are computed by this
    class's own layer-by-layer adjoints; training uses its own Adam state.
    """

    HIDDEN = 16
    IN_CHANNELS = 8

    def __init__(self, schedule: NoiseSchedule, rng: np.random.Generator,
                 learning_rate: float = 1e-3, dtype=np.float32):
        self.schedule = schedule
        self.dtype = np.dtype(dtype)
        self.layers = [_Conv3x3(self.IN_CHANNELS, self.HIDDEN, rng, dtype),
                       _Conv3x3(self.HIDDEN, self.HIDDEN, rng, dtype),
                       _Conv3x3(self.HIDDEN, 3, rng, dtype)]
        self.opt = Adam({"surrogate": learning_rate})
        self.train_steps = 0

    @property
    def parameter_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def _inputs(self, r_t: np.ndarray, t: int, condition: Optional[DepthCondition]):
        h, w = r_t.shape[:2]
        chans = [np.moveaxis(r_t, 2, 0)]
        if condition is not None:
            depth = condition.normalized_depth()
        else:
            depth = np.zeros((h, w))
        chans.append(depth[None, :, :])
        emb = timestep_embedding(t, self.schedule.T)
        chans.append(np.broadcast_to(emb[:, None, None], (4, h, w)))
        return np.concatenate(chans, axis=0).astype(self.dtype)

    def _forward(self, x: np.ndarray):
        caches = []
        for i, layer in enumerate(self.layers):
            x, cache = layer.forward(x)
            if i < len(self.layers) - 1:
                x = np.tanh(x)
                caches.append((cache, x))   # keep activation for tanh adjoint
            else:
                caches.append((cache, None))
        return x, caches

    def predict(self, r_t, t, condition, y):
        out, _ = self._forward(self._inputs(np.asarray(r_t, dtype=np.float64),
                                            t, condition))
        return np.moveaxis(out, 0, 2).astype(np.float64)

    def _flat_params(self):
        flat = np.concatenate([np.concatenate([l.weight.ravel(), l.bias])
                               for l in self.layers])
        return flat

    def _load_flat(self, flat: np.ndarray):
        off = 0
        for l in self.layers:
            n = l.weight.size
            l.weight = flat[off:off + n].reshape(l.weight.shape).copy()
            off += n
            l.bias = flat[off:off + l.bias.size].copy()
            off += l.bias.size
        if off != flat.size:
            raise ConfigError("surrogate weight blob has wrong parameter count")

    def train_step(self, batch: Sequence[Tuple[np.ndarray, Optional[DepthCondition],
                                               PromptEmbedding]],
                   rng: np.random.Generator) -> float:
        """One Adam step on the mean per-pixel squared noise-prediction error
        (t and eps drawn fresh per element); returns the pre-step loss."""
        if len(batch) == 0:
            raise ContractError("surrogate training batch is empty")
        grads = [  # (dw, db) accumulators per layer
            (np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in self.layers]
        total = 0.0
        for x, condition, _y in batch:
            x = np.asarray(x, dtype=np.float64)
            t = self.schedule.sample_t(rng)
            eps = rng.standard_normal(x.shape)
            r_t = self.schedule.alpha(t) * x + self.schedule.sigma(t) * eps
            inp = self._inputs(r_t, t, condition)
            out, caches = self._forward(inp)
            diff = out - np.moveaxis(eps, 2, 0).astype(self.dtype)
            total += float(np.mean(diff.astype(np.float64) ** 2))
            dout = (2.0 / (diff.size * len(batch))) * diff
            for i in range(len(self.layers) - 1, -1, -1):
                cache, act = caches[i]
                if act is not None:
                    dout = dout * (1.0 - act ** 2)
                dout, dw, db = self.layers[i].backward(dout, cache, need_dx=i > 0)
                grads[i][0][...] += dw
                grads[i][1][...] += db
        flat_grad = np.concatenate([np.concatenate([dw.ravel(), db])
                                    for dw, db in grads])
        params = {"surrogate": self._flat_params()}
        self.opt.step(params, {"surrogate": flat_grad})
        self._load_flat(params["surrogate"])
        self.train_steps += 1
        return total / len(batch)

    # -- checkpointing ------------------------------------------------------

    def serialize(self) -> bytes:
        dims = []
        for l in self.layers:
            dims.extend([l.c_out, l.c_in])
        head = struct.pack("<4sIQ", _SUR_MAGIC, len(self.layers), self.train_steps)
        head += struct.pack(f"<{len(dims)}I", *dims)
        flat = self._flat_params()
        body = struct.pack("<Q", flat.size) + flat.astype("<f8").tobytes()
        return head + body + self.opt.serialize()

    def load(self, blob: bytes) -> None:
        if blob[:4] != _SUR_MAGIC:
            raise ConfigError("not a surrogate checkpoint blob")
        _m, n_layers, steps = struct.unpack_from("<4sIQ", blob, 0)
        off = 16
        dims = struct.unpack_from(f"<{2 * n_layers}I", blob, off)
        off += 8 * n_layers
        expect = []
        for l in self.layers:
            expect.extend([l.c_out, l.c_in])
        if list(dims) != expect:
            raise ConfigError(f"surrogate layer dims {list(dims)} do not match "
                              f"this architecture {expect}")
        (count,) = struct.unpack_from("<Q", blob, off)
        off += 8
        flat = np.frombuffer(blob, "<f8", count, off).copy()
        off += 8 * count
        self._load_flat(flat)
        self.train_steps = steps
        self.opt.load(blob[off:])


def surrogate_train_step(surrogate: NoiseSurrogate, batch, schedule: NoiseSchedule,
                         rng: np.random.Generator) -> float:
    if schedule is not surrogate.schedule:
        raise ContractError("surrogate was built for a different noise schedule")
    return surrogate.train_step(batch, rng)


# ---------------------------------------------------------------------------
# distillation gradients


@dataclass
class GuidanceConfig:
    lambda_p: float = 1.0
    lambda_m: float = 100.0
    lora_max: float = 0.75
    lora_ramp_steps: int = 5000
    t_min_frac: float = 0.02
    t_max_frac: float = 0.98
    guidance_scale: float = 1.0
    oracle: str = "reference"

    def __post_init__(self):
        if self.lambda_p < 0 or self.lambda_m < 0:
            raise ConfigError("lambda_p and lambda_m must be >= 0")
        if not 0.0 <= self.lora_max <= 0.75:
            raise ConfigError(f"lora_max must lie in [0, 0.75], got {self.lora_max}")
        if self.lora_ramp_steps < 1:
            raise ConfigError("lora_ramp_steps must be >= 1")


def lora_lambda(step: int, ramp_steps: int = 5000, max_value: float = 0.75) -> float:
    """Half-cosine ramp 0 -> max_value over ramp_steps, constant after."""
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    frac = min(step, ramp_steps) / ramp_steps
    return max_value * (1.0 - np.cos(np.pi * frac)) / 2.0


def score_pixel_gradient(x: np.ndarray, oracle: ScoreOracle,
                         schedule: NoiseSchedule, y: PromptEmbedding,
                         rng: np.random.Generator,
                         condition: Optional[DepthCondition] = None,
                         surrogate: Optional[NoiseSurrogate] = None,
                         lora: float = 0.0,
                         guidance_scale: float = 1.0):
    """Shared distillation core: draw (t, eps), form r_t, and return the
    omega(t)-weighted pixel-space gradient.  ``lora = 0`` never consults the
    surrogate, which keeps the plain and variational paths bit-identical
    under the same rng stream."""
    t = schedule.sample_t(rng)
    eps = rng.standard_normal(x.shape)
    sample = DiffusionSample.from_clean(x, eps, t, schedule)
    eps_hat = oracle.predict(sample.r_t, t, condition, y)
    if lora == 0.0:
        anchor = eps
    else:
        if surrogate is None:
            raise ContractError("lora > 0 requires a noise surrogate")
        anchor = lora * surrogate.predict(sample.r_t, t, condition, y) \
            + (1.0 - lora) * eps
    grad = guidance_scale * schedule.omega(t) * (eps_hat - anchor)
    return grad, t


def sds_gradient(scene: GaussianScene, camera: CameraPose, oracle: ScoreOracle,
                 schedule: NoiseSchedule, y: PromptEmbedding,
                 rng: np.random.Generator,
                 condition: Optional[DepthCondition] = None,
                 background=(0.0, 0.0, 0.0),
                 options: RenderOptions = DEFAULT_OPTIONS,
                 guidance_scale: float = 1.0) -> RenderGradients:
    """Score-distillation gradient: residual eps_hat - eps contracted through
    the render adjoint."""
    img = render(scene, camera, background, options)
    pixel_grad, _t = score_pixel_gradient(img.rgb, oracle, schedule, y, rng,
                                          condition=condition,
                                          guidance_scale=guidance_scale)
    return render_backward(scene, camera, background, pixel_grad, options,
                           accumulate_viewspace=False)


def vsd_control_gradient(scene: GaussianScene, camera: CameraPose,
                         asset: ReferenceAsset, oracle: ReferenceScoreOracle,
                         surrogate: Optional[NoiseSurrogate],
                         schedule: NoiseSchedule, y: PromptEmbedding,
                         lora: float, rng: np.random.Generator,
                         background=(0.0, 0.0, 0.0),
                         options: RenderOptions = DEFAULT_OPTIONS,
                         guidance_scale: float = 1.0) -> RenderGradients:
    """Depth-conditioned control gradient: the oracle-vs-anchor residual
    (anchor interpolating noise -> surrogate with ``lora``) contracted through
    the render adjoint."""
    condition = oracle.make_condition(camera)
    img = render(scene, camera, background, options)
    pixel_grad, _t = score_pixel_gradient(img.rgb, oracle, schedule, y, rng,
                                          condition=condition, surrogate=surrogate,
                                          lora=lora, guidance_scale=guidance_scale)
    return render_backward(scene, camera, background, pixel_grad, options,
                           accumulate_viewspace=False)


# ---------------------------------------------------------------------------
# point-cloud prior


def pointcloud_residual(means: np.ndarray, t: int, eps_p: np.ndarray,
                        tree: cKDTree, points: np.ndarray,
                        schedule: NoiseSchedule) -> np.ndarray:
    """(eps_hat_psi - eps_p) for noisy positions p_t, which reduces to
    (alpha_t / sigma_t) * (p - NN(p_t))."""
    a, s = schedule.alpha(t), schedule.sigma(t)
    if s == 0.0:
        raise TimestepRangeError("sigma_t = 0: timestep outside the sampling range")
    p_t = a * means + s * eps_p
    _d, nn = tree.query(p_t, k=1)
    return (a / s) * (means - points[nn])


def pointcloud_prior_gradient(scene: GaussianScene, asset: ReferenceAsset,
                              schedule: NoiseSchedule, rng: np.random.Generator,
                              lambda_p: float = 1.0,
                              tree: Optional[cKDTree] = None) -> np.ndarray:
    """Gradient on Gaussian means pulling them toward the reference cloud:
    lambda_p * omega_p(t) * (alpha_t / sigma_t) * (p - NN(p_t))."""
    if asset.points.shape[0] == 0:
        raise ConfigError("point-cloud prior needs an asset with >= 1 point")
    if tree is None:
        tree = cKDTree(asset.points)
    t = schedule.sample_t(rng)
    eps_p = rng.standard_normal(scene.means.shape)
    resid = pointcloud_residual(scene.means, t, eps_p, tree, asset.points, schedule)
    return lambda_p * schedule.omega_p(t) * resid
