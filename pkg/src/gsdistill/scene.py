"""Scene data model: 3D Gaussians, cameras, reference assets, prompts.

Conventions fixed here and relied on everywhere else:
  - world frame is z-up, azimuth 0 along +x, azimuth pi/2 along +y;
  - opacity is stored as a logit, scales as logs, rotations as unnormalized
    quaternions re-normalized on read, so unconstrained gradient steps can
    never violate the parameter constraints;
  - colors are plain per-Gaussian RGB in [0, 1];
  - reference assets are re-centered and scaled to the unit bounding sphere
    when loaded.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .embedding import embed, tokenize
from .errors import ConfigError

# ---------------------------------------------------------------------------
# reparameterization helpers


def sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions (w, x, y, z). Accepts (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def covariance_from(scale: np.ndarray, quat: np.ndarray) -> np.ndarray:
    """Sigma = R diag(scale^2) R^T for unit quaternion(s)."""
    R = quat_to_rotmat(normalize_quat(quat))
    s2 = np.asarray(scale, dtype=np.float64) ** 2
    return np.einsum("...ij,...j,...kj->...ik", R, s2, R)


# ---------------------------------------------------------------------------
# domain types


@dataclass
class Gaussian3D:
    """One Gaussian in constrained (world) parameters."""

    mean: np.ndarray       # (3,)
    scale: np.ndarray      # (3,) positive axis lengths
    rotation: np.ndarray   # (4,) unit quaternion (w, x, y, z)
    opacity: float         # in (0, 1)
    color: np.ndarray      # (3,) rgb in [0, 1]

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if not np.all(self.scale > 0):
            raise ConfigError("Gaussian scale components must be positive")
        if not (0.0 < self.opacity < 1.0):
            raise ConfigError("Gaussian opacity must lie strictly inside (0, 1)")
        n = float(np.linalg.norm(self.rotation))
        if abs(n - 1.0) > 1e-9:
            raise ConfigError(f"quaternion norm {n} != 1")

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from(self.scale, self.rotation)


class GaussianScene:
    """Ordered collection of Gaussians stored as flat parameter arrays.

    Raw storage is in optimization space: means (N,3), log_scales (N,3),
    quats (N,4) unnormalized, logit_opacities (N,), colors (N,3).
    ``grad_accum`` holds the per-Gaussian accumulated view-space positional
    gradient norm used by densification and ``step_counter`` the number of
    steps each Gaussian has accumulated over; both are reset after every
    densification event, and newly inserted Gaussians start both at zero.
    """

    def __init__(self, means, log_scales, quats, logit_opacities, colors,
                 step_counter: Optional[np.ndarray] = None,
                 grad_accum: Optional[np.ndarray] = None):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(log_scales, dtype=np.float64))
        self.quats = np.atleast_2d(np.asarray(quats, dtype=np.float64))
        self.logit_opacities = np.asarray(logit_opacities, dtype=np.float64).reshape(-1)
        self.colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
        n = self.means.shape[0]
        if n < 1:
            raise ConfigError("scene must contain at least one Gaussian")
        if grad_accum is None:
            grad_accum = np.zeros(n, dtype=np.float64)
        self.grad_accum = np.asarray(grad_accum, dtype=np.float64).reshape(-1)
        if step_counter is None:
            step_counter = np.zeros(n, dtype=np.int64)
        self.step_counter = np.broadcast_to(
            np.asarray(step_counter, dtype=np.int64), (n,)).copy()
        shapes = (self.means.shape, self.log_scales.shape, self.quats.shape,
                  self.logit_opacities.shape, self.colors.shape, self.grad_accum.shape)
        if shapes != ((n, 3), (n, 3), (n, 4), (n,), (n, 3), (n,)):
            raise ConfigError(f"inconsistent scene array shapes: {shapes}")

    def __len__(self) -> int:
        return self.means.shape[0]

    # constrained views ----------------------------------------------------

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.logit_opacities)

    @property
    def unit_quats(self) -> np.ndarray:
        return normalize_quat(self.quats)

    @property
    def gaussians(self) -> list[Gaussian3D]:
        return [self[i] for i in range(len(self))]

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            mean=self.means[i].copy(),
            scale=np.exp(self.log_scales[i]),
            rotation=normalize_quat(self.quats[i]),
            opacity=float(sigmoid(self.logit_opacities[i])),
            color=self.colors[i].copy(),
        )

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian3D]) -> "GaussianScene":
        return cls(
            means=np.array([g.mean for g in gaussians]),
            log_scales=np.log([g.scale for g in gaussians]),
            quats=np.array([g.rotation for g in gaussians]),
            logit_opacities=logit([g.opacity for g in gaussians]),
            colors=np.array([g.color for g in gaussians]),
        )

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            self.means.copy(), self.log_scales.copy(), self.quats.copy(),
            self.logit_opacities.copy(), self.colors.copy(),
            step_counter=self.step_counter.copy(),
            grad_accum=self.grad_accum.copy(),
        )

    def reset_grad_accum(self):
        self.grad_accum = np.zeros(len(self), dtype=np.float64)
        self.step_counter = np.zeros(len(self), dtype=np.int64)


@dataclass
class CameraPose:
    """Pinhole look-at camera. Square pixels, vertical field of view."""

    position: np.ndarray   # (3,)
    target: np.ndarray     # (3,) look-at point
    up: np.ndarray         # (3,)
    fov_y: float           # radians
    width: int
    height: int
    near: float = 0.1
    far: float = 100.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if self.near <= 0 or self.far <= self.near:
            raise ConfigError(f"need 0 < near < far, got near={self.near} far={self.far}")
        if self.width < 8 or self.height < 8:
            raise ConfigError("image dimensions must be >= 8 pixels")
        if not (0 < self.fov_y < np.pi):
            raise ConfigError(f"fov_y out of range: {self.fov_y}")
        view = self.target - self.position
        vn = np.linalg.norm(view)
        if vn < 1e-12:
            raise ConfigError("camera position coincides with target")
        cross = np.cross(view / vn, self.up / np.linalg.norm(self.up))
        if np.linalg.norm(cross) < 1e-9:
            raise ConfigError("up vector parallel to view direction")

    @property
    def focal_px(self) -> float:
        return (self.height / 2.0) / np.tan(self.fov_y / 2.0)

    @property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are the camera x/y/z axes.

        Camera z points at the target (depth grows away from the camera),
        image v grows downward.
        """
        z = self.target - self.position
        z = z / np.linalg.norm(z)
        x = np.cross(z, self.up)
        x = x / np.linalg.norm(x)
        y = np.cross(z, x)
        return np.stack([x, y, z])

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(points) - self.position) @ self.rotation.T


@dataclass
class ReferenceAsset:
    """High-fidelity guidance object: colored point cloud, optional mesh."""

    points: np.ndarray                 # (N, 3)
    colors: np.ndarray                 # (N, 3) rgb in [0, 1]
    caption: str = ""
    mesh_vertices: Optional[np.ndarray] = None   # (V, 3)
    mesh_faces: Optional[np.ndarray] = None      # (F, 3) int indices
    mesh_colors: Optional[np.ndarray] = None     # (V, 3)
    bounding_center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bounding_radius: float = 1.0

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.colors = np.atleast_2d(np.asarray(self.colors, dtype=np.float64))
        if self.points.shape[0] < 1:
            raise ConfigError("reference asset needs at least one point")
        if self.colors.shape != self.points.shape:
            raise ConfigError("asset colors must match points")

    @property
    def has_mesh(self) -> bool:
        return self.mesh_vertices is not None and self.mesh_faces is not None

    def compute_bounds(self):
        lo, hi = self.points.min(axis=0), self.points.max(axis=0)
        center = (lo + hi) / 2.0
        radius = float(np.max(np.linalg.norm(self.points - center, axis=1)))
        self.bounding_center = center
        self.bounding_radius = max(radius, 1e-12)

    def normalized(self) -> "ReferenceAsset":
        """Re-center on the bounding-sphere center and scale to radius 1."""
        self.compute_bounds()
        scale = 1.0 / self.bounding_radius
        points = (self.points - self.bounding_center) * scale
        mv = None
        if self.mesh_vertices is not None:
            mv = (np.asarray(self.mesh_vertices, dtype=np.float64) - self.bounding_center) * scale
        out = ReferenceAsset(
            points=points, colors=self.colors.copy(), caption=self.caption,
            mesh_vertices=mv, mesh_faces=self.mesh_faces, mesh_colors=self.mesh_colors,
        )
        out.compute_bounds()
        return out


@dataclass
class PromptEmbedding:
    """Token multiset plus an L2-normalized embedding vector."""

    text: str
    tokens: Counter
    vector: np.ndarray

    @classmethod
    def from_text(cls, text: str) -> "PromptEmbedding":
        return cls(text=text, tokens=Counter(tokenize(text)), vector=embed(text))


# ---------------------------------------------------------------------------
# operations


def sample_camera(rng: np.random.Generator,
                  elevation_range: tuple[float, float],
                  azimuth_range: tuple[float, float],
                  radius_range: tuple[float, float],
                  fov_y: float = np.deg2rad(40.0),
                  width: int = 64, height: int = 64,
                  near: float = 0.1, far: float = 100.0) -> CameraPose:
    """Sample a camera looking at the origin, uniform in each given range.

    Angles in radians; elevation measured from the horizontal plane, must
    stay strictly inside (-pi/2, pi/2) so the z-up vector is never parallel
    to the view direction.
    """
    for name, (lo, hi) in (("elevation", elevation_range),
                           ("azimuth", azimuth_range),
                           ("radius", radius_range)):
        if hi < lo:
            raise ConfigError(f"inverted {name} range: [{lo}, {hi}]")
    if radius_range[0] <= 0:
        raise ConfigError("radius range must be positive")
    if elevation_range[0] <= -np.pi / 2 or elevation_range[1] >= np.pi / 2:
        raise ConfigError("elevation range must stay inside (-pi/2, pi/2)")
    azimuth = float(rng.uniform(*azimuth_range))
    elevation = float(rng.uniform(*elevation_range))
    radius = float(rng.uniform(*radius_range))
    return camera_from_angles(azimuth, elevation, radius, fov_y=fov_y,
                              width=width, height=height, near=near, far=far)


def camera_from_angles(azimuth: float, elevation: float, radius: float,
                       fov_y: float = np.deg2rad(40.0),
                       width: int = 64, height: int = 64,
                       near: float = 0.1, far: float = 100.0) -> CameraPose:
    """Camera at the given spherical angles (radians), looking at the origin."""
    position = radius * np.array([
        np.cos(elevation) * np.cos(azimuth),
        np.cos(elevation) * np.sin(azimuth),
        np.sin(elevation),
    ])
    return CameraPose(position=position, target=np.zeros(3), up=np.array([0.0, 0.0, 1.0]),
                      fov_y=fov_y, width=width, height=height, near=near, far=far)


def camera_azimuth_elevation(camera: CameraPose) -> tuple[float, float]:
    """Azimuth/elevation of the camera position relative to its target."""
    d = camera.position - camera.target
    azimuth = float(np.arctan2(d[1], d[0]))
    elevation = float(np.arctan2(d[2], np.hypot(d[0], d[1])))
    return azimuth, elevation


def view_direction_tag(camera: CameraPose) -> str:
    """Quadrant tag: front (azimuth in (-45, 45] deg), side, back; elevation
    above 60 deg wins as overhead."""
    azimuth, elevation = camera_azimuth_elevation(camera)
    if elevation > np.deg2rad(60.0):
        return "overhead view"
    az = np.rad2deg(azimuth)
    az = ((az + 180.0) % 360.0) - 180.0  # to (-180, 180]
    if az == -180.0:
        az = 180.0
    if -45.0 < az <= 45.0:
        return "front view"
    if 45.0 < az <= 135.0 or -135.0 < az <= -45.0:
        return "side view"
    return "back view"


def view_prompt(prompt: str, camera: CameraPose) -> PromptEmbedding:
    """Append the view-direction tag and re-embed the prompt."""
    if not prompt.strip():
        raise ConfigError("prompt must be non-empty")
    return PromptEmbedding.from_text(f"{prompt}, {view_direction_tag(camera)}")


def farthest_point_sample(points: np.ndarray, n: int) -> np.ndarray:
    """Greedy farthest-point indices; seeded at the point farthest from the
    centroid, ties broken by lowest index."""
    points = np.atleast_2d(points)
    count = points.shape[0]
    if n < 1:
        raise ConfigError("sample size must be >= 1")
    if n > count:
        raise ConfigError(f"cannot sample {n} from {count} points")
    centroid = points.mean(axis=0)
    first = int(np.argmax(np.sum((points - centroid) ** 2, axis=1)))
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = first
    dist2 = np.sum((points - points[first]) ** 2, axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(dist2))
        chosen[i] = nxt
        dist2 = np.minimum(dist2, np.sum((points - points[nxt]) ** 2, axis=1))
    return chosen


def init_from_pointcloud(asset: ReferenceAsset, n: int,
                         opacity: float = 0.1) -> GaussianScene:
    """Initialize n Gaussians from an asset: farthest-point subsampled means,
    a shared isotropic scale equal to the mean nearest-neighbor distance of
    the selected means, colors copied from the matched points."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    idx = farthest_point_sample(asset.points, n)
    means = asset.points[idx]
    colors = np.clip(asset.colors[idx], 0.0, 1.0)
    if n >= 2:
        from scipy.spatial import cKDTree

        dists, _ = cKDTree(means).query(means, k=2)
        scale = float(np.mean(dists[:, 1]))
    else:
        scale = 0.1 * asset.bounding_radius
    scale = max(scale, 1e-6)
    return GaussianScene(
        means=means,
        log_scales=np.full((n, 3), np.log(scale)),
        quats=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
        logit_opacities=np.full(n, float(logit(opacity))),
        colors=colors,
    )
