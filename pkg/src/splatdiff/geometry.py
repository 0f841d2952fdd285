"""Core domain types: point clouds, pinhole cameras and the optimization config."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class EmptyCloudError(ValueError):
    pass


class BehindCameraError(ValueError):
    pass


@dataclass
class PointCloud:
    """Oriented point set rendered as elliptical splats.

    Attributes
    ----------
    positions : (N, 3) float array
    normals : (N, 3) float array of unit vectors
    albedo : (N, 3) float array in [0, 1]
    splat_sigma : (N,) tangent-plane Gaussian standard deviation, > 0
    occlusion_count : (N,) int array, number of views in which the point was occluded
    """

    positions: np.ndarray
    normals: np.ndarray
    albedo: np.ndarray | None = None
    splat_sigma: np.ndarray | None = None
    occlusion_count: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.albedo is None:
            self.albedo = np.ones((n, 3))
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(-1, 3)
        if self.splat_sigma is None:
            self.splat_sigma = estimate_splat_sigma(self.positions)
        self.splat_sigma = np.broadcast_to(
            np.asarray(self.splat_sigma, dtype=np.float64), (n,)).copy()
        if self.occlusion_count is None:
            self.occlusion_count = np.zeros(n, dtype=np.int64)
        self.occlusion_count = np.asarray(self.occlusion_count, dtype=np.int64).reshape(-1)
        lengths = {len(self.normals), len(self.albedo), len(self.splat_sigma),
                   len(self.occlusion_count)}
        if lengths != {n}:
            raise ValueError("point cloud fields have mismatched lengths")
        if n and not np.all(self.splat_sigma > 0):
            raise ValueError("splat_sigma must be strictly positive")

    def __len__(self):
        return len(self.positions)

    def copy(self) -> "PointCloud":
        return PointCloud(self.positions.copy(), self.normals.copy(), self.albedo.copy(),
                          self.splat_sigma.copy(), self.occlusion_count.copy())

    def with_positions(self, positions) -> "PointCloud":
        out = self.copy()
        out.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3).copy()
        return out

    def renormalize(self):
        self.normals = normalize_rows(self.normals)
        return self


def normalize_rows(v):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(norm > 0, norm, 1.0)


def estimate_splat_sigma(positions, k=7):
    """Mean distance to the ``k`` nearest neighbours of every point.

    Clouds with fewer than two points get sigma 1 (there is no scale to infer).
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    if n < 2:
        return np.ones(n)
    kk = min(k, n - 1)
    dist, _ = cKDTree(positions).query(positions, k=kk + 1)
    sigma = dist[:, 1:].mean(axis=1)
    positive = sigma[sigma > 0]
    fallback = positive.mean() if len(positive) else 1.0
    return np.where(sigma > 0, sigma, fallback)


def bounding_box_diagonal(cloud: PointCloud | np.ndarray) -> float:
    positions = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if len(positions) == 0:
        raise EmptyCloudError("empty point cloud")
    return float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))


def add_gaussian_noise(cloud: PointCloud, sigma_rel: float, seed: int = 0) -> PointCloud:
    """Perturb positions with i.i.d. Gaussian noise of std ``sigma_rel * diag``."""
    if sigma_rel < 0:
        raise ValueError("sigma_rel must be non-negative")
    out = cloud.copy()
    if sigma_rel == 0 or len(cloud) == 0:
        return out
    std = sigma_rel * bounding_box_diagonal(cloud)
    rng = np.random.default_rng(seed)
    out.positions = cloud.positions + rng.normal(0.0, std, size=cloud.positions.shape)
    return out


@dataclass
class Camera:
    """Pinhole camera; world->camera is ``R @ p + t``.

    The camera looks along -z with y up; pixel ``(col, row)`` centers sit on
    integer coordinates and the principal point is the image center.
    """

    rotation: np.ndarray
    translation: np.ndarray
    focal_px: float
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.focal_px = float(self.focal_px)
        self.width = int(self.width)
        self.height = int(self.height)
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation is not orthonormal")
        if self.focal_px <= 0 or self.width < 1 or self.height < 1:
            raise ValueError("camera intrinsics must be positive")

    @property
    def principal_point(self):
        return (self.width - 1) / 2.0, (self.height - 1) / 2.0

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points):
        """Project ``(..., 3)`` world points; returns ``(screen (..., 2), depth (...))``.

        Depth is ``-z`` in camera space; non-positive depths project to nan.
        """
        pc = self.to_camera(points)
        depth = -pc[..., 2]
        cx, cy = self.principal_point
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(depth > 0, 1.0 / depth, np.nan)
        u = cx + self.focal_px * pc[..., 0] * inv
        v = cy - self.focal_px * pc[..., 1] * inv
        return np.stack([u, v], axis=-1), depth

    def unproject(self, screen, depth):
        """Inverse of :meth:`project` for positive depths."""
        screen = np.asarray(screen, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        cx, cy = self.principal_point
        x = (screen[..., 0] - cx) * depth / self.focal_px
        y = -(screen[..., 1] - cy) * depth / self.focal_px
        pc = np.stack([x, y, -depth], axis=-1)
        return (pc - self.translation) @ self.rotation

    @classmethod
    def look_at(cls, eye, target, focal_px, width, height, up=(0.0, 1.0, 0.0)):
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        forward = target - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        if abs(forward @ up) > 0.999:
            up = np.array([0.0, 0.0, 1.0]) if abs(forward[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        true_up = np.cross(right, forward)
        # rows: camera x, y, z axes expressed in world coordinates; camera looks along -z
        rotation = np.stack([right, true_up, -forward])
        return cls(rotation, -rotation @ eye, focal_px, width, height)


def project_point(camera: Camera, p):
    """Project a single world point; raises :class:`BehindCameraError` for depth <= 0."""
    pc = camera.to_camera(p)
    depth = -pc[2]
    if depth <= 0:
        raise BehindCameraError("behind camera")
    screen, _ = camera.project(p)
    return screen, float(depth)


@dataclass
class OptimizationConfig:
    cutoff_c: float = 4.0
    merge_t_rel: float = 0.01
    cache_k: int = 5
    lr_position: float = 5.0
    lr_normal: float = 5000.0
    momentum: float = 0.9
    t_n: int = 15
    t_p: int = 25
    cycles: int = 16
    views_per_step: int = 12
    gamma_p: float = 0.02
    gamma_r: float = 0.05
    neigh_d_rel: float = 4.0
    neigh_d_proj_rel: float = 0.0
    neigh_theta: float = math.pi / 3
    k_neigh: int = 20
    epsilon_grad: float = 1e-5
    backface_culling: bool = True
    dilation_px: int = 16
    splat_sigma: float = 0.0
    clip_factor: float = 10.0
    early_stop_rel: float = 1e-5
    num_reference_views: int = 24
    camera_distance: float = 3.0
    focal_px: float = 0.0
    image_size: int = 128
    view_jitter: float = 0.05
    error_aware_views: int = 0
    k_focus: int = 5
    downsample: int = 4
    focus_radius_factor: float = 0.25
    shading: str = "diffuse"
    visibility_loss_change: str = "linear"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ["cutoff_c", "lr_position", "lr_normal", "neigh_d_rel", "neigh_theta",
                    "epsilon_grad", "views_per_step", "cycles", "camera_distance",
                    "image_size", "k_neigh", "downsample", "k_focus", "focus_radius_factor"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"config field {name} must be positive")
        nonnegative = ["merge_t_rel", "gamma_p", "gamma_r", "t_n", "t_p", "dilation_px",
                       "splat_sigma", "clip_factor", "early_stop_rel", "neigh_d_proj_rel",
                       "error_aware_views", "view_jitter", "focal_px"]
        for name in nonnegative:
            if getattr(self, name) < 0:
                raise ValueError(f"config field {name} must be non-negative")
        if self.cache_k < 1:
            raise ValueError("cache_k must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.t_n + self.t_p < 1:
            raise ValueError("schedule needs at least one step per cycle")
        if self.shading not in ("diffuse", "normal", "invdepth"):
            raise ValueError(f"unknown shading mode {self.shading!r}")
        if self.visibility_loss_change not in ("linear", "exact"):
            raise ValueError("visibility_loss_change must be 'linear' or 'exact'")
        return self

    def replace(self, **changes) -> "OptimizationConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in dataclasses.fields(cls)}


DEFORM_SCHEDULE = dict(t_n=15, t_p=25)
EDIT_SCHEDULE = dict(t_n=19, t_p=1)
