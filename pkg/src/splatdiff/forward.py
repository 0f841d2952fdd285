"""Screen-space EWA splatting forward pass."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import Camera, OptimizationConfig, PointCloud, bounding_box_diagonal, normalize_rows

SINGULAR_DET = 1e-12
# camera-space sun directions, one per RGB channel
LIGHT_DIRECTIONS = np.eye(3)


class ShadingMode(enum.Enum):
    DIFFUSE = "diffuse"
    NORMAL = "normal"
    INVDEPTH = "invdepth"

    @property
    def channels(self):
        return 1 if self is ShadingMode.INVDEPTH else 3

    @property
    def background(self):
        if self is ShadingMode.NORMAL:
            return np.full(3, 0.5)
        return np.zeros(self.channels)

    @classmethod
    def parse(cls, value) -> "ShadingMode":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


@dataclass
class SplatGeometry:
    """Per-point screen-space splat parameters for one camera (arrays over N).

    ``conic`` is ``(J V J^T + I)^-1``; ``area_form`` is ``J J^T`` (frame independent);
    ``screen_jacobian`` is d(screen)/d(camera-space point).
    """

    center_px: np.ndarray
    conic: np.ndarray
    jacobian: np.ndarray
    prefactor: np.ndarray
    depth: np.ndarray
    bbox_px: np.ndarray
    valid: np.ndarray
    camera_points: np.ndarray
    camera_normals: np.ndarray
    screen_jacobian: np.ndarray
    area_form: np.ndarray
    sigma: np.ndarray

    def __len__(self):
        return len(self.depth)


def tangent_frame(normals):
    """Deterministic orthonormal pair perpendicular to each normal."""
    normals = np.atleast_2d(normals)
    helper = np.where(np.abs(normals[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    t1 = normalize_rows(np.cross(normals, helper))
    t2 = np.cross(normals, t1)
    return t1, t2


def screen_jacobian(camera_points, focal_px):
    """d(u, v)/d(x, y, z) of the pinhole projection at camera-space points, shape (N, 2, 3)."""
    x, y, z = camera_points[:, 0], camera_points[:, 1], camera_points[:, 2]
    d = -z
    jac = np.zeros((len(camera_points), 2, 3))
    jac[:, 0, 0] = focal_px / d
    jac[:, 0, 2] = focal_px * x / d**2
    jac[:, 1, 1] = -focal_px / d
    jac[:, 1, 2] = -focal_px * y / d**2
    return jac


def compute_splat_geometry(camera: Camera, positions, normals, sigma, cutoff_c=4.0,
                           backface_culling=True) -> SplatGeometry:
    """Project every point to an elliptical screen-space Gaussian.

    Culled points (behind the camera, back-facing, singular Jacobian) have
    ``valid == False`` and an empty bounding box.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    nhat = normalize_rows(np.asarray(normals, dtype=np.float64).reshape(-1, 3))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
    pc = camera.to_camera(positions)
    nc = nhat @ camera.rotation.T
    depth = -pc[:, 2]
    valid = depth > 1e-12
    if backface_culling:
        valid &= np.einsum("ij,ij->i", nc, pc) < 0
    safe_pc = np.where(valid[:, None], pc, np.array([0.0, 0.0, -1.0]))
    sj = screen_jacobian(safe_pc, camera.focal_px)
    t1, t2 = tangent_frame(nhat)
    world_to_screen = sj @ camera.rotation
    jacobian = np.stack([np.einsum("nij,nj->ni", world_to_screen, t1),
                         np.einsum("nij,nj->ni", world_to_screen, t2)], axis=2)
    proj = np.eye(3) - nc[:, :, None] * nc[:, None, :]
    area = sj @ proj @ sj.transpose(0, 2, 1)
    det_area = area[:, 0, 0] * area[:, 1, 1] - area[:, 0, 1] * area[:, 1, 0]
    valid &= np.sqrt(np.maximum(det_area, 0.0)) >= SINGULAR_DET
    cov = sigma[:, None, None] ** 2 * area + np.eye(2)
    det_cov = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    conic = np.empty_like(cov)
    conic[:, 0, 0] = cov[:, 1, 1] / det_cov
    conic[:, 1, 1] = cov[:, 0, 0] / det_cov
    conic[:, 0, 1] = conic[:, 1, 0] = -0.5 * (cov[:, 0, 1] + cov[:, 1, 0]) / det_cov
    prefactor = np.sqrt(np.maximum(det_area, 0.0)) / (2.0 * np.pi * np.sqrt(det_cov))
    cx, cy = camera.principal_point
    center = np.stack([cx + camera.focal_px * safe_pc[:, 0] / -safe_pc[:, 2],
                       cy - camera.focal_px * safe_pc[:, 1] / -safe_pc[:, 2]], axis=1)
    ext_x = np.sqrt(2.0 * cutoff_c * cov[:, 0, 0])
    ext_y = np.sqrt(2.0 * cutoff_c * cov[:, 1, 1])
    with np.errstate(invalid="ignore"):
        bbox = np.stack([np.ceil(center[:, 0] - ext_x), np.floor(center[:, 0] + ext_x),
                         np.ceil(center[:, 1] - ext_y), np.floor(center[:, 1] + ext_y)], axis=1)
    big = 4.0 * max(camera.width, camera.height)
    bbox = np.clip(np.nan_to_num(bbox, nan=-1.0), -big, big)
    bbox[:, 0] = np.maximum(bbox[:, 0], 0)
    bbox[:, 1] = np.minimum(bbox[:, 1], camera.width - 1)
    bbox[:, 2] = np.maximum(bbox[:, 2], 0)
    bbox[:, 3] = np.minimum(bbox[:, 3], camera.height - 1)
    bbox = bbox.astype(np.int64)
    bbox[~valid] = (0, -1, 0, -1)
    return SplatGeometry(center, conic, jacobian, prefactor, depth, bbox, valid, pc, nc, sj,
                         area, np.array(sigma))


def shade(mode, camera_normals, albedo, depth):
    """Per-point attribute vectors ``w_k`` for one view, shape (N, C)."""
    mode = ShadingMode.parse(mode)
    if mode is ShadingMode.DIFFUSE:
        return albedo * np.maximum(0.0, camera_normals @ LIGHT_DIRECTIONS.T)
    if mode is ShadingMode.NORMAL:
        return (camera_normals + 1.0) / 2.0
    with np.errstate(divide="ignore"):
        inv = np.where(depth > 0, 1.0 / np.where(depth > 0, depth, 1.0), 0.0)
    return inv[:, None]


def shade_point(mode, normal, albedo, depth, camera: Camera):
    nc = normalize_rows(np.asarray(normal, dtype=np.float64).reshape(1, 3)) @ camera.rotation.T
    return shade(mode, nc, np.asarray(albedo, dtype=np.float64).reshape(1, 3),
                 np.array([float(depth)]))[0]


@dataclass
class RenderedImage:
    channels: np.ndarray  # (H, W, C)
    background: np.ndarray

    @property
    def shape(self):
        return self.channels.shape


@dataclass
class FragmentCache:
    """Top-K depth-sorted fragments per pixel plus the splat data they came from."""

    idx: np.ndarray        # (H, W, K) point index, -1 for empty slots
    depth: np.ndarray      # (H, W, K)
    rho_bar: np.ndarray    # (H, W, K) untruncated Gaussian weight
    visible: np.ndarray    # (H, W, K) h_x
    count: np.ndarray      # (H, W)
    splats: SplatGeometry
    attributes: np.ndarray  # (N, C)
    merge_t: float
    cutoff_c: float
    mode: ShadingMode
    occluded: np.ndarray   # (N,) rasterized but never visible in this view
    num_points: int

    def fragments(self, row, col):
        """Cached fragments at one pixel as dicts, front-most first."""
        out = []
        for j in range(self.count[row, col]):
            k = int(self.idx[row, col, j])
            out.append(dict(point_index=k, rho_bar=float(self.rho_bar[row, col, j]),
                            attribute=self.attributes[k].copy(),
                            depth=float(self.depth[row, col, j]),
                            visible=bool(self.visible[row, col, j])))
        return out


def merge_threshold(cloud: PointCloud, cfg: OptimizationConfig) -> float:
    if len(cloud) == 0:
        return 0.0
    return cfg.merge_t_rel * bounding_box_diagonal(cloud)


def blend_weights(cache: FragmentCache):
    """Normalized per-fragment weights rho / sum(rho) over visible fragments."""
    w = np.where(cache.visible, cache.rho_bar, 0.0)
    total = w.sum(axis=2)
    safe = np.where(total > 0, total, 1.0)
    return w / safe[:, :, None], total


def rasterize(cloud: PointCloud, camera: Camera, mode=ShadingMode.DIFFUSE,
              cfg: OptimizationConfig | None = None, count_occlusion=False,
              merge_t: float | None = None):
    """Render one view; returns ``(RenderedImage, FragmentCache)``.

    With ``count_occlusion`` the cloud's ``occlusion_count`` is incremented
    for points that produced fragments but were visible at none of them.
    """
    cfg = cfg or OptimizationConfig()
    mode = ShadingMode.parse(mode)
    if merge_t is None:
        merge_t = merge_threshold(cloud, cfg)
    splats = compute_splat_geometry(camera, cloud.positions, cloud.normals, cloud.splat_sigma,
                                    cfg.cutoff_c, cfg.backface_culling)
    attrs = shade(mode, splats.camera_normals, cloud.albedo, splats.depth)
    h, w = camera.height, camera.width
    idx, dep, rho, count, produced = _kernels.rasterize_kernel(
        splats.center_px, splats.conic, splats.prefactor, splats.depth, splats.bbox_px,
        splats.valid, float(cfg.cutoff_c), h, w, int(cfg.cache_k))
    front = np.where(count[:, :, None] > 0, dep[:, :, :1], 0.0)
    visible = (idx >= 0) & (np.where(idx >= 0, dep, 0.0) - front <= merge_t)
    visible_any = np.zeros(len(cloud), dtype=bool)
    visible_any[idx[visible]] = True
    occluded = produced & ~visible_any
    if count_occlusion:
        cloud.occlusion_count += occluded
    cache = FragmentCache(idx, dep, rho, visible, count, splats, attrs, float(merge_t),
                          float(cfg.cutoff_c), mode, occluded, len(cloud))
    image = compose(cache)
    return RenderedImage(image, mode.background.copy()), cache


def compose(cache: FragmentCache):
    weights, total = blend_weights(cache)
    nch = cache.attributes.shape[1] if cache.attributes.ndim == 2 else cache.mode.channels
    h, w, _ = cache.idx.shape
    if len(cache.attributes):
        gathered = cache.attributes[np.maximum(cache.idx, 0)]
        image = np.einsum("hwk,hwkc->hwc", weights, gathered)
    else:
        image = np.zeros((h, w, nch))
    empty = total <= 0
    image[empty] = cache.mode.background
    return image


def render(cloud, camera, mode=ShadingMode.DIFFUSE, cfg=None) -> RenderedImage:
    return rasterize(cloud, camera, mode, cfg)[0]


def silhouette(cache: FragmentCache):
    """Boolean coverage mask (pixels with at least one visible fragment)."""
    return cache.count > 0
