"""Backward pass: per-pixel loss gradients to per-point normal and position gradients."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .forward import FragmentCache, RenderedImage, ShadingMode, blend_weights
from .geometry import Camera, OptimizationConfig, PointCloud, normalize_rows
from .losses import SMAPE_EPS

CASE_NAMES = {
    _kernels.CASE_INSERT: "insert",
    _kernels.CASE_OCCLUDED: "occluded",
    _kernels.CASE_VISIBLE_AWAY: "visible-away",
    _kernels.CASE_VISIBLE_TOWARD: "visible-toward",
}


class StaleCacheError(ValueError):
    pass


@dataclass
class GradientBuffer:
    d_position: np.ndarray
    d_normal: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 3)), np.zeros((n, 3)))

    def __iadd__(self, other):
        self.d_position += other.d_position
        self.d_normal += other.d_normal
        return self

    def all_finite(self):
        return bool(np.all(np.isfinite(self.d_position)) and np.all(np.isfinite(self.d_normal)))


@dataclass
class VisibilityRecords:
    """Every emitted visibility-gradient term (debug / verification only)."""

    point: np.ndarray
    row: np.ndarray
    col: np.ndarray
    case: np.ndarray
    loss_change: np.ndarray   # dL/dI . dI, always < 0
    delta_image_norm: np.ndarray
    displacement: np.ndarray  # camera frame
    term: np.ndarray          # camera frame, contribution to dL/dp

    def __len__(self):
        return len(self.point)


def _check(cloud, cache, pixel_grad):
    if cache.num_points != len(cloud):
        raise StaleCacheError("fragment cache does not match the point cloud")
    if pixel_grad.shape[:2] != cache.count.shape:
        raise ValueError("pixel gradient does not match the image size")


def _as_grad(pixel_grad):
    g = np.asarray(pixel_grad, dtype=np.float64)
    return g[:, :, None] if g.ndim == 2 else g


def _fragment_terms(cache: FragmentCache, image, g):
    """Accumulate per-point sums over visible fragments.

    Returns ``dw`` (dL/dw_k), ``a`` (sum of dL/dlog rho), ``a_sd`` (sum of a * S d)
    and ``a_sdsd`` (sum of a * (S d)(S d)^T) where d = x - x_k.
    """
    n = cache.num_points
    nch = image.shape[2]
    weights, _ = blend_weights(cache)
    rows, cols, slots = np.nonzero(cache.visible)
    k = cache.idx[rows, cols, slots]
    om = weights[rows, cols, slots]
    gp = g[rows, cols]
    wk = cache.attributes[k]
    ip = image[rows, cols]
    a = om * np.einsum("fc,fc->f", gp, wk - ip)
    dw = np.zeros((n, nch))
    for ch in range(nch):
        dw[:, ch] = np.bincount(k, weights=om * gp[:, ch], minlength=n)
    sp = cache.splats
    d = np.stack([cols - sp.center_px[k, 0], rows - sp.center_px[k, 1]], axis=1)
    sd = np.einsum("fij,fj->fi", sp.conic[k], d)
    a_sum = np.bincount(k, weights=a, minlength=n)
    a_sd = np.stack([np.bincount(k, weights=a * sd[:, i], minlength=n) for i in range(2)], axis=1)
    a_sdsd = np.zeros((n, 2, 2))
    for i in range(2):
        for j in range(i, 2):
            a_sdsd[:, i, j] = np.bincount(k, weights=a * sd[:, i] * sd[:, j], minlength=n)
            a_sdsd[:, j, i] = a_sdsd[:, i, j]
    return dw, a_sum, a_sd, a_sdsd


def _area_gradient(cache, a_sum, a_sdsd):
    """dL/d(J J^T) per point from the accumulated fragment sums."""
    sp = cache.splats
    area = sp.area_form
    det = area[:, 0, 0] * area[:, 1, 1] - area[:, 0, 1] * area[:, 1, 0]
    safe = np.where(sp.valid, det, 1.0)
    area_inv = np.empty_like(area)
    area_inv[:, 0, 0] = area[:, 1, 1] / safe
    area_inv[:, 1, 1] = area[:, 0, 0] / safe
    area_inv[:, 0, 1] = area_inv[:, 1, 0] = -area[:, 0, 1] / safe
    s2 = sp.sigma[:, None, None] ** 2
    grad = 0.5 * (area_inv - s2 * sp.conic) * a_sum[:, None, None] + 0.5 * s2 * a_sdsd
    grad[~sp.valid] = 0.0
    return grad


def backward_normals(cloud: PointCloud, camera: Camera, cache: FragmentCache,
                     image: RenderedImage | np.ndarray, pixel_grad, include_rho=True):
    """dL/dn for every point (world frame, tangent to the unit sphere at n_k)."""
    g = _as_grad(pixel_grad)
    _check(cloud, cache, g)
    img = image.channels if isinstance(image, RenderedImage) else np.asarray(image)
    dw, a_sum, _, a_sdsd = _fragment_terms(cache, img, g)
    sp = cache.splats
    nc = sp.camera_normals
    grad_nc = np.zeros_like(nc)
    if cache.mode is ShadingMode.DIFFUSE:
        grad_nc += dw * cloud.albedo * (nc > 0)
    elif cache.mode is ShadingMode.NORMAL:
        grad_nc += 0.5 * dw
    if include_rho:
        ga = _area_gradient(cache, a_sum, a_sdsd)
        m = sp.screen_jacobian
        proj_grad = m.transpose(0, 2, 1) @ ga @ m
        grad_nc += -2.0 * np.einsum("nij,nj->ni", proj_grad, nc)
    grad_nc[~sp.valid] = 0.0
    return _normal_chain(cloud.normals, grad_nc @ camera.rotation)


def _normal_chain(normals, grad_unit):
    """Chain dL/d(n/|n|) back to the raw normal."""
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    nhat = normals / np.where(norm > 0, norm, 1.0)
    radial = np.einsum("ij,ij->i", grad_unit, nhat)[:, None]
    return (grad_unit - radial * nhat) / np.where(norm > 0, norm, 1.0)


def backward_positions_smooth(cloud: PointCloud, camera: Camera, cache: FragmentCache,
                              image: RenderedImage | np.ndarray, pixel_grad):
    """Differentiable part of dL/dp: motion of splat centers and Jacobian changes."""
    g = _as_grad(pixel_grad)
    _check(cloud, cache, g)
    img = image.channels if isinstance(image, RenderedImage) else np.asarray(image)
    dw, a_sum, a_sd, a_sdsd = _fragment_terms(cache, img, g)
    sp = cache.splats
    m = sp.screen_jacobian
    grad_pc = np.einsum("nji,nj->ni", m, a_sd)
    ga = _area_gradient(cache, a_sum, a_sdsd)
    proj = np.eye(3) - sp.camera_normals[:, :, None] * sp.camera_normals[:, None, :]
    q = 2.0 * ga @ m @ proj
    f = camera.focal_px
    x, y = sp.camera_points[:, 0], sp.camera_points[:, 1]
    d = np.where(sp.valid, sp.depth, 1.0)
    grad_pc[:, 0] += q[:, 0, 2] * f / d**2
    grad_pc[:, 1] += -q[:, 1, 2] * f / d**2
    grad_pc[:, 2] += (q[:, 0, 0] * f / d**2 + q[:, 0, 2] * 2 * f * x / d**3
                      - q[:, 1, 1] * f / d**2 - q[:, 1, 2] * 2 * f * y / d**3)
    if cache.mode is ShadingMode.INVDEPTH:
        grad_pc[:, 2] += dw[:, 0] / d**2
    grad_pc[~sp.valid] = 0.0
    return grad_pc @ camera.rotation


def visibility_gradients(cloud: PointCloud, camera: Camera, cache: FragmentCache,
                         image: RenderedImage | np.ndarray, pixel_grad,
                         cfg: OptimizationConfig | None = None, record=False, only_point=None,
                         reference=None):
    """Linearized visibility gradient for all candidate (pixel, point) pairs.

    With ``cfg.visibility_loss_change == "exact"`` the loss change of each
    visibility event is the exact SMAPE difference against ``reference``
    instead of the first-order ``dL/dI . dI``.
    Returns ``(d_position, records)``; records is None unless ``record``.
    """
    cfg = cfg or OptimizationConfig()
    g = _as_grad(pixel_grad)
    _check(cloud, cache, g)
    img = image.channels if isinstance(image, RenderedImage) else np.asarray(image)
    sp = cache.splats
    valid = sp.valid.copy()
    if only_point is not None:
        valid[:] = False
        valid[only_point] = sp.valid[only_point]
    if record:
        widths = (sp.bbox_px[:, 1] - sp.bbox_px[:, 0] + 1 + 2 * cfg.dilation_px).clip(min=1)
        heights = (sp.bbox_px[:, 3] - sp.bbox_px[:, 2] + 1 + 2 * cfg.dilation_px).clip(min=1)
        cap = int(2 * (widths * heights)[valid].sum()) + 1
    else:
        cap = 0
    rec_int = np.zeros((cap, 4), dtype=np.int64)
    rec_float = np.zeros((cap, 8))
    exact = cfg.visibility_loss_change == "exact"
    if exact:
        if reference is None:
            raise ValueError("exact visibility loss change needs the reference image")
        ref = _as_grad(reference)
        if ref.shape != g.shape:
            raise ValueError(f"reference shape {ref.shape} does not match image {g.shape}")
    else:
        ref = np.zeros((1, 1, 1))
    background = cache.mode.background.astype(np.float64)
    grad, n_rec = _kernels.visibility_kernel(
        sp.center_px, sp.conic, sp.prefactor, sp.depth, sp.bbox_px, valid,
        np.ascontiguousarray(cache.attributes, dtype=np.float64), background,
        cache.idx, cache.depth, cache.rho_bar, cache.visible, cache.count,
        np.ascontiguousarray(img, dtype=np.float64), np.ascontiguousarray(g),
        camera.rotation, camera.focal_px, cache.merge_t, cache.cutoff_c,
        float(cfg.epsilon_grad), int(cfg.dilation_px), bool(record), rec_int, rec_float,
        exact, np.ascontiguousarray(ref, dtype=np.float64), SMAPE_EPS)
    records = None
    if record:
        ri, rf = rec_int[:n_rec], rec_float[:n_rec]
        records = VisibilityRecords(ri[:, 0], ri[:, 1], ri[:, 2], ri[:, 3], rf[:, 0], rf[:, 1],
                                    rf[:, 2:5], rf[:, 5:8])
    return grad, records


def visibility_gradient(row, col, k, cloud, camera, cache, image, pixel_grad, cfg=None,
                        reference=None):
    """Contribution of pixel ``(row, col)`` to dL/dp_k (world frame)."""
    g = _as_grad(pixel_grad)
    masked = np.zeros_like(g)
    masked[row, col] = g[row, col]
    grad, _ = visibility_gradients(cloud, camera, cache, image, masked, cfg, only_point=k,
                                   reference=reference)
    return grad[k]


def backward_view(cloud, camera, cache, image, pixel_grad, cfg=None, normals=True,
                  positions=True, visibility=True, reference=None) -> GradientBuffer:
    cfg = cfg or OptimizationConfig()
    buf = GradientBuffer.zeros(len(cloud))
    if normals:
        buf.d_normal += backward_normals(cloud, camera, cache, image, pixel_grad)
    if positions:
        buf.d_position += backward_positions_smooth(cloud, camera, cache, image, pixel_grad)
    if visibility:
        buf.d_position += visibility_gradients(cloud, camera, cache, image, pixel_grad, cfg,
                                              reference=reference)[0]
    return buf


def backward_pass(cloud, cameras, caches, images, pixel_grads, cfg=None, threads=1,
                  normals=True, positions=True, visibility=True, references=None) -> GradientBuffer:
    """Sum per-view gradients in view order (deterministic for any thread count)."""
    if not (len(cameras) == len(caches) == len(images) == len(pixel_grads)):
        raise ValueError("view count mismatch between cameras, caches, images and gradients")
    if references is not None and len(references) != len(cameras):
        raise ValueError("view count mismatch between cameras and references")
    cfg = cfg or OptimizationConfig()

    def one(v):
        return backward_view(cloud, cameras[v], caches[v], images[v], pixel_grads[v], cfg,
                             normals, positions, visibility,
                             None if references is None else references[v])

    views = range(len(cameras))
    if threads > 1 and len(cameras) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(one, views))
    else:
        parts = [one(v) for v in views]
    total = GradientBuffer.zeros(len(cloud))
    for part in parts:
        total += part
    return total


def tangent_project(normals, grad):
    """Remove the radial component of a normal gradient."""
    nhat = normalize_rows(normals)
    return grad - np.einsum("ij,ij->i", grad, nhat)[:, None] * nhat
