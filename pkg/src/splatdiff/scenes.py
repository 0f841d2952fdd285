"""Synthetic point clouds and masks for experiments and tests."""
from __future__ import annotations

import numpy as np

from .geometry import PointCloud
from .views import fibonacci_sphere


def sphere_cloud(n=2000, radius=1.0, center=(0.0, 0.0, 0.0), sigma=None):
    dirs = fibonacci_sphere(n)
    return PointCloud(np.asarray(center) + radius * dirs, dirs, splat_sigma=sigma)


def cube_cloud(n=2000, half=1.0, seed=0, sigma=None):
    """Points spread over the six faces of an axis-aligned cube (stratified per face)."""
    per_face = int(np.ceil(n / 6))
    side = int(np.ceil(np.sqrt(per_face)))
    rng = np.random.default_rng(seed)
    g = (np.arange(side) + 0.5) / side * 2 - 1
    uu, vv = np.meshgrid(g, g, indexing="ij")
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    pts, nrm = [], []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            p = np.zeros((len(uv), 3))
            others = [a for a in range(3) if a != axis]
            p[:, others[0]] = uv[:, 0]
            p[:, others[1]] = uv[:, 1]
            p[:, axis] = sign
            nn = np.zeros_like(p)
            nn[:, axis] = sign
            pts.append(p * half)
            nrm.append(nn)
    pts = np.concatenate(pts)
    nrm = np.concatenate(nrm)
    keep = np.sort(rng.permutation(len(pts))[:n])
    return PointCloud(pts[keep], nrm[keep], splat_sigma=sigma)


def plane_cloud(n_side=20, extent=1.0, sigma=None, z=0.0):
    g = np.linspace(-extent / 2, extent / 2, n_side)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)], axis=1)
    nrm = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
    return PointCloud(pts, nrm, splat_sigma=sigma)


def grid_cloud(n_side=20, extent=1.0, sigma=None):
    """Alias of a facing-the-camera planar grid."""
    return plane_cloud(n_side, extent, sigma)


def teapot_mask(height, width, scale=1.0):
    """Boolean teapot-like silhouette: body, lid knob, spout and handle."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    s = scale * min(height, width) / 2.0
    x = (xx - cx) / s
    y = (cy - yy) / s
    body = (x / 0.55) ** 2 + ((y + 0.1) / 0.4) ** 2 <= 1.0
    lid = (x / 0.25) ** 2 + ((y - 0.33) / 0.12) ** 2 <= 1.0
    spout = (x > 0.4) & (x < 0.8) & (np.abs(y - (x - 0.4) * 0.7) < 0.09)
    ring = np.hypot((x + 0.6) / 0.22, (y + 0.05) / 0.25)
    handle = (ring <= 1.0) & (ring >= 0.55) & (x < -0.45)
    return body | lid | spout | handle


def mask_iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = (a | b).sum()
    return 1.0 if union == 0 else float((a & b).sum() / union)
