"""Image losses and point-set metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .forward import RenderedImage
from .geometry import EmptyCloudError, PointCloud

SMAPE_EPS = 1e-5


def _pixels(image):
    arr = image.channels if isinstance(image, RenderedImage) else np.asarray(image, dtype=np.float64)
    return arr[:, :, None] if arr.ndim == 2 else arr


def smape(rendered, reference, eps=SMAPE_EPS):
    """Symmetric mean absolute percentage error and its gradient w.r.t. ``rendered``.

    Normalized by pixel count only (summed over channels).  The sub-gradient is
    zero where the two images agree.
    """
    i = _pixels(rendered)
    r = _pixels(reference)
    if i.shape != r.shape:
        raise ValueError(f"image shape mismatch: {i.shape} vs {r.shape}")
    hw = i.shape[0] * i.shape[1]
    diff = i - r
    den = np.abs(i) + np.abs(r) + eps
    loss = float((np.abs(diff) / den).sum() / hw)
    grad = (np.sign(diff) / den - np.abs(diff) * np.sign(i) / den**2) / hw
    return loss, grad


@dataclass
class LossReport:
    image_loss: float
    projection_term: float
    repulsion_term: float
    total: float
    per_view_image_losses: list = field(default_factory=list)


def total_loss(per_view, projection, repulsion, gamma_p=0.02, gamma_r=0.05) -> LossReport:
    if gamma_p < 0 or gamma_r < 0:
        raise ValueError("loss weights must be non-negative")
    per_view = [float(v) for v in per_view]
    image = float(sum(per_view))
    total = image + gamma_p * float(projection) + gamma_r * float(repulsion)
    return LossReport(image, float(projection), float(repulsion), total, per_view)


def _positions(cloud):
    pts = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloudError("empty point cloud")
    return pts


def _nearest_sq(src, dst):
    # the tree proposes candidates; distances are recomputed explicitly so
    # near-ties resolve exactly as a brute-force scan would
    k = min(4, len(dst))
    _, nn = cKDTree(dst).query(src, k=k)
    nn = nn.reshape(len(src), k)
    return ((src[:, None, :] - dst[nn]) ** 2).sum(axis=2).min(axis=1)


def chamfer_distance(a, b) -> float:
    """Symmetric mean of squared nearest-neighbour distances (averaged over both directions)."""
    pa, pb = _positions(a), _positions(b)
    return float(0.5 * (_nearest_sq(pa, pb).mean() + _nearest_sq(pb, pa).mean()))


def hausdorff_distance(a, b) -> float:
    pa, pb = _positions(a), _positions(b)
    return float(np.sqrt(max(_nearest_sq(pa, pb).max(), _nearest_sq(pb, pa).max())))
