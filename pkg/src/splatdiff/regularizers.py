"""Neighbourhood graph, visibility-weighted PCA frames and the surface regularizers."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import OptimizationConfig, PointCloud, bounding_box_diagonal, normalize_rows

REPULSION_EPS = 1e-4


@dataclass
class NeighborGraph:
    """Padded neighbour lists; ``neighbors[i, j] == -1`` marks an empty slot."""

    neighbors: np.ndarray   # (N, K) int
    psi: np.ndarray         # (N, K) spatial weight
    theta: np.ndarray       # (N, K) normal-similarity weight
    phi: np.ndarray         # (N, K) visibility weight
    weights: np.ndarray     # (N, K) normalized psi * theta * phi
    radius: float

    @property
    def mask(self):
        return self.neighbors >= 0

    def __len__(self):
        return len(self.neighbors)


@dataclass
class LocalFrame:
    tangent_basis: np.ndarray  # (2, 3)
    frame_normal: np.ndarray   # (3,)
    weighted_centroid: np.ndarray
    degenerate: bool = False


def default_radius(cloud: PointCloud, cfg: OptimizationConfig, projection=False) -> float:
    diag = bounding_box_diagonal(cloud)
    if projection and cfg.neigh_d_proj_rel > 0:
        return cfg.neigh_d_proj_rel * math.sqrt(diag)
    return cfg.neigh_d_rel * math.sqrt(diag / len(cloud))


def build_neighbor_graph(cloud: PointCloud, cfg: OptimizationConfig | None = None,
                         radius: float | None = None) -> NeighborGraph:
    """Radius neighbourhoods (self excluded, capped at ``k_neigh`` nearest) with bilateral
    and visibility weights."""
    cfg = cfg or OptimizationConfig()
    n = len(cloud)
    if n < 2:
        raise ValueError("neighbour graph needs at least two points")
    if radius is None:
        radius = default_radius(cloud, cfg)
    kk = min(cfg.k_neigh, n - 1)
    dist, nbr = cKDTree(cloud.positions).query(cloud.positions, k=kk + 1,
                                               distance_upper_bound=radius)
    dist = dist.reshape(n, kk + 1)
    nbr = nbr.reshape(n, kk + 1)
    self_mask = nbr == np.arange(n)[:, None]
    # coincident points can push self out of slot 0; drop self wherever it is
    keep = (nbr < n) & ~self_mask
    order = np.argsort(~keep, axis=1, kind="stable")
    nbr = np.take_along_axis(nbr, order, axis=1)[:, :kk]
    keep = np.take_along_axis(keep, order, axis=1)[:, :kk]
    nbr = np.where(keep, nbr, -1)
    safe = np.maximum(nbr, 0)
    diff = cloud.positions[:, None, :] - cloud.positions[safe]
    sq = (diff**2).sum(axis=2)
    psi = np.exp(-sq / radius**2)
    nhat = normalize_rows(cloud.normals)
    cos = np.einsum("ikc,ic->ik", nhat[safe], nhat)
    theta = np.exp(-((1.0 - cos) ** 2) / max(1e-5, 1.0 - math.cos(cfg.neigh_theta)))
    phi = 1.0 / (cloud.occlusion_count[safe] + 1.0)
    raw = np.where(keep, psi * theta * phi, 0.0)
    total = raw.sum(axis=1, keepdims=True)
    weights = raw / np.where(total > 0, total, 1.0)
    return NeighborGraph(nbr, np.where(keep, psi, 0.0), np.where(keep, theta, 0.0),
                         np.where(keep, phi, 0.0), weights, float(radius))


def _fallback_basis(normal):
    n = normal / np.linalg.norm(normal)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1)
    return np.stack([t1, np.cross(n, t1)]), n


def weighted_pca(cloud: PointCloud, graph: NeighborGraph, i: int) -> LocalFrame:
    frames = local_frames(cloud, graph, indices=[i])
    return frames[0]


def local_frames(cloud: PointCloud, graph: NeighborGraph, indices=None):
    """Weighted PCA frame for each requested point (all points by default)."""
    basis, normal, centroid, degenerate = pca_frames(cloud, graph)
    idx = range(len(cloud)) if indices is None else indices
    return [LocalFrame(basis[i], normal[i], centroid[i], bool(degenerate[i])) for i in idx]


def pca_frames(cloud: PointCloud, graph: NeighborGraph):
    """Batched weighted PCA.

    Returns ``(basis (N, 2, 3), normal (N, 3), centroid (N, 3), degenerate (N,))``.
    Rank-deficient neighbourhoods fall back to a tangent basis completing ``n_i``.
    """
    mask = graph.mask
    safe = np.maximum(graph.neighbors, 0)
    w = np.where(mask, graph.weights, 0.0)
    nbr_pos = cloud.positions[safe]
    count = mask.sum(axis=1)
    centroid = np.einsum("ik,ikc->ic", w, nbr_pos)
    centroid[count == 0] = cloud.positions[count == 0]
    vecs = np.where(mask[:, :, None], w[:, :, None] * (nbr_pos - centroid[:, None, :]), 0.0)
    if vecs.shape[1] < 3:
        vecs = np.concatenate([vecs, np.zeros((len(vecs), 3 - vecs.shape[1], 3))], axis=1)
    _, s, vt = np.linalg.svd(vecs, full_matrices=False)
    degenerate = (count < 2) | ~(s[:, 1] > 1e-12 * np.maximum(s[:, 0], 1e-300))
    basis = vt[:, :2].copy()
    normal = vt[:, 2].copy()
    nhat = normalize_rows(cloud.normals)
    flip = np.einsum("ic,ic->i", normal, nhat) < 0
    normal[flip] *= -1
    handed = np.einsum("ic,ic->i", np.cross(basis[:, 0], basis[:, 1]), normal) < 0
    basis[handed, 1] *= -1
    for i in np.nonzero(degenerate)[0]:
        basis[i], normal[i] = _fallback_basis(nhat[i])
    return basis, normal, centroid, degenerate


def frame_arrays(frames):
    if isinstance(frames, tuple):
        return frames[0], frames[1]
    basis = np.stack([f.tangent_basis for f in frames])
    normal = np.stack([f.frame_normal for f in frames])
    return basis, normal


def _pair_offsets(cloud, graph):
    safe = np.maximum(graph.neighbors, 0)
    diff = cloud.positions[:, None, :] - cloud.positions[safe]
    return np.where(graph.mask[:, :, None], diff, 0.0), safe


def _scatter_pairs(n, safe, mask, pair_grad):
    """Add +pair_grad to point i and -pair_grad to its neighbour k."""
    grad = pair_grad.sum(axis=1)
    flat_k = safe[mask]
    g = pair_grad[mask]
    for c in range(3):
        grad[:, c] -= np.bincount(flat_k, weights=g[:, c], minlength=n)
    return grad


def repulsion_loss(cloud: PointCloud, graph: NeighborGraph, frames=None):
    """Mean over points of sum_k psi_ik / (|in-plane offset|^2 + 1e-4) and its position gradient.

    Frames and weights are held constant.
    """
    n = len(cloud)
    if frames is None:
        frames = pca_frames(cloud, graph)
    basis, _ = frame_arrays(frames)
    diff, safe = _pair_offsets(cloud, graph)
    coords = np.einsum("ikc,ijc->ikj", diff, basis)        # (N, K, 2) in-plane coordinates
    planar = np.einsum("ikj,ijc->ikc", coords, basis)      # V V^T (p_i - p_k)
    sq = (coords**2).sum(axis=2)
    den = sq + REPULSION_EPS
    psi = np.where(graph.mask, graph.psi, 0.0)
    loss = float((psi / den).sum() / n)
    pair_grad = (-2.0 * psi / den**2)[:, :, None] * planar / n
    return loss, _scatter_pairs(n, safe, graph.mask, pair_grad)


def projection_loss(cloud: PointCloud, graph: NeighborGraph, frames=None):
    """Mean over points of sum_k w_ik * (distance to i's tangent plane)^2 and its gradient."""
    n = len(cloud)
    if frames is None:
        frames = pca_frames(cloud, graph)
    _, normal = frame_arrays(frames)
    diff, safe = _pair_offsets(cloud, graph)
    height = np.einsum("ikc,ic->ik", diff, normal)
    w = np.where(graph.mask, graph.weights, 0.0)
    loss = float((w * height**2).sum() / n)
    pair_grad = (2.0 * w * height)[:, :, None] * normal[:, None, :] / n
    return loss, _scatter_pairs(n, safe, graph.mask, pair_grad)


def min_pairwise_distance(points):
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return math.inf
    dist, _ = cKDTree(points).query(points, k=2)
    return float(dist[:, 1].min())
