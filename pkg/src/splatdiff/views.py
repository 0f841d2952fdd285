"""Camera placement: farthest-point sphere sampling and error-aware focus views."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .forward import FragmentCache, RenderedImage
from .geometry import Camera

NUM_CANDIDATES = 512


@dataclass
class ViewSet:
    cameras: list
    seed: int = 0
    scheme: str = "sphere"
    focal_point: np.ndarray | None = None
    targets: list = field(default_factory=list)

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, i):
        return self.cameras[i]


def fibonacci_sphere(count=NUM_CANDIDATES):
    """Deterministic, near-uniform unit directions (spherical Fibonacci lattice)."""
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    r = np.sqrt(1.0 - z * z)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), z, r * np.sin(phi)], axis=1)


def farthest_point_indices(points, count, start):
    points = np.asarray(points)
    chosen = [int(start)]
    dist = np.linalg.norm(points - points[start], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(chosen)


def sample_sphere_views(center, radius, count, seed=0, focal_px=128.0, width=128, height=128,
                        jitter=0.05, num_candidates=NUM_CANDIDATES) -> ViewSet:
    """Greedy farthest-point directions on a sphere around ``center``, jittered, looking at it."""
    if radius <= 0 or count < 1:
        raise ValueError("radius must be positive and count >= 1")
    center = np.asarray(center, dtype=np.float64)
    rng = np.random.default_rng(seed)
    candidates = fibonacci_sphere(num_candidates)
    start = int(rng.integers(num_candidates))
    picks = farthest_point_indices(candidates, min(count, num_candidates), start)
    if count > num_candidates:
        picks = np.concatenate([picks, rng.integers(num_candidates, size=count - num_candidates)])
    cameras = []
    for d in candidates[picks]:
        eye = center + radius * d
        if jitter > 0:
            eye = eye + rng.uniform(-jitter * radius, jitter * radius, size=3)
        cameras.append(Camera.look_at(eye, center, focal_px, width, height))
    return ViewSet(cameras, seed, "sphere", None, [center.copy() for _ in cameras])


def box_downsample(image, factor):
    arr = np.asarray(image.channels if isinstance(image, RenderedImage) else image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    hh, ww = h // factor, w // factor
    if hh == 0 or ww == 0:
        return arr.copy()
    return arr[:hh * factor, :ww * factor].reshape(hh, factor, ww, factor, c).mean(axis=(1, 3))


def error_aware_views(cloud, cameras, rendered, references, count, seed=0, k_focus=5,
                      downsample=4, radius_factor=0.25, fallback_center=None,
                      fallback_radius=None, jitter=0.05) -> ViewSet:
    """Cameras focused on the 3D region behind the largest downsampled image error."""
    from .losses import SMAPE_EPS

    if len(rendered) == 0 or len(rendered) != len(references) or len(rendered) != len(cameras):
        raise ValueError("need matching rendered/reference/camera lists")
    best = (-1.0, 0, 0, 0)
    for v, (img, ref) in enumerate(zip(rendered, references)):
        a = box_downsample(img, downsample)
        b = box_downsample(ref, downsample)
        err = (np.abs(a - b) / (np.abs(a) + np.abs(b) + SMAPE_EPS)).sum(axis=2)
        r, c = np.unravel_index(int(np.argmax(err)), err.shape)
        if err[r, c] > best[0]:
            best = (float(err[r, c]), v, r, c)
    cam0 = cameras[0]
    if best[0] <= 0 or len(cloud) == 0:
        center = fallback_center if fallback_center is not None else (
            cloud.positions.mean(axis=0) if len(cloud) else np.zeros(3))
        radius = fallback_radius or float(np.linalg.norm(cam0.center - center))
        return sample_sphere_views(center, radius, count, seed, cam0.focal_px, cam0.width,
                                   cam0.height, jitter)
    _, v, r, c = best
    cam = cameras[v]
    f = downsample
    pixel = np.array([c * f + (f - 1) / 2.0, r * f + (f - 1) / 2.0])
    screen, depth = cam.project(cloud.positions)
    dist = np.linalg.norm(screen - pixel, axis=1)
    dist = np.where(depth > 0, dist, np.inf)
    order = np.argsort(dist, kind="stable")
    k = min(k_focus, int(np.isfinite(dist).sum()) or len(cloud))
    focal_point = cloud.positions[order[:k]].mean(axis=0)
    radius = radius_factor * float(np.linalg.norm(cam.center - focal_point))
    out = sample_sphere_views(focal_point, radius, count, seed, cam.focal_px, cam.width,
                              cam.height, jitter)
    out.scheme = "error-aware"
    out.focal_point = focal_point
    return out
