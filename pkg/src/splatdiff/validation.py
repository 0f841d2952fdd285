"""Input validation helpers shared by the estimator wrappers, pipeline and CLI."""
from __future__ import annotations

import numpy as np

from .geometry import Camera, PointCloud


def check_points(x, name="positions", allow_empty=True) -> np.ndarray:
    """Return ``x`` as a finite float64 ``(N, 3)`` array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if not allow_empty and len(arr) == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_cloud(cloud, allow_empty=True) -> PointCloud:
    """Accept a PointCloud or an ``(N, 6)`` array of positions and normals."""
    if isinstance(cloud, PointCloud):
        check_points(cloud.positions, allow_empty=allow_empty)
        check_points(cloud.normals, "normals")
        out = cloud
    else:
        arr = np.asarray(cloud, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 6:
            raise ValueError(f"expected a PointCloud or an (N, 6) array, got shape {arr.shape}")
        out = PointCloud(check_points(arr[:, :3], allow_empty=allow_empty),
                         check_points(arr[:, 3:], "normals"))
    if len(out) and np.any(np.linalg.norm(out.normals, axis=1) == 0):
        raise ValueError("normals must be non-zero")
    return out


def check_image(image, name="image") -> np.ndarray:
    """Return an image as finite float64 ``(H, W, C)``."""
    arr = np.asarray(getattr(image, "channels", image), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have shape (H, W[, C]), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_views(cameras, references=None):
    """Validate a camera list and (optionally) parallel reference images."""
    cameras = list(cameras)
    if not cameras:
        raise ValueError("at least one camera is required")
    for cam in cameras:
        if not isinstance(cam, Camera):
            raise TypeError(f"expected Camera, got {type(cam).__name__}")
    if references is None:
        return cameras, None
    references = [check_image(r, f"reference {i}") for i, r in enumerate(references)]
    if len(references) != len(cameras):
        raise ValueError(f"reference/view count mismatch: {len(references)} images for "
                         f"{len(cameras)} cameras")
    for i, (cam, ref) in enumerate(zip(cameras, references)):
        if ref.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"reference {i} size {ref.shape[1]}x{ref.shape[0]} does not match "
                             f"camera {cam.width}x{cam.height}")
    return cameras, references
