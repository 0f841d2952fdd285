"""Differentiable surface splatting: EWA point rendering with hand-derived gradients,
surface regularizers and multi-view point-cloud optimization."""
from .backward import GradientBuffer, backward_normals, backward_pass, visibility_gradients
from .estimators import SplatOptimizer, SplatRenderer
from .forward import FragmentCache, RenderedImage, ShadingMode, rasterize, render
from .geometry import (Camera, OptimizationConfig, PointCloud, add_gaussian_noise,
                       bounding_box_diagonal)
from .losses import chamfer_distance, hausdorff_distance, smape, total_loss
from .optimizer import NumericalFailure, nesterov_step, run_optimization
from .regularizers import build_neighbor_graph, projection_loss, repulsion_loss
from .views import error_aware_views, sample_sphere_views

__version__ = "0.1.0"

__all__ = [
    "Camera", "FragmentCache", "GradientBuffer", "NumericalFailure", "OptimizationConfig",
    "PointCloud", "RenderedImage", "ShadingMode", "SplatOptimizer", "SplatRenderer",
    "add_gaussian_noise", "backward_normals", "backward_pass", "bounding_box_diagonal",
    "build_neighbor_graph", "chamfer_distance", "error_aware_views", "hausdorff_distance",
    "nesterov_step", "projection_loss", "rasterize", "render", "repulsion_loss",
    "run_optimization", "sample_sphere_views", "smape", "total_loss", "visibility_gradients",
]
