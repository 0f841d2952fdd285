"""scikit-learn style wrappers: a renderer transformer and an optimizing estimator."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .forward import ShadingMode, rasterize
from .geometry import DEFORM_SCHEDULE, EDIT_SCHEDULE, OptimizationConfig
from .losses import smape
from .optimizer import run_optimization
from .validation import check_cloud, check_views


class SplatRenderer(BaseEstimator, TransformerMixin):
    """Render a fitted point cloud from a list of cameras.

    ``fit(cloud)`` stores the cloud; ``transform(cameras)`` returns a
    ``(V, H, W, C)`` stack of images.
    """

    def __init__(self, shading="diffuse", cutoff_c=4.0, merge_t_rel=0.01, cache_k=5,
                 backface_culling=True):
        self.shading = shading
        self.cutoff_c = cutoff_c
        self.merge_t_rel = merge_t_rel
        self.cache_k = cache_k
        self.backface_culling = backface_culling

    def _config(self):
        return OptimizationConfig(cutoff_c=self.cutoff_c, merge_t_rel=self.merge_t_rel,
                                  cache_k=self.cache_k, backface_culling=self.backface_culling,
                                  shading=ShadingMode.parse(self.shading).value)

    def fit(self, cloud, y=None):
        self._config()
        self.cloud_ = check_cloud(cloud)
        return self

    def transform(self, cameras):
        if not hasattr(self, "cloud_"):
            raise NotFittedError("SplatRenderer is not fitted yet; call fit(cloud) first")
        cameras, _ = check_views(cameras)
        cfg = self._config()
        return np.stack([rasterize(self.cloud_, cam, cfg.shading, cfg)[0].channels
                         for cam in cameras])


class SplatOptimizer(BaseEstimator):
    """Fit a point cloud to reference images.

    ``fit(cloud, (cameras, references))`` runs the multi-view optimization;
    ``predict(cameras)`` renders the optimized cloud; ``score`` returns the
    negated summed SMAPE so that larger is better.
    """

    def __init__(self, mode="deform", config=None, threads=1, seed=None):
        self.mode = mode
        self.config = config
        self.threads = threads
        self.seed = seed

    def _resolved_config(self):
        if self.mode not in ("deform", "edit"):
            raise ValueError(f"mode must be 'deform' or 'edit', got {self.mode!r}")
        if self.config is None:
            schedule = DEFORM_SCHEDULE if self.mode == "deform" else EDIT_SCHEDULE
            return OptimizationConfig(**schedule)
        if isinstance(self.config, OptimizationConfig):
            return self.config
        return OptimizationConfig(**dict(self.config))

    def fit(self, cloud, views):
        cfg = self._resolved_config()
        cameras, references = views
        cameras, references = check_views(cameras, references)
        result = run_optimization(check_cloud(cloud, allow_empty=False), cameras, references,
                                  cfg, mode=self.mode, threads=self.threads, seed=self.seed)
        self.cloud_ = result.cloud
        self.history_ = result.history
        self.loss_curve_ = result.losses
        self.config_ = cfg
        return self

    def predict(self, cameras):
        if not hasattr(self, "cloud_"):
            raise NotFittedError("SplatOptimizer is not fitted yet")
        cameras, _ = check_views(cameras)
        return np.stack([rasterize(self.cloud_, cam, self.config_.shading, self.config_)[0].channels
                         for cam in cameras])

    def score(self, cameras, references):
        cameras, references = check_views(cameras, references)
        rendered = self.predict(cameras)
        return -float(sum(smape(img, ref)[0] for img, ref in zip(rendered, references)))
