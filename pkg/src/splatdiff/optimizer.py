"""Multi-view Nesterov optimization with alternating normal / position phases."""
from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .backward import backward_pass
from .forward import ShadingMode, merge_threshold, rasterize
from .geometry import OptimizationConfig, PointCloud, normalize_rows
from .losses import smape, total_loss
from .regularizers import (build_neighbor_graph, default_radius, pca_frames, projection_loss,
                           repulsion_loss)

log = logging.getLogger(__name__)


class Phase(enum.Enum):
    NORMAL = "normal"
    POSITION = "position"


class NumericalFailure(RuntimeError):
    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump


@dataclass
class OptimizerState:
    velocity_position: np.ndarray
    velocity_normal: np.ndarray
    cycle_index: int = 0
    step_index: int = 0
    phase: Phase = Phase.NORMAL
    last_position_grad: np.ndarray | None = None
    last_normal_grad: np.ndarray | None = None

    @classmethod
    def fresh(cls, n):
        return cls(np.zeros((n, 3)), np.zeros((n, 3)))

    def track(self, n):
        """Reset momentum buffers if the point count changed."""
        if len(self.velocity_position) != n:
            self.velocity_position = np.zeros((n, 3))
            self.velocity_normal = np.zeros((n, 3))


@dataclass
class StepRecord:
    cycle: int
    step: int
    phase: str
    image_loss: float
    projection: float
    repulsion: float
    total: float
    image_position_grad_norm: float = 0.0

    def line(self):
        return (f"{self.cycle} {self.step} {self.phase} {self.image_loss:.9e} "
                f"{self.projection:.9e} {self.repulsion:.9e} {self.total:.9e}")


@dataclass
class OptimizationResult:
    cloud: PointCloud
    history: list = field(default_factory=list)
    state: OptimizerState | None = None
    stopped_early: bool = False

    @property
    def losses(self):
        return np.array([r.total for r in self.history])

    def log_text(self):
        return "".join(r.line() + "\n" for r in self.history)


def nesterov_step(params, velocity, gradient, lr, momentum):
    """One Nesterov update; ``gradient`` must be evaluated at ``params + momentum * velocity``."""
    velocity = momentum * np.asarray(velocity) - lr * np.asarray(gradient)
    return np.asarray(params) + velocity, velocity


def clip_gradient(grad, factor):
    """Clip per-point norms at ``factor`` times the median non-zero norm."""
    if factor <= 0 or len(grad) == 0:
        return grad
    norms = np.linalg.norm(grad, axis=1)
    nz = norms[norms > 0]
    if len(nz) == 0:
        return grad
    limit = factor * np.median(nz)
    scale = np.where(norms > limit, limit / np.where(norms > 0, norms, 1.0), 1.0)
    return grad * scale[:, None]


def render_views(cloud, cameras, mode, cfg, threads=1, count_occlusion=True):
    """Render every view; occlusion counters are rebuilt from this batch of views."""
    merge_t = merge_threshold(cloud, cfg)

    def one(cam):
        return rasterize(cloud, cam, mode, cfg, merge_t=merge_t)

    if threads > 1 and len(cameras) > 1:
        with ThreadPoolExecutor(threads) as pool:
            out = list(pool.map(one, cameras))
    else:
        out = [one(c) for c in cameras]
    if count_occlusion:
        cloud.occlusion_count[:] = 0
        for _, cache in out:
            cloud.occlusion_count += cache.occluded
    return [o[0] for o in out], [o[1] for o in out]


def regularizer_terms(cloud, cfg, mode="deform"):
    """Projection and repulsion losses with their position gradients."""
    n = len(cloud)
    if n < 2 or (cfg.gamma_p == 0 and cfg.gamma_r == 0):
        return 0.0, np.zeros((n, 3)), 0.0, np.zeros((n, 3))
    graph = build_neighbor_graph(cloud, cfg)
    frames = pca_frames(cloud, graph)
    lr_, gr = repulsion_loss(cloud, graph, frames)
    proj_cfg = cfg
    if mode == "deform" and cfg.neigh_d_proj_rel == 0:
        proj_cfg = cfg.replace(neigh_d_proj_rel=0.1)
    proj_radius = default_radius(cloud, proj_cfg, projection=True)
    if proj_radius != graph.radius:
        pgraph = build_neighbor_graph(cloud, cfg, radius=proj_radius)
        pframes = pca_frames(cloud, pgraph)
    else:
        pgraph, pframes = graph, frames
    lp, gp = projection_loss(cloud, pgraph, pframes)
    return lp, gp, lr_, gr


def _subset(rng, total, size):
    if size >= total:
        return np.arange(total)
    return np.sort(rng.choice(total, size=size, replace=False))


def run_optimization(initial: PointCloud, cameras, references, cfg: OptimizationConfig | None = None,
                     mode="deform", shading=None, threads=1, seed=None, extra_views=None,
                     callback=None, run_log=None, phases=None) -> OptimizationResult:
    """Fit point positions and normals so renders match ``references``.

    ``cameras``/``references`` are parallel lists.  Each cycle samples
    ``views_per_step`` of them, runs ``t_n`` normal steps (positions move only
    under the regularizers) and then ``t_p`` position steps.  ``extra_views``,
    if given, is called as ``extra_views(cycle, cloud, cameras, renders, refs)``
    and returns additional ``(cameras, references)`` for that cycle.
    ``phases`` restricts the schedule, e.g. ``("position",)``.
    """
    cfg = cfg or OptimizationConfig()
    if len(cameras) < 1 or len(cameras) != len(references):
        raise ValueError("need at least one reference view and one camera per reference")
    shading = ShadingMode.parse(shading or cfg.shading)
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    refs = [np.asarray(getattr(r, "channels", r), dtype=np.float64) for r in references]
    refs = [r[:, :, None] if r.ndim == 2 else r for r in refs]
    # the renderer normalizes normals itself; unit length is restored after each update
    cloud = initial.copy()
    state = OptimizerState.fresh(len(cloud))
    result = OptimizationResult(cloud, [], state)
    allowed = {Phase(p) for p in phases} if phases else {Phase.NORMAL, Phase.POSITION}
    schedule = ([Phase.NORMAL] * cfg.t_n if Phase.NORMAL in allowed else []) + \
               ([Phase.POSITION] * cfg.t_p if Phase.POSITION in allowed else [])
    previous_cycle_loss = None
    step_counter = 0
    for cycle in range(cfg.cycles):
        state.cycle_index = cycle
        pick = _subset(rng, len(cameras), cfg.views_per_step)
        cams = [cameras[i] for i in pick]
        view_refs = [refs[i] for i in pick]
        if extra_views is not None:
            renders, _ = render_views(cloud, cams, shading, cfg, threads, count_occlusion=False)
            extra_cams, extra_refs = extra_views(cycle, cloud, cams, renders, view_refs)
            cams = cams + list(extra_cams)
            view_refs = view_refs + [np.asarray(getattr(r, "channels", r)) for r in extra_refs]
        last = None
        for phase in schedule:
            state.phase = phase
            state.track(len(cloud))
            last = _step(cloud, state, cams, view_refs, cfg, shading, phase, mode, threads)
            last.cycle, last.step = cycle, step_counter
            result.history.append(last)
            if run_log is not None:
                run_log.write(last.line() + "\n")
            if callback is not None:
                callback(step_counter, cloud, last)
            state.step_index += 1
            step_counter += 1
        if last is None:
            break
        if previous_cycle_loss is not None:
            improvement = previous_cycle_loss - last.total
            if last.total == 0 or improvement < cfg.early_stop_rel * abs(previous_cycle_loss):
                result.stopped_early = cycle + 1 < cfg.cycles
                break
        elif last.total == 0:
            result.stopped_early = cycle + 1 < cfg.cycles
            break
        previous_cycle_loss = last.total
    return result


def _step(cloud, state, cams, refs, cfg, shading, phase, mode, threads) -> StepRecord:
    mu = cfg.momentum
    look = cloud.copy()
    look.positions = cloud.positions + mu * state.velocity_position
    if phase is Phase.NORMAL:
        look.normals = cloud.normals + mu * state.velocity_normal
    images, caches = render_views(look, cams, shading, cfg, threads)
    per_view, pixel_grads = [], []
    for img, ref in zip(images, refs):
        loss, grad = smape(img, ref)
        per_view.append(loss)
        pixel_grads.append(grad)
    normal_phase = phase is Phase.NORMAL
    image_grads = backward_pass(look, cams, caches, images, pixel_grads, cfg, threads,
                                normals=normal_phase, positions=not normal_phase,
                                visibility=not normal_phase, references=refs)
    lp, gp, lr_, gr = regularizer_terms(look, cfg, mode)
    report = total_loss(per_view, lp, lr_, cfg.gamma_p, cfg.gamma_r)
    cloud.occlusion_count[:] = look.occlusion_count
    if not np.isfinite(report.total) or not image_grads.all_finite():
        raise NumericalFailure(
            f"non-finite loss or gradient at cycle {state.cycle_index} step {state.step_index}",
            dump=dict(d_position=image_grads.d_position, d_normal=image_grads.d_normal,
                      positions=look.positions, normals=look.normals))
    reg_grad = (clip_gradient(cfg.gamma_p * gp, cfg.clip_factor)
                + clip_gradient(cfg.gamma_r * gr, cfg.clip_factor))
    image_pos = clip_gradient(image_grads.d_position, cfg.clip_factor)
    pos_grad = reg_grad + (image_pos if not normal_phase else 0.0)
    state.last_position_grad = np.asarray(pos_grad + np.zeros((len(cloud), 3)))
    state.last_normal_grad = image_grads.d_normal.copy()
    cloud.positions, state.velocity_position = nesterov_step(
        cloud.positions, state.velocity_position, pos_grad, cfg.lr_position, mu)
    if normal_phase:
        ngrad = clip_gradient(image_grads.d_normal, cfg.clip_factor)
        raw, state.velocity_normal = nesterov_step(
            cloud.normals, state.velocity_normal, ngrad, cfg.lr_normal, mu)
        moved = np.any(raw != cloud.normals, axis=1)
        cloud.normals = cloud.normals.copy()
        cloud.normals[moved] = normalize_rows(raw[moved])
    return StepRecord(0, 0, phase.value, report.image_loss, lp, lr_, report.total,
                      float(np.linalg.norm(image_pos)) if not normal_phase else 0.0)
