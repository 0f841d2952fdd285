"""End-to-end experiment drivers behind the command line.

Every run writes into a staging directory that is renamed onto the requested
output directory only after all files are complete.  Each output directory
contains ``config.resolved`` (the full configuration actually used) and
``manifest.txt`` (sha256, size and relative path of every other file).
"""
from __future__ import annotations

import hashlib
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .forward import ShadingMode, rasterize, silhouette
from .geometry import (DEFORM_SCHEDULE, EDIT_SCHEDULE, OptimizationConfig, PointCloud,
                       add_gaussian_noise)
from .losses import chamfer_distance, hausdorff_distance
from .optimizer import NumericalFailure, run_optimization
from .views import error_aware_views, sample_sphere_views

log = logging.getLogger(__name__)

TASKS = ("render", "optimize-deform", "optimize-edit", "noise", "metrics", "views")

# module seeds derive from the experiment seed by fixed offsets
SEED_OFFSET_VIEWS = 1
SEED_OFFSET_OPTIMIZE = 2
SEED_OFFSET_NOISE = 3
SEED_OFFSET_FOCUS = 4


class BadInput(ValueError):
    """User-facing input problem (maps to exit code 2)."""


@dataclass
class ExperimentSpec:
    task: str
    out_dir: Path
    config: OptimizationConfig = field(default_factory=OptimizationConfig)
    seed: int = 0
    inputs: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    threads: int = 1
    snapshot_every: int = 0
    debug_gradients: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise BadInput(f"unknown task {self.task!r}")
        self.out_dir = Path(self.out_dir)
        for key, path in self.inputs.items():
            if path is not None and not Path(path).exists():
                raise BadInput(f"input {key} not found: {path}")
        if self.threads < 1:
            raise BadInput("threads must be >= 1")
        if self.snapshot_every < 0:
            raise BadInput("snapshot-every must be >= 0")


def resolve_config(mode=None, config_path=None, seed=None) -> OptimizationConfig:
    """Defaults, then the mode's schedule, then the config file, then an explicit seed."""
    base = OptimizationConfig()
    if mode == "deform":
        base = base.replace(**DEFORM_SCHEDULE)
    elif mode == "edit":
        base = base.replace(**EDIT_SCHEDULE)
    cfg = io.read_config(config_path, base) if config_path else base
    if seed is not None:
        cfg = cfg.replace(seed=int(seed))
    return cfg


# ----------------------------------------------------------------------------- output handling

class _Output:
    """Staging directory that becomes ``out_dir`` on :meth:`commit`."""

    def __init__(self, out_dir: Path):
        self.final = Path(out_dir)
        if self.final.exists() and (not self.final.is_dir() or any(self.final.iterdir())):
            raise BadInput(f"output directory {self.final} exists and is not empty")
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.stage = self.final.parent / f".{self.final.name}.partial-{os.getpid()}"
        if self.stage.exists():
            shutil.rmtree(self.stage)
        self.stage.mkdir()

    def path(self, rel) -> Path:
        p = self.stage / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def commit(self, cfg: OptimizationConfig, spec: ExperimentSpec):
        text = io.format_config(cfg)
        text += f"# task = {spec.task}\n# threads = {spec.threads}\n"
        for key in sorted(spec.options):
            text += f"# option {key} = {spec.options[key]}\n"
        self.path("config.resolved").write_text(text)
        entries = []
        for p in sorted(self.stage.rglob("*")):
            if p.is_file():
                data = p.read_bytes()
                rel = p.relative_to(self.stage).as_posix()
                entries.append(f"{hashlib.sha256(data).hexdigest()}  {len(data)}  {rel}\n")
        self.path("manifest.txt").write_text("".join(entries))
        if self.final.exists():
            self.final.rmdir()
        os.replace(self.stage, self.final)
        return self.final

    def abort(self):
        shutil.rmtree(self.stage, ignore_errors=True)


def _run(spec, cfg, body):
    out = _Output(spec.out_dir)
    try:
        result = body(out)
    except BaseException:
        out.abort()
        raise
    out.commit(cfg, spec)
    return result


# ----------------------------------------------------------------------------- camera helpers

def _scene_frame(cloud: PointCloud):
    if len(cloud) == 0:
        return np.zeros(3), 1.0
    lo, hi = cloud.positions.min(axis=0), cloud.positions.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    return (lo + hi) / 2.0, diag if diag > 0 else 1.0


def default_views(cloud: PointCloud, cfg: OptimizationConfig, seed, count=None):
    """Farthest-point sphere views at ``camera_distance`` bounding-box diagonals.

    With ``focal_px = 0`` the focal length is chosen so the bounding sphere
    spans about 80% of the image.
    """
    center, diag = _scene_frame(cloud)
    focal = cfg.focal_px or 0.8 * cfg.image_size * cfg.camera_distance
    return sample_sphere_views(center, cfg.camera_distance * diag, count or cfg.num_reference_views,
                               seed, focal, cfg.image_size, cfg.image_size, cfg.view_jitter)


def _load_cameras(spec, cloud, cfg):
    cams = spec.inputs.get("cameras")
    if cams is None:
        return list(default_views(cloud, cfg, spec.seed + SEED_OFFSET_VIEWS))
    cams = Path(cams)
    if cams.is_dir():
        files = sorted(cams.glob("*.cam"))
        if not files:
            raise BadInput(f"no .cam files in {cams}")
        return [io.read_camera(f) for f in files]
    return [io.read_camera(cams)]


def _render_set(cloud, cameras, cfg, mode):
    return [rasterize(cloud, cam, mode, cfg) for cam in cameras]


# ----------------------------------------------------------------------------- tasks

def run_render(spec: ExperimentSpec):
    cfg = spec.config
    cloud = io.read_cloud(spec.inputs["cloud"])
    mode = ShadingMode.parse(spec.options.get("shading") or cfg.shading)
    cameras = _load_cameras(spec, cloud, cfg)

    def body(out):
        for i, (img, _) in enumerate(_render_set(cloud, cameras, cfg, mode)):
            io.write_camera(out.path(f"view_{i:03d}.cam"), cameras[i])
            io.write_pfm(out.path(f"view_{i:03d}.pfm"), img)
            io.write_png(out.path(f"view_{i:03d}.png"), img)
        return len(cameras)

    return _run(spec, cfg, body)


def run_noise(spec: ExperimentSpec):
    cfg = spec.config
    sigma = float(spec.options.get("sigma", 0.0))
    if sigma < 0:
        raise BadInput("sigma must be non-negative")
    cloud = io.read_cloud(spec.inputs["cloud"])

    def body(out):
        noisy = add_gaussian_noise(cloud, sigma, spec.seed + SEED_OFFSET_NOISE)
        colors = cloud.albedo if spec.options.get("keep_colors", True) else None
        io.write_ply(out.path("cloud.ply"), noisy, binary=spec.options.get("binary", True),
                     colors=colors)
        return noisy

    return _run(spec, cfg, body)


def run_metrics(spec: ExperimentSpec):
    cfg = spec.config
    a = io.read_cloud(spec.inputs["cloud"])
    b = io.read_cloud(spec.inputs["target"])
    cd, hd = chamfer_distance(a, b), hausdorff_distance(a, b)

    def body(out):
        out.path("metrics.txt").write_text(f"chamfer {cd!r}\nhausdorff {hd!r}\n")
        return cd, hd

    return _run(spec, cfg, body)


def run_views(spec: ExperimentSpec):
    cfg = spec.config
    scheme = spec.options.get("scheme", "sphere")
    count = int(spec.options.get("count") or cfg.num_reference_views)
    cloud = io.read_cloud(spec.inputs["cloud"]) if spec.inputs.get("cloud") else \
        PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    if scheme == "sphere":
        views = default_views(cloud, cfg, spec.seed + SEED_OFFSET_VIEWS, count)
    elif scheme == "error-aware":
        if not spec.inputs.get("refs") or len(cloud) == 0:
            raise BadInput("error-aware views need --cloud and --refs")
        cameras, refs = io.read_reference_dir(spec.inputs["refs"])
        mode = ShadingMode.parse(cfg.shading)
        rendered = [img for img, _ in _render_set(cloud, cameras, cfg, mode)]
        views = error_aware_views(cloud, cameras, rendered, refs, count,
                                  spec.seed + SEED_OFFSET_FOCUS, cfg.k_focus, cfg.downsample,
                                  cfg.focus_radius_factor, jitter=cfg.view_jitter)
    else:
        raise BadInput(f"unknown view scheme {scheme!r}")

    def body(out):
        for i, cam in enumerate(views.cameras):
            io.write_camera(out.path(f"view_{i:03d}.cam"), cam)
        return views

    return _run(spec, cfg, body)


def _optimize(spec: ExperimentSpec, mode: str):
    cfg = spec.config
    cloud = io.read_cloud(spec.inputs["cloud"])
    if len(cloud) == 0:
        raise BadInput("empty point cloud")
    shading = ShadingMode.parse(cfg.shading)
    target = io.read_cloud(spec.inputs["target"]) if spec.inputs.get("target") else None
    if spec.inputs.get("refs"):
        cameras, references = io.read_reference_dir(spec.inputs["refs"])
        if target is not None and spec.options.get("render_target_refs"):
            references = [img.channels for img, _ in _render_set(target, cameras, cfg, shading)]
    elif target is not None:
        cameras = list(default_views(target, cfg, spec.seed + SEED_OFFSET_VIEWS))
        references = [img.channels for img, _ in _render_set(target, cameras, cfg, shading)]
    else:
        raise BadInput("need reference images (--refs) or a target cloud (--target)")
    for i, (cam, ref) in enumerate(zip(cameras, references)):
        if ref.shape[2] != shading.channels:
            raise BadInput(f"reference {i} has {ref.shape[2]} channels, shading "
                           f"{shading.value} renders {shading.channels}")
    extra = None
    if cfg.error_aware_views > 0:
        if target is None:
            raise BadInput("error_aware_views needs a target cloud to render focus references")

        def extra(cycle, current, cams, renders, refs):
            views = error_aware_views(current, cams, renders, refs, cfg.error_aware_views,
                                      spec.seed + SEED_OFFSET_FOCUS + cycle, cfg.k_focus,
                                      cfg.downsample, cfg.focus_radius_factor,
                                      jitter=cfg.view_jitter)
            return views.cameras, [rasterize(target, c, shading, cfg)[0] for c in views.cameras]

    def body(out):
        snapshots = []

        def callback(step, current, record):
            if spec.snapshot_every and (step + 1) % spec.snapshot_every == 0:
                io.write_ply(out.path(f"snapshots/step_{step + 1:05d}.ply"), current)
                img = rasterize(current, cameras[0], shading, cfg)[0]
                io.write_png(out.path(f"snapshots/step_{step + 1:05d}.png"), img)
                snapshots.append(step + 1)

        with open(out.path("run.log"), "w") as run_log:
            try:
                result = run_optimization(cloud, cameras, references, cfg, mode=mode,
                                          shading=shading, threads=spec.threads,
                                          seed=spec.seed + SEED_OFFSET_OPTIMIZE,
                                          extra_views=extra, callback=callback, run_log=run_log)
            except NumericalFailure as exc:
                if exc.dump is not None:
                    dump_dir = spec.out_dir.parent / f"{spec.out_dir.name}.failure"
                    dump_dir.mkdir(parents=True, exist_ok=True)
                    failing = PointCloud(exc.dump["positions"], exc.dump["normals"])
                    io.write_ply(dump_dir / "gradient_position.ply", failing,
                                 normals=np.nan_to_num(exc.dump["d_position"]))
                    io.write_ply(dump_dir / "gradient_normal.ply", failing,
                                 normals=np.nan_to_num(exc.dump["d_normal"]))
                raise
        final = result.cloud
        io.write_ply(out.path("cloud.ply"), final)
        if spec.debug_gradients and result.state.last_position_grad is not None:
            io.write_ply(out.path("debug/gradient_position.ply"), final,
                         normals=result.state.last_position_grad)
            io.write_ply(out.path("debug/gradient_normal.ply"), final,
                         normals=result.state.last_normal_grad)
        for i, cam in enumerate(cameras):
            img = rasterize(final, cam, shading, cfg)[0]
            io.write_pfm(out.path(f"renders/view_{i:03d}.pfm"), img)
        metrics = {}
        if target is not None:
            metrics = dict(chamfer=chamfer_distance(final, target),
                           hausdorff=hausdorff_distance(final, target),
                           initial_chamfer=chamfer_distance(cloud, target))
            out.path("metrics.txt").write_text(
                "".join(f"{k} {v!r}\n" for k, v in metrics.items()))
        return dict(result=result, metrics=metrics, snapshots=snapshots)

    return _run(spec, cfg, body)


def run_deform(spec: ExperimentSpec):
    return _optimize(spec, "deform")


def run_edit(spec: ExperimentSpec):
    return _optimize(spec, "edit")


def silhouette_iou(cloud_a, cloud_b, cameras, cfg=None):
    """Per-view intersection-over-union of rendered coverage masks."""
    from .scenes import mask_iou

    cfg = cfg or OptimizationConfig()
    return [mask_iou(silhouette(rasterize(cloud_a, c, "diffuse", cfg)[1]),
                     silhouette(rasterize(cloud_b, c, "diffuse", cfg)[1])) for c in cameras]


RUNNERS = {
    "render": run_render,
    "optimize-deform": run_deform,
    "optimize-edit": run_edit,
    "noise": run_noise,
    "metrics": run_metrics,
    "views": run_views,
}


def run(spec: ExperimentSpec):
    return RUNNERS[spec.task](spec)
