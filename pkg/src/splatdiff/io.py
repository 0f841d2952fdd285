"""File formats: PLY / XYZ point clouds, key=value configs, camera files, PFM / PNG images."""
from __future__ import annotations

import dataclasses
import os
import re
from pathlib import Path

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement, PlyParseError

from .geometry import Camera, OptimizationConfig, PointCloud


class FormatError(ValueError):
    """Malformed or incomplete input file."""


# ----------------------------------------------------------------------------- point clouds

def read_ply(path) -> PointCloud:
    """Read an ASCII or binary PLY with ``x y z nx ny nz`` and optional uchar ``red green blue``."""
    try:
        ply = PlyData.read(str(path))
    except (PlyParseError, OSError, ValueError, IndexError, KeyError) as exc:
        raise FormatError(f"cannot parse PLY {path}: {exc}") from exc
    if "vertex" not in ply:
        raise FormatError(f"PLY {path} has no vertex element")
    v = ply["vertex"].data
    names = set(v.dtype.names or ())
    missing = [k for k in ("x", "y", "z") if k not in names]
    if missing:
        raise FormatError(f"PLY {path} lacks position properties {missing}")
    if not {"nx", "ny", "nz"} <= names:
        raise FormatError(f"PLY {path} lacks normals (nx, ny, nz)")
    pos = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    nrm = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
    albedo = None
    if {"red", "green", "blue"} <= names:
        albedo = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.float64) / 255.0
    if not (np.isfinite(pos).all() and np.isfinite(nrm).all()):
        raise FormatError(f"PLY {path} contains non-finite values")
    if len(pos) and np.any(np.linalg.norm(nrm, axis=1) == 0):
        raise FormatError(f"PLY {path} contains zero-length normals")
    return PointCloud(pos, nrm, albedo)


def write_ply(path, cloud: PointCloud, binary=True, colors=None, normals=None):
    """Write positions and normals as double properties (binary little-endian by default).

    ``normals`` overrides the values stored in the ``nx ny nz`` slots (used to
    dump gradient buffers); ``colors`` (N, 3) in [0, 1] adds uchar RGB.
    """
    pos = np.asarray(cloud.positions, dtype=np.float64)
    nrm = np.asarray(cloud.normals if normals is None else normals, dtype=np.float64)
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8"), ("nx", "f8"), ("ny", "f8"), ("nz", "f8")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    data = np.empty(len(pos), dtype=fields)
    for i, k in enumerate("xyz"):
        data[k] = pos[:, i]
        data["n" + k] = nrm[:, i]
    if colors is not None:
        rgb = np.round(np.clip(np.asarray(colors, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
        for i, k in enumerate(("red", "green", "blue")):
            data[k] = rgb[:, i]
    element = PlyElement.describe(data, "vertex")
    _atomic_write(path, lambda f: PlyData([element], text=not binary, byte_order="<").write(f))


def read_xyz(path) -> PointCloud:
    """Whitespace-separated rows ``x y z nx ny nz``; normals are required."""
    try:
        arr = np.loadtxt(str(path), comments="#", ndmin=2)
    except ValueError as exc:
        raise FormatError(f"cannot parse XYZ {path}: {exc}") from exc
    if arr.size == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    if arr.shape[1] < 6:
        raise FormatError(f"XYZ {path} lacks normals (need 6 columns, got {arr.shape[1]})")
    return PointCloud(arr[:, :3], arr[:, 3:6])


def read_cloud(path) -> PointCloud:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix in (".xyz", ".txt", ".pts"):
        return read_xyz(path)
    raise FormatError(f"unsupported point cloud format {suffix!r}")


# ----------------------------------------------------------------------------- configuration

_BOOL = {"true": True, "1": True, "yes": True, "on": True,
         "false": False, "0": False, "no": False, "off": False}


def _coerce(name, kind, text):
    try:
        if kind == "bool":
            return _BOOL[text.lower()]
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except (KeyError, ValueError) as exc:
        raise FormatError(f"config key {name}: cannot read {text!r} as {kind}") from exc


def parse_config_text(text, base: OptimizationConfig | None = None) -> OptimizationConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; keys are OptimizationConfig fields."""
    types = OptimizationConfig.field_types()
    changes = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise FormatError(f"config line {lineno}: unknown key {key!r}")
        changes[key] = _coerce(key, types[key], value)
    try:
        return dataclasses.replace(base or OptimizationConfig(), **changes)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def read_config(path, base=None) -> OptimizationConfig:
    return parse_config_text(Path(path).read_text(), base)


def format_config(cfg: OptimizationConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        lines.append(f"{key} = {repr(value) if isinstance(value, float) else value}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------- cameras

def format_camera(cam: Camera) -> str:
    r = " ".join(repr(float(x)) for x in cam.rotation.ravel())
    t = " ".join(repr(float(x)) for x in cam.translation)
    return f"{r}\n{t}\n{cam.focal_px!r}\n{cam.width}\n{cam.height}\n"


def parse_camera_text(text) -> Camera:
    tokens = re.sub(r"#[^\n]*", " ", text).split()
    if len(tokens) != 15:
        raise FormatError(f"camera file needs 15 numbers (9 rotation, 3 translation, focal, "
                          f"width, height), got {len(tokens)}")
    try:
        vals = [float(x) for x in tokens]
    except ValueError as exc:
        raise FormatError(f"camera file: {exc}") from exc
    if vals[13] != int(vals[13]) or vals[14] != int(vals[14]):
        raise FormatError("camera width/height must be integers")
    try:
        return Camera(np.array(vals[:9]).reshape(3, 3), vals[9:12], vals[12],
                      int(vals[13]), int(vals[14]))
    except ValueError as exc:
        raise FormatError(f"camera file: {exc}") from exc


def read_camera(path) -> Camera:
    return parse_camera_text(Path(path).read_text())


def write_camera(path, cam: Camera):
    _atomic_write_text(path, format_camera(cam))


# ----------------------------------------------------------------------------- images

def write_pfm(path, image):
    """Little-endian float32 PFM (``PF`` colour or ``Pf`` grey), rows stored bottom-up."""
    arr = np.asarray(getattr(image, "channels", image), dtype=np.float32)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        tag = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError("PFM supports 1 or 3 channels")
    h, w = arr.shape[:2]
    payload = np.ascontiguousarray(arr[::-1]).astype("<f4").tobytes()
    _atomic_write(path, lambda f: f.write(tag + b"\n%d %d\n-1.0\n" % (w, h) + payload))


def read_pfm(path) -> np.ndarray:
    """Read a PFM as ``(H, W, C)`` float64 (C = 1 or 3)."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"PF", b"Pf"):
        raise FormatError(f"{path} is not a PFM file")
    channels = 3 if parts[0] == b"PF" else 1
    try:
        w, h = (int(x) for x in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PFM header") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    if len(parts[3]) < 4 * count:
        raise FormatError(f"{path}: truncated PFM payload")
    arr = np.frombuffer(parts[3], dtype=dtype, count=count).reshape(h, w, channels)
    return arr[::-1].astype(np.float64)


def write_png(path, image):
    """8-bit PNG; values are clamped to [0, 1] and scaled by 255."""
    arr = np.asarray(getattr(image, "channels", image), dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    _atomic_write(path, lambda f: Image.fromarray(u8).save(f, format="PNG"))


def read_png(path) -> np.ndarray:
    """Read a PNG as ``(H, W, C)`` float64 values/255 (no colour-space conversion)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    arr = arr.astype(np.float64) / 255.0
    return arr[:, :, None] if arr.ndim == 2 else arr


def read_image(path) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        return read_pfm(path)
    if suffix == ".png":
        return read_png(path)
    raise FormatError(f"unsupported image format {suffix!r}")


# ----------------------------------------------------------------------------- reference sets

def read_reference_dir(directory):
    """Load ``view_%03d.{pfm,png}`` + ``view_%03d.cam`` pairs in index order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"reference directory {directory} does not exist")
    cams = sorted(directory.glob("view_*.cam"))
    if not cams:
        raise FormatError(f"no view_###.cam files in {directory}")
    cameras, images = [], []
    for cam_path in cams:
        stem = cam_path.with_suffix("")
        img_path = next((p for p in (stem.with_suffix(".pfm"), stem.with_suffix(".png"))
                         if p.exists()), None)
        if img_path is None:
            raise FormatError(f"missing reference image for {cam_path.name}")
        cam = read_camera(cam_path)
        img = read_image(img_path)
        if img.shape[:2] != (cam.height, cam.width):
            raise FormatError(f"{img_path.name}: image size {img.shape[1]}x{img.shape[0]} "
                              f"does not match camera {cam.width}x{cam.height}")
        cameras.append(cam)
        images.append(img)
    return cameras, images


def write_reference_dir(directory, cameras, images):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (cam, img) in enumerate(zip(cameras, images)):
        write_camera(directory / f"view_{i:03d}.cam", cam)
        write_pfm(directory / f"view_{i:03d}.pfm", img)
        written += [directory / f"view_{i:03d}.cam", directory / f"view_{i:03d}.pfm"]
    return written


# ----------------------------------------------------------------------------- helpers

def _atomic_write(path, writer):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        writer(f)
    os.replace(tmp, path)


def _atomic_write_text(path, text):
    _atomic_write(path, lambda f: f.write(text.encode()))
