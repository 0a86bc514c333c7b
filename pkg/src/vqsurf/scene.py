"""Cameras, datasets, image codecs, and the analytic synthetic-scene
generator that provides desk-scale ground truth.

Camera convention: pinhole, x right, y down, camera looks along +z in the
camera frame; poses are 4x4 camera-to-world matrices. Pixel coordinates
are continuous, (column, row), with the pixel grid sampled at centers
(j + 0.5, i + 0.5). At downsample scale s the intrinsics shrink by 1/s,
which makes the ray of downsampled pixel (i, j) identical to the
full-scale ray through the center of its s-by-s block.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image


class DataError(ValueError):
    """Raised for malformed datasets, manifests, or image files."""


# -- images -------------------------------------------------------------------

def save_image(path, image: np.ndarray) -> None:
    """Write an (H,W,3) float image in [0,1] as 8-bit RGB PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB PNG to (H,W,3) float64 in [0,1] (value/255)."""
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return data / 255.0


# -- cameras ------------------------------------------------------------------

@dataclass
class CameraView:
    """Calibrated view: intrinsics, camera-to-world pose, optional image."""

    view_id: str
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray
    image: Optional[np.ndarray] = None

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (4, 4):
            raise DataError(f"view {self.view_id}: pose must be 4x4")
        rot = self.pose[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise DataError(
                f"view {self.view_id}: pose rotation is not orthonormal"
            )
        if self.fx <= 0 or self.fy <= 0:
            raise DataError(f"view {self.view_id}: focal lengths must be > 0")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def origin(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    @property
    def optical_axis(self) -> np.ndarray:
        return self.pose[:3, 2].copy()


@dataclass
class Rays:
    """Batch of rays: unit directions, shared or per-ray depth bounds."""

    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray     # (R, 3), unit
    t_near: np.ndarray   # (R,)
    t_far: np.ndarray    # (R,)

    def __post_init__(self):
        self.origins = np.atleast_2d(np.asarray(self.origins, dtype=np.float64))
        self.dirs = np.atleast_2d(np.asarray(self.dirs, dtype=np.float64))
        self.t_near = np.broadcast_to(
            np.asarray(self.t_near, dtype=np.float64), (len(self.dirs),)
        ).copy()
        self.t_far = np.broadcast_to(
            np.asarray(self.t_far, dtype=np.float64), (len(self.dirs),)
        ).copy()
        norms = np.linalg.norm(self.dirs, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise DataError("rays: directions must be unit length")
        if np.any(self.t_near >= self.t_far):
            raise DataError("rays: t_near must be < t_far")

    def __len__(self):
        return self.dirs.shape[0]

    def points_at(self, t: np.ndarray) -> np.ndarray:
        """Positions o + t*v for per-ray depth arrays of shape (R, M)."""
        return self.origins[:, None, :] + t[:, :, None] * self.dirs[:, None, :]


def generate_rays(view: CameraView, px: np.ndarray, py: np.ndarray,
                  t_near, t_far, scale: int = 1) -> Rays:
    """Rays through continuous pixel coordinates at downsample ``scale``.

    ``px`` are column coordinates and ``py`` row coordinates in the
    scaled image; intrinsics are divided by ``scale``.
    """
    if scale not in (1, 4):
        raise DataError(f"generate_rays: unsupported scale {scale}")
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    if view.image is not None:
        h = view.image.shape[0] / scale
        w = view.image.shape[1] / scale
        if np.any(px < 0) or np.any(px > w) or np.any(py < 0) or np.any(py > h):
            raise DataError(
                f"generate_rays: pixel coordinates outside {w}x{h} "
                f"image at scale {scale}"
            )
    fx, fy = view.fx / scale, view.fy / scale
    cx, cy = view.cx / scale, view.cy / scale
    d_cam = np.stack(
        [(px - cx) / fx, (py - cy) / fy, np.ones_like(px)], axis=-1
    )
    d_world = d_cam @ view.pose[:3, :3].T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(view.pose[:3, 3], d_world.shape).copy()
    return Rays(origins, d_world, t_near, t_far)


def grid_pixel_centers(height: int, width: int):
    """Row-major (px, py) center coordinates for an image grid."""
    jj, ii = np.meshgrid(np.arange(width), np.arange(height))
    return (jj + 0.5).reshape(-1).astype(float), (ii + 0.5).reshape(-1).astype(float)


def generate_grid_rays(view: CameraView, t_near, t_far, scale: int = 1) -> Rays:
    """One ray per pixel center of the (H/scale, W/scale) grid, row-major."""
    h, w = view.image.shape[:2]
    if h % scale or w % scale:
        raise DataError(
            f"generate_grid_rays: image {w}x{h} not divisible by scale {scale}; "
            "pad or crop at ingestion"
        )
    px, py = grid_pixel_centers(h // scale, w // scale)
    return generate_rays(view, px, py, t_near, t_far, scale=scale)


def project(view: CameraView, points: np.ndarray):
    """World points to continuous pixel coordinates (px, py) and depth."""
    pts = np.atleast_2d(points)
    rot = view.pose[:3, :3]
    cam = (pts - view.pose[:3, 3]) @ rot  # R^T (x - t)
    z = cam[:, 2]
    px = view.fx * cam[:, 0] / z + view.cx
    py = view.fy * cam[:, 1] / z + view.cy
    return px, py, z


def _look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray) -> np.ndarray:
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    nrm = np.linalg.norm(right)
    if nrm < 1e-9:
        raise DataError("look_at: view direction parallel to up vector")
    right /= nrm
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = fwd
    pose[:3, 3] = eye
    return pose


# -- manifests ----------------------------------------------------------------

@dataclass
class SceneDataset:
    """Loaded dataset: posed views plus scene-level depth bounds."""

    root: Path
    views: list
    scene_radius: float
    t_near: float
    t_far: float

    def view_ids(self):
        return [v.view_id for v in self.views]

    def get_view(self, view_id: str) -> CameraView:
        for v in self.views:
            if v.view_id == view_id:
                return v
        raise DataError(f"view id {view_id!r} not in dataset {self.root}")


def save_manifest(path, views: list[dict], scene_radius: float,
                  t_near: float, t_far: float) -> None:
    manifest = {
        "scene_radius": scene_radius,
        "t_near": t_near,
        "t_far": t_far,
        "views": views,
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_dataset(root) -> SceneDataset:
    """Read manifest.json plus all referenced images under ``root``."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {manifest_path}: {exc}") from exc
    for key in ("scene_radius", "t_near", "t_far", "views"):
        if key not in manifest:
            raise DataError(f"{manifest_path}: missing field {key!r}")
    views = []
    shape = None
    for rec in manifest["views"]:
        for key in ("id", "image", "fx", "fy", "cx", "cy", "pose"):
            if key not in rec:
                raise DataError(
                    f"{manifest_path}: view record missing field {key!r}"
                )
        img_path = root / rec["image"]
        if not img_path.exists():
            raise DataError(f"{manifest_path}: image file missing: {img_path}")
        image = load_image(img_path)
        if shape is None:
            shape = image.shape
        elif image.shape != shape:
            raise DataError(
                f"{manifest_path}: inconsistent image dimensions "
                f"({image.shape} vs {shape})"
            )
        views.append(
            CameraView(rec["id"], rec["fx"], rec["fy"], rec["cx"], rec["cy"],
                       np.asarray(rec["pose"]), image)
        )
    return SceneDataset(root, views, float(manifest["scene_radius"]),
                        float(manifest["t_near"]), float(manifest["t_far"]))


# -- analytic scenes ----------------------------------------------------------

@dataclass
class SceneObject:
    kind: str  # "sphere" | "box"
    center: np.ndarray
    albedo: np.ndarray
    radius: float = 1.0
    half_size: np.ndarray = field(default_factory=lambda: np.ones(3))

    def sdf(self, points: np.ndarray) -> np.ndarray:
        rel = points - self.center
        if self.kind == "sphere":
            return np.linalg.norm(rel, axis=-1) - self.radius
        if self.kind == "box":
            q = np.abs(rel) - self.half_size
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        raise DataError(f"unknown object kind {self.kind!r}")

    def bounding_radius(self) -> float:
        if self.kind == "sphere":
            extent = self.radius
        else:
            extent = float(np.linalg.norm(self.half_size))
        return float(np.linalg.norm(self.center)) + extent


class AnalyticScene:
    """Union of analytic SDF primitives with Lambertian shading."""

    def __init__(self, objects: list[SceneObject], light_dir, ambient: float):
        if not objects:
            raise DataError("analytic scene needs at least one object")
        self.objects = objects
        light = np.asarray(light_dir, dtype=np.float64)
        self.light_dir = light / np.linalg.norm(light)
        self.ambient = float(ambient)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        dists = np.stack([obj.sdf(points) for obj in self.objects], axis=0)
        return dists.min(axis=0)

    def nearest_albedo(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        dists = np.stack([obj.sdf(points) for obj in self.objects], axis=0)
        idx = dists.argmin(axis=0)
        albedos = np.stack([obj.albedo for obj in self.objects], axis=0)
        return albedos[idx]

    def normal(self, points: np.ndarray, h: float = 1e-5) -> np.ndarray:
        points = np.atleast_2d(points)
        grad = np.zeros_like(points)
        for k in range(3):
            dp = np.zeros(3)
            dp[k] = h
            grad[:, k] = (self.sdf(points + dp) - self.sdf(points - dp)) / (2 * h)
        return grad / np.linalg.norm(grad, axis=-1, keepdims=True)

    def shade(self, points: np.ndarray) -> np.ndarray:
        normals = self.normal(points)
        lam = np.maximum(normals @ self.light_dir, 0.0)
        intensity = self.ambient + (1.0 - self.ambient) * lam
        return self.nearest_albedo(points) * intensity[:, None]

    def bounding_radius(self) -> float:
        return max(obj.bounding_radius() for obj in self.objects)


def _scene_from_dict(spec: dict) -> AnalyticScene:
    objects = []
    for rec in spec.get("objects", []):
        kind = rec.get("type")
        if kind == "sphere":
            objects.append(SceneObject(
                "sphere", np.asarray(rec["center"], dtype=float),
                np.asarray(rec["albedo"], dtype=float),
                radius=float(rec["radius"])))
        elif kind == "box":
            objects.append(SceneObject(
                "box", np.asarray(rec["center"], dtype=float),
                np.asarray(rec["albedo"], dtype=float),
                half_size=np.asarray(rec["half_size"], dtype=float)))
        else:
            raise DataError(f"scene spec: unknown object type {kind!r}")
    if not objects:
        raise DataError("scene spec: empty object list")
    return AnalyticScene(objects, spec.get("light_dir", [0.4, 0.3, 0.85]),
                         spec.get("ambient", 0.25))


def load_analytic_scene(path) -> AnalyticScene:
    try:
        spec = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read scene sidecar {path}: {exc}") from exc
    return _scene_from_dict(spec)


def sphere_trace(scene: AnalyticScene, rays: Rays, eps: float = 1e-6,
                 max_steps: int = 256):
    """March rays to the first surface; returns (hit mask, hit depth)."""
    t = rays.t_near.copy()
    alive = np.ones(len(rays), dtype=bool)
    hit = np.zeros(len(rays), dtype=bool)
    for _ in range(max_steps):
        if not alive.any():
            break
        pos = rays.origins[alive] + t[alive, None] * rays.dirs[alive]
        dist = scene.sdf(pos)
        close = dist < eps
        idx = np.flatnonzero(alive)
        hit[idx[close]] = True
        t[alive] += np.maximum(dist, 0.0)
        step_done = close | (t[alive] > rays.t_far[idx])
        alive[idx[step_done]] = False
    return hit, t


def render_analytic_view(scene: AnalyticScene, view: CameraView,
                         t_near: float, t_far: float,
                         height: int, width: int) -> np.ndarray:
    """Ground-truth image by sphere tracing; background is black."""
    px, py = grid_pixel_centers(height, width)
    view_for_rays = CameraView(view.view_id, view.fx, view.fy, view.cx,
                               view.cy, view.pose,
                               np.zeros((height, width, 3)))
    rays = generate_rays(view_for_rays, px, py, t_near, t_far)
    hit, t = sphere_trace(scene, rays)
    image = np.zeros((height * width, 3))
    if hit.any():
        pts = rays.origins[hit] + t[hit, None] * rays.dirs[hit]
        image[hit] = np.clip(scene.shade(pts), 0.0, 1.0)
    return image.reshape(height, width, 3)


DEFAULT_SCENE_SPEC = {
    "objects": [
        {"type": "sphere", "center": [0.0, 0.0, 0.0], "radius": 1.0,
         "albedo": [0.85, 0.45, 0.25]},
    ],
    "light_dir": [0.45, 0.35, 0.82],
    "ambient": 0.25,
    "cameras": {"count": 10, "ring_radius": 3.0, "elevation_deg": 20.0,
                "image_size": 128, "focal_factor": 0.9},
}


def make_synthetic_scene(spec: dict, out_dir) -> SceneDataset:
    """Render a posed dataset from an analytic scene spec.

    Writes images/, manifest.json, and scene.json (the analytic parameters,
    kept so tests can query true distances) under ``out_dir``.
    """
    scene = _scene_from_dict(spec)
    cams = spec.get("cameras", DEFAULT_SCENE_SPEC["cameras"])
    count = int(cams.get("count", 10))
    ring_radius = float(cams.get("ring_radius", 3.0))
    elevation = math.radians(float(cams.get("elevation_deg", 20.0)))
    size = int(cams.get("image_size", 128))
    focal = float(cams.get("focal_factor", 0.9)) * size

    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    radius = scene.bounding_radius()
    t_near = max(ring_radius - 1.5 * radius, 1e-3)
    t_far = ring_radius + 1.5 * radius

    records = []
    for k in range(count):
        theta = 2.0 * math.pi * k / count
        eye = ring_radius * np.array([
            math.cos(elevation) * math.cos(theta),
            math.cos(elevation) * math.sin(theta),
            math.sin(elevation),
        ])
        pose = _look_at(eye, np.zeros(3), np.array([0.0, 0.0, 1.0]))
        view_id = f"v{k:03d}"
        view = CameraView(view_id, focal, focal, size / 2.0, size / 2.0, pose,
                          np.zeros((size, size, 3)))
        image = render_analytic_view(scene, view, t_near, t_far, size, size)
        rel = f"images/{view_id}.png"
        save_image(out_dir / rel, image)
        records.append({
            "id": view_id, "image": rel, "fx": focal, "fy": focal,
            "cx": size / 2.0, "cy": size / 2.0, "pose": pose.tolist(),
        })

    save_manifest(out_dir / "manifest.json", records, radius, t_near, t_far)
    sidecar = dict(spec)
    with open(out_dir / "scene.json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return load_dataset(out_dir)
