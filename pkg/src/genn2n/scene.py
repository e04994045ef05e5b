"""Procedural analytic scenes, pinhole cameras and a reference volume renderer.

Primitives are homogeneous spheres and flat disks (short vertical
cylinders).  Each primitive occupies a single interval along any ray, so
the optical depth of a ray segment is exact: the reference renderer only
approximates *where* along a segment emission happens, not how much light
is absorbed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SCENE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]
    density: float

    def interval(self, origins, dirs):
        """Entry/exit distance of each ray; empty rays get t0 >= t1."""
        oc = origins - np.asarray(self.center)
        b = np.einsum("...k,...k->...", oc, dirs)
        c = np.einsum("...k,...k->...", oc, oc) - self.radius ** 2
        disc = b * b - c
        hit = disc > 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        t0 = np.where(hit, -b - root, np.inf)
        t1 = np.where(hit, -b + root, -np.inf)
        return t0, t1

    def contains(self, pts):
        return np.sum((pts - np.asarray(self.center)) ** 2, axis=-1) < self.radius ** 2

    @property
    def extent(self) -> float:
        return self.radius


@dataclass(frozen=True)
class Disk:
    """Vertical (y-axis) cylinder slab: center is the middle of the slab."""

    center: tuple[float, float, float]
    radius: float
    thickness: float
    albedo: tuple[float, float, float]
    density: float

    def interval(self, origins, dirs):
        cx, cy, cz = self.center
        h = self.thickness / 2
        oy, dy = origins[..., 1] - cy, dirs[..., 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (-h - oy) / dy
            tb = (h - oy) / dy
        flat = np.abs(dy) < 1e-15
        inside_slab = np.abs(oy) < h
        s0 = np.where(flat, np.where(inside_slab, -np.inf, np.inf), np.minimum(ta, tb))
        s1 = np.where(flat, np.where(inside_slab, np.inf, -np.inf), np.maximum(ta, tb))

        ox, oz = origins[..., 0] - cx, origins[..., 2] - cz
        dx, dz = dirs[..., 0], dirs[..., 2]
        a = dx * dx + dz * dz
        b = ox * dx + oz * dz
        c = ox * ox + oz * oz - self.radius ** 2
        vertical = a < 1e-15
        with np.errstate(divide="ignore", invalid="ignore"):
            disc = b * b - a * c
            hit = disc > 0
            root = np.sqrt(np.where(hit, disc, 0.0))
            c0 = np.where(hit, (-b - root) / np.where(vertical, 1.0, a), np.inf)
            c1 = np.where(hit, (-b + root) / np.where(vertical, 1.0, a), -np.inf)
        c0 = np.where(vertical, np.where(c < 0, -np.inf, np.inf), c0)
        c1 = np.where(vertical, np.where(c < 0, np.inf, -np.inf), c1)
        return np.maximum(s0, c0), np.minimum(s1, c1)

    def contains(self, pts):
        d = pts - np.asarray(self.center)
        return (np.abs(d[..., 1]) < self.thickness / 2) & (d[..., 0] ** 2 + d[..., 2] ** 2 < self.radius ** 2)

    @property
    def extent(self) -> float:
        return math.hypot(self.radius, self.thickness / 2)


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple = ()
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]] = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))

    def __post_init__(self):
        for p in self.primitives:
            if p.density < 0 or not all(0.0 <= c <= 1.0 for c in p.albedo):
                raise ValueError(f"invalid primitive {p}")
        if not all(0.0 <= c <= 1.0 for c in self.background):
            raise ValueError("background components must lie in [0, 1]")
        lo, hi = self.bounds
        if not all(a < b for a, b in zip(lo, hi)):
            raise ValueError("degenerate bounds")

    @property
    def centroid(self) -> np.ndarray:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        return (lo + hi) / 2

    @property
    def bounding_radius(self) -> float:
        c = self.centroid
        radii = [np.linalg.norm(np.asarray(p.center) - c) + p.extent for p in self.primitives]
        return float(max(radii, default=0.0))

    def density(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        lo, hi = (np.asarray(b) for b in self.bounds)
        out = np.zeros(pts.shape[:-1])
        for p in self.primitives:
            out += np.where(p.contains(pts), p.density, 0.0)
        inside = np.all((pts >= lo) & (pts <= hi), axis=-1)
        return np.where(inside, out, 0.0)


def default_scene() -> AnalyticScene:
    """Three colored spheres resting above a ground disk on a mid-gray background."""
    return AnalyticScene(
        primitives=(
            Sphere((-0.55, 0.0, -0.3), 0.4, (0.85, 0.25, 0.2), 40.0),
            Sphere((0.5, -0.05, -0.25), 0.35, (0.2, 0.7, 0.3), 40.0),
            Sphere((0.0, 0.05, 0.5), 0.38, (0.25, 0.35, 0.9), 40.0),
            Disk((0.0, -0.5, 0.0), 1.2, 0.1, (0.8, 0.75, 0.6), 40.0),
        ),
        background=(0.5, 0.5, 0.5),
        bounds=((-1.3, -0.6, -1.3), (1.3, 0.6, 1.3)),
    )


# -- config I/O --------------------------------------------------------

def _floats(text: str, n: int, key: str) -> list[float]:
    vals = [float(v) for v in text.split(",")]
    if len(vals) != n:
        raise ValueError(f"{key}: expected {n} values, got {len(vals)}")
    return vals


def scene_to_text(scene: AnalyticScene) -> str:
    lines = [f"version={SCENE_FORMAT_VERSION}"]
    for p in scene.primitives:
        if isinstance(p, Sphere):
            vals = [*p.center, p.radius, *p.albedo, p.density]
            lines.append("sphere=" + ",".join(repr(float(v)) for v in vals))
        else:
            vals = [*p.center, p.radius, p.thickness, *p.albedo, p.density]
            lines.append("disk=" + ",".join(repr(float(v)) for v in vals))
    lines.append("background=" + ",".join(repr(float(v)) for v in scene.background))
    lo, hi = scene.bounds
    lines.append("bounds=" + ",".join(repr(float(v)) for v in (*lo, *hi)))
    return "\n".join(lines) + "\n"


def scene_from_text(text: str) -> AnalyticScene:
    prims, background, bounds = [], (0.5, 0.5, 0.5), None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "version":
            if int(val) != SCENE_FORMAT_VERSION:
                raise ValueError(f"unsupported scene version {val}")
        elif key == "sphere":
            cx, cy, cz, r, ar, ag, ab, dens = _floats(val, 8, key)
            prims.append(Sphere((cx, cy, cz), r, (ar, ag, ab), dens))
        elif key == "disk":
            cx, cy, cz, r, th, ar, ag, ab, dens = _floats(val, 9, key)
            prims.append(Disk((cx, cy, cz), r, th, (ar, ag, ab), dens))
        elif key == "background":
            background = tuple(_floats(val, 3, key))
        elif key == "bounds":
            v = _floats(val, 6, key)
            bounds = (tuple(v[:3]), tuple(v[3:]))
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    if bounds is None:
        raise ValueError("scene config needs a bounds= line")
    return AnalyticScene(tuple(prims), background, bounds)


def save_scene(scene: AnalyticScene, path) -> None:
    Path(path).write_text(scene_to_text(scene), encoding="utf-8")


def load_scene(path) -> AnalyticScene:
    return scene_from_text(Path(path).read_text(encoding="utf-8"))


# -- cameras and rays --------------------------------------------------

@dataclass(frozen=True)
class CameraPose:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    focal: float = 80.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.focal <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("focal and image size must be positive")
        fwd = np.subtract(self.look_at, self.position)
        if np.linalg.norm(np.cross(fwd, self.up)) < 1e-12 * max(np.linalg.norm(fwd), 1.0):
            raise ValueError("view direction parallel to up vector")

    def rotation(self) -> np.ndarray:
        """Camera-to-world rotation with columns (right, up, forward)."""
        fwd = np.subtract(self.look_at, self.position).astype(np.float64)
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return np.stack([right, up, fwd], axis=1)

    def scaled(self, factor: int) -> "CameraPose":
        """Same frustum at 1/factor resolution; pixel centers land on block centers."""
        if self.width % factor or self.height % factor:
            raise ValueError("image size not divisible by factor")
        return CameraPose(self.position, self.look_at, self.up, self.focal / factor,
                          self.width // factor, self.height // factor)


@dataclass
class Rays:
    origins: np.ndarray  # (..., 3)
    directions: np.ndarray  # (..., 3) unit
    t_near: float
    t_far: float

    def __post_init__(self):
        if not 0 <= self.t_near < self.t_far:
            raise ValueError("need 0 <= t_near < t_far")

    @property
    def shape(self):
        return self.origins.shape[:-1]

    def reshape(self, *shape) -> "Rays":
        return Rays(self.origins.reshape(*shape, 3), self.directions.reshape(*shape, 3),
                    self.t_near, self.t_far)

    def __getitem__(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.directions[idx], self.t_near, self.t_far)


def make_camera_ring(n_views: int, radius: float, scene: AnalyticScene, elevation_deg: float = 30.0,
                     focal: float = 80.0, width: int = 64, height: int = 64) -> list[CameraPose]:
    if n_views < 2:
        raise ValueError("a camera ring needs at least 2 views")
    if radius <= scene.bounding_radius:
        raise ValueError(f"ring radius {radius} does not clear the scene (bounding radius "
                         f"{scene.bounding_radius:.3f})")
    c = scene.centroid
    el = math.radians(elevation_deg)
    poses = []
    for k in range(n_views):
        az = 2 * math.pi * k / n_views
        offset = radius * np.array([math.cos(el) * math.cos(az), math.sin(el), math.cos(el) * math.sin(az)])
        poses.append(CameraPose(tuple(c + offset), tuple(c), (0.0, 1.0, 0.0), focal, width, height))
    return poses


def ray_bounds(pose: CameraPose, scene: AnalyticScene) -> tuple[float, float]:
    """Near/far distances bracketing the scene's bounding sphere."""
    dist = float(np.linalg.norm(np.subtract(pose.position, scene.centroid)))
    lo, hi = (np.asarray(b) for b in scene.bounds)
    r = float(np.linalg.norm(hi - lo) / 2)
    return max(dist - r, 0.0), dist + r


def generate_rays(pose: CameraPose, t_near: float = 0.0, t_far: float = 10.0) -> Rays:
    """One ray per pixel center, (H, W) grid; row 0 is the top of the image."""
    R = pose.rotation()
    j, i = np.meshgrid(np.arange(pose.height), np.arange(pose.width), indexing="ij")
    x = (i + 0.5 - pose.width / 2) / pose.focal
    y = -(j + 0.5 - pose.height / 2) / pose.focal
    cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    dirs = cam @ R.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(np.asarray(pose.position, dtype=np.float64), dirs.shape).copy()
    return Rays(origins, dirs, t_near, t_far)


def render_ground_truth(scene: AnalyticScene, pose: CameraPose, steps: int = 256) -> np.ndarray:
    """Reference render by marching ``steps`` equal segments with exact segment optical depth.

    Within a segment, each primitive's share of optical depth and color is
    assigned in proportion to its overlap length with the segment.
    """
    if steps < 64:
        raise ValueError("reference render needs at least 64 steps")
    t_near, t_far = ray_bounds(pose, scene)
    rays = generate_rays(pose, t_near, t_far)
    o, d = rays.origins, rays.directions
    lo, hi = (np.asarray(b) for b in scene.bounds)
    # clip to the bounds box so density is zero outside it
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - o) / d
        tb = (hi - o) / d
    b0 = np.max(np.minimum(ta, tb), axis=-1)
    b1 = np.min(np.maximum(ta, tb), axis=-1)

    edges = np.linspace(t_near, t_far, steps + 1)
    s0, s1 = edges[:-1], edges[1:]
    tau = np.zeros(rays.shape + (steps,))
    emit = np.zeros(rays.shape + (steps, 3))
    for p in scene.primitives:
        t0, t1 = p.interval(o, d)
        t0 = np.maximum(t0, b0)[..., None]
        t1 = np.minimum(t1, b1)[..., None]
        overlap = np.clip(np.minimum(t1, s1) - np.maximum(t0, s0), 0.0, None)
        dt = p.density * overlap
        tau += dt
        emit += dt[..., None] * np.asarray(p.albedo)
    color = np.divide(emit, tau[..., None], out=np.zeros_like(emit), where=tau[..., None] > 0)
    alpha = 1.0 - np.exp(-tau)
    trans = np.exp(-np.concatenate([np.zeros(rays.shape + (1,)), np.cumsum(tau, axis=-1)[..., :-1]], axis=-1))
    w = trans * alpha
    final = np.exp(-tau.sum(axis=-1))
    return np.einsum("...k,...kc->...c", w, color) + final[..., None] * np.asarray(scene.background)


def render_views(scene: AnalyticScene, poses, steps: int = 256) -> list[np.ndarray]:
    return [render_ground_truth(scene, p, steps) for p in poses]
