"""Analytic ray tracer producing posed RGB-D frames of transparent scenes.

Frames carry the true first-surface depth, a sensor-style depth that fails on
transparent surfaces (background depth or a hole), and one instance mask per
primitive. This is the stand-in for a real capture plus an instance segmenter.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError
from .renderer import CameraModel, SceneBounds, generate_rays

log = logging.getLogger(__name__)

SCENE_SCHEMA_VERSION = 1
_EPS = 1e-9


@dataclass
class Material:
    kind: str = "opaque"  # or "transparent"
    albedo: tuple = (0.8, 0.8, 0.8)
    alpha: float = 1.0
    tint: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("opaque", "transparent"):
            raise DomainError(f"unknown material {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError("alpha must lie in [0, 1]")

    @property
    def transparent(self) -> bool:
        return self.kind == "transparent"


@dataclass
class Primitive:
    """A shape in world space.

    ``size`` meaning per shape: sphere ``(radius,)``; box ``(hx, hy, hz)`` half
    extents; cylinder ``(radius, half_height)`` along local z; plane
    ``(hx, hy)`` half extents of a rectangle whose normal is local +z.
    ``rotation`` maps local to world axes.
    """

    shape: str
    center: tuple
    size: tuple
    material: Material = field(default_factory=Material)
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    name: str = ""

    def __post_init__(self):
        if self.shape not in ("sphere", "box", "cylinder", "plane"):
            raise DomainError(f"unknown shape {self.shape!r}")
        if any(s <= 0 for s in self.size):
            raise DomainError("primitive sizes must be positive")
        self.center = tuple(float(c) for c in self.center)
        self.size = tuple(float(s) for s in self.size)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest hit distance (``inf`` on miss) and world-space normal per ray."""
        Rm = self.rotation
        o = (origins - np.asarray(self.center)) @ Rm
        d = dirs @ Rm
        fn = {"sphere": _hit_sphere, "box": _hit_box, "cylinder": _hit_cylinder, "plane": _hit_plane}[self.shape]
        t, n_local = fn(o, d, self.size)
        return t, n_local @ Rm.T


def _nearest_positive(*cands):
    stack = np.stack(cands, axis=0)
    stack = np.where(stack > _EPS, stack, np.inf)
    return stack.min(axis=0), stack.argmin(axis=0)


def _hit_sphere(o, d, size):
    r = size[0]
    b = np.sum(o * d, axis=1)
    c = np.sum(o * o, axis=1) - r * r
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = np.where(ok, -b - sq, np.inf)
    t1 = np.where(ok, -b + sq, np.inf)
    t, _ = _nearest_positive(t0, t1)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    return t, p / r


def _hit_box(o, d, size):
    h = np.asarray(size)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (-h - o) * inv
        tb = (h - o) * inv
    tmin = np.nanmax(np.minimum(ta, tb), axis=1)
    tmax = np.nanmin(np.maximum(ta, tb), axis=1)
    ok = tmax >= np.maximum(tmin, 0.0)
    t, _ = _nearest_positive(np.where(ok, tmin, np.inf), np.where(ok, tmax, np.inf))
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    q = np.abs(p) / h
    axis = np.argmax(q, axis=1)
    n = np.zeros_like(p)
    n[np.arange(len(p)), axis] = np.sign(p[np.arange(len(p)), axis])
    return t, n


def _hit_cylinder(o, d, size):
    r, hh = size
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1]
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - r * r
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = b * b - a * c
        ok = (disc >= 0) & (a > 0)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        s0 = np.where(ok, (-b - sq) / a, np.inf)
        s1 = np.where(ok, (-b + sq) / a, np.inf)
        side = []
        for s in (s0, s1):
            z = o[:, 2] + np.where(np.isfinite(s), s, 0.0) * d[:, 2]
            side.append(np.where(np.abs(z) <= hh, s, np.inf))
        caps = []
        for zc in (-hh, hh):
            s = (zc - o[:, 2]) / d[:, 2]
            s = np.where(np.isfinite(s), s, np.inf)
            px = o[:, 0] + np.where(np.isfinite(s), s, 0.0) * d[:, 0]
            py = o[:, 1] + np.where(np.isfinite(s), s, 0.0) * d[:, 1]
            caps.append(np.where(px * px + py * py <= r * r, s, np.inf))
    t, which = _nearest_positive(side[0], side[1], caps[0], caps[1])
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    n = np.zeros_like(p)
    radial = which < 2
    n[radial, 0] = p[radial, 0] / r
    n[radial, 1] = p[radial, 1] / r
    n[~radial, 2] = np.where(which[~radial] == 2, -1.0, 1.0)
    return t, n


def _hit_plane(o, d, size):
    hx, hy = size[0], size[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[:, 2] / d[:, 2]
    t = np.where(np.isfinite(t) & (t > _EPS), t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    inside = (np.abs(p[:, 0]) <= hx) & (np.abs(p[:, 1]) <= hy)
    t = np.where(inside, t, np.inf)
    n = np.zeros_like(p)
    n[:, 2] = 1.0
    return t, n


@dataclass
class Trajectory:
    radius_range: tuple = (0.4, 0.6)
    count: int = 16
    min_elevation_deg: float = 25.0
    target: tuple = (0.0, 0.0, 0.03)


@dataclass
class CameraSpec:
    width: int = 64
    height: int = 64
    fov_deg: float = 50.0

    def intrinsics(self) -> dict:
        f = 0.5 * self.width / np.tan(0.5 * np.radians(self.fov_deg))
        return {"fx": f, "fy": f, "cx": self.width / 2, "cy": self.height / 2, "w": self.width, "h": self.height}


@dataclass
class SyntheticScene:
    primitives: list
    light_direction: tuple = (0.3, -0.4, 1.0)
    trajectory: Trajectory = field(default_factory=Trajectory)
    camera: CameraSpec = field(default_factory=CameraSpec)
    bounds: SceneBounds = field(default_factory=SceneBounds)
    background: tuple = (0.0, 0.0, 0.0)
    ambient: float = 0.35
    specular_strength: float = 0.6
    shininess: float = 24.0
    hole_probability: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self):
        opaque = [p for p in self.primitives if not p.material.transparent]
        for p in self.primitives:
            if not p.material.transparent:
                continue
            o = np.asarray(p.center, dtype=np.float64)[None, :]
            down = np.array([[0.0, 0.0, -1.0]])
            if not any(np.isfinite(q.intersect(o, down)[0][0]) for q in opaque):
                raise DomainError(f"transparent primitive {p.name or p.shape!r} has no opaque surface below it")

    @property
    def light(self) -> np.ndarray:
        v = np.asarray(self.light_direction, dtype=np.float64)
        return v / np.linalg.norm(v)

    def to_dict(self) -> dict:
        prims = []
        for p in self.primitives:
            m = p.material
            mat = {"type": m.kind}
            if m.transparent:
                mat.update(alpha=m.alpha, tint=list(m.tint))
            else:
                mat.update(albedo=list(m.albedo))
            prims.append({
                "name": p.name, "shape": p.shape, "center": list(p.center), "size": list(p.size),
                "rotation": p.rotation.tolist(), "material": mat,
            })
        t, c, b = self.trajectory, self.camera, self.bounds
        return {
            "schema_version": SCENE_SCHEMA_VERSION,
            "primitives": prims,
            "light_direction": list(self.light_direction),
            "trajectory": {"radius_range": list(t.radius_range), "count": t.count,
                           "min_elevation_deg": t.min_elevation_deg, "target": list(t.target)},
            "camera": {"width": c.width, "height": c.height, "fov_deg": c.fov_deg},
            "bounds": {"aabb_min": list(b.aabb_min), "aabb_max": list(b.aabb_max), "near": b.near, "far": b.far},
            "background": list(self.background),
            "ambient": self.ambient,
            "specular_strength": self.specular_strength,
            "shininess": self.shininess,
            "hole_probability": self.hole_probability,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        version = d.get("schema_version")
        if version != SCENE_SCHEMA_VERSION:
            raise DomainError(f"unsupported scene schema version {version!r}")
        prims = []
        for p in d["primitives"]:
            m = p.get("material", {"type": "opaque"})
            if m["type"] == "transparent":
                mat = Material("transparent", alpha=m["alpha"], tint=tuple(m.get("tint", (1, 1, 1))))
            else:
                mat = Material("opaque", albedo=tuple(m.get("albedo", (0.8, 0.8, 0.8))))
            prims.append(Primitive(p["shape"], p["center"], p["size"], mat,
                                   np.asarray(p.get("rotation", np.eye(3))), p.get("name", "")))
        kw = {}
        if "trajectory" in d:
            t = d["trajectory"]
            kw["trajectory"] = Trajectory(tuple(t["radius_range"]), t["count"], t.get("min_elevation_deg", 25.0),
                                          tuple(t.get("target", (0, 0, 0))))
        if "camera" in d:
            kw["camera"] = CameraSpec(**d["camera"])
        if "bounds" in d:
            b = d["bounds"]
            kw["bounds"] = SceneBounds(tuple(b["aabb_min"]), tuple(b["aabb_max"]), b["near"], b["far"])
        for key in ("background", "light_direction"):
            if key in d:
                kw[key] = tuple(d[key])
        for key in ("ambient", "specular_strength", "shininess", "hole_probability"):
            if key in d:
                kw[key] = d[key]
        return cls(prims, **kw)

    @classmethod
    def load(cls, path) -> "SyntheticScene":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def default_scene(width: int = 64, height: int = 64, views: int = 16) -> SyntheticScene:
    """A glass sphere, an opaque box and an opaque cylinder on a plain table."""
    return SyntheticScene(
        primitives=[
            Primitive("plane", (0.0, 0.0, 0.0), (0.2, 0.2), Material("opaque", albedo=(0.85, 0.85, 0.8)), name="table"),
            Primitive("sphere", (0.0, 0.0, 0.05), (0.05,),
                      Material("transparent", alpha=0.25, tint=(0.55, 0.75, 1.0)), name="glass_sphere"),
            Primitive("box", (0.1, -0.07, 0.03), (0.03, 0.03, 0.03), Material("opaque", albedo=(0.8, 0.25, 0.2)),
                      name="red_box"),
            Primitive("cylinder", (-0.09, 0.08, 0.04), (0.025, 0.04), Material("opaque", albedo=(0.2, 0.35, 0.8)),
                      name="blue_mug"),
        ],
        trajectory=Trajectory(count=views),
        camera=CameraSpec(width=width, height=height),
    )


@dataclass
class TracedFrame:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    true_depth: np.ndarray  # (H, W) metres along the ray, 0 = no surface
    sensor_depth: np.ndarray  # (H, W) metres, 0 = hole
    instance_masks: np.ndarray  # (P, H, W) bool, first-hit primitive per pixel
    transparent: np.ndarray  # (H, W) bool, first hit is a transparent primitive


def trace_frame(scene: SyntheticScene, cam: CameraModel, rng=None) -> TracedFrame:
    """Trace one frame; ``rng`` (seed or Generator) drives the sensor hole pattern."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    H, W = cam.height, cam.width
    rays = generate_rays(cam, np.arange(H * W), scene.bounds)
    o, d = rays.origins, rays.directions
    n_rays = len(rays)
    P = len(scene.primitives)
    if P == 0:
        zeros = np.zeros((H, W))
        rgb = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), (H, W, 3)).copy()
        return TracedFrame(rgb, zeros, zeros.copy(), np.zeros((0, H, W), dtype=bool), zeros.astype(bool))
    ts = np.full((P, n_rays), np.inf)
    normals = np.zeros((P, n_rays, 3))
    for k, prim in enumerate(scene.primitives):
        ts[k], normals[k] = prim.intersect(o, d)

    first = np.argmin(ts, axis=0)
    t_first = ts[first, np.arange(n_rays)]
    hit = np.isfinite(t_first)
    is_transparent = np.array([p.material.transparent for p in scene.primitives], dtype=bool)
    trans_first = hit & is_transparent[first]

    # first opaque surface, ignoring transparent primitives
    ts_opaque = np.where(is_transparent[:, None], np.inf, ts)
    bg_idx = np.argmin(ts_opaque, axis=0)
    t_bg = ts_opaque[bg_idx, np.arange(n_rays)]
    bg_hit = np.isfinite(t_bg)

    light = scene.light
    background = np.asarray(scene.background, dtype=np.float64)

    def shade(idx, t_hit, valid, use_tint):
        n = normals[idx, np.arange(n_rays)]
        # face the viewer
        n = np.where(np.sum(n * d, axis=1, keepdims=True) > 0, -n, n)
        lam = scene.ambient + (1 - scene.ambient) * np.clip(n @ light, 0.0, None)
        base = np.array([p.material.tint if use_tint else p.material.albedo for p in scene.primitives])
        col = base[idx] * lam[:, None]
        return np.where(valid[:, None], col, background), n

    bg_rgb, _ = shade(bg_idx, t_bg, bg_hit, use_tint=False)
    first_rgb, n_first = shade(first, t_first, hit, use_tint=False)
    rgb = first_rgb.copy()
    if np.any(trans_first):
        tint_rgb, _ = shade(first, t_first, hit, use_tint=True)
        alphas = np.array([p.material.alpha for p in scene.primitives])[first]
        refl = 2.0 * (n_first @ light)[:, None] * n_first - light
        spec = scene.specular_strength * np.clip(np.sum(refl * -d, axis=1), 0.0, None) ** scene.shininess
        glass = alphas[:, None] * tint_rgb + (1 - alphas[:, None]) * bg_rgb + spec[:, None]
        rgb = np.where(trans_first[:, None], glass, rgb)
    rgb = np.clip(rgb, 0.0, 1.0)

    true_depth = np.where(hit, t_first, 0.0)
    holes = rng.random(n_rays) < scene.hole_probability
    fallback = np.where(holes | ~bg_hit, 0.0, np.where(bg_hit, t_bg, 0.0))
    sensor = np.where(trans_first, fallback, true_depth)

    masks = np.zeros((P, n_rays), dtype=bool)
    masks[first[hit], np.nonzero(hit)[0]] = True
    return TracedFrame(
        rgb.reshape(H, W, 3),
        true_depth.reshape(H, W),
        sensor.reshape(H, W),
        masks.reshape(P, H, W),
        trans_first.reshape(H, W),
    )


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """camera_to_world for a camera at ``eye`` looking at ``target`` (camera -z forward, +y up)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    M = np.eye(4)
    M[:3, 0] = right
    M[:3, 1] = true_up
    M[:3, 2] = -fwd
    M[:3, 3] = eye
    return M


def hemisphere_poses(traj: Trajectory, n_views: int, seed: int) -> list[np.ndarray]:
    """Fibonacci-spiral viewpoints on the upper hemisphere around ``traj.target``.

    Elevations are spread evenly in ``sin(elevation)`` above the minimum; radii
    are drawn uniformly from ``traj.radius_range``.
    """
    rng = np.random.default_rng(seed)
    z_min = np.sin(np.radians(traj.min_elevation_deg))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    radii = rng.uniform(traj.radius_range[0], traj.radius_range[1], size=n_views)
    poses = []
    for i in range(n_views):
        z = z_min + (1.0 - z_min) * (i + 0.5) / n_views
        rho = np.sqrt(max(0.0, 1.0 - z * z))
        phi = i * golden
        direction = np.array([rho * np.cos(phi), rho * np.sin(phi), z])
        eye = np.asarray(traj.target) + radii[i] * direction
        poses.append(look_at(eye, traj.target))
    return poses


def generate_dataset(scene: SyntheticScene, n_views: int, seed: int, root, channels: int = 3,
                     test_every: int = 0):
    """Trace ``n_views`` frames and write a scene directory under ``root``.

    Args:
        scene: scene to trace.
        n_views: number of viewpoints.
        seed: drives camera radii and sensor hole patterns.
        root: output directory (created).
        channels: semantic channels produced by mask grouping.
        test_every: if > 0, every k-th frame goes to the test split.

    Returns:
        The loaded :class:`~saidnerf.dataset.SceneDataset`.
    """
    from .dataset import SceneDataset, write_dataset
    from .maskhier import build_hierarchy, masks_from_rasters, rasterize_channels

    if n_views < 1:
        raise DomainError("n_views must be >= 1")
    intr = scene.camera.intrinsics()
    poses = hemisphere_poses(scene.trajectory, n_views, seed)
    H, W = scene.camera.height, scene.camera.width
    rgb = np.zeros((n_views, H, W, 3))
    depth = np.zeros((n_views, H, W))
    depth_gt = np.zeros((n_views, H, W))
    chans = np.zeros((n_views, channels, H, W), dtype=bool)
    transparent = np.zeros((n_views, H, W), dtype=bool)
    instances = []
    for i, pose in enumerate(poses):
        cam = CameraModel(intr["fx"], intr["fy"], intr["cx"], intr["cy"], W, H, pose)
        fr = trace_frame(scene, cam, np.random.default_rng([seed, i]))
        rgb[i], depth[i], depth_gt[i], transparent[i] = fr.rgb, fr.sensor_depth, fr.true_depth, fr.transparent
        hier = build_hierarchy(masks_from_rasters(fr.instance_masks), channels)
        chans[i] = rasterize_channels(hier, W, H)
        instances.append(fr.instance_masks)
    stems = [f"{i:04d}" for i in range(n_views)]
    test = [s for i, s in enumerate(stems) if test_every and i % test_every == test_every - 1]
    splits = {"train": [s for s in stems if s not in test], "test": test}
    ds = SceneDataset(
        root=Path(root), intrinsics=intr, stems=stems, poses=np.stack(poses), rgb=rgb, depth=depth,
        channels=chans, bounds=scene.bounds, splits=splits, depth_gt=depth_gt, transparent=transparent,
        instances=np.stack(instances) if instances else None,
    )
    write_dataset(ds, root)
    scene.save(Path(root) / "scene.json")
    log.info("wrote %d views to %s", n_views, root)
    return SceneDataset.load(root)
