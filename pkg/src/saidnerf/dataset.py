"""Scene-directory reading and writing.

Layout under ``root``::

    transforms.json          intrinsics, bounds, per-frame camera_to_world, splits
    rgb/<stem>.png           8-bit RGB
    depth/<stem>.png         16-bit depth in millimetres along the ray, 0 = invalid
    depth_gt/<stem>.png      optional ground-truth depth, same encoding
    masks/<stem>_chan<k>.png 8-bit semantic channel k (k from 0), nonzero = on
    transparent/<stem>.png   optional ground-truth transparent-surface mask
    instances/<stem>_obj<j>.png  optional per-instance masks

``transforms.json``::

    {"format": "saidnerf-scene", "version": 1,
     "intrinsics": {"fx", "fy", "cx", "cy", "w", "h"},
     "bounds": {"aabb_min": [3], "aabb_max": [3], "near", "far"},
     "semantic_channels": c,
     "frames": [{"stem": "0000", "camera_to_world": 4x4 row-major}],
     "splits": {"train": [stems], "test": [stems]}}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DomainError
from .renderer import CameraModel, SceneBounds

FORMAT_NAME = "saidnerf-scene"
FORMAT_VERSION = 1


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im)


def write_rgb_png(path, rgb: np.ndarray):
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_mask_png(path, mask: np.ndarray):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def depth_to_mm(depth_m: np.ndarray) -> np.ndarray:
    mm = np.round(np.asarray(depth_m, dtype=np.float64) * 1000.0)
    if mm.max(initial=0) > 65535:
        raise DomainError("depth exceeds the 16-bit millimetre range")
    return np.where(np.asarray(depth_m) > 0, mm, 0).astype(np.uint16)


def write_depth_png(path, depth_m: np.ndarray):
    Image.fromarray(depth_to_mm(depth_m)).save(path)


def read_depth_png(path) -> np.ndarray:
    """16-bit millimetre PNG to metres; invalid pixels stay 0."""
    return read_png(path).astype(np.float64) / 1000.0


@dataclass
class SceneDataset:
    root: Path | None
    intrinsics: dict
    stems: list
    poses: np.ndarray  # (F, 4, 4) camera_to_world
    rgb: np.ndarray  # (F, H, W, 3) floats in [0, 1]
    depth: np.ndarray  # (F, H, W) sensor depth in metres, 0 = invalid
    channels: np.ndarray  # (F, C, H, W) bool
    bounds: SceneBounds = field(default_factory=SceneBounds)
    splits: dict = field(default_factory=dict)
    depth_gt: np.ndarray | None = None
    transparent: np.ndarray | None = None
    instances: np.ndarray | None = None

    def __post_init__(self):
        F = len(self.stems)
        H, W = int(self.intrinsics["h"]), int(self.intrinsics["w"])
        if self.poses.shape != (F, 4, 4):
            raise DomainError("every frame needs a 4x4 pose")
        for name in ("rgb", "depth", "depth_gt", "transparent"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[:3] != (F, H, W):
                raise DomainError(f"{name} frames do not match the intrinsics size {(H, W)}")
        if self.channels.shape[0] != F or self.channels.shape[2:] != (H, W):
            raise DomainError("mask channels do not match the frame size")

    def __len__(self):
        return len(self.stems)

    @property
    def semantic_channels(self) -> int:
        return self.channels.shape[1]

    @property
    def height(self) -> int:
        return int(self.intrinsics["h"])

    @property
    def width(self) -> int:
        return int(self.intrinsics["w"])

    def camera(self, i: int) -> CameraModel:
        k = self.intrinsics
        return CameraModel(k["fx"], k["fy"], k["cx"], k["cy"], int(k["w"]), int(k["h"]), self.poses[i])

    def indices(self, split: str | None) -> list[int]:
        if split is None or split == "all":
            return list(range(len(self)))
        wanted = set(self.splits.get(split, []))
        return [i for i, s in enumerate(self.stems) if s in wanted]

    def subset(self, idx) -> "SceneDataset":
        idx = list(idx)

        def pick(a):
            return None if a is None else a[idx]

        stems = [self.stems[i] for i in idx]
        keep = set(stems)
        return replace(
            self, stems=stems, poses=self.poses[idx], rgb=self.rgb[idx], depth=self.depth[idx],
            channels=self.channels[idx], depth_gt=pick(self.depth_gt), transparent=pick(self.transparent),
            instances=pick(self.instances),
            splits={k: [s for s in v if s in keep] for k, v in self.splits.items()},
        )

    @classmethod
    def load(cls, root) -> "SceneDataset":
        root = Path(root)
        meta = json.loads((root / "transforms.json").read_text())
        if meta.get("format") != FORMAT_NAME or meta.get("version") != FORMAT_VERSION:
            raise DomainError(f"{root}: not a {FORMAT_NAME} v{FORMAT_VERSION} directory")
        intr = meta["intrinsics"]
        b = meta["bounds"]
        bounds = SceneBounds(tuple(b["aabb_min"]), tuple(b["aabb_max"]), b["near"], b["far"])
        C = int(meta["semantic_channels"])
        stems = [f["stem"] for f in meta["frames"]]
        poses = np.array([f["camera_to_world"] for f in meta["frames"]], dtype=np.float64).reshape(-1, 4, 4)
        rgb = np.stack([read_png(root / "rgb" / f"{s}.png")[..., :3] / 255.0 for s in stems])
        depth = np.stack([read_depth_png(root / "depth" / f"{s}.png") for s in stems])
        channels = np.stack([
            np.stack([read_png(root / "masks" / f"{s}_chan{k}.png") > 0 for k in range(C)]) for s in stems
        ])

        def optional(sub, reader):
            paths = [root / sub / f"{s}.png" for s in stems]
            if all(p.exists() for p in paths):
                return np.stack([reader(p) for p in paths])
            return None

        depth_gt = optional("depth_gt", read_depth_png)
        transparent = optional("transparent", lambda p: read_png(p) > 0)
        return cls(root, intr, stems, poses, rgb, depth, channels, bounds, meta.get("splits", {}),
                   depth_gt, transparent)


def write_dataset(ds: SceneDataset, root):
    root = Path(root)
    for sub in ("rgb", "depth", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(ds.stems):
        write_rgb_png(root / "rgb" / f"{s}.png", ds.rgb[i])
        write_depth_png(root / "depth" / f"{s}.png", ds.depth[i])
        for k in range(ds.semantic_channels):
            write_mask_png(root / "masks" / f"{s}_chan{k}.png", ds.channels[i, k])
        if ds.depth_gt is not None:
            (root / "depth_gt").mkdir(exist_ok=True)
            write_depth_png(root / "depth_gt" / f"{s}.png", ds.depth_gt[i])
        if ds.transparent is not None:
            (root / "transparent").mkdir(exist_ok=True)
            write_mask_png(root / "transparent" / f"{s}.png", ds.transparent[i])
        if ds.instances is not None:
            (root / "instances").mkdir(exist_ok=True)
            for j, m in enumerate(ds.instances[i]):
                write_mask_png(root / "instances" / f"{s}_obj{j}.png", m)
    b = ds.bounds
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "intrinsics": {k: (int(v) if k in ("w", "h") else float(v)) for k, v in ds.intrinsics.items()},
        "bounds": {"aabb_min": list(b.aabb_min), "aabb_max": list(b.aabb_max), "near": b.near, "far": b.far},
        "semantic_channels": ds.semantic_channels,
        "frames": [{"stem": s, "camera_to_world": ds.poses[i].tolist()} for i, s in enumerate(ds.stems)],
        "splits": ds.splits,
    }
    (root / "transforms.json").write_text(json.dumps(meta, indent=1))
