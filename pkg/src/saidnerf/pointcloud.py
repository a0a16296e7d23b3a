"""Back-project depth rasters into a coloured point cloud and write ASCII PLY."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DomainError
from .renderer import CameraModel, generate_rays


def unproject(cam: CameraModel, depth: np.ndarray, mask: np.ndarray | None = None):
    """World points for pixels where ``mask`` (default ``depth > 0``) holds.

    Returns ``(points (K, 3), pixel_ids (K,))``.
    """
    depth = np.asarray(depth, dtype=np.float64).reshape(cam.height, cam.width)
    mask = depth > 0 if mask is None else np.asarray(mask, dtype=bool) & (depth > 0)
    ids = np.flatnonzero(mask)
    if ids.size == 0:
        return np.zeros((0, 3)), ids
    rays = generate_rays(cam, ids)
    return rays.origins + depth.ravel()[ids][:, None] * rays.directions, ids


def radius_filter(points: np.ndarray, radius: float, min_neighbors: int = 3) -> np.ndarray:
    """Keep points with at least ``min_neighbors`` others within ``radius``."""
    from scipy.spatial import cKDTree

    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    tree = cKDTree(points)
    counts = np.array([len(n) - 1 for n in tree.query_ball_point(points, radius)])
    return counts >= min_neighbors


def build_pointcloud(cams, depths, colors, opacities=None, opacity_threshold: float = 0.5,
                     filter_radius: float | None = None):
    """Concatenate back-projected points from several views.

    Args:
        cams: cameras, one per view.
        depths: ``(H, W)`` depth rasters (metres along the ray).
        colors: ``(H, W, 3)`` colours in [0, 1].
        opacities: optional ``(H, W)`` accumulated opacity per view; pixels
            below ``opacity_threshold`` are skipped.
        filter_radius: optional radius for :func:`radius_filter`.

    Returns:
        ``(points (K, 3), rgb (K, 3), view_index (K,), pixel_id (K,))``.
    """
    pts, cols, views, pix = [], [], [], []
    for v, (cam, depth, color) in enumerate(zip(cams, depths, colors)):
        mask = None if opacities is None else np.asarray(opacities[v]) >= opacity_threshold
        p, ids = unproject(cam, depth, mask)
        pts.append(p)
        cols.append(np.asarray(color, dtype=np.float64).reshape(-1, 3)[ids])
        views.append(np.full(len(ids), v))
        pix.append(ids)
    points = np.concatenate(pts) if pts else np.zeros((0, 3))
    if len(points) == 0:
        raise DomainError(
            f"no valid points: {len(cams)} view(s), all pixels below opacity {opacity_threshold} or without depth"
        )
    rgb, view_idx, pixel_ids = np.concatenate(cols), np.concatenate(views), np.concatenate(pix)
    if filter_radius:
        keep = radius_filter(points, filter_radius)
        points, rgb, view_idx, pixel_ids = points[keep], rgb[keep], view_idx[keep], pixel_ids[keep]
    return points, rgb, view_idx, pixel_ids


def write_ply(path, points: np.ndarray, rgb: np.ndarray):
    """ASCII PLY with ``x y z`` floats and ``red green blue`` uchar."""
    rgb8 = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    header = "\n".join([
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ])
    lines = [f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}" for (x, y, z), (r, g, b) in zip(points, rgb8)]
    Path(path).write_text(header + "\n" + "\n".join(lines) + ("\n" if lines else ""))


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    text = Path(path).read_text().splitlines()
    end = text.index("end_header")
    rows = np.array([list(map(float, ln.split())) for ln in text[end + 1:] if ln.strip()]).reshape(-1, 6)
    return rows[:, :3], rows[:, 3:] / 255.0
