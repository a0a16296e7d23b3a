"""Group unlabeled instance masks into ordered, non-overlapping channels.

Masks are sorted by decreasing area and assigned first-fit to the earliest set
whose convex hulls they do not touch; a mask that fits nowhere founds a new
set. Sets beyond the requested channel count are folded into the last channel.
Hulls live in pixel coordinates ``(x, y) = (col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError

MIN_MASK_AREA = 16


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def monotone_chain(points) -> np.ndarray:
    """Convex hull of 2-D points, CCW, without collinear vertices.

    Returns 1 vertex for coincident input and 2 for collinear input.
    """
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64).reshape(-1, 2))))
    if len(pts) <= 2:
        return np.array(pts, dtype=np.float64).reshape(-1, 2)
    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    return np.array(hull, dtype=np.float64).reshape(-1, 2)


def convex_hull(raster: np.ndarray) -> np.ndarray:
    """Convex hull of the on-pixel centres of a binary raster, as ``(K, 2)`` CCW vertices."""
    raster = np.asarray(raster).astype(bool)
    if not raster.any():
        raise DomainError("convex hull of an empty mask")
    rows = np.nonzero(raster.any(axis=1))[0]
    # only the extreme pixels of each row can be hull vertices
    first = raster[rows].argmax(axis=1)
    last = raster.shape[1] - 1 - raster[rows, ::-1].argmax(axis=1)
    cols = np.concatenate([first, last])
    rr = np.concatenate([rows, rows])
    return monotone_chain(np.stack([cols + 0.5, rr + 0.5], axis=1))


def _axes(poly: np.ndarray) -> list[np.ndarray]:
    n = len(poly)
    if n == 1:
        return []
    axes = []
    for i in range(n if n > 2 else 1):
        e = poly[(i + 1) % n] - poly[i]
        axes.append(np.array([-e[1], e[0]]))
        if n == 2:
            axes.append(e)
    return axes


def hulls_overlap(a, b) -> bool:
    """Separating-axis test for convex polygons, points and segments.

    Touching (a shared boundary point) counts as overlap.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 1 and len(b) == 1:
        return bool(np.all(a[0] == b[0]))
    # segments contribute their direction as well as their normal, which
    # separates collinear but disjoint pieces
    for axis in _axes(a) + _axes(b):
        if not np.any(axis):
            continue
        pa = a @ axis
        pb = b @ axis
        if pa.max() < pb.min() or pb.max() < pa.min():
            return False
    return True


@dataclass
class InstanceMask:
    raster: np.ndarray
    index: int = 0
    hull: np.ndarray | None = None

    def __post_init__(self):
        self.raster = np.asarray(self.raster).astype(bool)
        if not self.raster.any():
            raise DomainError("instance mask is empty")
        if self.hull is None:
            self.hull = convex_hull(self.raster)

    @property
    def area(self) -> int:
        return int(self.raster.sum())


@dataclass
class MaskHierarchy:
    """Grouping result.

    ``sets`` are the final (at most ``c``) sets of mask indices into
    ``masks``. ``grouped`` keeps the first-fit sets before the overflow merge;
    hulls inside each of those are pairwise disjoint.
    """

    masks: list
    sets: list
    grouped: list
    channels: int
    dropped: list = field(default_factory=list)


def masks_from_rasters(rasters) -> list[InstanceMask]:
    """Wrap non-empty rasters, keeping their position as the mask index."""
    return [InstanceMask(r, i) for i, r in enumerate(rasters) if np.asarray(r).any()]


def build_hierarchy(masks: list[InstanceMask], c: int, min_area: int = MIN_MASK_AREA) -> MaskHierarchy:
    """Group masks into at most ``c`` sets of mutually non-overlapping hulls.

    Masks smaller than ``min_area`` pixels are dropped. Ties in area are broken
    by ascending ``mask.index`` so the result does not depend on input order.
    """
    if c < 1:
        raise DomainError("need at least one channel")
    kept = [m for m in masks if m.area >= min_area]
    dropped = [m.index for m in masks if m.area < min_area]
    order = sorted(range(len(kept)), key=lambda i: (-kept[i].area, kept[i].index))
    ordered = [kept[i] for i in order]
    grouped: list[list[int]] = []
    for i, m in enumerate(ordered):
        for s in grouped:
            if not any(hulls_overlap(m.hull, ordered[j].hull) for j in s):
                s.append(i)
                break
        else:
            grouped.append([i])
    sets = [list(s) for s in grouped[:c]]
    if len(grouped) > c:
        for s in grouped[c:]:
            sets[c - 1].extend(s)
    return MaskHierarchy(ordered, sets, grouped, c, dropped)


def rasterize_channels(h: MaskHierarchy, width: int, height: int) -> np.ndarray:
    """``(c, height, width)`` boolean channels, channel k the union of set k."""
    out = np.zeros((h.channels, height, width), dtype=bool)
    for k, s in enumerate(h.sets):
        for j in s:
            r = h.masks[j].raster
            if r.shape != (height, width):
                raise DomainError(f"mask shape {r.shape} does not match {(height, width)}")
            out[k] |= r
    return out


def group_directory(in_dir, channels: int, out_dir, min_area: int = MIN_MASK_AREA) -> np.ndarray:
    """Group every PNG mask in ``in_dir`` and write ``channel_{k}.png`` files (k from 0)."""
    from .dataset import read_png, write_mask_png

    paths = sorted(Path(in_dir).glob("*.png"))
    if not paths:
        raise DomainError(f"no PNG masks in {in_dir}")
    rasters = [read_png(p) for p in paths]
    rasters = [(r.max(axis=-1) if r.ndim == 3 else r) > 0 for r in rasters]
    shapes = {r.shape for r in rasters}
    if len(shapes) != 1:
        raise DomainError(f"masks have differing sizes: {sorted(shapes)}")
    height, width = shapes.pop()
    hier = build_hierarchy(masks_from_rasters(rasters), channels, min_area)
    chans = rasterize_channels(hier, width, height)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(channels):
        write_mask_png(out / f"channel_{k}.png", chans[k])
    return chans
