"""Ray generation, sampling and differentiable volume compositing.

Camera convention (used everywhere in the package): right-handed camera
frame, the camera looks down -z with +y up and +x right. Pixel ``(u, v)`` is
column ``u``, row ``v`` with rows growing downwards; rays pass through pixel
centres ``(u + 0.5, v + 0.5)``. Depth is the distance along the unit ray
direction, not the camera-frame z coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DomainError, NumericFault
from .field import FieldConfig, FieldSample, ParameterStore, field_backward, field_forward


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    camera_to_world: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.camera_to_world = np.asarray(self.camera_to_world, dtype=np.float64).reshape(4, 4)
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        R = self.camera_to_world[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise DomainError("camera_to_world rotation block is not orthonormal")

    @property
    def origin(self) -> np.ndarray:
        return self.camera_to_world[:3, 3].copy()

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points ``(N, 3)`` to continuous pixel coordinates ``(N, 2)`` and ranges ``(N,)``.

        Pixel coordinates are in the continuous frame where pixel ``(u, v)``
        covers ``[u, u+1) x [v, v+1)``.
        """
        R = self.camera_to_world[:3, :3]
        pc = (np.asarray(points, dtype=np.float64) - self.origin) @ R
        zc = -pc[:, 2]
        u = self.fx * pc[:, 0] / zc + self.cx
        v = -self.fy * pc[:, 1] / zc + self.cy
        return np.stack([u, v], axis=1), np.linalg.norm(pc, axis=1)


@dataclass
class RayBatch:
    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3) unit
    t_near: np.ndarray  # (R,)
    t_far: np.ndarray  # (R,)
    pixel_ids: np.ndarray  # (R,) flat row-major pixel index (or global provenance id)

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.directions[idx], self.t_near[idx], self.t_far[idx], self.pixel_ids[idx])


@dataclass(frozen=True)
class SceneBounds:
    """Axis-aligned box mapped onto the field's unit cube, plus clip distances."""

    aabb_min: tuple[float, float, float] = (-0.22, -0.22, -0.14)
    aabb_max: tuple[float, float, float] = (0.22, 0.22, 0.30)
    near: float = 0.05
    far: float = 2.0

    def to_unit(self, pts: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.aabb_min)
        hi = np.asarray(self.aabb_max)
        return (pts - lo) / (hi - lo)


def generate_rays(cam: CameraModel, pixels, bounds: SceneBounds | None = None) -> RayBatch:
    """Rays through pixel centres.

    Args:
        cam: pinhole camera.
        pixels: flat row-major indices ``v * width + u``, or an ``(N, 2)`` array
            of ``(u, v)`` pairs.
        bounds: clip range; defaults to :class:`SceneBounds`.
    """
    bounds = bounds or SceneBounds()
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        u, v = pixels[:, 0].astype(np.int64), pixels[:, 1].astype(np.int64)
        flat = v * cam.width + u
    else:
        flat = pixels.astype(np.int64).ravel()
        u, v = flat % cam.width, flat // cam.width
    if np.any((u < 0) | (u >= cam.width) | (v < 0) | (v >= cam.height)):
        raise DomainError("pixel index outside the image")
    dirs_cam = np.stack(
        [(u + 0.5 - cam.cx) / cam.fx, -(v + 0.5 - cam.cy) / cam.fy, -np.ones(u.shape)],
        axis=1,
    )
    R = cam.camera_to_world[:3, :3]
    dirs = dirs_cam @ R.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.origin, dirs.shape).copy()
    t_near, t_far = clip_to_bounds(origins, dirs, bounds)
    return RayBatch(origins, dirs, t_near, t_far, flat)


def clip_to_bounds(origins, dirs, bounds: SceneBounds):
    """Slab-test rays against the scene box; misses keep the full [near, far] range."""
    lo = np.asarray(bounds.aabb_min)
    hi = np.asarray(bounds.aabb_max)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    t_near = np.maximum(tmin, bounds.near)
    t_far = np.minimum(tmax, bounds.far)
    miss = ~(t_far > t_near + 1e-6)
    t_near = np.where(miss, bounds.near, t_near)
    t_far = np.where(miss, bounds.far, t_far)
    return t_near, t_far


class OccupancyGrid:
    """Binary occupancy over the unit cube, refreshed from field densities.

    ``update`` decays the running density estimate and takes the max with fresh
    samples at jittered cell centres; cells above ``threshold`` are on.
    Everything starts off, which makes the importance sampler fall back to
    stratified sampling until the first refresh finds density.
    """

    def __init__(self, resolution: int = 32, threshold: float = 5.0, decay: float = 0.9):
        self.resolution = resolution
        self.threshold = threshold
        self.decay = decay
        self.density = np.zeros((resolution,) * 3)
        self.binary = np.zeros((resolution,) * 3, dtype=bool)

    def lookup(self, unit_pts: np.ndarray) -> np.ndarray:
        inside = np.all((unit_pts >= 0.0) & (unit_pts <= 1.0), axis=-1)
        idx = np.clip((unit_pts * self.resolution).astype(np.int64), 0, self.resolution - 1)
        return inside & self.binary[idx[..., 0], idx[..., 1], idx[..., 2]]

    def cell_centres(self, rng: np.random.Generator | None = None) -> np.ndarray:
        g = np.arange(self.resolution)
        ijk = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3).astype(np.float64)
        jitter = 0.5 if rng is None else rng.random(ijk.shape)
        return (ijk + jitter) / self.resolution

    def update(self, density_fn, rng: np.random.Generator | None = None):
        pts = self.cell_centres(rng)
        sigma = density_fn(pts).reshape((self.resolution,) * 3)
        self.density = np.maximum(self.density * self.decay, sigma)
        self.binary = self.density > self.threshold


@dataclass(frozen=True)
class SamplerConfig:
    n_samples: int = 64
    strategy: str = "stratified"  # or "occupancy"
    coarse_bins: int = 128
    floor: float = 0.05  # probability mass spread uniformly under importance sampling


def _resolve_rng(rng):
    if rng is None or isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_ray(rays: RayBatch, strategy: str, n_samples: int, rng=None, grid: OccupancyGrid | None = None,
               bounds: SceneBounds | None = None, coarse_bins: int = 128, floor: float = 0.05):
    """Sample distances along every ray.

    ``rng`` may be a seed, a ``Generator`` or ``None``; ``None`` places each
    sample in the middle of its stratum.

    Returns:
        ``(t, delta)``, both ``(R, n_samples)``. ``delta[:, i] = t[:, i+1] - t[:, i]``
        and the last interval is ``(t_far - t_near) / n_samples``.
    """
    if n_samples < 2:
        raise DomainError("need at least two samples per ray")
    if strategy not in ("stratified", "occupancy"):
        raise DomainError(f"unknown sampling strategy {strategy!r}")
    rng = _resolve_rng(rng)
    R = len(rays)
    jitter = np.full((R, n_samples), 0.5) if rng is None else rng.random((R, n_samples))
    u = (np.arange(n_samples)[None, :] + jitter) / n_samples  # stratified in [0, 1)
    span = (rays.t_far - rays.t_near)[:, None]

    if strategy == "stratified" or grid is None or not grid.binary.any():
        t = rays.t_near[:, None] + u * span
    else:
        bounds = bounds or SceneBounds()
        edges = np.linspace(0.0, 1.0, coarse_bins + 1)
        mids = rays.t_near[:, None] + 0.5 * (edges[:-1] + edges[1:])[None, :] * span
        pts = rays.origins[:, None, :] + mids[..., None] * rays.directions[:, None, :]
        occ = grid.lookup(bounds.to_unit(pts)).astype(np.float64)
        counts = occ.sum(axis=1, keepdims=True)
        has_occ = counts > 0
        pdf = np.where(has_occ, (1.0 - floor) * occ / np.maximum(counts, 1.0) + floor / coarse_bins, 1.0 / coarse_bins)
        cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(pdf, axis=1)], axis=1)
        cdf /= cdf[:, -1:]
        # batched searchsorted: shift each ray's cdf into its own interval
        offs = 2.0 * np.arange(R)[:, None]
        pos = np.searchsorted((cdf + offs).ravel(), (u + offs).ravel(), side="right").reshape(R, n_samples)
        row_start = np.arange(R)[:, None] * (coarse_bins + 1)
        hi = np.clip(pos - row_start, 1, coarse_bins)
        lo = hi - 1
        c_lo = np.take_along_axis(cdf, lo, axis=1)
        c_hi = np.take_along_axis(cdf, hi, axis=1)
        frac = np.clip((u - c_lo) / np.maximum(c_hi - c_lo, 1e-300), 0.0, 1.0)
        s = (edges[lo] + frac * (edges[hi] - edges[lo]))
        t = rays.t_near[:, None] + s * span
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = span[:, 0] / n_samples
    return t, delta


@dataclass
class RenderOutput:
    """Composited per-ray quantities.

    ``specular`` is the composited specular component, used by the specular
    penalty in the loss. ``weights`` are the per-sample compositing weights.
    """

    color: np.ndarray  # (R, 3), unclamped sum of diffuse and specular
    semantics: np.ndarray  # (R, C)
    depth: np.ndarray  # (R,)
    opacity: np.ndarray  # (R,)
    specular: np.ndarray  # (R, 3)
    weights: np.ndarray  # (R, N)
    cache: dict | None = None


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def composite(sample: FieldSample, t: np.ndarray, delta: np.ndarray, cache: bool = True) -> RenderOutput:
    """Alpha-composite field samples laid out as ``(R, N)`` along sorted ``t``.

    ``alpha_i = 1 - exp(-sigma_i delta_i)``, ``T_i = exp(-sum_{j<i} sigma_j delta_j)``,
    ``w_i = T_i alpha_i``; color, sigmoid semantics, depth ``t_i`` and opacity are
    weight sums.
    """
    R, N = t.shape
    sigma = np.asarray(sample.sigma, dtype=np.float64).reshape(R, N)
    if not np.all(np.isfinite(sigma)):
        raise NumericFault("non-finite density in composite")
    c_d = sample.c_d.reshape(R, N, 3)
    c_s = sample.c_s.reshape(R, N, 3)
    s_prob = _sigmoid(sample.s.reshape(R, N, -1))
    tau = sigma * delta
    acc = np.cumsum(tau, axis=1)
    T_next = np.exp(-acc)  # T_{i+1}
    T = np.empty_like(T_next)
    T[:, 0] = 1.0
    T[:, 1:] = T_next[:, :-1]
    alpha = -np.expm1(-tau)
    w = T * alpha
    color = np.einsum("rn,rnc->rc", w, c_d + c_s)
    spec = np.einsum("rn,rnc->rc", w, c_s)
    sem = np.einsum("rn,rnc->rc", w, s_prob)
    depth = np.sum(w * t, axis=1)
    opacity = np.sum(w, axis=1)
    stash = None
    if cache:
        stash = {"w": w, "T_next": T_next, "delta": delta, "t": t, "c_d": c_d, "c_s": c_s, "s_prob": s_prob}
    return RenderOutput(color, sem, depth, opacity, spec, w, stash)


def composite_backward(upstream, out: RenderOutput):
    """Gradients of a scalar w.r.t. per-sample field outputs.

    Args:
        upstream: 5-tuple of gradients w.r.t. ``(color, semantics, depth,
            opacity, specular)``; ``None`` entries count as zero.
        out: result of :func:`composite` run with ``cache=True``.

    Returns:
        ``(g_sigma, g_c_d, g_c_s, g_s)`` shaped ``(R, N)``, ``(R, N, 3)``,
        ``(R, N, 3)``, ``(R, N, C)``; ``g_s`` is w.r.t. the semantic logits.
    """
    if out.cache is None:
        raise ContractViolation("composite_backward needs a RenderOutput produced with cache=True")
    c = out.cache
    w, t = c["w"], c["t"]
    R, N = w.shape
    C = c["s_prob"].shape[-1]
    gC, gS, gD, gO, gSp = upstream
    gC = np.zeros((R, 3)) if gC is None else np.asarray(gC, dtype=np.float64).reshape(R, 3)
    gS = np.zeros((R, C)) if gS is None else np.asarray(gS, dtype=np.float64).reshape(R, C)
    gD = np.zeros(R) if gD is None else np.asarray(gD, dtype=np.float64).reshape(R)
    gO = np.zeros(R) if gO is None else np.asarray(gO, dtype=np.float64).reshape(R)
    gSp = np.zeros((R, 3)) if gSp is None else np.asarray(gSp, dtype=np.float64).reshape(R, 3)

    # scalar sensitivity of the objective to each sample's weight
    g_w = (
        np.einsum("rnc,rc->rn", c["c_d"] + c["c_s"], gC)
        + np.einsum("rnc,rc->rn", c["c_s"], gSp)
        + np.einsum("rnc,rc->rn", c["s_prob"], gS)
        + gD[:, None] * t
        + gO[:, None]
    )
    # d w_i / d sigma_k = delta_k (T_{k+1} [i == k] - w_i [i > k])
    wg = w * g_w
    suffix = np.cumsum(wg[:, ::-1], axis=1)[:, ::-1]
    after = suffix - wg  # sum over i > k
    g_sigma = c["delta"] * (c["T_next"] * g_w - after)

    g_cd = w[..., None] * gC[:, None, :]
    g_cs = w[..., None] * (gC + gSp)[:, None, :]
    sp = c["s_prob"]
    g_s = w[..., None] * gS[:, None, :] * sp * (1.0 - sp)
    return g_sigma, g_cd, g_cs, g_s


@dataclass(frozen=True)
class RenderConfig:
    bounds: SceneBounds = SceneBounds()
    sampler: SamplerConfig = SamplerConfig()
    chunk: int = 4096


def render_rays(rays: RayBatch, params: ParameterStore, field_cfg: FieldConfig, render_cfg: RenderConfig,
                grid: OccupancyGrid | None = None, rng=None, cache: bool = True) -> RenderOutput:
    """Sample, query the field and composite a batch of rays.

    Samples outside the scene box, or in empty cells of an active occupancy
    grid, get zero density and are never sent through the field.
    """
    sc = render_cfg.sampler
    t, delta = sample_ray(rays, sc.strategy, sc.n_samples, rng, grid, render_cfg.bounds, sc.coarse_bins, sc.floor)
    R, N = t.shape
    pts = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    unit = render_cfg.bounds.to_unit(pts).reshape(-1, 3)
    active = np.all((unit >= 0.0) & (unit <= 1.0), axis=1)
    if grid is not None and sc.strategy == "occupancy" and grid.binary.any():
        active &= grid.lookup(unit)
    act = np.flatnonzero(active)
    dirs = np.broadcast_to(rays.directions[:, None, :], (R, N, 3)).reshape(-1, 3)
    inner = field_forward(unit[act], dirs[act], params, field_cfg, cache=cache)
    C = field_cfg.semantic_channels
    full = FieldSample(np.zeros(R * N), np.zeros((R * N, 3)), np.zeros((R * N, 3)), np.zeros((R * N, C)))
    full.sigma[act] = inner.sigma
    full.c_d[act] = inner.c_d
    full.c_s[act] = inner.c_s
    full.s[act] = inner.s
    out = composite(full, t, delta, cache=cache)
    if cache:
        out.cache["field_sample"] = inner
        out.cache["active"] = act
    return out


def render_rays_backward(upstream, out: RenderOutput, params: ParameterStore, field_cfg: FieldConfig):
    """Backpropagate ray-level gradients into ``params.grads``."""
    g_sigma, g_cd, g_cs, g_s = composite_backward(upstream, out)
    act = out.cache["active"]
    C = field_cfg.semantic_channels
    grads = (g_sigma.reshape(-1)[act], g_cd.reshape(-1, 3)[act], g_cs.reshape(-1, 3)[act], g_s.reshape(-1, C)[act])
    field_backward(grads, out.cache["field_sample"], params, field_cfg)


def render_image(cam: CameraModel, params: ParameterStore, field_cfg: FieldConfig,
                 render_cfg: RenderConfig | None = None, grid: OccupancyGrid | None = None,
                 tile: int | None = None) -> dict[str, np.ndarray]:
    """Render a full frame with mid-stratum samples.

    Returns a dict of rasters: ``color`` (H, W, 3) clamped to [0, 1],
    ``semantics`` (H, W, C), ``depth`` (H, W) and ``opacity`` (H, W).
    """
    render_cfg = render_cfg or RenderConfig()
    H, W = cam.height, cam.width
    n = H * W
    tile = tile or render_cfg.chunk
    C = field_cfg.semantic_channels
    color = np.zeros((n, 3))
    sem = np.zeros((n, C))
    depth = np.zeros(n)
    opacity = np.zeros(n)
    for start in range(0, n, tile):
        ids = np.arange(start, min(start + tile, n))
        rays = generate_rays(cam, ids, render_cfg.bounds)
        out = render_rays(rays, params, field_cfg, render_cfg, grid, rng=None, cache=False)
        color[ids] = out.color
        sem[ids] = out.semantics
        depth[ids] = out.depth
        opacity[ids] = out.opacity
    return {
        "color": np.clip(color, 0.0, 1.0).reshape(H, W, 3),
        "semantics": sem.reshape(H, W, C),
        "depth": depth.reshape(H, W),
        "opacity": opacity.reshape(H, W),
    }
