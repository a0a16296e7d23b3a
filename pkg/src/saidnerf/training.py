"""Four-term loss, Adam, and the wall-clock-capped training loop."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import SceneDataset
from .errors import DomainError, NumericFault
from .field import FieldConfig, ParameterStore, field_forward, init_params, save_checkpoint
from .metrics import DepthMetrics, aggregate_metrics, compute_metrics
from .renderer import (
    OccupancyGrid,
    RayBatch,
    RenderConfig,
    RenderOutput,
    SamplerConfig,
    generate_rays,
    render_image,
    render_rays,
    render_rays_backward,
)

log = logging.getLogger(__name__)

BCE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    w_rgb: float = 1.0
    w_sem: float = 0.1
    w_depth: float = 1.0
    w_spec: float = 1e-3

    def __post_init__(self):
        vals = (self.w_rgb, self.w_sem, self.w_depth, self.w_spec)
        if not all(np.isfinite(v) and v >= 0 for v in vals) or not self.w_rgb > 0:
            raise DomainError("loss weights must be finite and non-negative, with w_rgb > 0")


@dataclass
class BatchTarget:
    gt_color: np.ndarray  # (R, 3)
    gt_sem: np.ndarray  # (R, C) in {0, 1}
    gt_depth: np.ndarray  # (R,) metres
    depth_valid: np.ndarray  # (R,) bool

    def subset(self, idx) -> "BatchTarget":
        return BatchTarget(self.gt_color[idx], self.gt_sem[idx], self.gt_depth[idx], self.depth_valid[idx])


def compute_loss(pred: RenderOutput, target: BatchTarget, w: LossWeights, batch_size: int | None = None):
    """Weighted L1 color + BCE semantics + masked L2 depth + specular penalty.

    Each term is a mean over ``batch_size`` rays (default: the rays in
    ``pred``), so losses of disjoint chunks add up to the loss of the union.

    Returns:
        ``(loss, terms, upstream)`` where ``terms`` holds the four weighted
        terms and ``upstream`` the gradients w.r.t. ``(color, semantics, depth,
        opacity, specular)`` for :func:`~saidnerf.renderer.composite_backward`.
    """
    R = pred.color.shape[0]
    n = float(batch_size or R)
    C = pred.semantics.shape[1]

    color = np.clip(pred.color, 0.0, 1.0)
    diff = color - target.gt_color
    l_rgb = np.sum(np.abs(diff)) / (3 * n)
    in_range = (pred.color > 0.0) & (pred.color < 1.0)
    g_color = np.sign(diff) * in_range / (3 * n)

    S = pred.semantics
    if not np.all(np.isfinite(S)):
        raise NumericFault("non-finite semantic prediction")
    p = np.clip(S, BCE_EPS, 1.0 - BCE_EPS)
    y = target.gt_sem.astype(np.float64)
    l_sem = -np.sum(y * np.log(p) + (1 - y) * np.log1p(-p)) / (C * n)
    g_sem = ((p - y) / (p * (1 - p))) * ((S > BCE_EPS) & (S < 1 - BCE_EPS)) / (C * n)

    valid = np.asarray(target.depth_valid, dtype=bool)
    derr = np.where(valid, pred.depth - np.where(valid, target.gt_depth, 0.0), 0.0)
    l_depth = np.sum(derr * derr) / n
    g_depth = 2.0 * derr / n

    l_spec = np.sum(pred.specular**2) / n
    g_spec = 2.0 * pred.specular / n

    terms = {
        "l_rgb": w.w_rgb * l_rgb,
        "l_sem": w.w_sem * l_sem,
        "l_depth": w.w_depth * l_depth,
        "l_spec": w.w_spec * l_spec,
    }
    loss = terms["l_rgb"] + terms["l_sem"] + terms["l_depth"] + terms["l_spec"]
    upstream = (w.w_rgb * g_color, w.w_sem * g_sem, w.w_depth * g_depth, None, w.w_spec * g_spec)
    return float(loss), {k: float(v) for k, v in terms.items()}, upstream


class Adam:
    def __init__(self, size: int, lr: float = 1e-2, betas=(0.9, 0.99), eps: float = 1e-15, dtype=np.float64):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self.t = 0

    def step(self, params: ParameterStore, lr: float | None = None):
        lr = self.lr if lr is None else lr
        g = params.grads
        self.t += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * g
        self.v *= self.b2
        self.v += (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        params.values -= lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    time_limit_s: float = 60.0
    max_steps: int | None = None
    rays_per_batch: int = 1024
    learning_rate: float = 1e-2
    lr_decay_steps: int = 4000  # lr falls by 10x over this many steps
    rng_seed: int = 0
    n_samples: int = 48
    sampler: str = "occupancy"
    occupancy_every: int = 16
    occupancy_warmup: int = 32
    occupancy_resolution: int = 32
    occupancy_threshold: float = 5.0
    grad_chunks: int = 1
    workers: int = 1
    log_path: str | None = None
    checkpoint_path: str | None = None
    train_views: tuple | None = None  # view indices; None = the dataset's train split
    precision: str = "float32"  # field compute dtype; "float64" is the reference build

    def __post_init__(self):
        if not self.time_limit_s > 0:
            raise DomainError("time_limit_s must be > 0")
        if self.rays_per_batch < 1:
            raise DomainError("rays_per_batch must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise DomainError(f"precision must be float32 or float64, got {self.precision!r}")


@dataclass
class TrainResult:
    params: ParameterStore
    field_cfg: FieldConfig
    log: list
    grid: OccupancyGrid
    render_cfg: RenderConfig
    wall_s: float = 0.0
    aborted: bool = False

    @property
    def steps(self) -> int:
        return len(self.log)


class TrainingAborted(NumericFault):
    """Training hit a non-finite loss; ``result`` holds the last good parameters."""

    def __init__(self, msg, result: TrainResult):
        super().__init__(msg)
        self.result = result


def collect_rays(dataset: SceneDataset, views) -> tuple[RayBatch, BatchTarget]:
    """Every pixel of the given views as one ray batch with its supervision."""
    rays, tgts = [], []
    H, W = dataset.height, dataset.width
    ids = np.arange(H * W)
    for v in views:
        r = generate_rays(dataset.camera(v), ids, dataset.bounds)
        r.pixel_ids = r.pixel_ids + v * H * W
        rays.append(r)
        depth = dataset.depth[v].ravel()
        tgts.append(BatchTarget(
            dataset.rgb[v].reshape(-1, 3),
            dataset.channels[v].reshape(dataset.semantic_channels, -1).T.astype(np.float64),
            depth,
            depth > 0,
        ))
    cat = lambda xs: np.concatenate(xs, axis=0)  # noqa: E731
    batch = RayBatch(cat([r.origins for r in rays]), cat([r.directions for r in rays]),
                     cat([r.t_near for r in rays]), cat([r.t_far for r in rays]), cat([r.pixel_ids for r in rays]))
    target = BatchTarget(cat([t.gt_color for t in tgts]), cat([t.gt_sem for t in tgts]),
                         cat([t.gt_depth for t in tgts]), cat([t.depth_valid for t in tgts]))
    return batch, target


def loss_and_grad(params: ParameterStore, field_cfg: FieldConfig, render_cfg: RenderConfig, rays: RayBatch,
                  target: BatchTarget, weights: LossWeights, grid=None, rng=None, grad_chunks: int = 1,
                  workers: int = 1):
    """Loss over a ray batch; gradients accumulate into ``params.grads``.

    The batch is split into ``grad_chunks`` contiguous chunks, each with private
    gradient buffers, reduced in chunk order. The result is the same whether
    chunks run on one thread or several.
    """
    R = len(rays)
    # draw all jitter up front so chunking does not change the random stream
    seeds = None
    if rng is not None:
        seeds = rng.integers(0, 2**63 - 1, size=max(grad_chunks, 1))
    bounds = np.linspace(0, R, grad_chunks + 1).astype(int)

    def run(k):
        idx = slice(bounds[k], bounds[k + 1])
        local = params.with_private_grads()
        chunk_rng = None if seeds is None else np.random.default_rng(seeds[k])
        out = render_rays(rays.subset(idx), local, field_cfg, render_cfg, grid, rng=chunk_rng)
        loss, terms, up = compute_loss(out, target.subset(idx), weights, batch_size=R)
        render_rays_backward(up, out, local, field_cfg)
        return loss, terms, local.grads

    if workers > 1 and grad_chunks > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(grad_chunks)))
    else:
        results = [run(k) for k in range(grad_chunks)]
    total = 0.0
    terms = {"l_rgb": 0.0, "l_sem": 0.0, "l_depth": 0.0, "l_spec": 0.0}
    for loss, t, g in results:
        total += loss
        for k in terms:
            terms[k] += t[k]
        params.grads += g
    return total, terms


def _density_fn(params, field_cfg):
    def fn(unit_pts):
        out = []
        for start in range(0, len(unit_pts), 8192):
            x = unit_pts[start:start + 8192]
            d = np.tile([0.0, 0.0, 1.0], (len(x), 1))
            out.append(field_forward(x, d, params, field_cfg, cache=False).sigma)
        return np.concatenate(out)
    return fn


def train(dataset: SceneDataset, cfg: TrainConfig, weights: LossWeights | None = None,
          field_cfg: FieldConfig | None = None) -> TrainResult:
    """Optimize a fresh field on ``dataset`` until the time cap (or ``max_steps``).

    At least one step always runs. The loop checks the clock at step
    boundaries, so the wall time at exit is at most the limit plus one step.
    """
    weights = weights or LossWeights()
    if len(dataset) < 1:
        raise DomainError("dataset has no frames")
    field_cfg = field_cfg or FieldConfig(semantic_channels=dataset.semantic_channels, seed=cfg.rng_seed)
    if field_cfg.semantic_channels != dataset.semantic_channels:
        raise DomainError("field semantic channels differ from the dataset's")
    views = list(cfg.train_views) if cfg.train_views is not None else dataset.indices("train") or list(range(len(dataset)))
    rays, target = collect_rays(dataset, views)

    render_cfg = RenderConfig(bounds=dataset.bounds, sampler=SamplerConfig(n_samples=cfg.n_samples, strategy=cfg.sampler))
    params = init_params(field_cfg, dtype=cfg.precision)
    opt = Adam(len(params), lr=cfg.learning_rate, dtype=params.dtype)
    grid = OccupancyGrid(cfg.occupancy_resolution, cfg.occupancy_threshold)
    rng = np.random.default_rng(cfg.rng_seed)
    perm = rng.permutation(len(rays))
    cursor = 0
    last_good = params.values.copy()
    records: list[dict] = []
    log_fh = open(cfg.log_path, "w") if cfg.log_path else None
    t0 = time.perf_counter()
    step = 0
    try:
        while True:
            t_step = time.perf_counter()
            if cursor + cfg.rays_per_batch > len(perm):
                perm = rng.permutation(len(rays))
                cursor = 0
            idx = perm[cursor:cursor + cfg.rays_per_batch]
            cursor += cfg.rays_per_batch
            params.zero_grad()
            loss, terms = loss_and_grad(params, field_cfg, render_cfg, rays.subset(idx), target.subset(idx),
                                        weights, grid, rng, cfg.grad_chunks, cfg.workers)
            bad = not np.isfinite(loss) or not np.all(np.isfinite(params.grads))
            if not bad:
                lr = cfg.learning_rate * 0.1 ** (step / cfg.lr_decay_steps)
                opt.step(params, lr)
                bad = not np.all(np.isfinite(params.values))
            if bad:
                params.values[:] = last_good
                result = TrainResult(params, field_cfg, records, grid, render_cfg, time.perf_counter() - t0, True)
                if cfg.checkpoint_path:
                    save_checkpoint(cfg.checkpoint_path, params, field_cfg)
                raise TrainingAborted(f"non-finite loss at step {step}", result)
            last_good[:] = params.values
            step += 1
            if cfg.sampler == "occupancy" and step >= cfg.occupancy_warmup and step % cfg.occupancy_every == 0:
                grid.update(_density_fn(params, field_cfg), rng)
            now = time.perf_counter()
            rec = {"step": step, "wall_ms": (now - t_step) * 1000.0, "loss": loss, **terms}
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            if cfg.max_steps is None and now - t0 >= cfg.time_limit_s:
                break
    finally:
        if log_fh:
            log_fh.close()
    wall = time.perf_counter() - t0
    log.info("trained %d steps in %.1f s", step, wall)
    if cfg.checkpoint_path:
        save_checkpoint(cfg.checkpoint_path, params, field_cfg)
    return TrainResult(params, field_cfg, records, grid, render_cfg, wall)


def evaluate_regions(result: TrainResult, dataset: SceneDataset, views=None, regions=("all",),
                     n_samples: int = 64) -> dict:
    """Render each view once and aggregate per-view depth metrics for every region.

    Rendering reuses the training sampler and its occupancy grid, with
    mid-stratum samples. A region is ``"all"`` (every pixel with ground truth)
    or ``"transparent"``. Views without valid pixels in a region are skipped.
    """
    if dataset.depth_gt is None:
        raise DomainError("dataset has no ground-truth depth")
    if "transparent" in regions and dataset.transparent is None:
        raise DomainError("dataset has no transparent masks")
    unknown = set(regions) - {"all", "transparent"}
    if unknown:
        raise DomainError(f"unknown evaluation regions {sorted(unknown)}")
    views = range(len(dataset)) if views is None else views
    rcfg = replace(result.render_cfg, sampler=replace(result.render_cfg.sampler, n_samples=n_samples))
    per_view = {r: [] for r in regions}
    for v in views:
        img = render_image(dataset.camera(v), result.params, result.field_cfg, rcfg, grid=result.grid)
        gt = dataset.depth_gt[v]
        for r in regions:
            valid = gt > 0
            if r == "transparent":
                valid &= dataset.transparent[v]
            if valid.any():
                per_view[r].append(compute_metrics(img["depth"], gt, valid))
    return {r: aggregate_metrics(m) for r, m in per_view.items()}


def evaluate(result: TrainResult, dataset: SceneDataset, views=None, region: str = "all",
             n_samples: int = 64) -> DepthMetrics:
    """Depth metrics of a trained field for one region; see :func:`evaluate_regions`."""
    return evaluate_regions(result, dataset, views, (region,), n_samples)[region]


ABLATION_TOGGLES = ("semantic", "freq_enc", "depth_sup", "spec_split")


def ablation_settings(toggle: str | None, weights: LossWeights, field_cfg: FieldConfig):
    """Weights and field config with one component removed (``None`` = full model)."""
    if toggle is None:
        return weights, field_cfg
    if toggle == "semantic":
        return replace(weights, w_sem=0.0), field_cfg
    if toggle == "depth_sup":
        return replace(weights, w_depth=0.0), field_cfg
    if toggle == "freq_enc":
        return weights, replace(field_cfg, use_frequency=False)
    if toggle == "spec_split":
        return replace(weights, w_spec=0.0), replace(field_cfg, spec_split=False)
    raise DomainError(f"unknown ablation toggle {toggle!r}")


def ablate(dataset: SceneDataset, cfg: TrainConfig, toggles=(), weights: LossWeights | None = None,
           field_cfg: FieldConfig | None = None, eval_views=None) -> list[dict]:
    """Train the full model and one model per removed component; one metrics row each."""
    weights = weights or LossWeights()
    field_cfg = field_cfg or FieldConfig(semantic_channels=dataset.semantic_channels, seed=cfg.rng_seed)
    rows = []
    for toggle in (None, *toggles):
        w, fc = ablation_settings(toggle, weights, field_cfg)
        res = train(dataset, cfg, w, fc)
        regions = ("all", "transparent") if dataset.transparent is not None else ("all",)
        m = evaluate_regions(res, dataset, eval_views, regions)
        row = {"variant": "full" if toggle is None else f"w/o {toggle}", "steps": res.steps, **m["all"].as_dict()}
        if "transparent" in m:
            row["rmse_transparent"] = m["transparent"].rmse
        rows.append(row)
    return rows


def rebuild_grid(params: ParameterStore, field_cfg: FieldConfig, resolution: int = 32,
                 threshold: float = 5.0) -> OccupancyGrid:
    """Occupancy grid from a trained field, sampled at cell centres (no jitter)."""
    grid = OccupancyGrid(resolution, threshold)
    grid.update(_density_fn(params, field_cfg), None)
    return grid
