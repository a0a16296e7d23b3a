"""Radiance field with density, diffuse/specular color and semantic heads.

Data flow for a point ``x`` (unit cube) and direction ``d``::

    hash(x) ++ relu(freq(x) W_pe + b_pe)  ->  trunk MLP  ->  [raw_sigma | geo]
    sigma = exp(raw_sigma)  (clamped; or softplus(raw_sigma - 1))
    geo            -> semantic MLP  -> logits s
    geo            -> diffuse MLP   -> sigmoid -> c_d
    geo ++ sh(d)   -> specular MLP  -> c_s (unbounded)

Gradients are written by hand; every parameter lives in one flat
:class:`ParameterStore` so the optimizer and checkpoint code see a single array.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encodings import (
    FrequencyConfig,
    HashGridConfig,
    ShConfig,
    frequency_encode,
    hash_encode,
    hash_encode_backward,
    sh_encode,
)
from .errors import ContractViolation, DomainError, NumericFault

CHECKPOINT_MAGIC = b"SAIDNF01"


@dataclass(frozen=True)
class MlpSpec:
    """Hidden layer count and width; the output width is set by the head."""

    layers: int
    width: int


@dataclass(frozen=True)
class FieldConfig:
    hash_grid: HashGridConfig = field(default_factory=HashGridConfig)
    frequency: FrequencyConfig = field(default_factory=FrequencyConfig)
    sh: ShConfig = field(default_factory=ShConfig)
    pos_enc_mlp: MlpSpec = MlpSpec(1, 16)
    density_mlp: MlpSpec = MlpSpec(2, 64)
    geo_features: int = 15
    seg_mlp: MlpSpec = MlpSpec(2, 32)
    color_mlp: MlpSpec = MlpSpec(1, 32)
    semantic_channels: int = 3
    density_activation: str = "exp"
    # ablation switches
    use_frequency: bool = True
    spec_split: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.semantic_channels < 1:
            raise DomainError("semantic_channels must be >= 1")
        for spec in (self.pos_enc_mlp, self.density_mlp, self.seg_mlp, self.color_mlp):
            if spec.width <= 0 or spec.layers < 0:
                raise DomainError("MLP widths must be > 0")
        if self.pos_enc_mlp.layers != 1:
            raise DomainError("the position-encoding branch is a single layer")
        if self.density_activation not in ("softplus", "exp"):
            raise DomainError(f"unknown density activation {self.density_activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        d = dict(d)
        d["hash_grid"] = HashGridConfig(**d.get("hash_grid", {}))
        d["frequency"] = FrequencyConfig(**d.get("frequency", {}))
        d["sh"] = ShConfig(**d.get("sh", {}))
        for key in ("pos_enc_mlp", "density_mlp", "seg_mlp", "color_mlp"):
            if key in d:
                d[key] = MlpSpec(**d[key]) if isinstance(d[key], dict) else MlpSpec(*d[key])
        return cls(**d)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


class ParameterStore:
    """Flat value/gradient arrays with named, disjoint segments.

    ``view(name)`` and ``grad(name)`` return reshaped views, so in-place updates
    through either the flat arrays or a view are visible everywhere.
    """

    def __init__(self, layout: dict[str, tuple[int, ...]], dtype=np.float64):
        self.layout: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in layout.items():
            size = int(np.prod(shape))
            self.layout[name] = (offset, size, tuple(shape))
            offset += size
        self.values = np.zeros(offset, dtype=dtype)
        self.grads = np.zeros(offset, dtype=dtype)

    def __len__(self):
        return self.values.size

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def astype(self, dtype) -> "ParameterStore":
        """Copy with values and gradients converted to ``dtype``."""
        new = self.copy()
        new.values = new.values.astype(dtype)
        new.grads = new.grads.astype(dtype)
        return new

    @property
    def names(self) -> list[str]:
        return list(self.layout)

    def span(self, name: str) -> slice:
        off, size, _ = self.layout[name]
        return slice(off, off + size)

    def view(self, name: str) -> np.ndarray:
        off, size, shape = self.layout[name]
        return self.values[off : off + size].reshape(shape)

    def grad(self, name: str) -> np.ndarray:
        off, size, shape = self.layout[name]
        return self.grads[off : off + size].reshape(shape)

    def zero_grad(self):
        self.grads[:] = 0.0

    def copy(self) -> "ParameterStore":
        new = ParameterStore.__new__(ParameterStore)
        new.layout = dict(self.layout)
        new.values = self.values.copy()
        new.grads = self.grads.copy()
        return new

    def with_private_grads(self) -> "ParameterStore":
        """Share values with ``self`` but accumulate into a fresh gradient buffer."""
        new = ParameterStore.__new__(ParameterStore)
        new.layout = self.layout
        new.values = self.values
        new.grads = np.zeros_like(self.grads)
        return new

    def check_finite(self):
        if np.all(np.isfinite(self.values)):
            return
        for name in self.layout:
            if not np.all(np.isfinite(self.view(name))):
                raise NumericFault(f"non-finite value in parameter segment {name!r}")


def _mlp_layout(prefix: str, n_in: int, spec: MlpSpec, n_out: int | None) -> dict:
    layout = {}
    widths = [n_in] + [spec.width] * spec.layers
    if n_out is not None:
        widths.append(n_out)
    for i in range(len(widths) - 1):
        layout[f"{prefix}.{i}.weight"] = (widths[i], widths[i + 1])
        layout[f"{prefix}.{i}.bias"] = (widths[i + 1],)
    return layout


def _head_inputs(cfg: FieldConfig) -> dict[str, int]:
    sh_dim = cfg.sh.output_dim
    return {
        "diffuse": cfg.geo_features + (0 if cfg.spec_split else sh_dim),
        "specular": cfg.geo_features + sh_dim,
    }


def parameter_layout(cfg: FieldConfig) -> dict[str, tuple[int, ...]]:
    hg = cfg.hash_grid
    layout: dict[str, tuple[int, ...]] = {"hash.table": (hg.levels, hg.table_size, hg.features_per_level)}
    trunk_in = hg.output_dim
    if cfg.use_frequency:
        layout.update(_mlp_layout("pos", cfg.frequency.output_dim(3), cfg.pos_enc_mlp, None))
        trunk_in += cfg.pos_enc_mlp.width
    layout.update(_mlp_layout("trunk", trunk_in, cfg.density_mlp, 1 + cfg.geo_features))
    layout.update(_mlp_layout("semantic", cfg.geo_features, cfg.seg_mlp, cfg.semantic_channels))
    heads = _head_inputs(cfg)
    layout.update(_mlp_layout("diffuse", heads["diffuse"], cfg.color_mlp, 3))
    if cfg.spec_split:
        layout.update(_mlp_layout("specular", heads["specular"], cfg.color_mlp, 3))
    return layout


def init_params(cfg: FieldConfig, seed: int | None = None, dtype=np.float64) -> ParameterStore:
    """Fresh parameters: hash entries uniform in +-1e-4, He-uniform weights, zero biases.

    Values are drawn in float64 and then cast, so every ``dtype`` starts from
    the same (rounded) point.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    store = ParameterStore(parameter_layout(cfg))
    for name, (_, _, shape) in store.layout.items():
        v = store.view(name)
        if name == "hash.table":
            v[...] = rng.uniform(-1e-4, 1e-4, size=shape)
        elif name.endswith(".weight"):
            bound = np.sqrt(6.0 / shape[0])
            v[...] = rng.uniform(-bound, bound, size=shape)
    return store if store.dtype == np.dtype(dtype) else store.astype(dtype)


@dataclass
class FieldSample:
    """Per-point field outputs, batched over the leading axis.

    ``cache`` holds the activations needed by :func:`field_backward`; it is
    ``None`` when the forward pass ran without caching.
    """

    sigma: np.ndarray  # (N,)
    c_d: np.ndarray  # (N, 3)
    c_s: np.ndarray  # (N, 3)
    s: np.ndarray  # (N, C) logits
    cache: dict | None = None

    @property
    def color(self) -> np.ndarray:
        return np.clip(self.c_d + self.c_s, 0.0, 1.0)


def _mlp_forward(params: ParameterStore, prefix: str, a: np.ndarray, final_linear: bool = True):
    """Dense ReLU stack. Returns the output and per-layer (input, preactivation) pairs."""
    trace = []
    i = 0
    while f"{prefix}.{i}.weight" in params.layout:
        W = params.view(f"{prefix}.{i}.weight")
        b = params.view(f"{prefix}.{i}.bias")
        z = a @ W + b
        last = f"{prefix}.{i + 1}.weight" not in params.layout
        trace.append((a, z))
        a = z if (last and final_linear) else np.maximum(z, 0.0)
        i += 1
    return a, trace


def _mlp_backward(params: ParameterStore, prefix: str, trace, g: np.ndarray, final_linear: bool = True):
    """Accumulate weight/bias gradients and return the gradient w.r.t. the MLP input."""
    n = len(trace)
    for i in reversed(range(n)):
        a_in, z = trace[i]
        if not (i == n - 1 and final_linear):
            g = g * (z > 0)
        params.grad(f"{prefix}.{i}.weight")[...] += a_in.T @ g
        params.grad(f"{prefix}.{i}.bias")[...] += g.sum(axis=0)
        g = g @ params.view(f"{prefix}.{i}.weight").T
    return g


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def field_forward(x, d, params: ParameterStore, cfg: FieldConfig, cache: bool = True) -> FieldSample:
    """Evaluate the field at points ``x`` (unit cube) seen along directions ``d``.

    Args:
        x: ``(N, 3)`` positions in ``[0, 1]^3``.
        d: ``(N, 3)`` unit view directions.
        params: parameter store laid out by :func:`parameter_layout`.
        cfg: the config the store was built for.
        cache: keep activations for :func:`field_backward`.
    """
    params.check_finite()
    dt = params.dtype
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    h, hcache = hash_encode(x, cfg.hash_grid, params.view("hash.table"), return_cache=True)
    pos_trace = None
    if cfg.use_frequency:
        pe, pos_trace = _mlp_forward(params, "pos", frequency_encode(x, cfg.frequency).astype(dt, copy=False), final_linear=False)
        enc = np.concatenate([h, pe], axis=1)
    else:
        enc = h
    trunk_out, trunk_trace = _mlp_forward(params, "trunk", enc)
    raw_sigma = trunk_out[:, 0]
    geo = trunk_out[:, 1:]
    if cfg.density_activation == "softplus":
        sigma = _softplus(raw_sigma - 1.0)
    else:
        sigma = np.exp(np.minimum(raw_sigma, 15.0))
    s, sem_trace = _mlp_forward(params, "semantic", geo)
    sh = sh_encode(d, cfg.sh).astype(dt, copy=False)
    geo_dir = np.concatenate([geo, sh], axis=1)
    diffuse_in = geo if cfg.spec_split else geo_dir
    diffuse_raw, diffuse_trace = _mlp_forward(params, "diffuse", diffuse_in)
    c_d = _sigmoid(diffuse_raw)
    if cfg.spec_split:
        c_s, spec_trace = _mlp_forward(params, "specular", geo_dir)
    else:
        c_s, spec_trace = np.zeros_like(c_d), None
    stash = None
    if cache:
        stash = {
            "hash": hcache,
            "pos": pos_trace,
            "trunk": trunk_trace,
            "raw_sigma": raw_sigma,
            "semantic": sem_trace,
            "diffuse": diffuse_trace,
            "c_d": c_d,
            "specular": spec_trace,
            "n": x.shape[0],
        }
    return FieldSample(sigma, c_d, c_s, s, stash)


def field_backward(upstream, sample: FieldSample, params: ParameterStore, cfg: FieldConfig):
    """Accumulate parameter gradients into ``params.grads``.

    Args:
        upstream: 4-tuple ``(g_sigma, g_c_d, g_c_s, g_s)`` of gradients with the
            shapes of the matching :class:`FieldSample` fields. ``None`` entries
            count as zero.
        sample: output of :func:`field_forward` run with ``cache=True``.
    """
    if sample.cache is None:
        raise ContractViolation("field_backward needs a FieldSample produced with cache=True")
    c = sample.cache
    n = c["n"]
    g_sigma, g_cd, g_cs, g_s = upstream
    dt = params.dtype
    g_sigma = np.zeros(n, dt) if g_sigma is None else np.asarray(g_sigma, dtype=dt).reshape(n)
    g_cd = np.zeros((n, 3), dt) if g_cd is None else np.asarray(g_cd, dtype=dt).reshape(n, 3)
    g_s = np.zeros((n, cfg.semantic_channels), dt) if g_s is None else np.asarray(g_s, dtype=dt).reshape(n, -1)
    geo_dim = cfg.geo_features

    g_geo = _mlp_backward(params, "semantic", c["semantic"], g_s)

    cd = c["c_d"]
    g_diffuse_raw = g_cd * cd * (1.0 - cd)
    g_diffuse_in = _mlp_backward(params, "diffuse", c["diffuse"], g_diffuse_raw)
    g_geo = g_geo + g_diffuse_in[:, :geo_dim]

    if cfg.spec_split:
        g_cs = np.zeros((n, 3), dt) if g_cs is None else np.asarray(g_cs, dtype=dt).reshape(n, 3)
        g_spec_in = _mlp_backward(params, "specular", c["specular"], g_cs)
        g_geo = g_geo + g_spec_in[:, :geo_dim]

    raw = c["raw_sigma"]
    if cfg.density_activation == "softplus":
        dsigma = _sigmoid(raw - 1.0)
    else:
        dsigma = np.where(raw < 15.0, np.exp(np.minimum(raw, 15.0)), 0.0)
    g_trunk_out = np.concatenate([(g_sigma * dsigma)[:, None], g_geo], axis=1)
    g_enc = _mlp_backward(params, "trunk", c["trunk"], g_trunk_out)

    hg = cfg.hash_grid
    h_dim = hg.output_dim
    if cfg.use_frequency:
        _mlp_backward(params, "pos", c["pos"], g_enc[:, h_dim:], final_linear=False)
    grad_table, _ = hash_encode_backward(g_enc[:, :h_dim], c["hash"], hg)
    params.grad("hash.table")[...] += grad_table


# checkpoint blob: magic(8) | sha256 config digest(32) | uint64 LE count | float32 LE values
_HEADER = struct.Struct("<8s32sQ")


def save_checkpoint(path, params: ParameterStore, cfg: FieldConfig):
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, cfg.digest(), len(params)))
        fh.write(params.values.astype("<f4").tobytes())


def load_checkpoint(path, cfg: FieldConfig, dtype=np.float64) -> ParameterStore:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DomainError(f"{path}: truncated checkpoint")
    magic, digest, count = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise DomainError(f"{path}: bad magic {magic!r}")
    if digest != cfg.digest():
        raise DomainError(f"{path}: checkpoint was written for a different field config")
    store = ParameterStore(parameter_layout(cfg), dtype=dtype)
    if count != len(store) or len(raw) != _HEADER.size + 4 * count:
        raise DomainError(f"{path}: expected {len(store)} values, header says {count}")
    store.values[:] = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(dtype)
    return store
