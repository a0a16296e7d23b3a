"""Input encodings: multiresolution hash grid, sinusoidal frequency bands and
real spherical harmonics for view directions.

All functions are batched over a leading axis. A single point of shape ``(3,)``
is accepted and treated as a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import DomainError

# per-axis multipliers of the spatial hash, XOR-combined
HASH_PRIMES = (1, 2654435761, 805459861)

# corner offsets (i, j, k) with corner index = 4*i + 2*j + k
_CORNERS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.int64)


@dataclass(frozen=True)
class HashGridConfig:
    """Multiresolution hash grid settings.

    The defaults are desk-scale engineering choices, small enough to train on a
    CPU in seconds; they are not taken from any published configuration.
    """

    levels: int = 8
    features_per_level: int = 2
    table_size_log2: int = 15
    base_resolution: int = 16
    growth_factor: float = 1.38
    hash_seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise DomainError("levels must be >= 1")
        if not 10 <= self.table_size_log2 <= 24:
            raise DomainError("table_size_log2 must lie in [10, 24]")
        if not self.growth_factor > 1:
            raise DomainError("growth_factor must be > 1")
        if self.base_resolution < 1 or self.features_per_level < 1:
            raise DomainError("base_resolution and features_per_level must be >= 1")

    @property
    def table_size(self) -> int:
        return 1 << self.table_size_log2

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def resolution(self, level: int) -> int:
        return int(np.floor(self.base_resolution * self.growth_factor**level))

    @property
    def resolutions(self) -> list[int]:
        return [self.resolution(lv) for lv in range(self.levels)]


@dataclass(frozen=True)
class FrequencyConfig:
    num_bands: int = 4
    include_input: bool = True

    def __post_init__(self):
        if self.num_bands < 1:
            raise DomainError("num_bands must be >= 1")

    def output_dim(self, input_dim: int = 3) -> int:
        return input_dim * (2 * self.num_bands + int(self.include_input))


@dataclass(frozen=True)
class ShConfig:
    degree: int = 3

    def __post_init__(self):
        if not 0 <= self.degree <= 4:
            raise DomainError("SH degree must lie in [0, 4]")

    @property
    def output_dim(self) -> int:
        return (self.degree + 1) ** 2


@dataclass
class HashCache:
    """Lookup indices and trilinear weights retained for the backward pass."""

    indices: np.ndarray  # (levels, N, 8) flat row into the (levels * T) table
    weights: np.ndarray  # (levels, N, 8)
    frac: np.ndarray  # (levels, N, 3) position within the cell
    resolutions: np.ndarray  # (levels,)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    return (x[None, :] if single else x), single


def spatial_hash(coords: np.ndarray, table_size: int, seed: int = 0) -> np.ndarray:
    """Hash integer grid coordinates ``(..., 3)`` into ``[0, table_size)``.

    ``table_size`` must be a power of two. A nonzero ``seed`` is XOR-ed into
    the hash before masking so that different seeds decorrelate collisions.
    """
    c = coords.astype(np.uint64)
    h = c[..., 0] * np.uint64(HASH_PRIMES[0])
    h ^= c[..., 1] * np.uint64(HASH_PRIMES[1])
    h ^= c[..., 2] * np.uint64(HASH_PRIMES[2])
    if seed:
        h ^= np.uint64(seed & 0xFFFFFFFF)
    return (h & np.uint64(table_size - 1)).astype(np.int64)


@numba.njit(cache=True, nogil=True)
def _hash_forward_kernel(x, res, table, T, seed, indices, weights, fracs, out):
    n = x.shape[0]
    L = res.shape[0]
    F = table.shape[1]
    mask = np.uint64(T - 1)
    p1 = np.uint64(HASH_PRIMES[1])
    p2 = np.uint64(HASH_PRIMES[2])
    useed = np.uint64(seed)
    for lv in range(L):
        for i in range(n):
            px = x[i, 0] * res[lv]
            py = x[i, 1] * res[lv]
            pz = x[i, 2] * res[lv]
            bx = np.floor(px)
            by = np.floor(py)
            bz = np.floor(pz)
            fx = px - bx
            fy = py - by
            fz = pz - bz
            fracs[lv, i, 0] = fx
            fracs[lv, i, 1] = fy
            fracs[lv, i, 2] = fz
            ix = np.uint64(np.int64(bx))
            iy = np.uint64(np.int64(by))
            iz = np.uint64(np.int64(bz))
            for f in range(F):
                out[lv, i, f] = 0.0
            for c in range(8):
                ox = (c >> 2) & 1
                oy = (c >> 1) & 1
                oz = c & 1
                h = (ix + np.uint64(ox)) ^ ((iy + np.uint64(oy)) * p1) ^ ((iz + np.uint64(oz)) * p2)
                h ^= useed
                row = np.int64(h & mask) + lv * T
                w = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy) * (fz if oz else 1.0 - fz)
                indices[lv, i, c] = row
                weights[lv, i, c] = w
                for f in range(F):
                    out[lv, i, f] += w * table[row, f]


@numba.njit(cache=True, nogil=True)
def _hash_backward_kernel(g, indices, weights, grad_table):
    L, n, _ = indices.shape
    F = grad_table.shape[1]
    for lv in range(L):
        for i in range(n):
            for c in range(8):
                row = indices[lv, i, c]
                w = weights[lv, i, c]
                for f in range(F):
                    grad_table[row, f] += w * g[i, lv, f]


def hash_encode(x, cfg: HashGridConfig, table: np.ndarray, return_cache: bool = False):
    """Encode points in the unit cube with a multiresolution hash grid.

    Args:
        x: ``(N, 3)`` or ``(3,)`` points in ``[0, 1]^3``.
        cfg: grid configuration.
        table: ``(levels, table_size, features_per_level)`` feature table.
        return_cache: also return a :class:`HashCache` for
            :func:`hash_encode_backward`.

    Returns:
        ``(N, levels * features_per_level)`` features, level-major.
    """
    xb, single = _as_batch(x)
    if xb.shape[-1] != 3:
        raise DomainError(f"expected 3-vectors, got shape {xb.shape}")
    if not np.all(np.isfinite(xb)) or xb.min(initial=0.0) < 0.0 or xb.max(initial=0.0) > 1.0:
        raise DomainError("hash_encode input must lie inside the unit cube [0, 1]^3")
    L, T, F = cfg.levels, cfg.table_size, cfg.features_per_level
    if table.shape != (L, T, F):
        raise DomainError(f"table shape {table.shape} does not match config {(L, T, F)}")

    dtype = np.result_type(table.dtype, np.float32)
    xb = np.ascontiguousarray(xb, dtype=dtype)
    res = np.array(cfg.resolutions, dtype=dtype)
    flat = np.ascontiguousarray(table.reshape(L * T, F))
    n = xb.shape[0]
    indices = np.empty((L, n, 8), dtype=np.int64)
    weights = np.empty((L, n, 8), dtype=dtype)
    fracs = np.empty((L, n, 3), dtype=dtype)
    per_level = np.empty((L, n, F), dtype=dtype)
    _hash_forward_kernel(xb, res, flat, T, cfg.hash_seed & 0xFFFFFFFF, indices, weights, fracs, per_level)
    out = np.ascontiguousarray(per_level.transpose(1, 0, 2)).reshape(n, L * F)
    if single:
        out = out[0]
    if return_cache:
        return out, HashCache(indices, weights, fracs, res)
    return out


def hash_encode_backward(grad_out: np.ndarray, cache: HashCache, cfg: HashGridConfig, table=None):
    """Reverse-mode pass of :func:`hash_encode`.

    Args:
        grad_out: ``(N, levels * features)`` upstream gradient.
        cache: cache from the forward call.
        cfg: grid configuration.
        table: feature table; only needed when the gradient w.r.t. ``x`` is
            wanted.

    Returns:
        ``(grad_table, grad_x)``. ``grad_table`` has the table's shape; colliding
        entries accumulate. ``grad_x`` is ``None`` unless ``table`` is given.
    """
    L, T, F = cfg.levels, cfg.table_size, cfg.features_per_level
    g = np.ascontiguousarray(grad_out, dtype=cache.weights.dtype).reshape(-1, L, F)
    grad_table = np.zeros((L * T, F), dtype=cache.weights.dtype)
    _hash_backward_kernel(g, cache.indices, cache.weights, grad_table)
    grad_x = None
    if table is not None:
        flat = table.reshape(L * T, F)
        n = g.shape[0]
        grad_x = np.zeros((n, 3), dtype=np.float64)
        for lv in range(L):
            frac = cache.frac[lv]
            vals = flat[cache.indices[lv]]  # (N, 8, F)
            dots = np.einsum("ncf,nf->nc", vals, g[:, lv, :])
            for axis in range(3):
                # d weight / d frac_axis: sign from the corner bit, times the other two factors
                others = [a for a in range(3) if a != axis]
                f0 = np.where(_CORNERS[None, :, others[0]] == 1, frac[:, None, others[0]], 1 - frac[:, None, others[0]])
                f1 = np.where(_CORNERS[None, :, others[1]] == 1, frac[:, None, others[1]], 1 - frac[:, None, others[1]])
                sign = np.where(_CORNERS[:, axis] == 1, 1.0, -1.0)[None, :]
                grad_x[:, axis] += cache.resolutions[lv] * np.sum(dots * sign * f0 * f1, axis=1)
    return grad_table.reshape(L, T, F), grad_x


def frequency_encode(x, cfg: FrequencyConfig) -> np.ndarray:
    """Sinusoidal embedding ``[x, sin(2^k pi x), cos(2^k pi x)]`` for k < num_bands.

    Layout along the last axis: the raw input (if included), then for each band
    ``k`` the sines of all components followed by their cosines.
    """
    xb, single = _as_batch(x)
    parts = [xb] if cfg.include_input else []
    for k in range(cfg.num_bands):
        arg = (2.0**k) * np.pi * xb
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    out = np.concatenate(parts, axis=-1)
    return out[0] if single else out


# real SH constants, positive-sign convention (no Condon-Shortley phase)
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005, 1.0925484305920792, 0.5462742152960396)
_C3 = (
    0.5900435899266435,
    2.890611442640554,
    0.4570457994644658,
    0.3731763325901154,
    0.4570457994644658,
    1.445305721320277,
    0.5900435899266435,
)
_C4 = (
    2.5033429417967046,
    1.7701307697799304,
    0.9461746957575601,
    0.6690465435572892,
    0.10578554691520431,
    0.6690465435572892,
    0.47308734787878004,
    1.7701307697799304,
    0.6258357354491761,
)


def sh_encode(d, cfg: ShConfig) -> np.ndarray:
    """Real spherical-harmonic basis of unit directions up to ``cfg.degree``.

    Output columns are ordered by band ``l`` and then ``m = -l..l``.
    """
    db, single = _as_batch(d)
    norms = np.linalg.norm(db, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= 1e-6):
        raise DomainError("sh_encode expects unit-norm directions")
    x, y, z = db[:, 0], db[:, 1], db[:, 2]
    cols = [np.full_like(x, _C0)]
    if cfg.degree >= 1:
        cols += [_C1 * y, _C1 * z, _C1 * x]
    if cfg.degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            _C2[0] * x * y,
            _C2[1] * y * z,
            _C2[2] * (3 * zz - 1),
            _C2[3] * x * z,
            _C2[4] * (xx - yy),
        ]
    if cfg.degree >= 3:
        cols += [
            _C3[0] * y * (3 * xx - yy),
            _C3[1] * x * y * z,
            _C3[2] * y * (5 * zz - 1),
            _C3[3] * z * (5 * zz - 3),
            _C3[4] * x * (5 * zz - 1),
            _C3[5] * z * (xx - yy),
            _C3[6] * x * (xx - 3 * yy),
        ]
    if cfg.degree >= 4:
        cols += [
            _C4[0] * x * y * (xx - yy),
            _C4[1] * y * z * (3 * xx - yy),
            _C4[2] * x * y * (7 * zz - 1),
            _C4[3] * y * z * (7 * zz - 3),
            _C4[4] * (35 * zz * zz - 30 * zz + 3),
            _C4[5] * x * z * (7 * zz - 3),
            _C4[6] * (xx - yy) * (7 * zz - 1),
            _C4[7] * x * z * (xx - 3 * yy),
            _C4[8] * (xx * (xx - 3 * yy) - yy * (3 * xx - yy)),
        ]
    out = np.stack(cols, axis=-1)
    return out[0] if single else out
