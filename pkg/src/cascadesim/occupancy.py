"""Voxel occupancy, ego-motion compensation, motion weight maps and latents.

Grids are indexed ``(x, y, z)``.  All operations are pure: they return new
arrays and never modify their inputs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .traffic import wrap_angle

DEFAULT_VOXEL_SIZE = (0.4, 0.4, 0.4)
DEFAULT_RANGE = (-40.0, -40.0, -1.0, 40.0, 40.0, 5.4)


@dataclass(frozen=True)
class GridConfig:
    """Voxel geometry and latent resolution.

    ``spatial_range`` is ``(xmin, ymin, zmin, xmax, ymax, zmax)``.  Voxel
    counts are derived from the range and voxel size; ``latent_dims`` is
    ``(H, W, C)`` and H, W must divide the voxel counts along x and y.
    """

    voxel_size: tuple = DEFAULT_VOXEL_SIZE
    spatial_range: tuple = DEFAULT_RANGE
    latent_dims: tuple = (20, 20, 4)
    dims: tuple = field(init=False)

    def __post_init__(self):
        vs = tuple(float(v) for v in self.voxel_size)
        rg = tuple(float(r) for r in self.spatial_range)
        ld = tuple(int(d) for d in self.latent_dims)
        if len(vs) != 3 or len(rg) != 6 or len(ld) != 3:
            raise ValueError("voxel_size, spatial_range and latent_dims have 3, 6 and 3 entries")
        if min(vs) <= 0 or min(ld) <= 0:
            raise ValueError("voxel sizes and latent dims must be positive")
        extents = [rg[i + 3] - rg[i] for i in range(3)]
        if min(extents) <= 0:
            raise ValueError("spatial_range must have max > min on every axis")
        dims = tuple(int(round(e / v)) for e, v in zip(extents, vs))
        if min(dims) < 1:
            raise ValueError("spatial range smaller than one voxel")
        if dims[0] % ld[0] or dims[1] % ld[1]:
            raise ValueError(f"latent H, W {ld[:2]} must divide voxel dims {dims[:2]}")
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "spatial_range", rg)
        object.__setattr__(self, "latent_dims", ld)
        object.__setattr__(self, "dims", dims)

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.spatial_range[:3])

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.spatial_range[3:])

    @property
    def block(self) -> tuple:
        """Voxels per latent cell along x and y."""
        return self.dims[0] // self.latent_dims[0], self.dims[1] // self.latent_dims[1]

    @property
    def latent_size(self) -> int:
        return int(np.prod(self.latent_dims))

    def to_dict(self) -> dict:
        return {"voxel_size": list(self.voxel_size), "spatial_range": list(self.spatial_range),
                "latent_dims": list(self.latent_dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        return cls(tuple(d["voxel_size"]), tuple(d["spatial_range"]), tuple(d["latent_dims"]))


@dataclass(frozen=True)
class EgoPose2D:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))


@dataclass(frozen=True)
class OccupancyGrid:
    data: np.ndarray
    config: GridConfig

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != self.config.dims:
            raise ValueError(f"grid shape {data.shape} does not match config dims {self.config.dims}")
        if not np.isin(data, (0, 1)).all():
            raise ValueError("occupancy entries must be 0 or 1")
        data = data.astype(np.uint8)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class ValidityMask:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.isin(data, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        data = data.astype(np.uint8)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class TransitionMap:
    data: np.ndarray
    delta: int = 1

    def __post_init__(self):
        data = np.asarray(self.data).astype(np.uint8)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class LatentWeightMap:
    data: np.ndarray
    lam: float


@dataclass(frozen=True)
class LatentGrid:
    data: np.ndarray
    frame_time: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3:
            raise ValueError("latent grids are (H, W, C)")
        if not np.all(np.isfinite(data)):
            raise ValueError("latent grid has non-finite entries")
        object.__setattr__(self, "data", data)


# --------------------------------------------------------------------------


def voxelize(points, config: GridConfig, blind_sector: tuple | None = None):
    """Bin ego-frame points into a binary grid.

    Returns the grid and a validity mask that is 1 everywhere in range.  If
    ``blind_sector=(start, stop)`` (radians, ego frame) is given, voxel
    columns whose center azimuth falls in that sector are marked invalid and
    emptied, a crude stand-in for degraded visibility.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("points contain non-finite coordinates")
    lo, hi = config.lower, config.upper
    inside = np.all((pts >= lo) & (pts < hi), axis=1)
    idx = np.floor((pts[inside] - lo) / np.asarray(config.voxel_size)).astype(np.int64)
    idx = np.minimum(idx, np.asarray(config.dims) - 1)
    occ = np.zeros(config.dims, dtype=np.uint8)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
    mask = np.ones(config.dims, dtype=np.uint8)
    if blind_sector is not None:
        cx, cy = _column_centers(config)
        az = np.arctan2(cy, cx)
        start, stop = blind_sector
        rel = np.mod(az - start, 2 * np.pi)
        blind = rel <= np.mod(stop - start, 2 * np.pi)
        mask[blind] = 0
        occ[blind] = 0
    return OccupancyGrid(occ, config), ValidityMask(mask)


def _column_centers(config: GridConfig):
    vx, vy, _ = config.voxel_size
    xs = config.lower[0] + (np.arange(config.dims[0]) + 0.5) * vx
    ys = config.lower[1] + (np.arange(config.dims[1]) + 0.5) * vy
    return np.meshgrid(xs, ys, indexing="ij")


def warp_occupancy(grid: OccupancyGrid, mask: ValidityMask, pose_src: EgoPose2D,
                   pose_dst: EgoPose2D):
    """Resample a grid observed at ``pose_src`` into the frame of ``pose_dst``.

    Each destination column center is mapped through the relative planar
    transform and takes the nearest source voxel.  Samples falling outside
    the source grid are empty and invalid.  The z axis is untouched.
    """
    cfg = grid.config
    if mask.data.shape != cfg.dims:
        raise ValueError("grid and mask shapes differ")
    cx, cy = _column_centers(cfg)
    # destination ego frame -> world -> source ego frame
    c, s = np.cos(pose_dst.heading), np.sin(pose_dst.heading)
    wx = pose_dst.x + c * cx - s * cy
    wy = pose_dst.y + s * cx + c * cy
    dx, dy = wx - pose_src.x, wy - pose_src.y
    c, s = np.cos(pose_src.heading), np.sin(pose_src.heading)
    sx = c * dx + s * dy
    sy = -s * dx + c * dy
    ix = np.floor((sx - cfg.lower[0]) / cfg.voxel_size[0]).astype(np.int64)
    iy = np.floor((sy - cfg.lower[1]) / cfg.voxel_size[1]).astype(np.int64)
    valid = (ix >= 0) & (ix < cfg.dims[0]) & (iy >= 0) & (iy < cfg.dims[1])
    ixc = np.clip(ix, 0, cfg.dims[0] - 1)
    iyc = np.clip(iy, 0, cfg.dims[1] - 1)
    occ = grid.data[ixc, iyc, :] * valid[..., None]
    msk = mask.data[ixc, iyc, :] * valid[..., None]
    return OccupancyGrid(occ.astype(np.uint8), cfg), ValidityMask(msk.astype(np.uint8))


def transition_map(y_future: OccupancyGrid, m_future: ValidityMask, y_warped: OccupancyGrid,
                   m_warped: ValidityMask, delta: int = 1) -> TransitionMap:
    """Voxels whose occupancy changed, restricted to voxels valid in both frames."""
    shapes = {y_future.data.shape, m_future.data.shape, y_warped.data.shape, m_warped.data.shape}
    if len(shapes) != 1:
        raise ValueError("transition inputs must share a shape")
    changed = (y_future.data != y_warped.data) & (m_warped.data == 1) & (m_future.data == 1)
    return TransitionMap(changed.astype(np.uint8), delta)


def block_mean(data, config: GridConfig) -> np.ndarray:
    """Mean of a voxel array over each latent cell's (bx, by, D_o) block."""
    H, W, _ = config.latent_dims
    bx, by = config.block
    d = np.asarray(data, dtype=float)
    return d.reshape(H, bx, W, by, -1).mean(axis=(1, 3, 4))


def weight_map(c: TransitionMap, lam: float, config: GridConfig) -> LatentWeightMap:
    """Latent-resolution motion weights ``1 + lam * changed_fraction``, unit mean."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    frac = block_mean(c.data, config)
    w = 1.0 + lam * frac
    return LatentWeightMap(w / w.mean(), float(lam))


def uniform_weight_map(config: GridConfig) -> LatentWeightMap:
    return LatentWeightMap(np.ones(config.latent_dims[:2]), 0.0)


def slab_edges(depth: int, channels: int) -> np.ndarray:
    """Boundaries of the vertical slabs pooled into latent channels."""
    n = min(depth, channels)
    return (np.arange(n + 1) * depth) // n


def encode_latent(grid: OccupancyGrid, config: GridConfig | None = None,
                  frame_time: int = 0) -> LatentGrid:
    """Slab-fraction pooling encoder.

    Channel ``c`` holds the occupied fraction of the ``c``-th vertical slab
    within each latent cell's column block.  If there are more channels than
    voxel layers, each layer gets one channel and the rest stay zero.
    """
    cfg = config or grid.config
    H, W, C = cfg.latent_dims
    D = cfg.dims[2]
    bx, by = cfg.block
    cols = grid.data.reshape(H, bx, W, by, D).astype(float).mean(axis=(1, 3))
    edges = slab_edges(D, C)
    out = np.zeros((H, W, C))
    for ch in range(len(edges) - 1):
        out[..., ch] = cols[..., edges[ch]:edges[ch + 1]].mean(axis=-1)
    return LatentGrid(out, frame_time)


class SlabLatentEncoder(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`encode_latent` for stacks of grids.

    ``fit`` only records the grid geometry; ``transform`` maps an array of
    shape ``(n, H_o, W_o, D_o)`` to ``(n, H, W, C)``.
    """

    def __init__(self, config: GridConfig | None = None):
        self.config = config

    def fit(self, X, y=None):
        X = np.asarray(X)
        cfg = self.config or GridConfig()
        if X.ndim != 4 or X.shape[1:] != cfg.dims:
            raise ValueError(f"expected grids of shape (n, {cfg.dims}), got {X.shape}")
        self.config_ = cfg
        self.n_features_in_ = int(np.prod(cfg.dims))
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        X = np.asarray(X)
        if X.ndim != 4 or X.shape[1:] != self.config_.dims:
            raise ValueError(f"expected grids of shape (n, {self.config_.dims}), got {X.shape}")
        return np.stack([encode_latent(OccupancyGrid(g, self.config_)).data for g in X])


# --------------------------------------------------------------------------
# metrics


def _iou(pred, gt, region) -> float:
    inter = np.count_nonzero(pred & gt & region)
    union = np.count_nonzero((pred | gt) & region)
    return 1.0 if union == 0 else inter / union


def occupancy_metrics(pred: OccupancyGrid, gt: OccupancyGrid, motion: TransitionMap):
    """IoU over static voxels, changed voxels, and the whole grid.

    A region whose union is empty scores 1.
    """
    if pred.data.shape != gt.data.shape or motion.data.shape != gt.data.shape:
        raise ValueError("metric inputs must share a shape")
    p, g = pred.data.astype(bool), gt.data.astype(bool)
    dyn = motion.data.astype(bool)
    return _iou(p, g, ~dyn), _iou(p, g, dyn), _iou(p, g, np.ones_like(dyn))


MAX_FRECHET_FEATURES = 16


def latent_features(seq) -> np.ndarray:
    """Per-frame feature rows: spatial mean of each channel, channel groups
    averaged down to at most 16 features."""
    rows = []
    for z in seq:
        arr = z.data if isinstance(z, LatentGrid) else np.asarray(z, dtype=float)
        per_channel = arr.reshape(-1, arr.shape[-1]).mean(axis=0)
        if per_channel.size > MAX_FRECHET_FEATURES:
            per_channel = np.array([grp.mean() for grp in
                                    np.array_split(per_channel, MAX_FRECHET_FEATURES)])
        rows.append(per_channel)
    if not rows:
        raise ValueError("latent sequence is empty")
    return np.asarray(rows)


def gaussian_stats(features) -> tuple:
    """Mean and covariance; diagonal covariance when samples < dimension."""
    f = np.asarray(features, dtype=float)
    n, d = f.shape
    mu = f.mean(axis=0)
    if n < 2:
        return mu, np.zeros((d, d))
    if n < d:
        return mu, np.diag(f.var(axis=0, ddof=1))
    return mu, np.atleast_2d(np.cov(f, rowvar=False))


def _sqrt_psd(a):
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """Frechet distance between two Gaussians.

    ``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`` with the trace of the
    cross term evaluated as ``tr((S1^(1/2) S2 S1^(1/2))^(1/2))``.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(float), np.atleast_1d(mu2).astype(float)
    s1, s2 = np.atleast_2d(sigma1).astype(float), np.atleast_2d(sigma2).astype(float)
    r1 = _sqrt_psd(s1)
    cross = r1 @ s2 @ r1
    ev = np.clip(np.linalg.eigvalsh(0.5 * (cross + cross.T)), 0.0, None)
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * np.sum(np.sqrt(ev)))
    return max(d, 0.0)


def latent_frechet(seq_a, seq_b) -> float:
    """Frechet distance between Gaussian fits of two latent sequences."""
    return frechet_distance(*gaussian_stats(latent_features(seq_a)),
                            *gaussian_stats(latent_features(seq_b)))


# --------------------------------------------------------------------------
# binary files
#
# header (16 bytes, little endian):
#   magic   4s   b"OCCG" for grids, b"OCCM" for masks
#   version u16  currently 1
#   D_o     u16
#   H_o     u32
#   W_o     u32
# payload: voxels in C order of the (x, y, z) array, i.e. x-major then y then
# z, packed 8 per byte with the first voxel in the least significant bit.

_HEADER = struct.Struct("<4sHHII")
FORMAT_VERSION = 1


def _pack(magic: bytes, data: np.ndarray) -> bytes:
    H, W, D = data.shape
    header = _HEADER.pack(magic, FORMAT_VERSION, D, H, W)
    return header + np.packbits(data.reshape(-1), bitorder="little").tobytes()


def _unpack(magic: bytes, blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise ValueError("truncated occupancy file")
    got, version, D, H, W = _HEADER.unpack_from(blob)
    if got != magic:
        raise ValueError(f"bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported occupancy format version {version}")
    n = H * W * D
    payload = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size)
    if payload.size != (n + 7) // 8:
        raise ValueError("payload size does not match header dims")
    return np.unpackbits(payload, count=n, bitorder="little").reshape(H, W, D)


def grid_to_bytes(grid: OccupancyGrid) -> bytes:
    return _pack(b"OCCG", grid.data)


def grid_from_bytes(blob: bytes, config: GridConfig) -> OccupancyGrid:
    return OccupancyGrid(_unpack(b"OCCG", blob), config)


def mask_to_bytes(mask: ValidityMask) -> bytes:
    return _pack(b"OCCM", mask.data)


def mask_from_bytes(blob: bytes) -> ValidityMask:
    return ValidityMask(_unpack(b"OCCM", blob))


def save_grid(path, grid: OccupancyGrid):
    Path(path).write_bytes(grid_to_bytes(grid))


def load_grid(path, config: GridConfig) -> OccupancyGrid:
    return grid_from_bytes(Path(path).read_bytes(), config)


def save_mask(path, mask: ValidityMask):
    Path(path).write_bytes(mask_to_bytes(mask))


def load_mask(path) -> ValidityMask:
    return mask_from_bytes(Path(path).read_bytes())
