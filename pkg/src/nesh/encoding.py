"""Voxel grids, coordinate normalization and Fourier positional encoding."""

from dataclasses import dataclass

import numpy as np

from nesh.errors import InvalidArgumentError

__all__ = ["VoxelGrid", "EncodingConfig", "scale_coords", "positional_encode", "band_frequencies"]


@dataclass(frozen=True)
class VoxelGrid:
    """Regular voxel grid.

    Parameters
    ----------
    dims : tuple of int
        Voxel counts (W, H, D).
    voxel_size : tuple of float
        Voxel edge lengths in mm.
    origin : tuple of float
        World position (mm) of the centre of voxel (0, 0, 0).
    """

    dims: tuple
    voxel_size: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        vs = tuple(float(s) for s in self.voxel_size)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(vs) != 3 or len(origin) != 3:
            raise InvalidArgumentError("grid needs three dims, voxel sizes and origin coordinates")
        if min(dims) < 1:
            raise InvalidArgumentError(f"grid dims must be >= 1, got {dims}")
        if min(vs) <= 0:
            raise InvalidArgumentError(f"voxel sizes must be positive, got {vs}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "origin", origin)

    @property
    def n_voxels(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    def index_to_world(self, index):
        index = np.asarray(index, dtype=np.float64)
        return np.asarray(self.origin) + index * np.asarray(self.voxel_size)

    def centers(self):
        """World coordinates of all voxel centres, C order, shape ``(n_voxels, 3)``."""
        idx = np.indices(self.dims, dtype=np.float64).reshape(3, -1).T
        return self.index_to_world(idx)

    def affine(self):
        aff = np.diag(list(self.voxel_size) + [1.0])
        aff[:3, 3] = self.origin
        return aff

    def upsampled(self, factor):
        """Grid with ``factor`` times more voxels per axis over the same field of view."""
        f = int(factor)
        if f < 1:
            raise InvalidArgumentError(f"upsampling factor must be >= 1, got {factor}")
        vs = np.asarray(self.voxel_size)
        origin = np.asarray(self.origin) - 0.5 * vs + 0.5 * vs / f
        return VoxelGrid(tuple(d * f for d in self.dims), tuple(vs / f), tuple(origin))

    def downsampled(self, factor):
        """Grid whose voxels are ``factor``-cubed blocks of this grid's voxels."""
        f = int(factor)
        if f < 1:
            raise InvalidArgumentError(f"downsampling factor must be >= 1, got {factor}")
        vs = np.asarray(self.voxel_size)
        origin = np.asarray(self.origin) + 0.5 * (f - 1) * vs
        return VoxelGrid(tuple(d // f for d in self.dims), tuple(vs * f), tuple(origin))


@dataclass(frozen=True)
class EncodingConfig:
    lpos: int = 12
    sigma: float = 4.0
    include_raw: bool = True

    def __post_init__(self):
        if self.lpos < 1:
            raise InvalidArgumentError(f"lpos must be >= 1, got {self.lpos}")
        if not self.sigma > 0:
            raise InvalidArgumentError(f"sigma must be positive, got {self.sigma}")
        if not self.include_raw:
            raise InvalidArgumentError("raw coordinates are always included in the encoding")

    @property
    def width(self):
        return 3 + 6 * self.lpos


def scale_coords(world_points, grid):
    """Map world coordinates (mm) so voxel centres span [-1, 1] per axis.

    Accepts a single 3-vector or an ``(n, 3)`` array. Axes with a single
    voxel map to 0. Points outside the grid map outside [-1, 1].
    """
    p = np.asarray(world_points, dtype=np.float64)
    idx = (p - np.asarray(grid.origin)) / np.asarray(grid.voxel_size)
    span = np.asarray(grid.dims, dtype=np.float64) - 1.0
    out = np.zeros_like(idx)
    live = span > 0
    out[..., live] = 2.0 * idx[..., live] / span[live] - 1.0
    return out


def band_frequencies(cfg):
    """Log-spaced frequencies from 1 to ``sigma``."""
    if cfg.lpos == 1:
        return np.ones(1)
    return cfg.sigma ** (np.arange(cfg.lpos) / (cfg.lpos - 1))


def positional_encode(points, cfg):
    """Fourier-encode normalized coordinates.

    Output layout per point: the three raw coordinates, then for each axis and
    each band ``j`` the pair ``sin(2 pi f_j p), cos(2 pi f_j p)``.
    Accepts a single 3-vector or an ``(n, 3)`` array.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(-1, 3)
    freqs = band_frequencies(cfg)
    # (n, axis, band)
    arg = 2.0 * np.pi * p[:, :, None] * freqs[None, None, :]
    pairs = np.stack([np.sin(arg), np.cos(arg)], axis=-1)
    out = np.concatenate([p, pairs.reshape(p.shape[0], -1)], axis=1)
    return out[0] if single else out
