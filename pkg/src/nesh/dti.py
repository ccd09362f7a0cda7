"""Log-linear diffusion tensor fitting and the MD / FA / colour-FA maps."""

from dataclasses import dataclass

import numpy as np

from nesh import kernels
from nesh.data_io import select_shell
from nesh.errors import InvalidInputError, TensorFitFailedError

__all__ = [
    "DiffusionTensor",
    "ScalarMap",
    "DtiMaps",
    "design_matrix",
    "fit_tensor_voxel",
    "fit_tensors",
    "eigendecompose",
    "md",
    "fa",
    "color_fa",
    "md_from_eigenvalues",
    "fa_from_eigenvalues",
    "dti_maps",
]

SIGNAL_FLOOR = 1e-6


@dataclass(frozen=True)
class DiffusionTensor:
    """Symmetric 3x3 tensor from its six unique elements (mm^2/s)."""

    dxx: float
    dxy: float
    dxz: float
    dyy: float
    dyz: float
    dzz: float

    @classmethod
    def from_matrix(cls, mat):
        mat = np.asarray(mat, dtype=np.float64)
        mat = 0.5 * (mat + mat.T)
        return cls(mat[0, 0], mat[0, 1], mat[0, 2], mat[1, 1], mat[1, 2], mat[2, 2])

    @classmethod
    def from_eigen(cls, eigenvalues, principal_axis=(1.0, 0.0, 0.0), secondary_axis=None):
        """Tensor with given eigenvalues, the first aligned with ``principal_axis``."""
        e1 = np.asarray(principal_axis, dtype=np.float64)
        e1 = e1 / np.linalg.norm(e1)
        if secondary_axis is None:
            helper = np.eye(3)[int(np.argmin(np.abs(e1)))]
            e2 = np.cross(e1, helper)
        else:
            e2 = np.asarray(secondary_axis, dtype=np.float64)
            e2 = e2 - (e2 @ e1) * e1
        e2 /= np.linalg.norm(e2)
        e3 = np.cross(e1, e2)
        basis = np.stack([e1, e2, e3], axis=1)
        return cls.from_matrix(basis @ np.diag(eigenvalues) @ basis.T)

    @property
    def packed(self):
        return np.array([self.dxx, self.dxy, self.dxz, self.dyy, self.dyz, self.dzz])

    @property
    def matrix(self):
        return np.array([[self.dxx, self.dxy, self.dxz],
                         [self.dxy, self.dyy, self.dyz],
                         [self.dxz, self.dyz, self.dzz]])


@dataclass
class ScalarMap:
    """Voxelwise map on a grid; ``quantity`` is "MD", "FA" or "RGB"."""

    values: np.ndarray
    grid: object
    quantity: str


@dataclass
class DtiMaps:
    md: ScalarMap
    fa: ScalarMap
    color_fa: ScalarMap
    tensors: np.ndarray


def design_matrix(directions):
    g = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
    return np.stack([gx * gx, 2 * gx * gy, 2 * gx * gz, gy * gy, 2 * gy * gz, gz * gz], axis=1)


def _log_targets(signals, b0, bvalues):
    b0 = np.asarray(b0, dtype=np.float64)[..., None]
    s = np.maximum(np.asarray(signals, dtype=np.float64), SIGNAL_FLOOR * b0)
    return -np.log(s / b0) / bvalues


def fit_tensors(signals, b0, directions, bvalues):
    """Fit tensors for many voxels at once.

    Parameters
    ----------
    signals : ndarray, shape (n_voxels, n_dirs)
    b0 : ndarray, shape (n_voxels,)
        Non-diffusion-weighted signal; must be positive.
    directions : ndarray, shape (n_dirs, 3)
    bvalues : float or ndarray, shape (n_dirs,)

    Returns
    -------
    ndarray, shape (n_voxels, 6)
        Packed tensors (xx, xy, xz, yy, yz, zz).
    """
    design = design_matrix(directions)
    if design.shape[0] < 6 or np.linalg.matrix_rank(design) < 6:
        raise TensorFitFailedError(
            f"tensor fit needs 6 non-degenerate directions, got {design.shape[0]} (rank "
            f"{np.linalg.matrix_rank(design) if design.size else 0})"
        )
    bvalues = np.broadcast_to(np.asarray(bvalues, dtype=np.float64), (design.shape[0],))
    y = _log_targets(np.atleast_2d(signals), np.atleast_1d(b0), bvalues)
    coef, *_ = np.linalg.lstsq(design, y.T, rcond=None)
    return coef.T


def fit_tensor_voxel(signals, b0_signal, directions, bvalue):
    if not b0_signal > 0:
        raise TensorFitFailedError(f"b0 signal must be positive, got {b0_signal}")
    return DiffusionTensor(*fit_tensors(np.asarray(signals)[None, :], [b0_signal], directions, bvalue)[0])


def eigendecompose(tensor):
    """Eigenvalues (descending) and unit eigenvectors (columns) of one tensor."""
    evals, evecs = kernels.sym_eig3(tensor.packed[None, :])
    return evals[0], evecs[0]


def md_from_eigenvalues(evals):
    return np.mean(evals, axis=-1)


def fa_from_eigenvalues(evals):
    evals = np.asarray(evals, dtype=np.float64)
    mean = evals.mean(axis=-1, keepdims=True)
    num = np.sqrt(np.sum((evals - mean) ** 2, axis=-1))
    den = np.sqrt(np.sum(evals * evals, axis=-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, np.sqrt(1.5) * num / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(out, 0.0, 1.0)


def md(tensor):
    return float((tensor.dxx + tensor.dyy + tensor.dzz) / 3.0)


def fa(tensor):
    return float(fa_from_eigenvalues(eigendecompose(tensor)[0]))


def color_fa(tensor):
    evals, evecs = eigendecompose(tensor)
    return np.abs(evecs[:, 0]) * fa_from_eigenvalues(evals)


def dti_maps(dataset, shell, tolerance=100.0):
    """MD, FA and colour-FA maps for one shell, zero outside the mask.

    Parameters
    ----------
    dataset : DwiDataset
        Must contain at least one b=0 volume.
    shell : float
        Target b-value in s/mm^2.
    """
    b0_idx = dataset.b0_indices()
    if b0_idx.size == 0:
        raise InvalidInputError("tensor fitting needs at least one b=0 volume")
    idx = select_shell(dataset, shell, tolerance)
    if idx.size < 6:
        raise InvalidInputError(f"tensor fitting needs >= 6 directions, shell has {idx.size}")
    mask = dataset.mask_or_all()
    if not mask.any():
        raise InvalidInputError("mask is empty")
    vox = np.argwhere(mask)
    b0 = dataset.data[mask][:, b0_idx].mean(axis=1)
    bad = b0 <= 0
    if bad.any():
        first = tuple(int(c) for c in vox[np.flatnonzero(bad)[0]])
        raise TensorFitFailedError(f"non-positive b=0 signal at voxel {first}")
    signals = dataset.data[mask][:, idx]
    tensors = fit_tensors(signals, b0, dataset.gradients.bvecs[idx], dataset.gradients.bvals[idx])

    evals, evecs = kernels.sym_eig3(tensors)
    dims = dataset.grid.dims
    md_map = np.zeros(dims)
    fa_map = np.zeros(dims)
    rgb = np.zeros(dims + (3,))
    packed = np.zeros(dims + (6,))
    fa_vals = fa_from_eigenvalues(evals)
    md_map[mask] = md_from_eigenvalues(evals)
    fa_map[mask] = fa_vals
    rgb[mask] = np.abs(evecs[:, :, 0]) * fa_vals[:, None]
    packed[mask] = tensors
    return DtiMaps(
        ScalarMap(md_map, dataset.grid, "MD"),
        ScalarMap(fa_map, dataset.grid, "FA"),
        ScalarMap(rgb, dataset.grid, "RGB"),
        packed,
    )
