"""Per-voxel regularized SH fit (spherical harmonics interpolation baseline).

Each voxel solves ``min_k ||B k - s||^2 + lb_lambda ||L k||^2`` with ``B`` the
basis matrix over the fitted directions and ``L`` the diagonal
Laplace-Beltrami operator ``l(l+1)``. The normal matrix is shared by all
voxels, so it is Cholesky-factored once.
"""

from dataclasses import dataclass
import logging

import numpy as np
from scipy import linalg

from nesh.errors import InvalidArgumentError, RankDeficientError
from nesh.model import _resolve_shell, default_lmax
from nesh.sh_basis import ShCoefficients, basis_matrix, degrees, num_coefficients

__all__ = ["ShiVolume", "DEFAULT_LB_LAMBDA", "shi_fit_voxel", "shi_fit_volume", "shi_sample"]

log = logging.getLogger(__name__)

DEFAULT_LB_LAMBDA = 0.006


@dataclass
class ShiVolume:
    """Voxelwise SH coefficients ``(W, H, D, R)``; ``mask`` marks fitted voxels."""

    coeffs: np.ndarray
    mask: np.ndarray
    grid: object
    lmax: int
    lb_lambda: float
    rank_warning: bool = False


class _ShiSolver:
    def __init__(self, directions, lmax, lb_lambda):
        directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        if directions.shape[0] < 1:
            raise InvalidArgumentError("need at least one direction")
        if lb_lambda < 0:
            raise InvalidArgumentError("lb_lambda must be >= 0")
        self.basis = basis_matrix(directions, lmax)
        lap = degrees(lmax) * (degrees(lmax) + 1.0)
        normal = self.basis.T @ self.basis + lb_lambda * np.diag(lap * lap)
        self.rank_deficient = directions.shape[0] < num_coefficients(lmax)
        try:
            self.factor = linalg.cho_factor(normal, lower=True, check_finite=True)
        except linalg.LinAlgError:
            raise RankDeficientError(
                f"normal matrix is singular ({directions.shape[0]} directions for "
                f"{num_coefficients(lmax)} coefficients, lb_lambda={lb_lambda})"
            ) from None
        diag = np.diag(self.factor[0])
        if diag.min() <= 1e-10 * diag.max():
            raise RankDeficientError("normal matrix is numerically singular")

    def solve(self, signals):
        """Coefficients for ``(n_voxels, n_dirs)`` signals -> ``(n_voxels, R)``."""
        rhs = self.basis.T @ np.asarray(signals, dtype=np.float64).T
        return linalg.cho_solve(self.factor, rhs).T


def shi_fit_voxel(signals, directions, lmax, lb_lambda=DEFAULT_LB_LAMBDA):
    solver = _ShiSolver(directions, lmax, lb_lambda)
    return ShCoefficients(lmax, solver.solve(np.asarray(signals)[None, :])[0])


def shi_fit_volume(dataset, shell, lmax=None, lb_lambda=DEFAULT_LB_LAMBDA):
    """Fit every masked voxel of ``shell`` (b-value, index array, or None).

    ``lmax=None`` picks 8, or 2 for <= 10 directions.
    """
    idx = _resolve_shell(dataset, shell)
    directions = dataset.gradients.bvecs[idx]
    if lmax is None:
        lmax = default_lmax(idx.size)
    solver = _ShiSolver(directions, lmax, lb_lambda)
    if solver.rank_deficient:
        log.warning("SHI fit with %d directions for %d coefficients relies on regularization",
                    idx.size, num_coefficients(lmax))
    mask = dataset.mask_or_all()
    coeffs = np.zeros(dataset.grid.dims + (num_coefficients(lmax),))
    fitted = solver.solve(dataset.data[mask][:, idx])
    bad = ~np.all(np.isfinite(fitted), axis=1)
    if bad.any():
        vox = tuple(int(c) for c in np.argwhere(mask)[np.flatnonzero(bad)[0]])
        raise RankDeficientError(f"non-finite SH coefficients at voxel {vox}")
    coeffs[mask] = fitted
    return ShiVolume(coeffs, mask.copy(), dataset.grid, lmax, lb_lambda, solver.rank_deficient)


def shi_sample(vol, directions):
    """Evaluate every voxel's series at ``directions`` -> ``dims + (n_dirs,)``."""
    basis = basis_matrix(directions, vol.lmax)
    return vol.coeffs @ basis.T
