"""Real, even-degree spherical harmonics.

Coefficients for degrees ``l = 0, 2, ..., lmax`` are stored in a single
vector ordered by ``l(l+1)/2 + m``. The basis is orthonormal on the unit
sphere and includes the Condon-Shortley phase; negative orders carry the
sine part and positive orders the cosine part.
"""

from dataclasses import dataclass
import math

import numpy as np

from nesh import kernels
from nesh.errors import InvalidArgumentError

__all__ = [
    "ShIndex",
    "ShCoefficients",
    "SphereDirection",
    "num_coefficients",
    "lmax_for_count",
    "linear_index",
    "index_to_lm",
    "degrees",
    "dir_to_angles",
    "angles_to_dir",
    "eval_basis",
    "basis_matrix",
    "eval_series",
]

_UNIT_TOL = 1e-6


def _check_lmax(lmax):
    if int(lmax) != lmax or lmax < 0 or lmax % 2:
        raise InvalidArgumentError(f"lmax must be a non-negative even integer, got {lmax}")
    return int(lmax)


def num_coefficients(lmax):
    """Number of even-degree coefficients up to ``lmax``."""
    lmax = _check_lmax(lmax)
    return (lmax + 1) * (lmax + 2) // 2


def lmax_for_count(n_coef):
    """Inverse of :func:`num_coefficients`."""
    lmax = int(round((math.sqrt(1 + 8 * n_coef) - 3) / 2))
    if lmax < 0 or lmax % 2 or num_coefficients(lmax) != n_coef:
        raise InvalidArgumentError(f"{n_coef} is not an even-degree coefficient count")
    return lmax


def linear_index(l, m):
    if l < 0 or l % 2:
        raise InvalidArgumentError(f"degree must be even and non-negative, got {l}")
    if abs(m) > l:
        raise InvalidArgumentError(f"order {m} out of range for degree {l}")
    return l * (l + 1) // 2 + m


def index_to_lm(index):
    """Inverse of :func:`linear_index`."""
    if index < 0:
        raise InvalidArgumentError(f"negative index {index}")
    l = 0
    while (l + 2) * (l + 3) // 2 - (l + 2) <= index:
        l += 2
    return l, index - l * (l + 1) // 2


def degrees(lmax):
    """Degree of every coefficient slot, in storage order."""
    lmax = _check_lmax(lmax)
    return np.concatenate([np.full(2 * l + 1, l) for l in range(0, lmax + 1, 2)])


@dataclass(frozen=True)
class ShIndex:
    l: int
    m: int

    def __post_init__(self):
        linear_index(self.l, self.m)

    @property
    def index(self):
        return linear_index(self.l, self.m)


@dataclass(frozen=True)
class ShCoefficients:
    lmax: int
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (num_coefficients(self.lmax),):
            raise InvalidArgumentError(
                f"expected {num_coefficients(self.lmax)} coefficients for lmax={self.lmax}, "
                f"got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError("coefficients must be finite")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class SphereDirection:
    """Azimuth ``theta`` in [0, 2pi) and inclination ``phi`` in [0, pi]."""

    theta: float
    phi: float

    def to_vector(self):
        return angles_to_dir(self.theta, self.phi)


def dir_to_angles(v):
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > _UNIT_TOL:
        raise InvalidArgumentError(f"direction must be a unit vector, got norm {norm}")
    theta = math.atan2(v[1], v[0])
    if theta < 0.0:
        theta += 2.0 * math.pi
    if theta >= 2.0 * math.pi:
        theta = 0.0
    phi = math.acos(max(-1.0, min(1.0, v[2])))
    return SphereDirection(theta, phi)


def angles_to_dir(theta, phi):
    s = math.sin(phi)
    return np.array([s * math.cos(theta), s * math.sin(theta), math.cos(phi)])


def basis_matrix(directions, lmax):
    """Basis values for many directions: ``(n, 3)`` vectors -> ``(n, R)``."""
    lmax = _check_lmax(lmax)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    if np.any(np.linalg.norm(directions, axis=1) == 0.0):
        raise InvalidArgumentError("zero-length direction")
    return kernels.sh_basis(directions, lmax)


def eval_basis(direction, lmax):
    """Basis vector for one direction (a :class:`SphereDirection` or 3-vector)."""
    if isinstance(direction, SphereDirection):
        direction = direction.to_vector()
    return basis_matrix(direction, lmax)[0]


def eval_series(coeffs, direction):
    """Evaluate the SH series ``sum_i k_i Y_i(direction)``."""
    return float(coeffs.values @ eval_basis(direction, coeffs.lmax))
