"""Numpy implementations of the numerical kernels.

These are the reference fallbacks used when the compiled ``_ckernels``
extension is not available. Both backends expose the same three functions
with identical signatures.
"""

import numpy as np

_INV_SQRT_4PI = 0.5 / np.sqrt(np.pi)
_SQRT2 = np.sqrt(2.0)


def sh_basis(vectors, lmax):
    """Real even-degree SH basis for an ``(n, 3)`` array of directions.

    Vectors are normalized internally. The Legendre part is carried as
    ``P_l^m(z) / rho^m`` and the azimuthal part as ``Re/Im (x + iy)^m`` so no
    angle is ever formed; negating a vector flips signs exactly, which makes
    the even-degree basis bit-identical for antipodal pairs.
    """
    v = np.ascontiguousarray(vectors, dtype=np.float64).reshape(-1, 3)
    norm = np.sqrt(v[:, 0] * v[:, 0] + v[:, 1] * v[:, 1] + v[:, 2] * v[:, 2])
    x = v[:, 0] / norm
    y = v[:, 1] / norm
    z = v[:, 2] / norm
    n = v.shape[0]
    out = np.empty((n, (lmax + 1) * (lmax + 2) // 2))

    cm = np.ones(n)
    sm = np.zeros(n)
    qmm = np.full(n, _INV_SQRT_4PI)
    for m in range(lmax + 1):
        if m > 0:
            cm, sm = cm * x - sm * y, sm * x + cm * y
            qmm = -np.sqrt((2.0 * m + 1.0) / (2.0 * m)) * qmm
        q_prev2 = qmm
        q_prev1 = None
        a_prev = 0.0
        for l in range(m, lmax + 1):
            if l == m:
                q = qmm
            elif l == m + 1:
                a_prev = np.sqrt(2.0 * m + 3.0)
                q = a_prev * z * qmm
                q_prev1 = q
            else:
                a = np.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
                q = a * (z * q_prev1 - q_prev2 / a_prev)
                q_prev2, q_prev1, a_prev = q_prev1, q, a
            if l % 2:
                continue
            centre = l * (l + 1) // 2
            if m == 0:
                out[:, centre] = q
            else:
                out[:, centre + m] = _SQRT2 * q * cm
                out[:, centre - m] = _SQRT2 * q * sm
    return out


def catmull_rom_lines(lines, positions):
    """Resample each row of ``lines`` at fractional ``positions``.

    Rows are treated as samples at integer positions 0..n-1. Samples beyond
    either end are linearly extrapolated from the two edge samples, so
    degree-1 polynomials are reproduced exactly everywhere.
    """
    lines = np.ascontiguousarray(lines, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    n_old = lines.shape[1]
    if n_old == 1:
        return np.repeat(lines, positions.size, axis=1)
    weights = catmull_rom_matrix(n_old, positions)
    return lines @ weights.T


def catmull_rom_matrix(n_old, positions):
    """Dense ``(n_new, n_old)`` Catmull-Rom interpolation matrix."""
    positions = np.asarray(positions, dtype=np.float64)
    w = np.zeros((positions.size, n_old))
    for j, t in enumerate(positions):
        i = int(np.floor(t))
        u = t - i
        u2 = u * u
        u3 = u2 * u
        taps = (
            0.5 * (-u3 + 2.0 * u2 - u),
            0.5 * (3.0 * u3 - 5.0 * u2 + 2.0),
            0.5 * (-3.0 * u3 + 4.0 * u2 + u),
            0.5 * (u3 - u2),
        )
        for k, wk in zip(range(i - 1, i + 3), taps):
            _scatter_tap(w[j], n_old, k, wk)
    return w


def _scatter_tap(row, n, k, wk):
    # ghost sample k is an affine combination of the two nearest edge samples
    if k < 0:
        row[0] += wk * (1.0 - k)
        row[1] += wk * k
    elif k > n - 1:
        e = k - (n - 1)
        row[n - 1] += wk * (1.0 + e)
        row[n - 2] -= wk * e
    else:
        row[k] += wk


def sym_eig3(tensors):
    """Eigen-decompose ``(n, 6)`` packed symmetric tensors.

    Packing is (xx, xy, xz, yy, yz, zz). Returns eigenvalues ``(n, 3)`` in
    descending order and eigenvectors ``(n, 3, 3)`` stored as columns.
    """
    t = np.asarray(tensors, dtype=np.float64).reshape(-1, 6)
    mats = np.empty((t.shape[0], 3, 3))
    mats[:, 0, 0] = t[:, 0]
    mats[:, 0, 1] = mats[:, 1, 0] = t[:, 1]
    mats[:, 0, 2] = mats[:, 2, 0] = t[:, 2]
    mats[:, 1, 1] = t[:, 3]
    mats[:, 1, 2] = mats[:, 2, 1] = t[:, 4]
    mats[:, 2, 2] = t[:, 5]
    evals, evecs = np.linalg.eigh(mats)
    return evals[:, ::-1].copy(), evecs[:, :, ::-1].copy()
