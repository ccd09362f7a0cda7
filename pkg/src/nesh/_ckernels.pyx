# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the numerical kernels in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor, fabs

cnp.import_array()

cdef double _INV_SQRT_4PI = 0.28209479177387814
cdef double _SQRT2 = 1.4142135623730951


def sh_basis(vectors, int lmax):
    cdef double[:, ::1] v = np.ascontiguousarray(vectors, dtype=np.float64).reshape(-1, 3)
    cdef Py_ssize_t n = v.shape[0]
    cdef int n_coef = (lmax + 1) * (lmax + 2) // 2
    out_arr = np.empty((n, n_coef))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i
    cdef int l, m, centre
    cdef double x, y, z, norm, cm, sm, cm_new, qmm, q, q1, q2, a, a_prev

    for i in range(n):
        x = v[i, 0]
        y = v[i, 1]
        z = v[i, 2]
        norm = sqrt(x * x + y * y + z * z)
        x = x / norm
        y = y / norm
        z = z / norm
        cm = 1.0
        sm = 0.0
        qmm = _INV_SQRT_4PI
        for m in range(lmax + 1):
            if m > 0:
                cm_new = cm * x - sm * y
                sm = sm * x + cm * y
                cm = cm_new
                qmm = -sqrt((2.0 * m + 1.0) / (2.0 * m)) * qmm
            q2 = qmm
            q1 = 0.0
            a_prev = 0.0
            for l in range(m, lmax + 1):
                if l == m:
                    q = qmm
                elif l == m + 1:
                    a_prev = sqrt(2.0 * m + 3.0)
                    q = a_prev * z * qmm
                    q1 = q
                else:
                    a = sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
                    q = a * (z * q1 - q2 / a_prev)
                    q2 = q1
                    q1 = q
                    a_prev = a
                if l % 2:
                    continue
                centre = l * (l + 1) // 2
                if m == 0:
                    out[i, centre] = q
                else:
                    out[i, centre + m] = _SQRT2 * q * cm
                    out[i, centre - m] = _SQRT2 * q * sm
    return out_arr


cdef inline double _ghost(double[:, ::1] lines, Py_ssize_t row, Py_ssize_t n, Py_ssize_t k) noexcept nogil:
    if k < 0:
        return lines[row, 0] + k * (lines[row, 1] - lines[row, 0])
    if k > n - 1:
        return lines[row, n - 1] + (k - n + 1) * (lines[row, n - 1] - lines[row, n - 2])
    return lines[row, k]


def catmull_rom_lines(lines, positions):
    cdef double[:, ::1] src = np.ascontiguousarray(lines, dtype=np.float64)
    cdef double[::1] pos = np.ascontiguousarray(positions, dtype=np.float64).ravel()
    cdef Py_ssize_t n_rows = src.shape[0]
    cdef Py_ssize_t n_old = src.shape[1]
    cdef Py_ssize_t n_new = pos.shape[0]
    if n_old == 1:
        return np.repeat(np.asarray(src), n_new, axis=1)
    out_arr = np.empty((n_rows, n_new))
    cdef double[:, ::1] out = out_arr
    # per-position taps are shared by every row, so compute them once
    taps_arr = np.empty((n_new, 4))
    base_arr = np.empty(n_new, dtype=np.intp)
    cdef double[:, ::1] taps = taps_arr
    cdef Py_ssize_t[::1] base = base_arr
    cdef Py_ssize_t r, j, i
    cdef double t, u, u2, u3
    for j in range(n_new):
        t = pos[j]
        i = <Py_ssize_t>floor(t)
        u = t - i
        u2 = u * u
        u3 = u2 * u
        base[j] = i
        taps[j, 0] = 0.5 * (-u3 + 2.0 * u2 - u)
        taps[j, 1] = 0.5 * (3.0 * u3 - 5.0 * u2 + 2.0)
        taps[j, 2] = 0.5 * (-3.0 * u3 + 4.0 * u2 + u)
        taps[j, 3] = 0.5 * (u3 - u2)
    with nogil:
        for r in range(n_rows):
            for j in range(n_new):
                i = base[j]
                if i >= 1 and i + 2 <= n_old - 1:
                    out[r, j] = (taps[j, 0] * src[r, i - 1] + taps[j, 1] * src[r, i]
                                 + taps[j, 2] * src[r, i + 1] + taps[j, 3] * src[r, i + 2])
                else:
                    out[r, j] = (taps[j, 0] * _ghost(src, r, n_old, i - 1)
                                 + taps[j, 1] * _ghost(src, r, n_old, i)
                                 + taps[j, 2] * _ghost(src, r, n_old, i + 1)
                                 + taps[j, 3] * _ghost(src, r, n_old, i + 2))
    return out_arr


cdef void _jacobi3(double a[3][3], double w[3], double vec[3][3]) noexcept nogil:
    cdef int p, q, r, k, sweep
    cdef double off, theta, t, c, s, tau, apq, app, aqq, arp, arq, vrp, vrq
    for p in range(3):
        for q in range(3):
            vec[p][q] = 1.0 if p == q else 0.0
    for sweep in range(60):
        off = fabs(a[0][1]) + fabs(a[0][2]) + fabs(a[1][2])
        if off == 0.0:
            break
        for p in range(2):
            for q in range(p + 1, 3):
                apq = a[p][q]
                if apq == 0.0:
                    continue
                app = a[p][p]
                aqq = a[q][q]
                theta = (aqq - app) / (2.0 * apq)
                t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                tau = s / (1.0 + c)
                a[p][p] = app - t * apq
                a[q][q] = aqq + t * apq
                a[p][q] = 0.0
                a[q][p] = 0.0
                for r in range(3):
                    if r != p and r != q:
                        arp = a[r][p]
                        arq = a[r][q]
                        a[r][p] = arp - s * (arq + tau * arp)
                        a[p][r] = a[r][p]
                        a[r][q] = arq + s * (arp - tau * arq)
                        a[q][r] = a[r][q]
                for r in range(3):
                    vrp = vec[r][p]
                    vrq = vec[r][q]
                    vec[r][p] = vrp - s * (vrq + tau * vrp)
                    vec[r][q] = vrq + s * (vrp - tau * vrq)
    for k in range(3):
        w[k] = a[k][k]


def sym_eig3(tensors):
    cdef double[:, ::1] t = np.ascontiguousarray(tensors, dtype=np.float64).reshape(-1, 6)
    cdef Py_ssize_t n = t.shape[0]
    evals_arr = np.empty((n, 3))
    evecs_arr = np.empty((n, 3, 3))
    cdef double[:, ::1] evals = evals_arr
    cdef double[:, :, ::1] evecs = evecs_arr
    cdef double a[3][3]
    cdef double w[3]
    cdef double vec[3][3]
    cdef int order[3]
    cdef int tmp, k, r
    cdef Py_ssize_t i
    for i in range(n):
        a[0][0] = t[i, 0]
        a[0][1] = t[i, 1]
        a[1][0] = t[i, 1]
        a[0][2] = t[i, 2]
        a[2][0] = t[i, 2]
        a[1][1] = t[i, 3]
        a[1][2] = t[i, 4]
        a[2][1] = t[i, 4]
        a[2][2] = t[i, 5]
        _jacobi3(a, w, vec)
        order[0] = 0
        order[1] = 1
        order[2] = 2
        # three-element sort, descending
        if w[order[0]] < w[order[1]]:
            tmp = order[0]; order[0] = order[1]; order[1] = tmp
        if w[order[1]] < w[order[2]]:
            tmp = order[1]; order[1] = order[2]; order[2] = tmp
        if w[order[0]] < w[order[1]]:
            tmp = order[0]; order[0] = order[1]; order[1] = tmp
        for k in range(3):
            evals[i, k] = w[order[k]]
            for r in range(3):
                evecs[i, r, k] = vec[r][order[k]]
    return evals_arr, evecs_arr
