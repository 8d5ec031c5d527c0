# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled away-step Frank-Wolfe kernel for least squares over the simplex.

Mirrors :func:`mosynth._afw_py.afw_solve` step for step. Keep the two in
sync; results agree up to floating-point summation order.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef enum:
    REFRESH = 64


cdef void _refresh(const double[:, ::1] A, const double[::1] b, double[::1] gamma,
                   double[::1] r, double[::1] h, double[::1] Ggam,
                   const double[::1] c) noexcept nogil:
    cdef Py_ssize_t m = A.shape[0], n = A.shape[1], i, j
    cdef double acc, s = 0.0
    for j in range(n):
        s += gamma[j]
    for j in range(n):
        gamma[j] /= s
    for i in range(m):
        acc = b[i]
        for j in range(n):
            acc -= A[i, j] * gamma[j]
        r[i] = acc
    for j in range(n):
        acc = 0.0
        for i in range(m):
            acc += A[i, j] * r[i]
        h[j] = acc
        Ggam[j] = c[j] - acc


def afw_solve(const double[:, ::1] A, const double[::1] b, double[::1] gamma,
              const double[:, ::1] G, const double[::1] c,
              double tol, long max_iter, callback=None):
    """Run away-step Frank-Wolfe in place on ``gamma``.

    Returns ``(iterations, gap, objective)`` where ``objective`` is the
    squared residual norm at the final iterate.
    """
    cdef Py_ssize_t m = A.shape[0], n = A.shape[1], i, j
    cdef Py_ssize_t s_idx, a_idx
    cdef long it = 0
    cdef double gap = 0.0, away_gap, hg, hs, ha, step, max_step, num, den, f
    cdef double coef
    cdef bint toward
    cdef double[::1] r = np.empty(m)
    cdef double[::1] h = np.empty(n)
    cdef double[::1] Ggam = np.empty(n)
    cdef double[::1] Ad = np.empty(m)
    cdef double[::1] Gd = np.empty(n)

    _refresh(A, b, gamma, r, h, Ggam, c)
    while True:
        if it % REFRESH == 0 and it > 0:
            _refresh(A, b, gamma, r, h, Ggam, c)
        s_idx = 0
        hs = h[0]
        a_idx = -1
        ha = 0.0
        hg = 0.0
        for j in range(n):
            hg += h[j] * gamma[j]
            if h[j] > hs:
                hs = h[j]
                s_idx = j
            if gamma[j] > 0.0 and (a_idx < 0 or h[j] < ha):
                ha = h[j]
                a_idx = j
        gap = 2.0 * (hs - hg)
        if gap < 0.0:
            gap = 0.0
        if callback is not None:
            f = 0.0
            for i in range(m):
                f += r[i] * r[i]
            callback(it, f, gap)
        if gap <= tol or it >= max_iter:
            break
        away_gap = 2.0 * (hg - ha)
        toward = gap >= away_gap
        if toward:
            max_step = 1.0
            for i in range(m):
                Ad[i] = A[i, s_idx] - (b[i] - r[i])
            for j in range(n):
                Gd[j] = G[j, s_idx] - Ggam[j]
            num = hs - hg
        else:
            if gamma[a_idx] >= 1.0:
                break
            max_step = gamma[a_idx] / (1.0 - gamma[a_idx])
            for i in range(m):
                Ad[i] = (b[i] - r[i]) - A[i, a_idx]
            for j in range(n):
                Gd[j] = Ggam[j] - G[j, a_idx]
            num = hg - ha
        den = 0.0
        for i in range(m):
            den += Ad[i] * Ad[i]
        if den <= 0.0:
            break
        step = num / den
        if step > max_step:
            step = max_step
        if step <= 0.0:
            break
        if toward:
            coef = 1.0 - step
            for j in range(n):
                gamma[j] *= coef
            gamma[s_idx] += step
            if step == 1.0:
                for j in range(n):
                    gamma[j] = 0.0
                gamma[s_idx] = 1.0
        else:
            coef = 1.0 + step
            for j in range(n):
                gamma[j] *= coef
            gamma[a_idx] -= step
            if step == max_step:
                gamma[a_idx] = 0.0
        for i in range(m):
            r[i] -= step * Ad[i]
        for j in range(n):
            h[j] -= step * Gd[j]
            Ggam[j] += step * Gd[j]
        it += 1

    _refresh(A, b, gamma, r, h, Ggam, c)
    f = 0.0
    for i in range(m):
        f += r[i] * r[i]
    return it, gap, f
