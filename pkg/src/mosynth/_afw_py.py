"""Pure-numpy away-step Frank-Wolfe kernel.

Used when the compiled ``_afw`` extension is unavailable or when
``MOSYNTH_PURE_PYTHON=1`` is set. Same contract and iterate sequence as the
compiled version.
"""

from __future__ import annotations

import numpy as np

REFRESH = 64


def _refresh(A, b, gamma, c):
    gamma /= gamma.sum()
    r = b - A @ gamma
    h = A.T @ r
    return r, h, c - h


def afw_solve(A, b, gamma, G, c, tol, max_iter, callback=None):
    r, h, Ggam = _refresh(A, b, gamma, c)
    it = 0
    gap = 0.0
    while True:
        if it % REFRESH == 0 and it > 0:
            r, h, Ggam = _refresh(A, b, gamma, c)
        s_idx = int(np.argmax(h))
        hs = h[s_idx]
        hg = float(h @ gamma)
        support = np.flatnonzero(gamma > 0.0)
        a_idx = int(support[np.argmin(h[support])])
        ha = h[a_idx]
        gap = max(2.0 * (hs - hg), 0.0)
        if callback is not None:
            callback(it, float(r @ r), gap)
        if gap <= tol or it >= max_iter:
            break
        toward = gap >= 2.0 * (hg - ha)
        if toward:
            max_step = 1.0
            Ad = A[:, s_idx] - (b - r)
            Gd = G[:, s_idx] - Ggam
            num = hs - hg
        else:
            if gamma[a_idx] >= 1.0:
                break
            max_step = gamma[a_idx] / (1.0 - gamma[a_idx])
            Ad = (b - r) - A[:, a_idx]
            Gd = Ggam - G[:, a_idx]
            num = hg - ha
        den = float(Ad @ Ad)
        if den <= 0.0:
            break
        step = min(num / den, max_step)
        if step <= 0.0:
            break
        if toward:
            gamma *= 1.0 - step
            gamma[s_idx] += step
            if step == 1.0:
                gamma[:] = 0.0
                gamma[s_idx] = 1.0
        else:
            gamma *= 1.0 + step
            gamma[a_idx] -= step
            if step == max_step:
                gamma[a_idx] = 0.0
        r -= step * Ad
        h -= step * Gd
        Ggam += step * Gd
        it += 1

    r, h, Ggam = _refresh(A, b, gamma, c)
    return it, gap, float(r @ r)
