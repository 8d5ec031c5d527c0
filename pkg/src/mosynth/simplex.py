"""Least squares over the probability simplex.

Solves ``min ||b - A g||^2`` subject to ``g >= 0`` and ``sum(g) == 1`` with
away-step Frank-Wolfe. The Frank-Wolfe duality gap bounds the distance to
the constrained optimum and is the stopping rule.

The inner loop runs in the compiled ``_afw`` extension when it is built; set
``MOSYNTH_PURE_PYTHON=1`` to force the numpy fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from mosynth import _afw_py

if os.environ.get("MOSYNTH_PURE_PYTHON"):
    _kernel = _afw_py
    BACKEND = "python"
else:
    try:
        from mosynth import _afw as _kernel

        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on build
        _kernel = _afw_py
        BACKEND = "python"

__all__ = [
    "BACKEND",
    "QpProblem",
    "WeightSolution",
    "project_simplex",
    "solve",
]

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100_000


@dataclass(frozen=True)
class QpProblem:
    """Balance problem ``min sum_r w_r (b_r - A_r g)^2`` over the simplex.

    Rows are balance targets (period/outcome pairs), columns are donors.
    """

    design: np.ndarray
    target: np.ndarray
    row_weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        A = np.asarray(self.design, dtype=float)
        b = np.asarray(self.target, dtype=float)
        if A.ndim != 2 or b.ndim != 1:
            raise ValueError("design must be 2-d and target 1-d")
        if A.shape[0] != b.shape[0]:
            raise ValueError(
                f"design has {A.shape[0]} rows but target has {b.shape[0]}"
            )
        if A.shape[1] < 2:
            raise ValueError("need at least 2 donors")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ValueError("design and target must be finite")
        object.__setattr__(self, "design", A)
        object.__setattr__(self, "target", b)
        if self.row_weights is not None:
            w = np.asarray(self.row_weights, dtype=float)
            if w.shape != b.shape:
                raise ValueError("row_weights must match target length")
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                raise ValueError("row_weights must be finite and non-negative")
            object.__setattr__(self, "row_weights", w)

    @property
    def n_donors(self) -> int:
        return self.design.shape[1]

    def scaled(self) -> tuple[np.ndarray, np.ndarray]:
        """Design and target with square-root row weights folded in."""
        if self.row_weights is None:
            return self.design, self.target
        s = np.sqrt(self.row_weights)
        return self.design * s[:, None], self.target * s

    def squared_objective(self, gamma: np.ndarray) -> float:
        A, b = self.scaled()
        r = b - A @ np.asarray(gamma, dtype=float)
        return float(r @ r)


@dataclass(frozen=True)
class WeightSolution:
    """Donor weights and fit metadata.

    ``objective`` is the root of the achieved squared objective (an RMS
    imbalance when row weights average over rows); ``gap`` is the
    Frank-Wolfe duality gap on the squared objective.
    """

    gamma: np.ndarray
    objective: float
    gap: float
    iterations: int
    converged: bool

    @property
    def squared_objective(self) -> float:
        return self.objective**2


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of ``v`` onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("v must be a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("v must be finite")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def _initial_vertex(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    # best single donor; argmin returns the lowest index on ties
    err = np.sum((A - b[:, None]) ** 2, axis=0)
    g = np.zeros(A.shape[1])
    g[int(np.argmin(err))] = 1.0
    return g


def solve(
    problem: QpProblem,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    *,
    init: np.ndarray | None = None,
    callback: Callable[[int, float, float], None] | None = None,
) -> WeightSolution:
    """Minimize the problem's squared objective over the simplex.

    Parameters
    ----------
    problem
        The balance problem.
    tol
        Stopping tolerance on the duality gap of the squared objective.
    max_iter
        Iteration cap. Hitting it returns the last iterate with
        ``converged=False`` rather than raising.
    init
        Optional warm start; projected onto the simplex first.
    callback
        Called as ``callback(iteration, squared_objective, gap)`` once per
        iterate, including the initial one.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    A, b = problem.scaled()
    n = A.shape[1]
    if not np.any(A):
        g = np.full(n, 1.0 / n)
        return WeightSolution(g, float(np.sqrt(b @ b)), 0.0, 0, True)

    A = np.ascontiguousarray(A)
    b = np.ascontiguousarray(b)
    G = np.ascontiguousarray(A.T @ A)
    c = A.T @ b
    if init is None:
        gamma = _initial_vertex(A, b)
    else:
        gamma = project_simplex(np.asarray(init, dtype=float).ravel())
        if gamma.size != n:
            raise ValueError(f"init has length {gamma.size}, expected {n}")
    it, gap, f = _kernel.afw_solve(A, b, gamma, G, c, float(tol), int(max_iter), callback)
    gamma = np.maximum(gamma, 0.0)
    gamma /= gamma.sum()
    return WeightSolution(
        gamma=gamma,
        objective=float(np.sqrt(max(f, 0.0))),
        gap=float(gap),
        iterations=int(it),
        converged=bool(gap <= tol),
    )
