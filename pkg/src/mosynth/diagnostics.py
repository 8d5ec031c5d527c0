"""Checks on the shared-factor assumption and sensitivity tooling.

* :func:`spectrum` -- singular value shares of the stacked pre-treatment matrix.
* :func:`holdout_fit` -- fit combined weights without one outcome, score it.
* :func:`frontier` -- (q_cat, q_avg) traced by the combined objective over nu.
* :func:`condition_ratio` -- how much averaging inflates the condition number.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np

from mosynth import simplex
from mosynth.panel import PanelData, PanelError, prepare, validate_low_rank_inputs
from mosynth.weights import ObjectiveSpec, fit, fit_transformed

__all__ = [
    "FrontierPoint",
    "HoldoutReport",
    "SpectrumReport",
    "condition_ratio",
    "frontier",
    "holdout_fit",
    "mspe_ratio",
    "spectrum",
    "write_frontier",
]

DEFAULT_NU_GRID = tuple(np.round(np.linspace(0.0, 1.0, 21), 10))


@dataclass(frozen=True)
class SpectrumReport:
    singular_values: np.ndarray
    shape: tuple[int, int]

    @property
    def variance_shares(self) -> np.ndarray:
        s2 = self.singular_values**2
        return s2 / s2.sum()

    @property
    def cumulative_shares(self) -> np.ndarray:
        return np.cumsum(self.variance_shares)

    @property
    def top_share(self) -> float:
        return float(self.variance_shares[0])

    def write(self, dest: TextIO | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "singular_value", "share", "cumulative_share"])
        for i, (s, sh, c) in enumerate(
            zip(self.singular_values, self.variance_shares, self.cumulative_shares), start=1
        ):
            w.writerow([i, repr(float(s)), repr(float(sh)), repr(float(c))])
        return _finish(buf, dest)


def _finish(buf: io.StringIO, dest: TextIO | None) -> str:
    text = buf.getvalue()
    if dest is not None:
        dest.write(text)
    return text


def spectrum(panel: PanelData, *, raw: bool = False) -> SpectrumReport:
    """SVD of the ``N x (T0*K)`` pre-treatment matrix.

    By default the panel is de-meaned and standardized first; ``raw=True``
    uses the values as given.
    """
    if not raw:
        panel, _ = prepare(panel, standardize_outcomes=True)
    mat = validate_low_rank_inputs(panel)
    if not np.any(mat):
        raise PanelError("pre-treatment matrix is identically zero")
    s = np.linalg.svd(mat, compute_uv=False)
    return SpectrumReport(s, mat.shape)


@dataclass(frozen=True)
class HoldoutReport:
    outcomes: tuple[str, ...]
    mspe: np.ndarray
    mspe_uniform: np.ndarray
    weights: np.ndarray
    nu: float

    @property
    def ratio(self) -> np.ndarray:
        return self.mspe / self.mspe_uniform

    def write(self, dest: TextIO | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["outcome", "mspe", "mspe_uniform", "ratio"])
        for o, m, u, r in zip(self.outcomes, self.mspe, self.mspe_uniform, self.ratio):
            w.writerow([o, repr(float(m)), repr(float(u)), repr(float(r))])
        return _finish(buf, dest)


def _mspe(panel: PanelData, k: int, gamma: np.ndarray) -> float:
    dm, _ = prepare(panel.select_outcomes([k]), standardize_outcomes=False)
    Y1 = dm.treated[: dm.t0, 0]
    Y0 = dm.donor_values[:, : dm.t0, 0]
    ok = ~(np.isnan(Y1) | np.isnan(Y0).any(axis=0))
    resid = Y1[ok] - gamma @ Y0[:, ok]
    return float(np.mean(resid**2))


def mspe_ratio(panel: PanelData, k: int, gamma: np.ndarray) -> float:
    """Pre-treatment MSPE of ``gamma`` on outcome ``k`` over that of uniform weights."""
    n0 = panel.n_units - 1
    return _mspe(panel, k, np.asarray(gamma, float)) / _mspe(panel, k, np.full(n0, 1.0 / n0))


def holdout_fit(
    panel: PanelData,
    nu: float = 0.5,
    *,
    tol: float = simplex.DEFAULT_TOL,
    max_iter: int = simplex.DEFAULT_MAX_ITER,
) -> HoldoutReport:
    """For each outcome, fit combined weights on the others and score that outcome."""
    K = panel.n_outcomes
    if K < 2:
        raise PanelError("holdout diagnostic requires K >= 2 outcomes")
    n0 = panel.n_units - 1
    uniform = np.full(n0, 1.0 / n0)
    mspe = np.empty(K)
    mspe_u = np.empty(K)
    weights = np.empty((K, n0))
    for k in range(K):
        rest = panel.select_outcomes([j for j in range(K) if j != k])
        res = fit(rest, ObjectiveSpec.combined(nu), tol=tol, max_iter=max_iter)
        weights[k] = res.gamma
        mspe[k] = _mspe(panel, k, res.gamma)
        mspe_u[k] = _mspe(panel, k, uniform)
    return HoldoutReport(panel.outcomes, mspe, mspe_u, weights, float(nu))


@dataclass(frozen=True)
class FrontierPoint:
    nu: float
    q_avg: float
    q_cat: float
    gamma: np.ndarray

    def __post_init__(self) -> None:
        if not 0.0 <= self.nu <= 1.0:
            raise ValueError(f"nu={self.nu} outside [0, 1]")


def frontier(
    panel: PanelData,
    nu_grid: Sequence[float] = DEFAULT_NU_GRID,
    *,
    tol: float = simplex.DEFAULT_TOL,
    max_iter: int = simplex.DEFAULT_MAX_ITER,
) -> list[FrontierPoint]:
    """Fit combined weights at each nu and record the two imbalances."""
    if any(not 0.0 <= nu <= 1.0 for nu in nu_grid):
        raise ValueError("nu grid must lie within [0, 1]")
    tpanel, state = prepare(panel, standardize_outcomes=True)
    points = []
    for nu in nu_grid:
        res = fit_transformed(tpanel, state, ObjectiveSpec.combined(nu), tol=tol, max_iter=max_iter)
        points.append(FrontierPoint(float(nu), res.imbalance.q_avg, res.imbalance.q_cat, res.gamma))
    return points


def write_frontier(points: Sequence[FrontierPoint], dest: TextIO | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["nu", "q_avg", "q_cat"])
    for p in points:
        w.writerow([repr(p.nu), repr(p.q_avg), repr(p.q_cat)])
    return _finish(buf, dest)


def _condition(mat: np.ndarray) -> float:
    s = np.linalg.svd(mat, compute_uv=False)
    if s[-1] <= 0.0 or s[-1] <= s[0] * np.finfo(float).eps:
        return np.inf
    return float(s[0] / s[-1])


def condition_ratio(panel: PanelData, *, raw: bool = True) -> float:
    """Percent increase in condition number from averaging the outcomes.

    Compares the ``N x T0`` pre-treatment matrix of the across-outcome mean
    with that of the first outcome. Returns ``inf`` when the averaged matrix
    is singular and ``nan`` when the first-outcome matrix is.
    """
    if not raw:
        panel, _ = prepare(panel, standardize_outcomes=True)
    pre = panel.values[:, : panel.t0, :]
    first = pre[:, :, 0]
    first = first[:, ~np.isnan(first).any(axis=0)]
    with np.errstate(invalid="ignore"):
        avg = np.nanmean(pre, axis=2)
    avg = avg[:, ~np.isnan(avg).any(axis=0)]
    c_first = _condition(first)
    c_avg = _condition(avg)
    if not np.isfinite(c_first):
        return float("nan")
    return 100.0 * (c_avg / c_first - 1.0)
