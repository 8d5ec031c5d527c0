"""Imbalance objectives, weight fitting and gap series.

Four ways to score a donor weight vector on de-meaned pre-treatment data:

* separate: RMS imbalance on one outcome;
* concatenated: RMS imbalance over every (period, outcome) pair;
* averaged: RMS imbalance of the across-outcome mean series;
* combined(nu): ``nu * q_avg**2 + (1 - nu) * q_cat**2``.

A (period, outcome) cell enters an objective only when the treated unit and
every donor are observed there; normalizing counts use the surviving cells.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from mosynth import simplex
from mosynth.panel import PanelData, TransformState, _format_period, prepare
from mosynth.simplex import QpProblem, WeightSolution

__all__ = [
    "FitResult",
    "GapSeries",
    "Imbalance",
    "ObjectiveSpec",
    "PerfectFitWarning",
    "build_objective",
    "fit",
    "gaps",
    "heuristic_nu",
    "imbalance",
    "write_weights",
]

KINDS = ("separate", "concatenated", "averaged", "combined")


class PerfectFitWarning(UserWarning):
    """Concatenated weights fit exactly, so the heuristic nu is undefined."""


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str
    outcome: int | None = None
    nu: float | None = None
    include_post_period: bool = False

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if (self.kind == "combined") != (self.nu is not None):
            raise ValueError("nu is required for, and only for, the combined objective")
        if self.nu is not None and not 0.0 <= self.nu <= 1.0:
            raise ValueError(f"nu={self.nu} outside [0, 1]")
        if (self.kind == "separate") != (self.outcome is not None):
            raise ValueError("outcome index is required for, and only for, separate weights")

    @classmethod
    def separate(cls, outcome: int = 0) -> "ObjectiveSpec":
        return cls("separate", outcome=outcome)

    @classmethod
    def concatenated(cls) -> "ObjectiveSpec":
        return cls("concatenated")

    @classmethod
    def averaged(cls) -> "ObjectiveSpec":
        return cls("averaged")

    @classmethod
    def combined(cls, nu: float) -> "ObjectiveSpec":
        return cls("combined", nu=float(nu))

    @property
    def multi_outcome(self) -> bool:
        return self.kind != "separate"

    def label(self) -> str:
        if self.kind == "separate":
            return f"separate[{self.outcome}]"
        if self.kind == "combined":
            return f"combined[nu={self.nu:g}]"
        return self.kind


def _available(panel: PanelData, n_rows: int) -> np.ndarray:
    block = panel.values[:, :n_rows, :]
    return ~np.isnan(block).any(axis=0)


def _row_count(panel: PanelData, spec: ObjectiveSpec) -> int:
    return panel.n_periods if spec.include_post_period else panel.t0


def build_objective(panel: PanelData, spec: ObjectiveSpec) -> QpProblem:
    """Design/target rows whose weighted squared residual is the squared q."""
    m = _row_count(panel, spec)
    avail = _available(panel, m)
    Y1 = panel.treated[:m]
    Y0 = panel.donor_values[:, :m, :]

    def cat():
        ks, ts = np.nonzero(avail.T)
        A = Y0[:, ts, ks].T
        b = Y1[ts, ks]
        return A, b, np.full(b.size, 1.0 / b.size)

    def avg():
        rows = np.flatnonzero(avail.any(axis=1))
        A = np.empty((rows.size, Y0.shape[0]))
        b = np.empty(rows.size)
        for r, t in enumerate(rows):
            ks = np.flatnonzero(avail[t])
            A[r] = Y0[:, t, ks].mean(axis=1)
            b[r] = Y1[t, ks].mean()
        return A, b, np.full(b.size, 1.0 / b.size)

    if spec.kind == "separate":
        k = spec.outcome
        if not 0 <= k < panel.n_outcomes:
            raise IndexError(f"outcome index {k} out of range")
        ts = np.flatnonzero(avail[:, k])
        A, b = Y0[:, ts, k].T, Y1[ts, k]
        w = np.full(b.size, 1.0 / b.size)
    elif spec.kind == "concatenated":
        A, b, w = cat()
    elif spec.kind == "averaged":
        A, b, w = avg()
    else:
        Aa, ba, wa = avg()
        Ac, bc, wc = cat()
        A = np.vstack([Aa, Ac])
        b = np.concatenate([ba, bc])
        w = np.concatenate([spec.nu * wa, (1.0 - spec.nu) * wc])
    if b.size == 0:
        raise ValueError("no fully observed pre-treatment cells for this objective")
    return QpProblem(A, b, w)


@dataclass(frozen=True)
class Imbalance:
    q_sep: np.ndarray
    q_cat: float
    q_avg: float

    def as_dict(self) -> dict:
        return {
            "q_sep": [float(q) for q in self.q_sep],
            "q_cat": float(self.q_cat),
            "q_avg": float(self.q_avg),
        }


def imbalance(panel: PanelData, gamma: np.ndarray, n_rows: int | None = None) -> Imbalance:
    """Evaluate every q directly from its summation formula."""
    m = panel.t0 if n_rows is None else n_rows
    gamma = np.asarray(gamma, dtype=float)
    avail = _available(panel, m)
    Y1 = panel.treated[:m]
    Y0 = panel.donor_values[:, :m, :]
    K = panel.n_outcomes
    q_sep = np.empty(K)
    sq_total, n_total = 0.0, 0
    for k in range(K):
        sq, n = 0.0, 0
        for t in range(m):
            if avail[t, k]:
                d = Y1[t, k] - float(np.dot(gamma, Y0[:, t, k]))
                sq += d * d
                n += 1
        q_sep[k] = np.sqrt(sq / n) if n else np.nan
        sq_total += sq
        n_total += n
    sq_avg, n_avg = 0.0, 0
    for t in range(m):
        ks = np.flatnonzero(avail[t])
        if ks.size == 0:
            continue
        d = Y1[t, ks].mean() - float(np.dot(gamma, Y0[:, t, ks].mean(axis=1)))
        sq_avg += d * d
        n_avg += 1
    return Imbalance(q_sep, float(np.sqrt(sq_total / n_total)), float(np.sqrt(sq_avg / n_avg)))


@dataclass(frozen=True)
class FitResult:
    spec: ObjectiveSpec
    solution: WeightSolution
    panel: PanelData
    state: TransformState
    imbalance: Imbalance

    @property
    def gamma(self) -> np.ndarray:
        return self.solution.gamma

    @property
    def donors(self) -> tuple[str, ...]:
        return self.panel.donors

    def weights_table(self) -> list[tuple[str, float]]:
        order = sorted(range(len(self.gamma)), key=lambda j: (-self.gamma[j], j))
        return [(self.donors[j], float(self.gamma[j])) for j in order]


def fit(
    panel: PanelData,
    spec: ObjectiveSpec,
    *,
    tol: float = simplex.DEFAULT_TOL,
    max_iter: int = simplex.DEFAULT_MAX_ITER,
    standardize: bool | None = None,
) -> FitResult:
    """De-mean (and standardize multi-outcome fits), then solve for weights.

    ``standardize`` defaults to True for concatenated, averaged and combined
    objectives and False for separate weights.
    """
    if standardize is None:
        standardize = spec.multi_outcome
    tpanel, state = prepare(panel, standardize)
    return fit_transformed(tpanel, state, spec, tol=tol, max_iter=max_iter)


def fit_transformed(
    tpanel: PanelData,
    state: TransformState,
    spec: ObjectiveSpec,
    *,
    tol: float = simplex.DEFAULT_TOL,
    max_iter: int = simplex.DEFAULT_MAX_ITER,
) -> FitResult:
    problem = build_objective(tpanel, spec)
    sol = simplex.solve(problem, tol=tol, max_iter=max_iter)
    return FitResult(spec, sol, tpanel, state, imbalance(tpanel, sol.gamma))


def heuristic_nu(
    panel: PanelData,
    *,
    tol: float = simplex.DEFAULT_TOL,
    max_iter: int = simplex.DEFAULT_MAX_ITER,
    standardize: bool = True,
) -> float:
    """``sqrt(q_avg) / sqrt(q_cat)`` at the concatenated weights.

    Returns 1 and emits :class:`PerfectFitWarning` when the concatenated fit
    is exact.
    """
    res = fit(panel, ObjectiveSpec.concatenated(), tol=tol, max_iter=max_iter, standardize=standardize)
    q_cat, q_avg = res.imbalance.q_cat, res.imbalance.q_avg
    if not q_cat > 0:
        warnings.warn("perfect concatenated fit; using nu = 1", PerfectFitWarning, stacklevel=2)
        return 1.0
    return float(min(max(np.sqrt(q_avg) / np.sqrt(q_cat), 0.0), 1.0))


@dataclass(frozen=True)
class GapSeries:
    """Observed, imputed and gap values per (period, outcome), in raw units."""

    outcomes: tuple[str, ...]
    periods: tuple
    t0: int
    observed: np.ndarray
    counterfactual: np.ndarray
    scales: np.ndarray = field(repr=False)

    @property
    def gap(self) -> np.ndarray:
        return self.observed - self.counterfactual

    @property
    def standardized_gap(self) -> np.ndarray:
        return self.gap / self.scales

    @property
    def is_post(self) -> np.ndarray:
        return np.arange(len(self.periods)) >= self.t0

    def write(self, dest: TextIO | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["outcome", "period", "observed", "counterfactual", "gap", "is_post"])
        gap = self.gap
        for k, o in enumerate(self.outcomes):
            for t, p in enumerate(self.periods):
                w.writerow([
                    o,
                    _format_period(p),
                    _fmt(self.observed[t, k]),
                    _fmt(self.counterfactual[t, k]),
                    _fmt(gap[t, k]),
                    int(t >= self.t0),
                ])
        text = buf.getvalue()
        if dest is not None:
            dest.write(text)
        return text


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def gaps(panel: PanelData, weights: WeightSolution | np.ndarray, state: TransformState) -> GapSeries:
    """Impute the treated unit's untreated path and difference it out.

    ``panel`` is in raw units; ``state`` supplies the pre-treatment means and
    outcome scales recorded when the weights were fitted.
    """
    gamma = weights.gamma if isinstance(weights, WeightSolution) else np.asarray(weights, float)
    dot = panel.values - state.pre_means[:, None, :]
    used = np.flatnonzero(gamma > 0)
    donors = panel.donor_index[used]
    synth = np.einsum("i,itk->tk", gamma[used], dot[donors])
    ti = panel.treated_index
    counterfactual = state.pre_means[ti][None, :] + synth
    return GapSeries(
        panel.outcomes, panel.periods, panel.t0, panel.values[ti].copy(), counterfactual, state.scales
    )


def write_weights(donors, gamma, dest: TextIO | None = None) -> str:
    """Emit ``donor,weight`` rows sorted by descending weight."""
    gamma = np.asarray(gamma, dtype=float)
    order = sorted(range(len(gamma)), key=lambda j: (-gamma[j], j))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["donor", "weight"])
    for j in order:
        w.writerow([donors[j], repr(float(gamma[j]))])
    text = buf.getvalue()
    if dest is not None:
        dest.write(text)
    return text
