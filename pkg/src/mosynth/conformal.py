"""Conformal tests of sharp nulls on the treated unit's effects.

Under ``H0: tau = tau0`` the post-period treated outcomes are shifted by
``-tau0``, the weights are refit on the augmented sample (pre-periods plus
the tested post periods), and the post-period residual statistic is ranked
against statistics computed from permuted time indices.

Residuals are taken on the transformed scale used for fitting (standardized
for multi-outcome objectives), so ``tau0`` is expressed in those units. Each
refit re-centres unit-outcome series on the augmented sample.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import warnings
from dataclasses import dataclass, replace
from typing import Sequence, TextIO

import numpy as np

from mosynth import simplex
from mosynth.panel import PanelData, _format_period, prepare
from mosynth.simplex import WeightSolution
from mosynth.weights import ObjectiveSpec, build_objective

__all__ = [
    "AvgEffectInterval",
    "CoarsePermutationWarning",
    "NullSpec",
    "TestResult",
    "avg_effect_interval",
    "test_null",
    "test_null_joint",
    "test_stat",
]

TIE_TOL = 1e-9
MAX_EXACT_SUBSETS = 20_000


class CoarsePermutationWarning(UserWarning):
    """Post block longer than half the sample; the permutation law is coarse."""


def test_stat(residuals: np.ndarray, q: float = 1.0) -> np.ndarray | float:
    """``((1/sqrt(K)) * sum_k |u_k|**q) ** (1/q)`` over the last axis.

    ``q = inf`` gives ``max_k |u_k|``. NaN entries are skipped and ``K``
    counts the observed ones.
    """
    u = np.abs(np.asarray(residuals, dtype=float))
    if not q >= 1:
        raise ValueError(f"q must be >= 1 (or inf), got {q}")
    if np.isinf(q):
        out = np.nanmax(u, axis=-1)
    else:
        k = np.sum(~np.isnan(u), axis=-1)
        out = (np.nansum(u**q, axis=-1) / np.sqrt(k)) ** (1.0 / q)
    return float(out) if np.ndim(out) == 0 else out


test_stat.__test__ = False  # not a pytest test


@dataclass(frozen=True)
class NullSpec:
    """Hypothesized effects per outcome; ``period`` picks the tested post period.

    ``period=None`` means the last period for single-period tests; joint tests
    always use every post period.
    """

    tau0: tuple[float, ...]
    period: object | None = None

    def __post_init__(self) -> None:
        tau = tuple(float(x) for x in np.atleast_1d(self.tau0))
        if not all(math.isfinite(x) for x in tau):
            raise ValueError("tau0 must be finite")
        object.__setattr__(self, "tau0", tau)

    @classmethod
    def zero(cls, k: int, period=None) -> "NullSpec":
        return cls((0.0,) * k, period)


@dataclass(frozen=True)
class TestResult:
    __test__ = False

    p_value: float
    statistic: float
    statistics: np.ndarray
    periods: tuple
    post_periods: tuple
    q: float
    scheme: str
    n_permutations: int
    solution: WeightSolution
    residuals: np.ndarray
    coarse: bool = False

    def row(self, null: NullSpec) -> list[str]:
        return [
            "tau0=" + ";".join(repr(x) for x in null.tau0),
            ";".join(_format_period(p) for p in self.post_periods),
            repr(float(self.q)),
            self.scheme,
            repr(float(self.statistic)),
            repr(float(self.p_value)),
        ]


RESULT_HEADER = ["null", "periods", "q", "scheme", "statistic", "p_value"]


def write_results(rows: Sequence[tuple[NullSpec, TestResult]], dest: TextIO | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_HEADER)
    for null, res in rows:
        w.writerow(res.row(null))
    text = buf.getvalue()
    if dest is not None:
        dest.write(text)
    return text


def _check_tau(panel: PanelData, null: NullSpec) -> np.ndarray:
    tau = np.asarray(null.tau0)
    if tau.size == 1 and panel.n_outcomes > 1:
        tau = np.full(panel.n_outcomes, tau[0])
    if tau.size != panel.n_outcomes:
        raise ValueError(f"tau0 has {tau.size} entries for {panel.n_outcomes} outcomes")
    return tau


def _augmented_fit(
    tpanel: PanelData,
    spec: ObjectiveSpec,
    tau: np.ndarray,
    post: Sequence[int],
    tol: float,
    max_iter: int,
) -> tuple[PanelData, WeightSolution, np.ndarray]:
    """Refit on pre-periods plus ``post`` with the null imposed; return residuals.

    Unit-outcome means are recomputed over the augmented sample, so the
    tested periods enter the fit exactly like the pre-periods.
    """
    keep = list(range(tpanel.t0)) + list(post)
    aug = tpanel.select_periods(keep)
    vals = np.array(aug.values)
    vals[aug.treated_index, aug.t0 :, :] -= tau
    # re-centre on the augmented sample so every period is treated alike
    with np.errstate(invalid="ignore"):
        vals -= np.nanmean(vals, axis=1, keepdims=True)
    aug = aug.with_values(vals)
    problem = build_objective(aug, replace(spec, include_post_period=True))
    sol = simplex.solve(problem, tol=tol, max_iter=max_iter)
    synth = np.einsum("i,itk->tk", sol.gamma, aug.donor_values)
    return aug, sol, aug.treated - synth


def _transform(panel: PanelData, spec: ObjectiveSpec, standardize: bool | None) -> PanelData:
    if standardize is None:
        standardize = spec.multi_outcome
    return prepare(panel, standardize)[0]


def _post_index(panel: PanelData, period) -> int:
    if period is None:
        return panel.n_periods - 1
    if period not in panel.periods:
        raise ValueError(f"unknown period {period!r}")
    t = panel.periods.index(period)
    if t < panel.t0:
        raise ValueError(f"period {period!r} is not post-treatment")
    return t


def test_null(
    panel: PanelData,
    spec: ObjectiveSpec,
    null: NullSpec,
    q: float = 1.0,
    *,
    standardize: bool | None = None,
    tol: float = simplex.DEFAULT_TOL,
    max_iter: int = simplex.DEFAULT_MAX_ITER,
    tie_tol: float = TIE_TOL,
) -> TestResult:
    """Single post-period test; p-value on the lattice ``{1/T, ..., 1}``.

    ``T`` counts the pre-periods plus the tested period. A pre-period
    statistic within ``tie_tol`` of the post statistic counts as a tie.
    """
    tpanel = _transform(panel, spec, standardize)
    tau = _check_tau(tpanel, null)
    t_post = _post_index(tpanel, null.period)
    aug, sol, resid = _augmented_fit(tpanel, spec, tau, [t_post], tol, max_iter)
    stats = test_stat(resid, q)
    T = aug.n_periods
    p = (np.sum(stats[-1] <= stats[:-1] + tie_tol) + 1) / T
    return TestResult(
        float(p), float(stats[-1]), stats, aug.periods, (tpanel.periods[t_post],), q, "iid", T, sol, resid
    )


test_null.__test__ = False


def _block_stat(resid: np.ndarray, idx: np.ndarray, q: float) -> float:
    return test_stat(resid[idx].ravel(), q)


def test_null_joint(
    panel: PanelData,
    spec: ObjectiveSpec,
    null: NullSpec,
    q: float = 1.0,
    *,
    scheme: str = "moving-block",
    n_draws: int = 9_999,
    seed: int = 0,
    standardize: bool | None = None,
    tol: float = simplex.DEFAULT_TOL,
    max_iter: int = simplex.DEFAULT_MAX_ITER,
    tie_tol: float = TIE_TOL,
) -> TestResult:
    """Joint test over every post period after one augmented refit.

    ``moving-block`` ranks the post block against all ``T`` cyclic shifts of
    the time index. ``iid`` ranks it against every size-``T1`` subset of
    periods, or ``n_draws`` random ones (seeded) when there are too many.
    """
    if scheme not in ("moving-block", "iid"):
        raise ValueError("scheme must be 'moving-block' or 'iid'")
    tpanel = _transform(panel, spec, standardize)
    tau = _check_tau(tpanel, null)
    post = list(range(tpanel.t0, tpanel.n_periods))
    aug, sol, resid = _augmented_fit(tpanel, spec, tau, post, tol, max_iter)
    T, T1 = aug.n_periods, len(post)
    coarse = T1 > T / 2
    if coarse:
        warnings.warn(
            f"post block of {T1} periods exceeds half of T={T}", CoarsePermutationWarning, stacklevel=2
        )
    post_idx = np.arange(aug.t0, T)
    observed = _block_stat(resid, post_idx, q)
    if scheme == "moving-block":
        perm_stats = np.array([_block_stat(resid, (post_idx + j) % T, q) for j in range(T)])
    elif math.comb(T, T1) <= MAX_EXACT_SUBSETS:
        perm_stats = np.array(
            [_block_stat(resid, np.array(c), q) for c in itertools.combinations(range(T), T1)]
        )
    else:
        rng = np.random.Generator(np.random.Philox(seed))
        draws = [_block_stat(resid, rng.permutation(T)[:T1], q) for _ in range(n_draws)]
        perm_stats = np.array([observed] + draws)
    p = float(np.mean(perm_stats >= observed - tie_tol))
    return TestResult(
        p,
        observed,
        test_stat(resid, q),
        aug.periods,
        tuple(tpanel.periods[t] for t in post),
        q,
        scheme,
        len(perm_stats),
        sol,
        resid,
        coarse,
    )


test_null_joint.__test__ = False


@dataclass(frozen=True)
class AvgEffectInterval:
    grid: np.ndarray
    p_values: np.ndarray
    alpha: float

    @property
    def accepted(self) -> np.ndarray:
        return self.p_values > self.alpha

    @property
    def empty(self) -> bool:
        return not self.accepted.any()

    @property
    def lower(self) -> float:
        return float(self.grid[self.accepted].min()) if not self.empty else math.nan

    @property
    def upper(self) -> float:
        return float(self.grid[self.accepted].max()) if not self.empty else math.nan


def averaged_panel(panel: PanelData) -> PanelData:
    """Single-outcome panel of the mean of standardized, de-meaned outcomes."""
    tpanel, _ = prepare(panel, standardize_outcomes=True)
    with np.errstate(invalid="ignore"):
        avg = np.nanmean(tpanel.values, axis=2, keepdims=True)
    return replace(tpanel, outcomes=("average",), values=avg)


def avg_effect_interval(
    panel: PanelData,
    grid: Sequence[float],
    alpha: float = 0.1,
    q: float = 1.0,
    *,
    period=None,
    tol: float = simplex.DEFAULT_TOL,
    max_iter: int = simplex.DEFAULT_MAX_ITER,
) -> AvgEffectInterval:
    """Invert the single-period test for the average standardized effect."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    avg = averaged_panel(panel)
    spec = ObjectiveSpec.averaged()
    grid = np.asarray(grid, dtype=float)
    p = np.array([
        test_null(avg, spec, NullSpec((g,), period), q, standardize=False, tol=tol, max_iter=max_iter).p_value
        for g in grid
    ])
    if not (p > alpha).any():
        warnings.warn("no grid value accepted; interval is empty", stacklevel=2)
    return AvgEffectInterval(grid, p, float(alpha))
