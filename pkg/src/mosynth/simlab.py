"""Monte Carlo studies on a common/idiosyncratic factor model.

Untreated outcomes follow

    Y_itk(0) = rho * phi_i * mu_t + (1 - rho) * phi_ik * mu_tk + sigma * eps_itk

with ``phi_i`` evenly spaced over the loading range, ``mu_t`` evenly spaced
over the factor range, outcome 1 using the common pair for both terms, and
the idiosyncratic pairs drawn as standard normal loadings and AR(1) factors
(coefficient 0.5) rescaled onto the common ranges. The treated unit is the
one with the second largest common loading; its idiosyncratic loadings are
the oracle-weighted average of the donors', so oracle weights exist by
construction.

Every replication draws from its own Philox substream keyed on
``(seed, replication)``, so serial and parallel runs agree exactly.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import TextIO

import numpy as np

from mosynth import conformal, simplex
from mosynth.diagnostics import condition_ratio, spectrum
from mosynth.panel import PanelData
from mosynth.weights import ObjectiveSpec, fit, gaps

__all__ = [
    "DgpConfig",
    "OracleError",
    "PRESETS",
    "SimDraw",
    "StudyResult",
    "generate",
    "oracle_weights",
    "probe_diagnostics",
    "replication_rng",
    "run_study",
    "size_study",
]

log = logging.getLogger(__name__)

ESTIMATORS = ("sep", "cat", "avg")
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
AR_COEF = 0.5


class OracleError(ValueError):
    """Treated loading lies outside the donors' convex hull."""


@dataclass(frozen=True)
class DgpConfig:
    n_units: int = 50
    t0: int = 10
    k: int = 4
    rho: float = 1.0
    noise_sigma: float = 1.0
    loading_range: tuple[float, float] = (1.0, 5.0)
    factor_range: tuple[float, float] = (0.5, 1.0)
    n_post: int = 1
    effect: float = 0.0
    rescale: str = "affine"
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "loading_range", tuple(float(x) for x in self.loading_range))
        object.__setattr__(self, "factor_range", tuple(float(x) for x in self.factor_range))
        lo, hi = self.loading_range
        flo, fhi = self.factor_range
        if not (lo < hi and flo < fhi):
            raise ValueError("ranges must be ordered (low < high)")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho={self.rho} outside [0, 1]")
        if self.n_units < 3:
            raise ValueError("need n_units >= 3")
        if self.t0 < 2 or self.k < 1 or self.n_post < 1:
            raise ValueError("need t0 >= 2, k >= 1, n_post >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.rescale not in ("affine", "spread"):
            raise ValueError("rescale must be 'affine' or 'spread'")

    @classmethod
    def from_dict(cls, raw: dict) -> "DgpConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown DGP keys {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loading_range"] = list(self.loading_range)
        d["factor_range"] = list(self.factor_range)
        return d


PRESETS: dict[str, DgpConfig] = {
    "appendix-c-t10-k4": DgpConfig(t0=10, k=4),
    "appendix-c-t10-k10": DgpConfig(t0=10, k=10),
    "appendix-c-t40-k4": DgpConfig(t0=40, k=4),
    "appendix-c-t40-k10": DgpConfig(t0=40, k=10),
    "appendix-c-rho1": DgpConfig(t0=10, k=10, rho=1.0),
    "appendix-c-rho05": DgpConfig(t0=10, k=10, rho=0.5),
    "appendix-c-rho0": DgpConfig(t0=10, k=10, rho=0.0),
}


def replication_rng(seed: int, replication: int | None = None) -> np.random.Generator:
    key = () if replication is None else (int(replication),)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=key)))


def oracle_weights(donor_loadings: np.ndarray, treated_loading: np.ndarray, atol: float = 1e-10) -> np.ndarray:
    """Simplex weights reproducing the treated loading from donor loadings.

    ``donor_loadings`` is ``(N0,)`` for scalar loadings or ``(N0, r)``.
    Raises :class:`OracleError` with the hull distance when no such weights
    exist.
    """
    L = np.asarray(donor_loadings, dtype=float)
    if L.ndim == 1:
        L = L[:, None]
    target = np.atleast_1d(np.asarray(treated_loading, dtype=float))
    sol = simplex.solve(simplex.QpProblem(L.T, target), tol=1e-24, max_iter=200_000)
    resid = float(np.linalg.norm(target - L.T @ sol.gamma))
    if resid > atol:
        raise OracleError(f"treated loading outside donor hull (distance {resid:.3g})")
    return sol.gamma


def _rescale(x: np.ndarray, lo: float, hi: float, mode: str) -> np.ndarray:
    span = x.max() - x.min()
    if mode == "spread":
        return x * (hi - lo) / span
    return lo + (x - x.min()) * (hi - lo) / span


def _ar1(rng: np.random.Generator, n: int) -> np.ndarray:
    x = np.empty(n)
    x[0] = rng.normal(0.0, np.sqrt(1.0 / (1.0 - AR_COEF**2)))
    for t in range(1, n):
        x[t] = AR_COEF * x[t - 1] + rng.standard_normal()
    return x


@dataclass(frozen=True, eq=False)
class SimDraw:
    panel: PanelData
    loadings: np.ndarray  # (N, K) per-outcome loadings; column 0 is the common one
    factors: np.ndarray  # (T, K) per-outcome factors; column 0 is the common one
    oracle_weights: np.ndarray
    latent: np.ndarray  # (N, T, K) noiseless untreated component
    effect: float


def generate(config: DgpConfig, rng: np.random.Generator | None = None) -> SimDraw:
    if rng is None:
        rng = replication_rng(config.seed)
    N, K = config.n_units, config.k
    T = config.t0 + config.n_post
    lo, hi = config.loading_range
    flo, fhi = config.factor_range
    phi = np.linspace(lo, hi, N)
    mu = np.linspace(flo, fhi, T)
    treated = N - 2
    donors = np.array([i for i in range(N) if i != treated])
    gamma_star = oracle_weights(phi[donors], phi[treated])

    loadings = np.empty((N, K))
    factors = np.empty((T, K))
    loadings[:, 0] = phi
    factors[:, 0] = mu
    for k in range(1, K):
        pk = _rescale(rng.standard_normal(donors.size), lo, hi, config.rescale)
        loadings[donors, k] = pk
        loadings[treated, k] = gamma_star @ pk
        factors[:, k] = _rescale(_ar1(rng, T), flo, fhi, config.rescale)

    common = np.outer(phi, mu)[:, :, None]
    idio = loadings[:, None, :] * factors[None, :, :]
    latent = config.rho * common + (1.0 - config.rho) * idio
    values = latent + config.noise_sigma * rng.standard_normal((N, T, K))
    values[treated, config.t0 :, :] += config.effect

    width = len(str(N - 1))
    units = [f"unit{i:0{width}d}" for i in range(N)]
    panel = PanelData(
        units,
        list(range(1, T + 1)),
        [f"y{k + 1}" for k in range(K)],
        values,
        units[treated],
        config.t0,
    )
    return SimDraw(panel, loadings, factors, gamma_star, latent, float(config.effect))


def _estimator_specs() -> dict[str, ObjectiveSpec]:
    return {
        "sep": ObjectiveSpec.separate(0),
        "cat": ObjectiveSpec.concatenated(),
        "avg": ObjectiveSpec.averaged(),
    }


def _replicate(config: DgpConfig, rep: int, tol: float, max_iter: int) -> dict:
    """One replication: bias on outcome 1 at the last period for each estimator.

    Bias is the imputed minus true value of the de-meaned noiseless model
    component; ``error`` is the realized imputation error including noise.
    """
    draw = generate(config, replication_rng(config.seed, rep))
    panel = draw.panel
    t0, T = panel.t0, panel.n_periods
    ti, di = panel.treated_index, panel.donor_index
    lat = draw.latent[:, :, 0]
    lat_dot = lat[:, T - 1] - lat[:, :t0].mean(axis=1)
    truth = panel.values[ti, T - 1, 0] - draw.effect
    rec: dict = {"rep": rep}
    for name, spec in _estimator_specs().items():
        res = fit(panel, spec, tol=tol, max_iter=max_iter)
        g = res.gamma
        rec[f"bias_{name}"] = float(g @ lat_dot[di] - lat_dot[ti])
        cf = gaps(panel, g, res.state).counterfactual[T - 1, 0]
        rec[f"error_{name}"] = float(cf - truth)
        q = res.imbalance
        rec[f"imbalance_{name}"] = float({"sep": q.q_sep[0], "cat": q.q_cat, "avg": q.q_avg}[name])
        rec[f"converged_{name}"] = bool(res.solution.converged)
    return rec


def _replicate_safe(args) -> dict:
    config, rep, tol, max_iter = args
    try:
        return _replicate(config, rep, tol, max_iter)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return {"rep": rep, "failed": f"{type(exc).__name__}: {exc}"}


REP_COLUMNS = (
    ["rep"]
    + [f"bias_{e}" for e in ESTIMATORS]
    + [f"error_{e}" for e in ESTIMATORS]
    + [f"imbalance_{e}" for e in ESTIMATORS]
    + [f"converged_{e}" for e in ESTIMATORS]
)


@dataclass(frozen=True)
class StudyResult:
    config: DgpConfig
    reps: int
    records: list[dict]
    failures: list[dict] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)

    def mean_abs_bias(self, estimator: str) -> float:
        return float(np.mean(np.abs(self.column(f"bias_{estimator}"))))

    def summary(self) -> dict:
        out: dict = {
            "config": self.config.to_dict(),
            "reps": self.reps,
            "completed": len(self.records),
            "failed": len(self.failures),
            "estimators": {},
        }
        for e in ESTIMATORS:
            bias = self.column(f"bias_{e}")
            imb = self.column(f"imbalance_{e}")
            out["estimators"][e] = {
                "mean_abs_bias": float(np.mean(np.abs(bias))),
                "mean_bias": float(np.mean(bias)),
                "sd_bias": float(np.std(bias, ddof=1)) if bias.size > 1 else 0.0,
                "bias_quantiles": _quantiles(bias),
                "mean_imbalance": float(np.mean(imb)),
                "imbalance_quantiles": _quantiles(imb),
                "nonconverged": int(np.sum(~self.column(f"converged_{e}").astype(bool))),
            }
        return out

    def write_replications(self, dest: TextIO | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REP_COLUMNS)
        for r in self.records:
            w.writerow([_cell(r[c]) for c in REP_COLUMNS])
        text = buf.getvalue()
        if dest is not None:
            dest.write(text)
        return text

    def write_summary(self, dest: TextIO | None = None) -> str:
        text = json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"
        if dest is not None:
            dest.write(text)
        return text


def _cell(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _quantiles(x: np.ndarray) -> dict:
    if x.size == 0:
        return {}
    return {f"q{int(q * 100):02d}": float(v) for q, v in zip(QUANTILES, np.quantile(x, QUANTILES))}


def run_study(
    config: DgpConfig,
    reps: int,
    *,
    jobs: int = 1,
    tol: float = simplex.DEFAULT_TOL,
    max_iter: int = simplex.DEFAULT_MAX_ITER,
) -> StudyResult:
    """Fit separate, concatenated and averaged weights on ``reps`` draws."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    tasks = [(config, r, tol, max_iter) for r in range(reps)]
    if jobs <= 1:
        results = [_replicate_safe(t) for t in tasks]
    else:
        chunk = max(1, reps // (4 * jobs))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_replicate_safe, tasks, chunksize=chunk))
    results.sort(key=lambda r: r["rep"])
    ok = [r for r in results if "failed" not in r]
    failed = [r for r in results if "failed" in r]
    if failed:
        log.warning("%d of %d replications failed; excluded", len(failed), reps)
    return StudyResult(config, reps, ok, failed)


def _probe_one(args) -> tuple[float, float, float]:
    config, rep = args
    panel = generate(config, replication_rng(config.seed, rep)).panel
    sep_share = spectrum(panel.select_outcomes([0]), raw=True).top_share
    cat_share = spectrum(panel, raw=True).top_share
    return sep_share, cat_share, condition_ratio(panel, raw=True)


def probe_diagnostics(config: DgpConfig, reps: int, *, jobs: int = 1) -> dict:
    """Average spectral shares and condition-number increase over draws.

    Uses the raw (untransformed) ``N x T0`` and ``N x T0*K`` pre-treatment
    matrices.
    """
    tasks = [(config, r) for r in range(reps)]
    if jobs <= 1:
        rows = [_probe_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_probe_one, tasks, chunksize=max(1, reps // (4 * jobs))))
    arr = np.array(rows)
    return {
        "reps": reps,
        "separate_top_share": float(arr[:, 0].mean()),
        "concatenated_top_share": float(arr[:, 1].mean()),
        "condition_increase_pct": float(arr[:, 2].mean()),
    }


@dataclass(frozen=True)
class SizeResult:
    """Null-rejection frequency of the single-period conformal test."""

    config: DgpConfig
    objective: str
    alpha: float
    q: float
    p_values: np.ndarray
    n_periods: int

    @property
    def rejection_rate(self) -> float:
        return float(np.mean(self.p_values <= self.alpha))

    def write(self, dest: TextIO | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rep", "p_value", "reject"])
        for r, p in enumerate(self.p_values):
            w.writerow([r, repr(float(p)), int(p <= self.alpha)])
        text = buf.getvalue()
        if dest is not None:
            dest.write(text)
        return text

    def summary(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "objective": self.objective,
            "alpha": self.alpha,
            "q": self.q,
            "reps": int(self.p_values.size),
            "rejection_rate": self.rejection_rate,
        }


def _size_one(args) -> float:
    config, rep, spec, q, tol, max_iter = args
    panel = generate(config, replication_rng(config.seed, rep)).panel
    null = conformal.NullSpec.zero(panel.n_outcomes)
    return conformal.test_null(panel, spec, null, q, tol=tol, max_iter=max_iter).p_value


def size_study(
    config: DgpConfig,
    reps: int,
    *,
    spec: ObjectiveSpec | None = None,
    alpha: float = 0.1,
    q: float = 1.0,
    jobs: int = 1,
    tol: float = simplex.DEFAULT_TOL,
    max_iter: int = simplex.DEFAULT_MAX_ITER,
) -> SizeResult:
    """Test the true zero-effect null on ``reps`` draws and record p-values.

    ``config.effect`` must be 0 so the tested null holds.
    """
    if config.effect != 0.0:
        raise ValueError("size study needs effect = 0")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    spec = spec or ObjectiveSpec.concatenated()
    tasks = [(config, r, spec, q, tol, max_iter) for r in range(reps)]
    if jobs <= 1:
        p = [_size_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            p = list(pool.map(_size_one, tasks, chunksize=max(1, reps // (4 * jobs))))
    return SizeResult(config, spec.label(), float(alpha), float(q), np.array(p), config.t0 + 1)


def with_overrides(config: DgpConfig, **kw) -> DgpConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
