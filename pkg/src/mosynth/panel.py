"""Balanced multi-outcome panels: loading, de-meaning and standardization.

Values live in a dense ``(unit, period, outcome)`` float array with NaN as the
missing marker. De-meaning subtracts each unit-outcome's pre-treatment mean;
standardization divides each outcome by the pooled sample standard deviation
of its de-meaned pre-treatment values.
"""

from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, TextIO

import numpy as np

__all__ = [
    "PanelData",
    "PanelError",
    "TransformState",
    "TreatmentConfig",
    "demean",
    "dump_panel",
    "load_config",
    "load_panel",
    "prepare",
    "standardize",
    "validate_low_rank_inputs",
]


class PanelError(ValueError):
    """Invalid panel data or treatment configuration."""


@dataclass(frozen=True, eq=False)
class PanelData:
    units: tuple[str, ...]
    periods: tuple
    outcomes: tuple[str, ...]
    values: np.ndarray
    treated_unit: str
    t0: int

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "units", tuple(self.units))
        object.__setattr__(self, "periods", tuple(self.periods))
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        n, t, k = len(self.units), len(self.periods), len(self.outcomes)
        if values.shape != (n, t, k):
            raise PanelError(f"values shape {values.shape} != {(n, t, k)}")
        if len(set(self.units)) != n:
            raise PanelError("unit labels must be unique")
        if self.treated_unit not in self.units:
            raise PanelError(f"unknown treated unit {self.treated_unit!r}")
        if n < 2:
            raise PanelError("need at least one donor unit")
        if any(b <= a for a, b in zip(self.periods, self.periods[1:])):
            raise PanelError("period labels must be strictly increasing")
        if not 1 <= self.t0 < t:
            raise PanelError(f"t0={self.t0} must satisfy 1 <= t0 < T={t}")
        if np.isinf(values).any():
            raise PanelError("values must be finite or missing")
        pre_counts = np.sum(~np.isnan(values[:, : self.t0]), axis=1)
        if np.any(pre_counts < 2):
            i, k = np.argwhere(pre_counts < 2)[0]
            raise PanelError(
                f"unit {self.units[i]!r}, outcome {self.outcomes[k]!r} has fewer "
                "than 2 observed pre-treatment values"
            )

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_periods(self) -> int:
        return len(self.periods)

    @property
    def n_outcomes(self) -> int:
        return len(self.outcomes)

    @property
    def treated_index(self) -> int:
        return self.units.index(self.treated_unit)

    @property
    def donor_index(self) -> np.ndarray:
        return np.array([i for i in range(self.n_units) if i != self.treated_index])

    @property
    def donors(self) -> tuple[str, ...]:
        return tuple(self.units[i] for i in self.donor_index)

    @property
    def treated(self) -> np.ndarray:
        """Treated unit's ``(period, outcome)`` block."""
        return self.values[self.treated_index]

    @property
    def donor_values(self) -> np.ndarray:
        """Donor ``(donor, period, outcome)`` block."""
        return self.values[self.donor_index]

    def with_values(self, values: np.ndarray) -> "PanelData":
        return replace(self, values=values)

    def select_outcomes(self, ks: Iterable[int]) -> "PanelData":
        ks = list(ks)
        return replace(
            self,
            outcomes=tuple(self.outcomes[k] for k in ks),
            values=self.values[:, :, ks],
        )

    def select_periods(self, ts: Iterable[int]) -> "PanelData":
        ts = list(ts)
        return replace(
            self,
            periods=tuple(self.periods[t] for t in ts),
            values=self.values[:, ts, :],
        )

    def equals(self, other: "PanelData") -> bool:
        return (
            self.units == other.units
            and self.periods == other.periods
            and self.outcomes == other.outcomes
            and self.treated_unit == other.treated_unit
            and self.t0 == other.t0
            and np.array_equal(self.values, other.values, equal_nan=True)
        )


@dataclass(frozen=True)
class TransformState:
    """What was subtracted and divided, in the input panel's units.

    ``pre_means`` has shape ``(unit, outcome)``; ``scales`` has one entry per
    outcome (ones when not standardized).
    """

    pre_means: np.ndarray
    scales: np.ndarray
    demeaned: bool = False
    standardized: bool = False


@dataclass(frozen=True)
class TreatmentConfig:
    treated_unit: str
    last_pre_period: object
    signs: Mapping[str, float] = field(default_factory=dict)


def _parse_period(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return _dt.date.fromisoformat(text)
    except ValueError:
        raise PanelError(f"period {text!r} is neither an integer nor an ISO date") from None


def load_config(source: str | os.PathLike | Mapping) -> TreatmentConfig:
    """Read a treatment config from a JSON file or an already-parsed mapping.

    Keys: ``treated_unit``, ``t0`` (the last pre-treatment period label) and
    optionally ``signs`` mapping outcome labels to multipliers.
    """
    if isinstance(source, Mapping):
        raw = dict(source)
    else:
        with open(source, encoding="utf-8") as fh:
            raw = json.load(fh)
    try:
        treated = str(raw["treated_unit"])
        t0 = raw["t0"]
    except KeyError as exc:
        raise PanelError(f"config missing key {exc.args[0]!r}") from None
    signs = {str(k): float(v) for k, v in (raw.get("signs") or {}).items()}
    if any(s == 0 for s in signs.values()):
        raise PanelError("sign multipliers must be non-zero")
    return TreatmentConfig(treated, _parse_period(str(t0)), signs)


def load_panel(source: str | os.PathLike | TextIO, config: TreatmentConfig) -> PanelData:
    """Parse long-format ``unit,period,outcome,value`` rows into a panel.

    Cells absent from the stream, or present with an empty value, are
    missing. Units and outcomes keep first-appearance order; periods are
    sorted.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8", newline="") as fh:
            return load_panel(fh, config)
    reader = csv.DictReader(source)
    required = {"unit", "period", "outcome", "value"}
    if reader.fieldnames is None or not required <= set(reader.fieldnames):
        raise PanelError(f"header must contain {sorted(required)}")
    cells: dict[tuple[str, object, str], float] = {}
    units: dict[str, None] = {}
    outcomes: dict[str, None] = {}
    periods: set = set()
    for lineno, row in enumerate(reader, start=2):
        unit, outcome = row["unit"].strip(), row["outcome"].strip()
        period = _parse_period(row["period"])
        key = (unit, period, outcome)
        if key in cells:
            raise PanelError(f"line {lineno}: duplicate row for {key}")
        text = (row["value"] or "").strip()
        try:
            cells[key] = float(text) if text else np.nan
        except ValueError:
            raise PanelError(f"line {lineno}: bad value {text!r}") from None
        units.setdefault(unit)
        outcomes.setdefault(outcome)
        periods.add(period)
    if len({type(p) for p in periods}) > 1:
        raise PanelError("period column mixes integers and dates")
    unit_list, outcome_list = list(units), list(outcomes)
    period_list = sorted(periods)
    if config.treated_unit not in units:
        raise PanelError(f"unknown treated unit {config.treated_unit!r}")
    if config.last_pre_period not in periods:
        raise PanelError(f"last pre-treatment period {config.last_pre_period!r} not in data")
    t0 = period_list.index(config.last_pre_period) + 1
    if t0 >= len(period_list):
        raise PanelError("t0 must leave at least one post-treatment period")
    if len(unit_list) < 3:
        raise PanelError("need at least 2 donor units")
    unknown = set(config.signs) - set(outcome_list)
    if unknown:
        raise PanelError(f"signs given for unknown outcomes {sorted(unknown)}")

    ui = {u: i for i, u in enumerate(unit_list)}
    ti = {p: i for i, p in enumerate(period_list)}
    ki = {o: i for i, o in enumerate(outcome_list)}
    values = np.full((len(unit_list), len(period_list), len(outcome_list)), np.nan)
    for (u, p, o), v in cells.items():
        values[ui[u], ti[p], ki[o]] = v
    signs = np.array([config.signs.get(o, 1.0) for o in outcome_list])
    return PanelData(unit_list, period_list, outcome_list, values * signs, config.treated_unit, t0)


def _format_period(p) -> str:
    return p.isoformat() if isinstance(p, _dt.date) else str(p)


def dump_panel(panel: PanelData, dest: TextIO | None = None) -> str:
    """Write a panel back to long format; returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["unit", "period", "outcome", "value"])
    for i, u in enumerate(panel.units):
        for t, p in enumerate(panel.periods):
            for k, o in enumerate(panel.outcomes):
                v = panel.values[i, t, k]
                w.writerow([u, _format_period(p), o, "" if np.isnan(v) else repr(float(v))])
    text = buf.getvalue()
    if dest is not None:
        dest.write(text)
    return text


def _pre_means(panel: PanelData) -> np.ndarray:
    pre = panel.values[:, : panel.t0]
    counts = np.sum(~np.isnan(pre), axis=1)
    if np.any(counts == 0):
        i, k = np.argwhere(counts == 0)[0]
        raise PanelError(
            f"all pre-treatment values missing for unit {panel.units[i]!r}, "
            f"outcome {panel.outcomes[k]!r}"
        )
    return np.nansum(pre, axis=1) / counts


def demean(panel: PanelData) -> tuple[PanelData, TransformState]:
    """Subtract each unit-outcome's pre-treatment mean from every period."""
    means = _pre_means(panel)
    out = panel.with_values(panel.values - means[:, None, :])
    return out, TransformState(means, np.ones(panel.n_outcomes), demeaned=True)


def outcome_scales(panel: PanelData) -> np.ndarray:
    """Pooled sample std (ddof=1) of de-meaned pre-treatment values per outcome."""
    pre = panel.values[:, : panel.t0] - _pre_means(panel)[:, None, :]
    scales = np.empty(panel.n_outcomes)
    for k in range(panel.n_outcomes):
        x = pre[:, :, k]
        x = x[~np.isnan(x)]
        scales[k] = np.std(x, ddof=1) if x.size > 1 else 0.0
    return scales


def standardize(panel: PanelData) -> tuple[PanelData, TransformState]:
    """Divide each outcome by its pooled pre-treatment standard deviation."""
    scales = outcome_scales(panel)
    bad = np.flatnonzero(~(scales > 0))
    if bad.size:
        raise PanelError(f"zero pre-treatment variance for outcome {panel.outcomes[bad[0]]!r}")
    out = panel.with_values(panel.values / scales)
    return out, TransformState(
        np.zeros((panel.n_units, panel.n_outcomes)), scales, standardized=True
    )


def prepare(panel: PanelData, standardize_outcomes: bool = True) -> tuple[PanelData, TransformState]:
    """De-mean, then optionally standardize; the state refers to raw units."""
    dm, state = demean(panel)
    if not standardize_outcomes:
        return dm, state
    st, sstate = standardize(dm)
    return st, replace(state, scales=sstate.scales, standardized=True)


def validate_low_rank_inputs(panel: PanelData) -> np.ndarray:
    """``N x (T0*K)`` pre-treatment matrix, outcome-major column blocks.

    Columns holding any missing cell are dropped.
    """
    pre = panel.values[:, : panel.t0, :]
    mat = pre.transpose(0, 2, 1).reshape(panel.n_units, -1)
    keep = ~np.isnan(mat).any(axis=0)
    if not keep.any():
        raise PanelError("no complete pre-treatment columns")
    return mat[:, keep]
