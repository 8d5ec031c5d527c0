import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_panel
from mosynth.panel import (
    PanelData,
    PanelError,
    TreatmentConfig,
    demean,
    dump_panel,
    load_config,
    load_panel,
    outcome_scales,
    prepare,
    standardize,
    validate_low_rank_inputs,
)
from oracles import pooled_std, reshape_matrix, two_pass_demean


def _csv(rows):
    return io.StringIO("unit,period,outcome,value\n" + "\n".join(rows) + "\n")


def test_load_small_panel():
    rows = [f"{u},{t},y,{i * 3 + t}" for i, u in enumerate("ab") for t in (1, 2, 3)]
    p = PanelData(["a", "b"], [1, 2, 3], ["y"], np.arange(6.0).reshape(2, 3, 1), "a", 2)
    assert (p.n_units, p.n_periods, p.n_outcomes) == (2, 3, 1)
    loaded = load_panel(_csv(rows + [f"c,{t},y,{t}" for t in (1, 2, 3)]), TreatmentConfig("a", 2))
    assert (loaded.n_units, loaded.n_periods, loaded.n_outcomes, loaded.t0) == (3, 3, 1, 2)


def test_missing_cell_marked():
    rows = [f"{u},{t},y,{t}" for u in "abc" for t in (1, 2, 3, 4) if (u, t) != ("b", 4)]
    p = load_panel(_csv(rows), TreatmentConfig("a", 3))
    assert np.isnan(p.values[1, 3, 0])
    assert np.isfinite(p.values).sum() == 11


def test_empty_value_is_missing():
    rows = [f"{u},{t},y,{'' if (u, t) == ('c', 1) else t}" for u in "abc" for t in (1, 2, 3, 4)]
    p = load_panel(_csv(rows), TreatmentConfig("a", 3))
    assert np.isnan(p.values[2, 0, 0])


@pytest.mark.parametrize(
    "rows, cfg, msg",
    [
        (["a,1,y,1", "a,1,y,2"], TreatmentConfig("a", 1), "duplicate"),
        ([f"{u},{t},y,1" for u in "abc" for t in (1, 2, 3)], TreatmentConfig("z", 2), "unknown treated"),
        ([f"{u},{t},y,1" for u in "abc" for t in (1, 2, 3)], TreatmentConfig("a", 3), "post-treatment"),
        ([f"{u},{t},y,1" for u in "ab" for t in (1, 2, 3)], TreatmentConfig("a", 2), "2 donor"),
        ([f"{u},{t},y,1" for u in "abc" for t in (1, 2, 3)], TreatmentConfig("a", 9), "not in data"),
        ([f"{u},{t},y,x" for u in "abc" for t in (1, 2, 3)], TreatmentConfig("a", 2), "bad value"),
    ],
)
def test_load_errors(rows, cfg, msg):
    with pytest.raises(PanelError, match=msg):
        load_panel(_csv(rows), cfg)


def test_dates_and_signs(tmp_path):
    rows = [f"{u},2020-0{m}-01,{o},{m}" for u in "abc" for m in (1, 2, 3) for o in ("y", "z")]
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"treated_unit": "a", "t0": "2020-02-01", "signs": {"z": -1}}))
    p = load_panel(_csv(rows), load_config(cfg_path))
    assert p.t0 == 2 and str(p.periods[0]) == "2020-01-01"
    assert np.all(p.values[:, :, 1] == -p.values[:, :, 0])


def test_round_trip():
    p = random_panel(3)
    vals = np.array(p.values)
    vals[2, 7, 1] = np.nan
    p = p.with_values(vals)
    cfg = TreatmentConfig(p.treated_unit, p.periods[p.t0 - 1])
    assert load_panel(io.StringIO(dump_panel(p)), cfg).equals(p)


def test_invariants_enforced():
    vals = np.zeros((3, 4, 1))
    with pytest.raises(PanelError, match="increasing"):
        PanelData(list("abc"), [1, 3, 2, 4], ["y"], vals, "a", 2)
    with pytest.raises(PanelError, match="t0"):
        PanelData(list("abc"), [1, 2, 3, 4], ["y"], vals, "a", 4)
    vals[1, 0, 0] = np.nan
    with pytest.raises(PanelError, match="fewer than 2"):
        PanelData(list("abc"), [1, 2, 3, 4], ["y"], vals, "a", 2)


def test_demean_examples():
    p = PanelData(["a", "b"], [1, 2, 3, 4], ["y"], np.array([[1, 2, 3, 9.0], [5, 5, 5, 5.0]])[:, :, None], "a", 3)
    d, state = demean(p)
    assert np.allclose(d.values[0, :, 0], [-1, 0, 1, 7])
    assert np.all(d.values[1] == 0)
    assert state.pre_means[0, 0] == 2


def test_demean_matches_oracle():
    p = random_panel(11, n=4, t=6, k=2, t0=4)
    vals = np.array(p.values)
    vals[1, 2, 0] = np.nan
    p = p.with_values(vals)
    d, _ = demean(p)
    expected = two_pass_demean(np.array(p.values), p.t0)
    assert np.allclose(d.values, expected, atol=1e-12, rtol=0, equal_nan=True)


def test_standardize_unit_std_and_scale_equivariance():
    p = random_panel(5, scale=4.0)
    s, state = prepare(p)
    for k in range(p.n_outcomes):
        assert abs(pooled_std(s.values[:, : p.t0, k]) - 1) < 1e-10
    vals = np.array(p.values)
    vals[:, :, 1] *= 10
    s10, _ = prepare(p.with_values(vals))
    assert np.allclose(s10.values, s.values, atol=1e-10)
    again, st2 = standardize(s)
    assert np.allclose(again.values, s.values, atol=1e-12)
    assert np.allclose(st2.scales, 1)


def test_zero_variance_rejected():
    vals = np.ones((3, 4, 1))
    p = PanelData(list("abc"), [1, 2, 3, 4], ["y"], vals, "a", 3)
    with pytest.raises(PanelError, match="zero pre-treatment variance"):
        prepare(p)


def test_low_rank_matrix_layout():
    p = random_panel(2, n=3, t=3, k=2, t0=2)
    m = validate_low_rank_inputs(p)
    assert m.shape == (3, 4)
    assert m[1, 3] == p.values[1, 1, 1]
    assert np.array_equal(m, reshape_matrix(np.array(p.values), 2))


def test_low_rank_drops_missing_columns():
    p = random_panel(2, n=3, t=4, k=2, t0=3)
    vals = np.array(p.values)
    vals[0, 1, 1] = np.nan
    m = validate_low_rank_inputs(p.with_values(vals))
    assert m.shape == (3, 5)


panels = st.builds(
    random_panel,
    seed=st.integers(0, 10_000),
    n=st.integers(3, 7),
    t=st.integers(4, 9),
    k=st.integers(1, 4),
    t0=st.integers(2, 3),
    scale=st.floats(0.1, 50),
)


@settings(max_examples=60, deadline=None)
@given(panels)
def test_demean_idempotent_and_centred(p):
    d, _ = demean(p)
    dd, _ = demean(d)
    assert np.allclose(dd.values, d.values, atol=1e-12, rtol=0)
    assert np.allclose(d.values[:, : p.t0].mean(axis=1), 0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(panels, st.integers(0, 3), st.floats(0.01, 1e3))
def test_prepare_commutes_with_positive_scaling(p, k, c):
    k = k % p.n_outcomes
    vals = np.array(p.values)
    vals[:, :, k] *= c
    a, _ = prepare(p)
    b, _ = prepare(p.with_values(vals))
    assert np.allclose(a.values, b.values, atol=1e-10, rtol=0)
    assert np.all(outcome_scales(p) > 0)
