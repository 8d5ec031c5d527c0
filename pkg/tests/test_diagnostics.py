import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import factor_panel, random_panel
from mosynth import simlab
from mosynth.diagnostics import (
    condition_ratio,
    frontier,
    holdout_fit,
    mspe_ratio,
    spectrum,
    write_frontier,
)
from mosynth.panel import PanelData, PanelError, prepare, validate_low_rank_inputs
from mosynth.weights import ObjectiveSpec, fit


def _copies(base: PanelData, k: int) -> PanelData:
    vals = np.repeat(np.array(base.values[:, :, :1]), k, axis=2)
    return PanelData(base.units, base.periods, [f"c{j}" for j in range(k)], vals, base.treated_unit, base.t0)


def test_rank_one_spectrum():
    rng = np.random.default_rng(0)
    vals = np.einsum("i,tk->itk", rng.uniform(1, 2, 6), rng.normal(size=(5, 2)))
    p = PanelData([f"u{i}" for i in range(6)], range(5), ["a", "b"], vals, "u0", 4)
    rep = spectrum(p, raw=True)
    assert abs(rep.top_share - 1) < 1e-10


def test_zero_matrix_rejected():
    p = PanelData(list("abc"), [1, 2, 3], ["y"], np.zeros((3, 3, 1)), "a", 2)
    with pytest.raises(PanelError, match="zero"):
        spectrum(p, raw=True)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_spectrum_invariants(seed, raw):
    p = random_panel(seed)
    rep = spectrum(p, raw=raw)
    c = rep.cumulative_shares
    assert np.all(np.diff(c) >= -1e-15) and abs(c[-1] - 1) < 1e-10
    mat = validate_low_rank_inputs(p if raw else prepare(p)[0])
    fro = np.sum(mat**2)
    assert abs(np.sum(rep.singular_values**2) - fro) <= 1e-8 * fro


def test_holdout_requires_two_outcomes():
    with pytest.raises(PanelError, match="requires K"):
        holdout_fit(random_panel(0, k=1))


def test_holdout_copies_match_direct_fit():
    p = _copies(random_panel(1, n=8, t=10, t0=8), 3)
    rep = holdout_fit(p, 0.5)
    direct = fit(p.select_outcomes([0]), ObjectiveSpec.separate(0))
    expected = mspe_ratio(p, 0, direct.gamma)
    assert np.allclose(rep.ratio, expected, rtol=1e-6)


def test_uniform_ratio_is_one():
    p = random_panel(2)
    n0 = p.n_units - 1
    assert abs(mspe_ratio(p, 1, np.full(n0, 1 / n0)) - 1) < 1e-12


def test_holdout_ignores_focal_outcome():
    p = random_panel(3, n=8, k=3)
    base = holdout_fit(p).weights[1]
    vals = np.array(p.values)
    vals[:, :, 1] = np.random.default_rng(9).normal(size=vals.shape[:2]) * 1e6
    assert np.array_equal(holdout_fit(p.with_values(vals)).weights[1], base)


def test_holdout_worse_without_shared_factor():
    # at sigma = 1 noise swamps the signal and both medians sit near 1
    med = {}
    for rho in (1.0, 0.0):
        cfg = simlab.DgpConfig(k=10, t0=10, rho=rho, noise_sigma=0.3)
        ratios = []
        for rep in range(100):
            panel = simlab.generate(cfg, simlab.replication_rng(0, rep)).panel
            ratios.append(np.median(holdout_fit(panel).ratio))
        med[rho] = float(np.median(ratios))
    assert med[0.0] >= 1.5 * med[1.0]


def test_frontier_endpoints_and_monotone():
    p = factor_panel(4, noise=0.8)
    pts = frontier(p, [0.0, 1.0])
    cat = fit(p, ObjectiveSpec.concatenated()).imbalance
    avg = fit(p, ObjectiveSpec.averaged()).imbalance
    assert abs(pts[0].q_cat - cat.q_cat) < 1e-10
    assert abs(pts[1].q_avg - avg.q_avg) < 1e-10
    full = frontier(p)
    qa = np.array([x.q_avg for x in full])
    qc = np.array([x.q_cat for x in full])
    assert np.all(np.diff(qa) <= 1e-8) and np.all(np.diff(qc) >= -1e-8)
    text = write_frontier(full).splitlines()
    assert text[0] == "nu,q_avg,q_cat" and len(text) == 22


def test_frontier_rejects_bad_grid():
    with pytest.raises(ValueError):
        frontier(random_panel(0), [0.5, 1.2])


def test_condition_ratio_copies_and_singular():
    p = _copies(random_panel(5, n=8, t=10, t0=6), 4)
    assert abs(condition_ratio(p)) < 1e-8
    rng = np.random.default_rng(1)
    vals = rng.normal(size=(5, 6, 2))
    vals[:, :, 1] = -vals[:, :, 0]
    q = PanelData(list("abcde"), range(6), ["y", "z"], vals, "a", 4)
    assert condition_ratio(q) == np.inf
