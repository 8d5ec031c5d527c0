import importlib.util
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mosynth import _afw_py, simplex
from mosynth.simplex import QpProblem, project_simplex, solve
from oracles import bisect_projection

DATA = Path(__file__).parent / "data"

try:
    from mosynth import _afw

    KERNELS = [_afw_py, _afw]
except ImportError:  # pragma: no cover
    KERNELS = [_afw_py]


@pytest.fixture(params=KERNELS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def kernel(request, monkeypatch):
    monkeypatch.setattr(simplex, "_kernel", request.param)
    return request.param


def _feasible(g):
    return np.all(g >= -1e-12) and abs(g.sum() - 1) <= 1e-10


def test_exact_column(kernel):
    rng = np.random.default_rng(0)
    A = rng.normal(size=(10, 5))
    sol = solve(QpProblem(A, A[:, 3].copy()))
    assert sol.converged and sol.objective <= 1e-8
    assert np.allclose(sol.gamma, np.eye(5)[3], atol=1e-8)


def test_midpoint(kernel):
    A = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, -1.0]])
    sol = solve(QpProblem(A, A.mean(axis=1)))
    assert np.allclose(sol.gamma, [0.5, 0.5], atol=1e-6)


def test_matches_frozen_grid(kernel):
    cases = json.loads((DATA / "simplex_grid.json").read_text())
    for c in cases:
        sol = solve(QpProblem(np.array(c["A"]), np.array(c["b"])))
        assert _feasible(sol.gamma)
        assert sol.squared_objective <= c["grid_min"] + 1e-5


def test_all_zero_design():
    sol = solve(QpProblem(np.zeros((4, 3)), np.array([3.0, 4, 0, 0])))
    assert sol.converged and np.allclose(sol.gamma, 1 / 3) and sol.objective == 5


def test_nonconverged_is_feasible(kernel):
    rng = np.random.default_rng(1)
    A, b = rng.normal(size=(30, 20)), rng.normal(size=30)
    sol = solve(QpProblem(A, b), max_iter=3)
    assert not sol.converged and sol.iterations == 3 and _feasible(sol.gamma)
    assert sol.gap > 1e-10


def test_backends_agree():
    rng = np.random.default_rng(2)
    A, b = rng.normal(size=(40, 15)), rng.normal(size=40)
    res = []
    for k in KERNELS:
        g = simplex._initial_vertex(A, b)
        out = k.afw_solve(A, b, g, A.T @ A, A.T @ b, 1e-12, 10_000, None)
        res.append((out[0], g))
    for it, g in res[1:]:
        assert it == res[0][0]
        assert np.allclose(g, res[0][1], atol=1e-10)


def test_row_weights_equal_scaling():
    rng = np.random.default_rng(3)
    A, b = rng.normal(size=(6, 3)), rng.normal(size=6)
    w = rng.uniform(0.1, 2, size=6)
    a = solve(QpProblem(A, b, w))
    s = np.sqrt(w)
    c = solve(QpProblem(A * s[:, None], b * s))
    assert abs(a.objective - c.objective) < 1e-9


@pytest.mark.parametrize(
    "A, b",
    [
        (np.ones((3, 1)), np.ones(3)),
        (np.ones((3, 2)), np.ones(2)),
        (np.array([[np.inf, 1.0]]), np.ones(1)),
    ],
)
def test_problem_validation(A, b):
    with pytest.raises(ValueError):
        QpProblem(A, b)


def test_projection_examples():
    v = np.array([0.2, 0.3, 0.5])
    assert np.allclose(project_simplex(v), v, atol=1e-12)
    assert np.array_equal(project_simplex(np.array([2.0, 0.0])), [1.0, 0.0])
    for c in json.loads((DATA / "projection.json").read_text()):
        assert np.allclose(project_simplex(np.array(c["v"])), c["projection"], atol=1e-12)


problems = st.integers(0, 2**31 - 1).map(np.random.default_rng).map(
    lambda rng: (rng.normal(size=(int(rng.integers(2, 25)), int(rng.integers(2, 12)))), rng)
).map(lambda t: (t[0], t[1].normal(size=t[0].shape[0]) * t[1].uniform(0.1, 5)))


@settings(max_examples=80, deadline=None)
@given(problems)
def test_monotone_and_certified(ab):
    A, b = ab
    seen = []
    sol = solve(QpProblem(A, b), callback=lambda it, f, gap: seen.append(f))
    assert _feasible(sol.gamma)
    assert all(y <= x + 1e-12 * max(1.0, x) for x, y in zip(seen, seen[1:]))
    assert sol.converged and 0 <= sol.gap <= 1e-10
    grad = -2 * A.T @ (b - A @ sol.gamma)
    # linear-minimization certificate over the vertices
    assert np.min(grad - grad @ sol.gamma) >= -1e-10


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3)))
def test_projection_properties(v):
    p = project_simplex(v)
    assert _feasible(p)
    assert np.allclose(p, bisect_projection(v), atol=1e-9)
    assert np.allclose(project_simplex(p), p, atol=1e-12)


def test_deterministic_tie_break():
    A = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    b = np.array([1.0, 0.0])
    sol = solve(QpProblem(A, b))
    assert sol.gamma[0] == 1.0


def test_backend_selected_at_import():
    code = "from mosynth import simplex; print(simplex.BACKEND)"
    env = {**os.environ, "MOSYNTH_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    assert simplex.BACKEND in ("python", "compiled")


def test_benchmark_runs(capsys):
    path = Path(__file__).parents[1] / "benchmarks" / "bench_solver.py"
    spec = importlib.util.spec_from_file_location("bench_solver", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    before = simplex._kernel
    assert mod.main(["--rows", "8", "--donors", "4", "--problems", "2", "--repeat", "1"]) == 0
    assert simplex._kernel is before
    assert "ms/solve" in capsys.readouterr().out
