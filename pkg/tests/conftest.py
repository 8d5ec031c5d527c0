from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mosynth.panel import PanelData, dump_panel  # noqa: E402

# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE: list[str] = []


def random_panel(
    seed: int = 0,
    n: int = 6,
    t: int = 8,
    k: int = 3,
    t0: int = 6,
    scale: float = 1.0,
) -> PanelData:
    rng = np.random.default_rng(seed)
    values = scale * rng.normal(size=(n, t, k)) + rng.normal(size=(1, 1, k)) * 3
    return PanelData(
        [f"u{i}" for i in range(n)], list(range(2000, 2000 + t)), [f"y{j}" for j in range(k)], values, "u0", t0
    )


def factor_panel(seed: int = 0, n: int = 12, t: int = 12, k: int = 3, t0: int = 10, noise: float = 0.3) -> PanelData:
    """Low-rank panel plus noise; the treated unit sits inside the donor hull."""
    rng = np.random.default_rng(seed)
    load = rng.uniform(1, 3, size=(n, 2))
    load[0] = load[1:4].mean(axis=0)
    fac = rng.normal(size=(t, k, 2))
    values = np.einsum("ir,tkr->itk", load, fac) + noise * rng.normal(size=(n, t, k))
    return PanelData(
        [f"u{i:02d}" for i in range(n)], list(range(1, t + 1)), [f"y{j}" for j in range(k)], values, "u00", t0
    )


@pytest.fixture
def panel_files(tmp_path):
    """Write a panel plus its JSON config; returns ``(csv, config)`` paths."""

    def _write(panel: PanelData, name: str = "panel"):
        csv_path = tmp_path / f"{name}.csv"
        cfg_path = tmp_path / f"{name}.json"
        csv_path.write_text(dump_panel(panel), encoding="utf-8")
        cfg = {"treated_unit": panel.treated_unit, "t0": str(panel.periods[panel.t0 - 1])}
        cfg_path.write_text(json.dumps(cfg), encoding="utf-8")
        return csv_path, cfg_path

    return _write


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
