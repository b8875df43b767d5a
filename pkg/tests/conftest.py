"""Shared fixtures and the acceptance summary printed at the end of a run."""
from __future__ import annotations

import numpy as np
import pytest

from cvagreeks.curves import HazardCurve, ZeroCurve, fixture_path
from cvagreeks.hullwhite import HullWhiteModel

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def estr() -> ZeroCurve:
    return ZeroCurve.from_csv(fixture_path("ESTR.csv"))


@pytest.fixture(scope="session")
def ba() -> HazardCurve:
    return HazardCurve.from_csv(fixture_path("INDUSTRIAL_Ba.csv"))


@pytest.fixture(scope="session")
def hw(estr) -> HullWhiteModel:
    return HullWhiteModel(0.0744, 0.0125, estr)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)
