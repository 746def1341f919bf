from __future__ import annotations

import numpy as np
import pytest

from torusmfg.grid import TorusGrid
from torusmfg.model import Coupling, MFGProblem, PowerHamiltonian

TWO_PI = 2 * np.pi


def baseline_problem(alpha: float = 2.0, coupling: Coupling | None = None, nu: float = 0.0, n: int = 64) -> MFGProblem:
    """d=1, V = 0.5 cos(2 pi x), phi = 1."""
    g = TorusGrid(1, n)
    return MFGProblem(
        g,
        PowerHamiltonian(alpha),
        coupling or Coupling("linear"),
        g.field(lambda x: 0.5 * np.cos(TWO_PI * x)),
        g.constant(1.0),
        nu,
    )


@pytest.fixture
def grid1() -> TorusGrid:
    return TorusGrid(1, 64)


@pytest.fixture
def grid2() -> TorusGrid:
    return TorusGrid(2, 32)


@pytest.fixture
def baseline() -> MFGProblem:
    return baseline_problem()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240607)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance lines in one block at the end of the run."""
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
