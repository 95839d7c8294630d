from __future__ import annotations

import numpy as np
import pytest

from wjko.kernels import make_abs_kernel, make_morse_kernel, make_quadratic_capped_kernel, make_zero_kernel
from wjko.measures import ControlCurve, DiscreteMeasure


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def two_clusters():
    """16 atoms in two Gaussian clusters around (+-1, 0), uniform weights."""
    g = np.random.default_rng(1)
    pts = np.vstack([g.normal(size=(8, 2)) * 0.3 + [-1, 0], g.normal(size=(8, 2)) * 0.3 + [1, 0]])
    return DiscreteMeasure.uniform(pts)


@pytest.fixture
def point_control():
    return ControlCurve.constant(DiscreteMeasure.dirac([0.0, 1.0]), 1.0, radius=2.0)


@pytest.fixture
def kernels():
    return {
        "abs": make_abs_kernel(1.0),
        "morse": make_morse_kernel(1.0, 1.0, 0.5, 2.0),
        "quad": make_quadratic_capped_kernel(0.5, 2.0),
        "zero": make_zero_kernel(),
    }


def random_measure(rng, n, d, uniform=False):
    pts = rng.normal(size=(n, d))
    if uniform:
        return DiscreteMeasure.uniform(pts)
    w = rng.random(n) + 0.05
    return DiscreteMeasure(pts, w / w.sum())


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_RESULTS: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_RESULTS[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
