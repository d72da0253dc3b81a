import numpy as np
import pytest
from hypothesis import settings

from mvhjm import DiscreteMeasure, FutureContract, PiecewiseLinearAlpha

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")

TAU1 = 1.33 / 12
TAU2 = 2.33 / 12


@pytest.fixture
def month_contract():
    return FutureContract(TAU1, TAU2)


@pytest.fixture
def delivery_curve():
    """30 atoms of weight 1/365 inside the delivery period; F(0) = 12 * 30 / 365."""
    return DiscreteMeasure(np.linspace(1.4 / 12, 2.3 / 12, 30), np.full(30, 1 / 365), 0.2)


@pytest.fixture
def pl_alpha():
    return PiecewiseLinearAlpha([0.0, 0.05, 0.1, 0.2], [0.04, 0.06, 0.05, 0.03])


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
