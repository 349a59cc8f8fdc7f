import numpy as np
import pytest
from hypothesis import settings

from stackbsde.model import ExpDiscount, TerminalCondition, TimeGrid, zero_spec
from stackbsde.pension import PensionParams, make_pension_spec

settings.register_profile("ci", max_examples=25, deadline=None)
settings.load_profile("ci")

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []

# market and horizon used throughout the pension checks
PENSION = dict(r=0.05, mu1=0.1, mu2=0.08, sigma=0.2, sigma_tilde=0.3, beta=0.1, T=1.0)


@pytest.fixture
def pension_params():
    return PensionParams(**PENSION, N=128)


@pytest.fixture
def pension_spec(pension_params):
    return make_pension_spec(pension_params)


def scalar_follower_spec(G1=0.0, T=1.0, **kw):
    """n = 1, B1 = R1 = 1 and nothing else unless overridden."""
    kw.setdefault("B1", 1.0)
    return zero_spec(1, 1, 1, T, G1=[[G1]], **kw)


def generic_spec(c1=(0.3, 0.2)):
    """Two-dimensional game with every coupling switched on; used as a generic regression case."""
    return zero_spec(
        2, 1, 1, 1.0,
        A=[[-0.1, 0.2], [0.0, -0.3]], B1=[[1.0], [0.5]], B2=[[-0.5], [1.0]],
        C1=[[0.1, 0.0], [0.05, 0.2]], C2=[[0.15, 0.0], [0.0, -0.1]],
        Q1=np.eye(2), Q2=0.5 * np.eye(2), S1=0.2 * np.eye(2), S2=0.1 * np.eye(2),
        N1=0.3 * np.eye(2), N2=0.2 * np.eye(2), R1=ExpDiscount(0.1), R2=[[2.0]],
        G1=np.eye(2), G2=np.diag([1.0, 2.0]),
        terminal=TerminalCondition([1.0, 0.0], list(c1), [0.0, 0.0]),
    )


@pytest.fixture
def grid64():
    return TimeGrid(1.0, 64)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
