import numpy as np
import pytest

from backward_mfg.model import ModelParams, TimeGrid, reference_example


@pytest.fixture
def example():
    return reference_example()


@pytest.fixture
def social_example():
    return reference_example(Gamma1=-0.5, Gamma0=-0.5)


@pytest.fixture
def zero_weight():
    """No running, terminal-offset or initial costs beyond the control penalty."""
    return reference_example(Q=0.0, G=0.0, H=0.0, f=0.0, eta1=0.0, eta0=0.0, alpha=0.0, c=0.0)


@pytest.fixture
def two_dim():
    """Nonsymmetric drift and coupling matrices, all terms active."""
    return ModelParams.build(
        n=2, r=1, N=20, T=1.0,
        A=[[0.1, 0.4], [-0.3, 0.2]], B=[[1.0], [0.5]], C=[[0.3, 0.1], [0.0, 0.2]],
        Q=[[1.0, 0.2], [0.2, 0.5]], R=2.0, H=[[0.5, 0.0], [0.0, 0.3]],
        G=[[1.0, 0.1], [0.1, 0.8]], Gamma1=[[0.3, 0.1], [0.0, 0.2]], eta1=[1.0, -0.5],
        Gamma0=[[0.2, 0.0], [0.1, 0.3]], eta0=[0.5, 0.2], f=[0.1, -0.2],
        alpha=[[1.0], [0.5]], c=[0.2, -0.1],
    )


@pytest.fixture
def two_dim_social(two_dim):
    return two_dim.replace(Gamma1=[[-0.3, 0.1], [0.0, -0.2]], Gamma0=[[-0.2, 0.0], [0.1, -0.3]])


def grid(steps, T=1.0):
    return TimeGrid(T, steps)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
