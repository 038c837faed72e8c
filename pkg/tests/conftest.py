import math

import numpy as np
import pytest

from mrmemory.flow import DoubleGyre, FieldBounds, UniformFlow, derived_fields
from mrmemory.params import ParticleParams

# bound constants of the default double gyre (frobenius norm, 801x401x128 grid)
GYRE_L_A = 0.32044245066615895
GYRE_L_B = 0.12079806224150716
GYRE_L_M = 1.4236882967263316
GYRE_L_C = 6.390161385543761


def gyre_params(R, eps=0.01):
    return ParticleParams.from_dimensionless(R, eps * R)


@pytest.fixture
def gyre():
    return DoubleGyre()


@pytest.fixture
def gyre_fields():
    def make(R, eps=0.01, faxen=False):
        return derived_fields(DoubleGyre(), gyre_params(R, eps), faxen)
    return make


@pytest.fixture
def gyre_bounds():
    def make(R):
        L_B = 0.0 if math.isclose(R, 2 / 3) else GYRE_L_B * abs(1.5 * R - 1.0) / 0.5
        return FieldBounds.from_constants(GYRE_L_A, L_B, GYRE_L_M, GYRE_L_C, R=R)
    return make


@pytest.fixture
def frozen_fields():
    def make(kappa):
        return derived_fields(UniformFlow(), ParticleParams.memoryless(1.0, 0.01, kappa=kappa))
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
