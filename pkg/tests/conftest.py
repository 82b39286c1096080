"""Shared fixtures: the canonical bipolar scenario and its dual solution."""

from pathlib import Path

import numpy as np
import pytest

from eerds.discretization import build_uniform_mesh
from eerds.dual import DualProblem, solve_dual
from eerds.electrostatics import PoissonProblem, assemble, solve_external_potential
from eerds.entropy import BoltzmannEntropyModel
from eerds.evolution import EvolutionProblem, MobilityModel, ReactionNetwork

CANONICAL = Path(__file__).resolve().parents[1] / "src" / "eerds" / "scenarios" / "canonical.toml"
ROBIN = (("robin", 1.0), ("robin", 1.0))


def canonical_problem(n=401, boundary=ROBIN, E0=5.0, Q0=0.0, delta=0.0):
    mesh = build_uniform_mesh(0.0, 1.0, n, boundary)
    op = assemble(PoissonProblem(mesh, 1.0, mesh.nodes - 0.5))
    model = BoltzmannEntropyModel.unit((-1.0, 1.0))
    return DualProblem(model, op, E0, Q0, solve_external_potential(op), delta)


def pair_network():
    """Charge-neutral pair reaction (empty) <=> C1 + C2."""
    return ReactionNetwork([[0, 0]], [[1, 1]], [1.0])


def evolution_problem(dual_problem, network=None):
    return EvolutionProblem(dual_problem.model, dual_problem.operator, dual_problem.psi_ext,
                            pair_network() if network is None else network, MobilityModel((1.0, 1.0), 1.0))


@pytest.fixture(scope="session")
def canonical():
    return canonical_problem()


@pytest.fixture(scope="session")
def canonical_solution(canonical):
    return solve_dual(canonical)


@pytest.fixture(scope="session")
def small():
    return canonical_problem(101)


@pytest.fixture(scope="session")
def small_solution(small):
    return solve_dual(small)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
