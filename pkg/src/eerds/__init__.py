"""Constrained entropy-maximising equilibria of electro-energy-reaction-diffusion systems."""

__version__ = "0.1.0"

from .direct import cross_validate, feasible_point, maximize_entropy, maximize_entropy_regularized
from .discretization import BoundaryCondition, Mesh, build_uniform_mesh
from .dual import DualPoint, DualProblem, minimize_k, minimize_k_regularized, recover_state, solve_dual
from .electrostatics import PoissonProblem, assemble, min_electro_energy, solve_external_potential
from .entropy import BoltzmannEntropyModel, MoreauEnvelope, SizeExclusionEntropyModel, legendre_oracle
from .evolution import EvolutionProblem, MobilityModel, ReactionNetwork, evolve, initial_state
from .scenario import Scenario, load_scenario, parse_scenario

__all__ = [
    "BoltzmannEntropyModel",
    "BoundaryCondition",
    "DualPoint",
    "DualProblem",
    "EvolutionProblem",
    "Mesh",
    "MobilityModel",
    "MoreauEnvelope",
    "PoissonProblem",
    "ReactionNetwork",
    "Scenario",
    "SizeExclusionEntropyModel",
    "assemble",
    "build_uniform_mesh",
    "cross_validate",
    "evolve",
    "feasible_point",
    "initial_state",
    "legendre_oracle",
    "load_scenario",
    "maximize_entropy",
    "maximize_entropy_regularized",
    "min_electro_energy",
    "minimize_k",
    "minimize_k_regularized",
    "parse_scenario",
    "recover_state",
    "solve_dual",
    "solve_external_potential",
]
