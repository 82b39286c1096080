"""Scenario files: TOML parsing, validation and construction of the numerical objects.

A scenario has the sections ``[mesh]``, ``[boundary]``, ``[profiles]``,
``[entropy]``, ``[reactions]``, ``[evolution]``, ``[constraints]``,
``[solver]`` and ``[stages]``. Profiles are type-tagged tables::

    permittivity = { type = "constant", value = 1.0 }
    doping = { type = "linear", slope = 1.0, intercept = -0.5 }
    doping = { type = "tabulated", x = [0.0, 1.0], values = [-0.5, 0.5] }
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from .discretization import BoundaryCondition, build_uniform_mesh
from .electrostatics import PoissonProblem, assemble, solve_external_potential
from .entropy import BoltzmannEntropyModel, SizeExclusionEntropyModel
from .evolution import MobilityModel, ReactionNetwork

__all__ = ["ScenarioError", "Scenario", "load_scenario", "parse_scenario", "STAGES"]

STAGES = ("electro", "dual", "direct", "evolve")

_SECTIONS = {"name", "mesh", "boundary", "profiles", "entropy", "reactions", "evolution",
             "constraints", "solver", "stages"}


class ScenarioError(ValueError):
    """Invalid scenario; the message names the offending field."""


def _get(table, key, path, kind=float, default=None, required=False):
    if key not in table:
        if required:
            raise ScenarioError(f"{path}.{key}: missing required field")
        return default
    value = table[key]
    try:
        if kind is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind is int:
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is list:
            return [float(v) for v in value]
        if kind is str:
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        raise ScenarioError(f"{path}.{key}: expected {kind.__name__}, got {value!r}") from None
    return value


def _profile(entry, path, nodes):
    """Evaluate a profile table at ``nodes``."""
    if isinstance(entry, (int, float)) and not isinstance(entry, bool):
        return np.full(nodes.size, float(entry))
    if not isinstance(entry, dict):
        raise ScenarioError(f"{path}: expected a number or a profile table")
    kind = _get(entry, "type", path, str, required=True)
    if kind == "constant":
        return np.full(nodes.size, _get(entry, "value", path, required=True))
    if kind == "linear":
        slope = _get(entry, "slope", path, default=0.0)
        intercept = _get(entry, "intercept", path, default=0.0)
        return slope * nodes + intercept
    if kind == "tabulated":
        xs = np.asarray(_get(entry, "x", path, list, required=True))
        vs = np.asarray(_get(entry, "values", path, list, required=True))
        if xs.size != vs.size or xs.size < 2 or np.any(np.diff(xs) <= 0):
            raise ScenarioError(f"{path}: tabulated profile needs matching, increasing x and values")
        return np.interp(nodes, xs, vs)
    raise ScenarioError(f"{path}.type: unknown profile type {kind!r}")


@dataclass
class Scenario:
    """Validated scenario with its derived numerical objects."""

    name: str
    raw: dict
    mesh: object
    problem: PoissonProblem
    model: object
    network: ReactionNetwork
    mobility: MobilityModel
    E0: float
    Q0: float
    solver: dict
    evolution: dict
    stages: dict
    _operator: object = field(default=None, repr=False)
    _psi_ext: np.ndarray = field(default=None, repr=False)

    @property
    def operator(self):
        if self._operator is None:
            self._operator = assemble(self.problem)
        return self._operator

    @property
    def psi_ext(self):
        if self._psi_ext is None:
            self._psi_ext = solve_external_potential(self.operator)
        return self._psi_ext

    def enabled(self, stage):
        return bool(self.stages.get(stage, False))


def _boundary(table, side):
    path = f"boundary.{side}"
    entry = table.get(side)
    if entry is None:
        raise ScenarioError(f"{path}: missing boundary condition")
    if isinstance(entry, str):
        entry = {"kind": entry}
    kind = _get(entry, "kind", path, str, required=True)
    omega = _get(entry, "omega", path, default=0.0)
    g = _get(entry, "g", path, default=0.0)
    try:
        bc = BoundaryCondition(kind, omega)
    except ValueError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    return bc, g


def parse_scenario(data: dict, name="scenario") -> Scenario:
    unknown = set(data) - _SECTIONS
    if unknown:
        raise ScenarioError(f"unknown section(s): {', '.join(sorted(unknown))}")
    name = data.get("name", name)

    mesh_t = data.get("mesh", {})
    x_left = _get(mesh_t, "x_left", "mesh", default=0.0)
    x_right = _get(mesh_t, "x_right", "mesh", default=1.0)
    nodes = _get(mesh_t, "nodes", "mesh", int, required=True)
    bnd = data.get("boundary", {})
    (bl, gl), (br, gr) = _boundary(bnd, "left"), _boundary(bnd, "right")
    try:
        mesh = build_uniform_mesh(x_left, x_right, nodes, (bl, br))
    except ValueError as exc:
        raise ScenarioError(f"mesh: {exc}") from None

    prof = data.get("profiles", {})
    eps = _profile(prof.get("permittivity", 1.0), "profiles.permittivity", mesh.nodes)
    doping = _profile(prof.get("doping", 0.0), "profiles.doping", mesh.nodes)
    try:
        problem = PoissonProblem(mesh, eps, doping, (gl, gr))
    except ValueError as exc:
        raise ScenarioError(f"profiles: {exc}") from None

    ent = data.get("entropy", {})
    family = _get(ent, "family", "entropy", str, default="boltzmann")
    charges = _get(ent, "charges", "entropy", list, required=True)
    alpha = _get(ent, "alpha", "entropy", default=0.5)
    beta0 = _get(ent, "beta0", "entropy", default=1.0)
    try:
        if family == "boltzmann":
            beta = _get(ent, "beta", "entropy", list, default=[1.0] * len(charges))
            if len(beta) != len(charges):
                raise ScenarioError("entropy.beta: needs one entry per species")
            model = BoltzmannEntropyModel(beta0, beta, _get(ent, "w0", "entropy", default=1.0), alpha, charges)
        elif family == "size_exclusion":
            beta0 = _get(ent, "beta0", "entropy", default=float(len(charges)))
            model = SizeExclusionEntropyModel(beta0, alpha, charges)
            if not model.convexity_certified:
                raise ScenarioError("entropy.beta0: the size-exclusion entropy needs beta0 >= number of species")
        else:
            raise ScenarioError(f"entropy.family: unknown family {family!r}")
    except ScenarioError:
        raise
    except ValueError as exc:
        raise ScenarioError(f"entropy: {exc}") from None
    species = len(charges)

    rx = data.get("reactions", {})
    if rx:
        try:
            network = ReactionNetwork(rx.get("alpha"), rx.get("beta"), rx.get("rates"))
            if network.alpha.shape[1] != species:
                raise ValueError("stoichiometry needs one column per species")
            network.validate(charges, bool(rx.get("single_conservation", False)))
        except (ValueError, TypeError) as exc:
            raise ScenarioError(f"reactions: {exc}") from None
    else:
        network = ReactionNetwork.empty(species)

    ev = data.get("evolution", {})
    try:
        mobility = MobilityModel(
            tuple(_get(ev, "diffusivity", "evolution", list, default=[1.0] * species)),
            _get(ev, "conductivity", "evolution", default=1.0),
        )
    except ValueError as exc:
        raise ScenarioError(f"evolution: {exc}") from None
    evolution = {
        "T": _get(ev, "T", "evolution", default=200.0),
        "dt": _get(ev, "dt", "evolution", default=1e-3),
        "tol": _get(ev, "tol", "evolution", default=1e-6),
        "floor": _get(ev, "floor", "evolution", default=None),
    }

    con = data.get("constraints", {})
    E0 = _get(con, "E0", "constraints", required=True)
    Q0 = _get(con, "Q0", "constraints", default=0.0)
    if mesh.case == "pure_neumann" and Q0 != 0:
        raise ScenarioError("constraints.Q0: pure Neumann scenarios require Q0 = 0")

    sol = data.get("solver", {})
    solver = {
        "tol_grad": _get(sol, "tol_grad", "solver", default=1e-8),
        "max_iter": _get(sol, "max_iter", "solver", int, default=200),
        "direct_tol": _get(sol, "direct_tol", "solver", default=1e-8),
        "seed": _get(sol, "seed", "solver", int, default=0),
        "deltas": _get(sol, "deltas", "solver", list, default=[]),
    }

    st = data.get("stages", {})
    unknown = set(st) - set(STAGES)
    if unknown:
        raise ScenarioError(f"stages: unknown stage(s) {', '.join(sorted(unknown))}")
    stages = {s: _get(st, s, "stages", bool, default=(s != "evolve")) for s in STAGES}
    if family != "boltzmann" and stages["dual"]:
        raise ScenarioError("stages.dual: the dual route needs the Boltzmann family")

    return Scenario(name, data, mesh, problem, model, network, mobility, E0, Q0, solver, evolution, stages)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"{path}: {exc.strerror}") from None
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    return parse_scenario(data, name=path.stem)
