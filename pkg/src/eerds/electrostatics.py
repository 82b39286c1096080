"""Discrete Poisson operator, electrostatic energy and minimal energy.

The bilinear form is ``B(psi, phi) = int eps psi' phi' dx + sum_R omega psi phi``
on the P1 space with homogeneous Dirichlet values, or with zero mean in the
pure Neumann case. Densities ``rho`` are turned into load functionals with the
lumped weights, so ``int rho phi`` is the trapezoidal rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .discretization import PURE_NEUMANN, PURE_ROBIN, SOME_DIRICHLET, Mesh

__all__ = [
    "CompatibilityError",
    "InfeasibleError",
    "PoissonProblem",
    "AssembledOperator",
    "assemble",
    "solve_internal_potential",
    "solve_external_potential",
    "electrostatic_energy",
    "min_electro_energy",
    "minimal_energy_density",
    "total_energy",
    "total_charge",
    "dirichlet_charge_concentration",
]


class CompatibilityError(ValueError):
    """Pure Neumann data without vanishing total charge."""


class InfeasibleError(ValueError):
    """Energy budget at or below the minimal electrostatic energy."""

    def __init__(self, message, v_min=None):
        super().__init__(message)
        self.v_min = v_min


@dataclass(eq=False)
class PoissonProblem:
    """Data of the electrostatic problem on ``mesh``.

    ``permittivity`` and ``doping`` are nodal arrays (scalars are broadcast).
    ``surface_charge`` holds ``g_R`` at the left and right endpoint; it is
    ignored at Dirichlet endpoints.
    """

    mesh: Mesh
    permittivity: np.ndarray = 1.0
    doping: np.ndarray = 0.0
    surface_charge: tuple = (0.0, 0.0)

    def __post_init__(self):
        n = self.mesh.size
        self.permittivity = np.broadcast_to(np.asarray(self.permittivity, float), (n,)).copy()
        self.doping = np.broadcast_to(np.asarray(self.doping, float), (n,)).copy()
        g = tuple(float(x) for x in self.surface_charge)
        if len(g) != 2:
            raise ValueError("surface_charge needs a value per endpoint")
        self.surface_charge = g
        if np.min(self.permittivity) <= 0:
            raise ValueError("permittivity must be bounded below by a positive constant")
        if self.mesh.case == PURE_NEUMANN:
            total = self.doping @ self.mesh.weights + sum(g)
            scale = np.abs(self.doping) @ self.mesh.weights + sum(abs(x) for x in g)
            if abs(total) > 1e-10 * max(scale, 1.0):
                raise CompatibilityError(
                    f"pure Neumann data needs int D + sum g_R = 0, got {total:.3e}"
                )

    @property
    def element_permittivity(self) -> np.ndarray:
        return self.mesh.element_average(self.permittivity)

    def boundary_load(self) -> np.ndarray:
        out = np.zeros(self.mesh.size)
        for i, bc, g in zip(self.mesh.endpoint_indices, self.mesh.boundary, self.surface_charge):
            if not bc.is_dirichlet:
                out[i] += g
        return out


@dataclass(eq=False)
class AssembledOperator:
    """Matrix of the bilinear form together with its constraint handling."""

    mesh: Mesh
    matrix: np.ndarray
    problem: PoissonProblem = None
    _factor: object = field(default=None, repr=False)
    _solution_matrix: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.case = self.mesh.case
        self.free = self.mesh.free_nodes
        a = self.matrix
        if self.case == PURE_NEUMANN:
            m = self.mesh.weights
            n = self.mesh.size
            bordered = np.zeros((n + 1, n + 1))
            bordered[:n, :n] = a
            bordered[:n, n] = m
            bordered[n, :n] = m
            self._factor = linalg.lu_factor(bordered)
        else:
            sub = a[np.ix_(self.free, self.free)]
            self._factor = linalg.cho_factor(sub)

    @property
    def weights(self) -> np.ndarray:
        return self.mesh.weights

    def apply(self, psi) -> np.ndarray:
        """Load vector ``phi -> B(psi, phi)`` of a nodal function."""
        return self.matrix @ np.asarray(psi, dtype=float)

    def bilinear(self, f, g=None) -> float:
        f = np.asarray(f, dtype=float)
        g = f if g is None else np.asarray(g, dtype=float)
        return float(f @ (self.matrix @ g))

    def project(self, psi) -> np.ndarray:
        """Map a nodal function into the constrained space."""
        psi = np.array(psi, dtype=float)
        if self.case == PURE_NEUMANN:
            m = self.weights
            return psi - (m @ psi) / m.sum()
        psi[self.mesh.dirichlet_nodes] = 0.0
        return psi

    def check_load(self, load):
        if self.case == PURE_NEUMANN:
            total = float(np.sum(load))
            if abs(total) > 1e-10 * max(np.sum(np.abs(load)), 1e-300):
                raise CompatibilityError(
                    f"pure Neumann problem needs a load with zero total, got {total:.3e}"
                )

    def solve(self, load, check=True) -> np.ndarray:
        """Solve ``B(psi, phi) = load(phi)`` for all admissible ``phi``.

        ``load`` may have shape ``(N,)`` or ``(N, k)``.
        """
        load = np.asarray(load, dtype=float)
        if check:
            self.check_load(load)
        n = self.mesh.size
        if self.case == PURE_NEUMANN:
            rhs = np.zeros((n + 1,) + load.shape[1:])
            rhs[:n] = load
            return linalg.lu_solve(self._factor, rhs)[:n]
        out = np.zeros_like(load)
        out[self.free] = linalg.cho_solve(self._factor, load[self.free])
        return out

    def solution_matrix(self) -> np.ndarray:
        """Dense ``G`` with ``psi = G @ load`` for admissible loads."""
        if self._solution_matrix is None:
            n = self.mesh.size
            g = self.solve(np.eye(n), check=False)
            self._solution_matrix = 0.5 * (g + g.T)
        return self._solution_matrix

    def load_from_density(self, rho) -> np.ndarray:
        """Lumped load ``phi -> int rho phi``."""
        rho = np.asarray(rho, dtype=float)
        return rho * (self.weights if rho.ndim == 1 else self.weights[:, None])

    def dual_norm(self, rho) -> float:
        """``sqrt(<rho, L^-1 rho>)`` of a density."""
        load = self.load_from_density(rho)
        return float(np.sqrt(max(load @ self.solve(load), 0.0)))

    def coercivity_constant(self) -> float:
        """Smallest ``<L psi, psi> / |psi|_{H1}^2`` over the constrained space."""
        mesh = self.mesh
        gram = (mesh.stiffness_matrix() + mesh.mass_matrix()).toarray()
        if self.case == PURE_NEUMANN:
            basis = linalg.null_space(mesh.weights[None, :])
        else:
            basis = np.eye(mesh.size)[:, self.free]
        a = basis.T @ self.matrix @ basis
        b = basis.T @ gram @ basis
        return float(linalg.eigh(a, b, eigvals_only=True, subset_by_index=[0, 0])[0])


def assemble(problem: PoissonProblem) -> AssembledOperator:
    """Stiffness matrix of ``eps`` plus the Robin endpoint terms."""
    mesh = problem.mesh
    a = mesh.stiffness_matrix(problem.element_permittivity).toarray()
    a[np.diag_indices_from(a)] += mesh.boundary_weights()
    return AssembledOperator(mesh, a, problem)


def solve_internal_potential(operator: AssembledOperator, rho) -> np.ndarray:
    return operator.solve(operator.load_from_density(rho))


def solve_external_potential(operator: AssembledOperator, doping=None, surface_charge=None) -> np.ndarray:
    """Potential generated by the doping and the Robin surface charge."""
    problem = operator.problem
    if doping is None:
        doping = problem.doping
    if surface_charge is None:
        bload = problem.boundary_load()
    else:
        bload = np.zeros(operator.mesh.size)
        for i, bc, g in zip(operator.mesh.endpoint_indices, operator.mesh.boundary, surface_charge):
            if not bc.is_dirichlet:
                bload[i] += g
    return operator.solve(operator.load_from_density(doping) + bload)


def electrostatic_energy(operator: AssembledOperator, rho, psi_ext, check=True) -> float:
    """``1/2 B(psi_rho + psi_ext)``; the three-term expansion is cross-checked."""
    load = operator.load_from_density(rho)
    psi_rho = operator.solve(load)
    psi_ext = np.asarray(psi_ext, dtype=float)
    total = psi_rho + psi_ext
    value = 0.5 * operator.bilinear(total)
    if check:
        expanded = 0.5 * operator.bilinear(psi_rho) + load @ psi_ext + 0.5 * operator.bilinear(psi_ext)
        scale = max(abs(value), abs(expanded), 0.5 * operator.bilinear(psi_ext), 1.0)
        if abs(value - expanded) > 1e-10 * scale:
            raise ArithmeticError("electrostatic energy expansion mismatch")
    return value


def min_electro_energy(operator_or_mesh, q0, psi_ext):
    """Minimal electrostatic energy ``V`` and, in the pure Robin case, ``kappa*``."""
    mesh = operator_or_mesh if isinstance(operator_or_mesh, Mesh) else operator_or_mesh.mesh
    case = mesh.case
    if case == SOME_DIRICHLET:
        return 0.0, None
    if case == PURE_NEUMANN:
        if q0 != 0:
            raise ValueError("pure Neumann case requires Q0 = 0")
        return 0.0, None
    psi_ext = np.asarray(psi_ext, dtype=float)
    omega = mesh.boundary_weights()
    total = float(q0 + omega @ psi_ext)
    osum = mesh.omega_sum
    return total**2 / (2 * osum), total / osum


def minimal_energy_density(operator: AssembledOperator, q0, psi_ext) -> np.ndarray:
    """Nodal density ``rho`` with ``int rho = Q0`` attaining ``V`` on the discrete level.

    Pure Robin: ``rho = M^-1 L (kappa* - psi_ext)``. Otherwise
    ``rho = -M^-1 L psi_ext``; with a Dirichlet endpoint the remaining charge
    ``Q0 - int rho`` sits on the Dirichlet node, which carries no potential.
    """
    mesh = operator.mesh
    psi_ext = np.asarray(psi_ext, dtype=float)
    m = mesh.weights
    if mesh.case == PURE_ROBIN:
        _, kappa = min_electro_energy(mesh, q0, psi_ext)
        return operator.apply(kappa - psi_ext) / m
    if mesh.case == PURE_NEUMANN and q0 != 0:
        raise ValueError("pure Neumann case requires Q0 = 0")
    load = -operator.apply(psi_ext)
    if mesh.case == SOME_DIRICHLET:
        d = mesh.dirichlet_nodes
        load[d] = 0.0
        load[d[0]] = q0 - load.sum()
    return load / m


def total_charge(mesh: Mesh, c, charges) -> float:
    """``int q.c`` with the lumped weights."""
    rho = np.asarray(c, dtype=float) @ np.asarray(charges, dtype=float)
    return float(mesh.weights @ rho)


def total_energy(operator: AssembledOperator, c, u, psi_ext, charges) -> float:
    """``1/2 B(psi_c + psi_ext) + int u``."""
    rho = np.asarray(c, dtype=float) @ np.asarray(charges, dtype=float)
    return electrostatic_energy(operator, rho, psi_ext, check=False) + float(operator.weights @ u)


def dirichlet_charge_concentration(mesh: Mesh, n: float) -> np.ndarray:
    """Unit-charge density concentrated within ``1/n`` of the Dirichlet endpoint.

    The profile is the nodal indicator of the open strip, normalised so that
    its trapezoidal integral equals one.
    """
    d = mesh.dirichlet_nodes
    if d.size == 0:
        raise ValueError("no Dirichlet endpoint")
    xd = mesh.nodes[d[0]]
    dist = np.abs(mesh.nodes - xd)
    inside = (dist > 0) & (dist < 1.0 / n - 1e-12 * mesh.length)
    if np.count_nonzero(inside) < 2:
        raise ValueError(f"strip of width 1/{n} is not resolved by the mesh")
    rho = inside.astype(float)
    return rho / (mesh.weights @ rho)
