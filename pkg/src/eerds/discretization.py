"""One-dimensional P1 finite elements: meshes, quadrature, fields and norms.

Integrals of nodal data use the lumped (trapezoidal) weights ``Mesh.weights``,
which are exact for piecewise-linear integrands. Norms of P1 functions use
the consistent mass and stiffness matrices and are therefore exact.
Boundary integrals over the Robin part reduce to sums over the endpoints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

__all__ = [
    "DIRICHLET",
    "ROBIN",
    "NEUMANN",
    "BoundaryCondition",
    "Mesh",
    "Field",
    "SpeciesField",
    "build_uniform_mesh",
    "build_mesh",
    "integrate",
    "l2_norm",
    "h1_seminorm",
    "linf_norm",
    "l2_error",
    "write_fields_csv",
]

DIRICHLET = "dirichlet"
ROBIN = "robin"
NEUMANN = "neumann"

SOME_DIRICHLET = "some_dirichlet"
PURE_NEUMANN = "pure_neumann"
PURE_ROBIN = "pure_robin"

_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(5)


@dataclass(frozen=True)
class BoundaryCondition:
    """Condition at one endpoint. Neumann is Robin with ``omega = 0``."""

    kind: str
    omega: float = 0.0

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in (DIRICHLET, ROBIN, NEUMANN):
            raise ValueError(f"unknown boundary kind {self.kind!r}")
        if self.omega < 0:
            raise ValueError("Robin weight omega must be nonnegative")
        if kind == NEUMANN and self.omega != 0:
            raise ValueError("Neumann boundary has omega = 0")
        if kind == ROBIN and self.omega == 0:
            kind = NEUMANN
        object.__setattr__(self, "kind", kind)

    @classmethod
    def dirichlet(cls):
        return cls(DIRICHLET)

    @classmethod
    def robin(cls, omega):
        return cls(ROBIN, float(omega))

    @classmethod
    def neumann(cls):
        return cls(NEUMANN)

    @property
    def is_dirichlet(self) -> bool:
        return self.kind == DIRICHLET

    @property
    def weight(self) -> float:
        return 0.0 if self.is_dirichlet else self.omega


def _coerce_bc(bc) -> BoundaryCondition:
    if isinstance(bc, BoundaryCondition):
        return bc
    if isinstance(bc, str):
        return BoundaryCondition(bc)
    kind, omega = bc
    return BoundaryCondition(kind, float(omega))


@dataclass(frozen=True, eq=False)
class Mesh:
    """Partition of ``(x_L, x_R)`` with one boundary condition per endpoint."""

    nodes: np.ndarray
    boundary: tuple
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("a mesh needs at least two nodes")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("mesh nodes must be strictly increasing")
        nodes = nodes.copy()
        nodes.setflags(write=False)
        bcs = tuple(_coerce_bc(b) for b in self.boundary)
        if len(bcs) != 2:
            raise ValueError("boundary needs one condition per endpoint")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "boundary", bcs)
        h = np.diff(nodes)
        m = np.zeros_like(nodes)
        m[:-1] += h / 2
        m[1:] += h / 2
        m.setflags(write=False)
        object.__setattr__(self, "weights", m)

    @property
    def size(self) -> int:
        return self.nodes.size

    @property
    def element_count(self) -> int:
        return self.nodes.size - 1

    @property
    def h(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def hmax(self) -> float:
        return float(self.h.max())

    @property
    def length(self) -> float:
        return float(self.nodes[-1] - self.nodes[0])

    @property
    def endpoint_indices(self):
        return (0, self.size - 1)

    @property
    def case(self) -> str:
        """``some_dirichlet``, ``pure_neumann`` or ``pure_robin``."""
        if any(b.is_dirichlet for b in self.boundary):
            return SOME_DIRICHLET
        if self.omega_sum == 0:
            return PURE_NEUMANN
        return PURE_ROBIN

    @property
    def omega_sum(self) -> float:
        return float(sum(b.weight for b in self.boundary))

    @property
    def dirichlet_nodes(self) -> np.ndarray:
        return np.array([i for i, b in zip(self.endpoint_indices, self.boundary) if b.is_dirichlet], dtype=int)

    @property
    def free_nodes(self) -> np.ndarray:
        mask = np.ones(self.size, dtype=bool)
        mask[self.dirichlet_nodes] = False
        return np.flatnonzero(mask)

    def boundary_weights(self) -> np.ndarray:
        """Nodal vector holding ``omega`` at non-Dirichlet endpoints."""
        out = np.zeros(self.size)
        for i, b in zip(self.endpoint_indices, self.boundary):
            out[i] += b.weight
        return out

    def element_average(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return 0.5 * (values[..., :-1] + values[..., 1:])

    def gradient(self, values) -> np.ndarray:
        """Elementwise derivative of a P1 function."""
        return np.diff(np.asarray(values, dtype=float), axis=-1) / self.h

    def stiffness_matrix(self, coefficient=None) -> sparse.csr_matrix:
        """``int a u' v'`` with ``a`` elementwise (default 1)."""
        h = self.h
        a = np.ones_like(h) if coefficient is None else np.asarray(coefficient, dtype=float)
        if a.shape != h.shape:
            raise ValueError("stiffness coefficient must be given per element")
        k = a / h
        n = self.size
        diag = np.zeros(n)
        diag[:-1] += k
        diag[1:] += k
        return sparse.diags([-k, diag, -k], [-1, 0, 1], shape=(n, n), format="csr")

    def mass_matrix(self) -> sparse.csr_matrix:
        """Consistent P1 mass matrix."""
        h = self.h
        n = self.size
        diag = np.zeros(n)
        diag[:-1] += h / 3
        diag[1:] += h / 3
        off = h / 6
        return sparse.diags([off, diag, off], [-1, 0, 1], shape=(n, n), format="csr")

    def interpolate(self, func) -> np.ndarray:
        return np.asarray(func(self.nodes), dtype=float) * np.ones(self.size)

    def same_as(self, other) -> bool:
        return self is other or (
            self.size == other.size
            and np.array_equal(self.nodes, other.nodes)
            and self.boundary == other.boundary
        )


def build_mesh(nodes, boundary) -> Mesh:
    return Mesh(np.asarray(nodes, dtype=float), tuple(boundary))


def build_uniform_mesh(x_left, x_right, n, boundary) -> Mesh:
    """Uniform mesh with ``n`` nodes on ``(x_left, x_right)``."""
    if not x_right > x_left:
        raise ValueError("need x_left < x_right")
    if int(n) != n or n < 2:
        raise ValueError("need at least two nodes")
    return Mesh(np.linspace(x_left, x_right, int(n)), tuple(boundary))


@dataclass(frozen=True, eq=False)
class Field:
    """Nodal values of a P1 function on ``mesh``."""

    mesh: Mesh
    values: np.ndarray
    name: str = "value"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.mesh.size,):
            raise ValueError("field length must equal the node count")
        object.__setattr__(self, "values", values)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True, eq=False)
class SpeciesField:
    """``I`` concentration fields on one mesh, stored as an ``(N, I)`` array."""

    mesh: Mesh
    values: np.ndarray
    charges: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        charges = np.atleast_1d(np.asarray(self.charges, dtype=float))
        if values.ndim != 2 or values.shape[0] != self.mesh.size:
            raise ValueError("species field must have shape (N, I)")
        if values.shape[1] != charges.size or charges.size < 1:
            raise ValueError("one charge per species is required")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "charges", charges)

    @property
    def species_count(self) -> int:
        return self.charges.size

    def charge_density(self) -> np.ndarray:
        return self.values @ self.charges

    def species(self, i) -> Field:
        return Field(self.mesh, self.values[:, i], f"c{i + 1}")


def _values(mesh, f):
    if isinstance(f, (Field, SpeciesField)):
        if not f.mesh.same_as(mesh):
            raise ValueError("field lives on a different mesh")
        return f.values
    arr = np.asarray(f, dtype=float)
    if arr.shape[0] != mesh.size:
        raise ValueError("field length does not match the mesh")
    return arr


def integrate(mesh: Mesh, *factors) -> float:
    """Trapezoidal integral of the nodewise product of ``factors``."""
    prod = np.ones(mesh.size)
    for f in factors:
        vals = _values(mesh, f)
        prod = prod * vals if vals.ndim == 1 else prod[:, None] * vals
    return np.tensordot(mesh.weights, prod, axes=(0, 0))


def l2_norm(mesh: Mesh, f) -> float:
    v = _values(mesh, f)
    return float(np.sqrt(max(v @ (mesh.mass_matrix() @ v), 0.0)))


def h1_seminorm(mesh: Mesh, f) -> float:
    v = _values(mesh, f)
    return float(np.sqrt(np.sum(mesh.h * mesh.gradient(v) ** 2)))


def linf_norm(mesh: Mesh, f) -> float:
    return float(np.max(np.abs(_values(mesh, f))))


def l2_error(mesh: Mesh, f, exact) -> float:
    """L2 distance between the P1 function ``f`` and a callable, by Gauss quadrature."""
    v = _values(mesh, f)
    a, b = mesh.nodes[:-1], mesh.nodes[1:]
    t = 0.5 * (_GAUSS_X + 1.0)
    x = a[:, None] + (b - a)[:, None] * t
    fh = v[:-1, None] * (1 - t) + v[1:, None] * t
    err = (fh - exact(x)) ** 2
    return float(np.sqrt(np.sum(0.5 * (b - a) * (err @ _GAUSS_W))))


def write_fields_csv(path, mesh: Mesh, columns: dict, fmt="%.17g"):
    """Write ``x`` plus named nodal columns to ``path``."""
    path = Path(path)
    names = list(columns)
    data = [np.asarray(columns[k], dtype=float) for k in names]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", *names])
        for j, x in enumerate(mesh.nodes):
            writer.writerow([fmt % x, *(fmt % d[j] for d in data)])
    return path
