"""Time-dependent electro-energy-reaction-diffusion system as an entropic gradient flow.

The rate equation is ``Z' = d_W P*(Z; W)`` with thermodynamic driving force
``W = DS(Z)`` and the dual dissipation potential ``P* = P*_diff + P*_reac``:

* diffusion: ``1/2 int X : M X`` with ``X = (grad W_c - W_u q (x) grad Psi, grad W_u)``
  and a diagonal mobility ``M = diag(d_i c_i, k_h u)``,
* reactions: ``sum_r k_r prod_i (c_i / w_i(u))^((alpha_i + beta_i)/2) C*(gamma_r . W_c)``
  with ``C*(xi) = 4 cosh(xi / 2) - 4``.

Time stepping solves, for the unknown ``W^{n+1}`` and ``Psi^{n+1}``,

    M_lumped (Z(W^{n+1}) - Z^n) / dt = d_W P*_h(Z^n; W^{n+1}, (Psi^n + Psi^{n+1}) / 2),

where ``Z(W) = DH*(-W)`` and the mobility and reaction prefactor are frozen at
``Z^n``. Concavity of ``S`` gives entropy growth, the midpoint potential makes
the energy exactly conserved and the flux form conserves the charge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .discretization import PURE_NEUMANN

__all__ = [
    "ReactionNetwork",
    "MobilityModel",
    "EvolutionProblem",
    "EvolutionState",
    "Trajectory",
    "StepFailure",
    "reactive_rate",
    "diffusive_rate",
    "total_rate",
    "step",
    "evolve",
    "initial_state",
    "relative_l1",
]

COMPLEX_STEP = 1e-30


class StepFailure(RuntimeError):
    """Time step underflow: the nonlinear solve keeps failing."""


@dataclass(frozen=True, eq=False)
class ReactionNetwork:
    """Reversible mass-action reactions ``alpha^r C <=> beta^r C``."""

    alpha: np.ndarray
    beta: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        alpha = np.atleast_2d(np.asarray(self.alpha, dtype=float))
        beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        rates = np.atleast_1d(np.asarray(self.rates, dtype=float))
        if alpha.shape != beta.shape or alpha.shape[0] != rates.size:
            raise ValueError("alpha, beta and rates must describe the same reactions")
        if np.any(alpha < 0) or np.any(beta < 0):
            raise ValueError("stoichiometric coefficients must be nonnegative")
        if np.any(rates <= 0):
            raise ValueError("reaction rates must be positive")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "rates", rates)

    @classmethod
    def empty(cls, species_count):
        return cls(np.zeros((0, species_count)), np.zeros((0, species_count)), np.zeros(0))

    @property
    def gamma(self) -> np.ndarray:
        """Matrix ``Gamma`` with rows ``gamma^r = beta^r - alpha^r``."""
        return self.beta - self.alpha

    @property
    def count(self) -> int:
        return self.rates.size

    def validate(self, charges, single_conservation=False):
        """Check ``gamma^r . q = 0`` and optionally ``ker Gamma = span q``."""
        q = np.asarray(charges, dtype=float)
        if self.alpha.shape[1] != q.size:
            raise ValueError("reaction network and charges disagree on the species count")
        defect = self.gamma @ q
        if np.any(np.abs(defect) > 1e-12):
            raise ValueError(f"reactions do not conserve charge: gamma.q = {defect}")
        if single_conservation:
            rank = np.linalg.matrix_rank(self.gamma) if self.count else 0
            if rank != q.size - 1 or not np.any(q):
                raise ValueError("ker Gamma is not spanned by q alone")
        return self


@dataclass(frozen=True)
class MobilityModel:
    """Diagonal mobility ``d_i = dbar_i c_i`` and heat conductivity ``k_h = kbar u``."""

    diffusivity: tuple
    conductivity: float = 1.0

    def __post_init__(self):
        d = tuple(float(x) for x in np.atleast_1d(self.diffusivity))
        if any(x <= 0 for x in d) or self.conductivity <= 0:
            raise ValueError("mobility constants must be positive")
        object.__setattr__(self, "diffusivity", d)

    def element_coefficients(self, mesh, c, u):
        """Lagged element mobilities ``(d (E, I), k (E,))``."""
        d = mesh.element_average(np.asarray(c).T).T * np.asarray(self.diffusivity)
        k = self.conductivity * mesh.element_average(np.asarray(u))
        return d, k


@dataclass(eq=False)
class EvolutionProblem:
    model: object
    operator: object
    psi_ext: np.ndarray
    network: ReactionNetwork
    mobility: MobilityModel

    def __post_init__(self):
        self.psi_ext = np.asarray(self.psi_ext, dtype=float)
        self.mesh = self.operator.mesh
        self.network.validate(self.model.charges)
        if len(self.mobility.diffusivity) == 1 and self.model.species_count > 1:
            self.mobility = MobilityModel(self.mobility.diffusivity * self.model.species_count,
                                          self.mobility.conductivity)
        if len(self.mobility.diffusivity) != self.model.species_count:
            raise ValueError("one diffusivity per species is required")

    def potential(self, c):
        op = self.operator
        return op.solve(op.load_from_density(np.asarray(c) @ self.model.charges), check=False) + self.psi_ext

    def entropy(self, c, u):
        return float(self.mesh.weights @ self.model.entropy(c, u))

    def energy(self, c, u):
        psi = self.potential(c)
        return 0.5 * self.operator.bilinear(psi) + float(self.mesh.weights @ u)

    def charge(self, c):
        return float(self.mesh.weights @ (np.asarray(c) @ self.model.charges))


@dataclass(frozen=True, eq=False)
class EvolutionState:
    c: np.ndarray
    u: np.ndarray
    Psi: np.ndarray
    t: float = 0.0


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    entropy: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    charge: list = field(default_factory=list)
    distance: list = field(default_factory=list)
    dt: list = field(default_factory=list)

    @property
    def final(self) -> EvolutionState:
        return self.states[-1]

    def entropy_increments(self):
        return np.diff(self.entropy)

    def rows(self):
        for k, t in enumerate(self.times):
            yield t, self.entropy[k], self.energy[k], self.charge[k], self.distance[k]


def _reaction_prefactors(network, model, c, u):
    y, _ = model.neg_gradient(c, u)
    return network.rates * np.exp(y @ (0.5 * (network.alpha + network.beta)).T)


def _reaction_from_force(network, prefactor, wc):
    """``sum_r pref_r C*'(gamma_r . W_c) gamma_r`` nodewise."""
    if network.count == 0:
        return np.zeros_like(wc)
    aff = wc @ network.gamma.T
    return (prefactor * 2.0 * np.sinh(0.5 * aff)) @ network.gamma


def reactive_rate(network: ReactionNetwork, model, c, u):
    """Pointwise species rate of the reactions; the energy rate is zero."""
    c = np.asarray(c, dtype=float)
    y, _ = model.neg_gradient(c, u)
    return _reaction_from_force(network, _reaction_prefactors(network, model, c, u), -y)


def _diffusive_functional(mesh, charges, d, k, wc, wu, psi):
    """Weak-form rates ``dP*_diff/dW`` as nodal functionals."""
    h = mesh.h
    grad_w = (wc[1:] - wc[:-1]) / h[:, None]
    grad_v = (wu[1:] - wu[:-1]) / h
    grad_psi = (psi[1:] - psi[:-1]) / h
    vbar = 0.5 * (wu[1:] + wu[:-1])
    x = grad_w - (vbar * grad_psi)[:, None] * charges
    flux = d * x
    flux_u = k * grad_v
    n = mesh.size
    gc = np.zeros((n, charges.size), dtype=np.result_type(flux, float))
    gc[:-1] -= flux
    gc[1:] += flux
    coupling = 0.5 * h * grad_psi * (flux @ charges)
    gu = np.zeros(n, dtype=gc.dtype)
    gu[:-1] += -flux_u - coupling
    gu[1:] += flux_u - coupling
    return gc, gu


def diffusive_rate(problem: EvolutionProblem, c, u, Psi=None, mobility_state=None):
    """Species and energy rates of diffusion at ``(c, u)`` as nodal fields.

    ``Psi`` defaults to the potential generated by ``c``; the mobility is
    evaluated at ``mobility_state`` (default ``(c, u)``).
    """
    c = np.asarray(c, dtype=float)
    u = np.asarray(u, dtype=float)
    model, mesh = problem.model, problem.mesh
    if Psi is None:
        Psi = problem.potential(c)
    mc, mu_ = (c, u) if mobility_state is None else mobility_state
    d, k = problem.mobility.element_coefficients(mesh, mc, mu_)
    y, v = model.neg_gradient(c, u)
    gc, gu = _diffusive_functional(mesh, model.charges, d, k, -y, -v, Psi)
    m = mesh.weights
    return gc / m[:, None], gu / m


def total_rate(problem: EvolutionProblem, c, u, Psi=None):
    """Full right-hand side ``d_W P*(Z; DS(Z))`` as nodal fields."""
    rc, ru = diffusive_rate(problem, c, u, Psi)
    return rc + reactive_rate(problem.network, problem.model, c, u), ru


class _Stepper:
    """Residual, colored complex-step Jacobian and Newton solve for one step."""

    def __init__(self, problem, state, dt):
        self.p = problem
        self.mesh = problem.mesh
        self.n = problem.mesh.size
        self.k = problem.model.species_count
        self.c0 = state.c
        self.u0 = state.u
        self.psi0 = state.Psi
        self.dt = dt
        self.d, self.kh = problem.mobility.element_coefficients(self.mesh, state.c, state.u)
        self.pref = _reaction_prefactors(problem.network, problem.model, state.c, state.u)
        self.m = self.mesh.weights
        self.neumann = self.mesh.case == PURE_NEUMANN
        self.dirichlet = self.mesh.dirichlet_nodes
        self.a = sparse.csr_matrix(problem.operator.matrix)

    def unpack(self, x):
        n, k = self.n, self.k
        wc = x[: k * n].reshape(k, n).T
        s = x[k * n : (k + 1) * n]
        psi = x[(k + 1) * n :]
        return wc, s, psi

    def state(self, x):
        wc, s, _ = self.unpack(x)
        return self.p.model.dual_gradient(-wc, -np.exp(s))

    def residual(self, x):
        p, m = self.p, self.m
        wc, s, psi = self.unpack(x)
        wu = np.exp(s)
        c, u = p.model.dual_gradient(-wc, -wu)
        psibar = 0.5 * (self.psi0 + psi)
        gc, gu = _diffusive_functional(self.mesh, p.model.charges, self.d, self.kh, wc, wu, psibar)
        gc = gc + m[:, None] * _reaction_from_force(p.network, self.pref, wc)
        rc = m[:, None] * (c - self.c0) / self.dt - gc
        ru = m * (u - self.u0) / self.dt - gu
        rpsi = self.a @ (psi - p.psi_ext) - m * (c @ p.model.charges)
        rpsi[self.dirichlet] = psi[self.dirichlet]
        if self.neumann:
            rpsi[-1] = m @ (psi - p.psi_ext)
        return np.concatenate([rc.T.ravel(), ru, rpsi])

    def jacobian(self, x):
        n = self.n
        blocks = self.k + 2
        size = blocks * n
        nodes = np.arange(n)
        rows_all, cols_all, vals_all = [], [], []
        row_nodes = np.tile(nodes, blocks)
        for kind in range(blocks):
            for off in range(3):
                pert = np.zeros(size)
                sel = nodes[nodes % 3 == off]
                pert[kind * n + sel] = 1.0
                d = np.imag(self.residual(x + 1j * COMPLEX_STEP * pert)) / COMPLEX_STEP
                # each row node sees exactly one perturbed neighbour of this colour
                col_node = row_nodes - 1 + ((off - (row_nodes - 1)) % 3)
                ok = (col_node >= 0) & (col_node < n) & (d != 0)
                rows_all.append(np.flatnonzero(ok))
                cols_all.append(kind * n + col_node[ok])
                vals_all.append(d[ok])
        jac = sparse.coo_matrix(
            (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))), shape=(size, size)
        ).tocsr()
        if self.neumann:
            jac = jac.tolil()
            row = (self.k + 1) * n + n - 1
            jac.rows[row] = []
            jac.data[row] = []
            for j in range(n):
                jac[row, (self.k + 1) * n + j] = self.m[j]
            jac = jac.tocsr()
        return jac

    def scale(self, x):
        return np.concatenate([
            np.tile(self.m / self.dt, self.k) * (1.0 + np.abs(self.c0.T.ravel())),
            self.m / self.dt * (1.0 + np.abs(self.u0)),
            np.full(self.n, 1.0 + np.max(np.abs(self.m * (self.c0 @ self.p.model.charges)))),
        ])

    def solve(self, x0, tol=1e-13, max_iter=30):
        """Damped Newton; converged when the update stalls at rounding level."""
        x = x0.copy()
        scale = self.scale(x0)
        r = self.residual(x)
        rn = np.max(np.abs(r) / scale)
        for _ in range(max_iter):
            if not np.isfinite(rn):
                return None
            if rn <= tol:
                return x
            dx = spsolve(self.jacobian(x).tocsc(), -r)
            if not np.all(np.isfinite(dx)):
                return None
            small = np.max(np.abs(dx)) <= 1e-12 * (1.0 + np.max(np.abs(x)))
            t = 1.0
            for _ in range(12):
                with np.errstate(over="ignore", invalid="ignore"):
                    trial = x + t * dx
                    try:
                        rt = self.residual(trial)
                    except ValueError:
                        rt = np.full_like(r, np.inf)
                rtn = np.max(np.abs(rt) / scale)
                if np.isfinite(rtn) and rtn < rn:
                    break
                t *= 0.5
            else:
                # no decrease possible: accept only at the rounding floor
                return x if small or rn <= 1e-9 else None
            x, r, rn = trial, rt, rtn
            if small:
                return x
        return x if rn <= 1e-9 else None


def _unknowns(problem, state):
    y, v = problem.model.neg_gradient(state.c, state.u)
    return np.concatenate([(-y).T.ravel(), np.log(-v), state.Psi])


def initial_state(problem: EvolutionProblem, c, u, t=0.0) -> EvolutionState:
    c = np.asarray(c, dtype=float)
    return EvolutionState(c, np.asarray(u, dtype=float), problem.potential(c), t)


def step(problem: EvolutionProblem, state: EvolutionState, dt: float, tol=1e-13):
    """One implicit step; returns the new state or ``None`` if Newton fails."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    if dt == 0:
        return state
    stepper = _Stepper(problem, state, dt)
    x = stepper.solve(_unknowns(problem, state), tol=tol)
    if x is None:
        return None
    c, u = stepper.state(x)
    c, u = np.real(c), np.real(u)
    return EvolutionState(c, np.broadcast_to(u, (problem.mesh.size,)).copy(), stepper.unpack(x)[2].copy(), state.t + dt)


def relative_l1(mesh, c, u, c_ref, u_ref) -> float:
    m = mesh.weights
    num = m @ (np.abs(c - c_ref).sum(1) + np.abs(u - u_ref))
    den = m @ (np.abs(c_ref).sum(1) + np.abs(u_ref))
    return float(num / den)


def evolve(problem: EvolutionProblem, initial: EvolutionState, T, dt, equilibrium_ref=None, tol=None,
           grow=1.3, dt_max=None, dt_min=1e-12, max_steps=100000, stride=0):
    """Integrate up to time ``T``; stop early once the distance to ``equilibrium_ref`` is below ``tol``.

    ``equilibrium_ref`` is a pair ``(c, u)``. ``stride > 0`` keeps every
    ``stride``-th state, otherwise only the first and last.
    """
    mesh = problem.mesh
    traj = Trajectory()

    def record(state, h, keep):
        traj.times.append(state.t)
        traj.entropy.append(problem.entropy(state.c, state.u))
        traj.energy.append(problem.energy(state.c, state.u))
        traj.charge.append(problem.charge(state.c))
        dist = np.nan
        if equilibrium_ref is not None:
            dist = relative_l1(mesh, state.c, state.u, *equilibrium_ref)
        traj.distance.append(dist)
        traj.dt.append(h)
        if keep:
            traj.states.append(state)
        return dist

    state = initial
    record(state, 0.0, True)
    dt_max = np.inf if dt_max is None else dt_max
    count = 0
    while state.t < T * (1 - 1e-14) and count < max_steps:
        h = min(dt, T - state.t)
        new = step(problem, state, h)
        if new is None:
            dt *= 0.5
            if dt < dt_min:
                raise StepFailure(f"time step underflow at t={state.t:g}")
            continue
        state = new
        count += 1
        keep = stride > 0 and count % stride == 0
        dist = record(state, h, keep)
        dt = min(dt * grow, dt_max)
        if tol is not None and dist <= tol:
            break
    if traj.states[-1] is not state:
        traj.states.append(state)
    return traj
