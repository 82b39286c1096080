"""Direct constrained maximisation of the total entropy.

The discrete problem is

    maximise  sum_j m_j S(c_j, u_j)
    subject to  1/2 B(psi_c + psi_ext) + int u = E0,   int q.c = Q0,   (c, u) >= 0.

Each outer iteration takes a Newton step on the KKT system (augmented by
``rho J^T J``), projects onto a positivity margin, restores the charge along a
fixed nonnegative species direction and closes the energy gap by a constant
shift of ``u``. The repaired iterate is feasible up to rounding, so the total
entropy itself is the merit function and steps are only accepted if it does
not decrease.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .electrostatics import InfeasibleError, electrostatic_energy, min_electro_energy, minimal_energy_density
from .entropy import MoreauEnvelope

__all__ = [
    "StallError",
    "PrimalProblem",
    "PrimalState",
    "FeasibilityCertificate",
    "PrimalSolution",
    "feasible_point",
    "default_floor",
    "repair",
    "maximize_entropy",
    "maximize_entropy_regularized",
    "extract_multipliers",
    "cross_validate",
]

POSITIVITY_MARGIN = 0.01
ACCEPT_SLACK = 1e-14


class StallError(RuntimeError):
    """The projected gradient stopped decreasing before the tolerance."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True, eq=False)
class PrimalState:
    """Nodal concentrations ``c`` (shape ``(N, I)``) and energy density ``u``."""

    c: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float))
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float))

    def stacked(self) -> np.ndarray:
        """Flat vector ``[c_1, ..., c_I, u]``."""
        return np.concatenate([self.c.T.ravel(), self.u])

    @classmethod
    def from_stacked(cls, z, species_count):
        blocks = np.asarray(z, dtype=float).reshape(species_count + 1, -1)
        return cls(blocks[:-1].T.copy(), blocks[-1].copy())


@dataclass
class FeasibilityCertificate:
    state: PrimalState
    energy_residual: float
    charge_residual: float
    electrostatic_energy: float


@dataclass
class PrimalSolution:
    state: PrimalState
    entropy: float
    eta: float
    kappa: float
    grad_norm: float
    iterations: int
    converged: bool
    energy_residual: float
    charge_residual: float
    trace: list = field(default_factory=list)


@dataclass(eq=False)
class PrimalProblem:
    """Discrete constraint functionals and their derivatives."""

    model: object
    operator: object
    E0: float
    Q0: float
    psi_ext: np.ndarray

    def __post_init__(self):
        self.psi_ext = np.asarray(self.psi_ext, dtype=float)
        self.mesh = self.operator.mesh
        self.m = self.mesh.weights
        self.q = np.asarray(self.model.charges, dtype=float)
        self.n = self.mesh.size
        self.species = self.q.size
        self.v_min, _ = min_electro_energy(self.mesh, self.Q0, self.psi_ext)
        self._mgm = None

    @property
    def mgm(self):
        """``M G M``: Hessian of the electrostatic energy in the charge density."""
        if self._mgm is None:
            g = self.operator.solution_matrix()
            self._mgm = self.m[:, None] * g * self.m[None, :]
        return self._mgm

    def split(self, z):
        blocks = z.reshape(self.species + 1, self.n)
        return blocks[:-1].T, blocks[-1]

    def potential(self, c):
        load = self.operator.load_from_density(c @ self.q)
        return self.operator.solve(load, check=False) + self.psi_ext

    def energy(self, z):
        c, u = self.split(z)
        psi = self.potential(c)
        return 0.5 * self.operator.bilinear(psi) + self.m @ u

    def charge(self, z):
        c, _ = self.split(z)
        return float(self.m @ (c @ self.q))

    def jacobian(self, z):
        """Rows ``D energy`` and ``D charge`` as functionals on ``z``."""
        c, _ = self.split(z)
        psi = self.potential(c)
        de = np.concatenate([np.concatenate([qi * self.m * psi for qi in self.q]), self.m])
        dq = np.concatenate([np.concatenate([qi * self.m for qi in self.q]), np.zeros(self.n)])
        return np.vstack([de, dq])

    def energy_hessian(self):
        k = self.species
        h = np.zeros(((k + 1) * self.n,) * 2)
        mgm = self.mgm
        for i in range(k):
            for l in range(k):
                h[i * self.n : (i + 1) * self.n, l * self.n : (l + 1) * self.n] = self.q[i] * self.q[l] * mgm
        return h

    def metric(self):
        """Lumped ``M^-1`` weights for functionals on the stacked vector."""
        return np.tile(1.0 / self.m, self.species + 1)

    def scale(self):
        return 1.0 + abs(self.E0) + abs(self.Q0)


def _node_blocks_to_dense(problem, blocks):
    """Scatter per-node ``(I+1)x(I+1)`` blocks into the stacked ordering."""
    k = problem.species + 1
    n = problem.n
    h = np.zeros((k * n, k * n))
    idx = np.arange(n)
    for a in range(k):
        for b in range(k):
            h[a * n + idx, b * n + idx] = blocks[:, a, b]
    return h


class _EntropyObjective:
    """``sum m S`` with its gradient and Hessian."""

    def __init__(self, problem):
        self.p = problem

    def value(self, z):
        c, u = self.p.split(z)
        if np.any(c <= 0) or np.any(u <= 0):
            return -np.inf
        return float(self.p.m @ self.p.model.entropy(c, u))

    def gradient(self, z):
        c, u = self.p.split(z)
        y, v = self.p.model.neg_gradient(c, u)
        return -np.concatenate([(self.p.m[:, None] * y).T.ravel(), self.p.m * v])

    def neg_hessian(self, z):
        c, u = self.p.split(z)
        blocks = self.p.model.neg_hessian(c, u) * self.p.m[:, None, None]
        return _node_blocks_to_dense(self.p, blocks)


class _EnvelopeObjective:
    """``-sum m H_delta`` built on the Moreau envelope."""

    def __init__(self, problem, delta):
        self.p = problem
        self.env = MoreauEnvelope(problem.model, delta)
        self._cache = (None, None)

    def _prox(self, z):
        key, w = self._cache
        if key is not None and np.array_equal(key, z):
            return w
        w = self.env.prox(self.points(z), start=w)
        self._cache = (z.copy(), w)
        return w

    def points(self, z):
        c, u = self.p.split(z)
        return np.column_stack([c, u])

    def value(self, z):
        pts = self.points(z)
        w = self._prox(z)
        return -float(self.p.m @ self.env.value(pts, prox=w))

    def gradient(self, z):
        pts = self.points(z)
        g = self.env.gradient(pts, prox=self._prox(z))
        return -(self.p.m[:, None] * g).T.ravel()

    def neg_hessian(self, z):
        pts = self.points(z)
        blocks = self.env.hessian(pts, prox=self._prox(z)) * self.p.m[:, None, None]
        return _node_blocks_to_dense(self.p, blocks)


def _charge_direction(problem, deficit):
    """Nonnegative species direction ``e`` with ``q.e = 1`` matching the sign of ``deficit``."""
    q = problem.q
    i = int(np.argmax(q)) if deficit > 0 else int(np.argmin(q))
    if q[i] * deficit <= 0:
        return None
    e = np.zeros(q.size)
    e[i] = 1.0 / abs(q[i])
    return e


def repair(problem: PrimalProblem, z, allow_negative=False):
    """Restore charge, then close the energy gap with a constant shift of ``u``.

    Returns the repaired vector or ``None`` if positivity would be lost.
    """
    z = np.array(z, dtype=float)
    length = problem.mesh.length
    deficit = problem.Q0 - problem.charge(z)
    if deficit != 0.0:
        e = _charge_direction(problem, deficit)
        c, u = problem.split(z)
        if e is None:
            total = problem.charge(z)
            if total == 0:
                return None
            c = c * (problem.Q0 / total)
        else:
            c = c + (abs(deficit) / length) * e
        z = np.concatenate([c.T.ravel(), u])
    gap = problem.E0 - problem.energy(z)
    z[-problem.n :] += gap / length
    if not allow_negative and np.any(z[-problem.n :] <= 0):
        return None
    return z


def feasible_point(model, operator, E0, Q0, psi_ext, floor=0.0) -> FeasibilityCertificate:
    """Feasible state built from the minimal-energy charge density.

    The density is split into positive and negative parts carried by the
    species of extreme charge. ``floor > 0`` adds a charge-neutral amount to
    those species so that all concentrations are strictly positive; this does
    not change the charge density. The energy constraint is met exactly by a
    constant internal energy.
    """
    mesh = operator.mesh
    psi_ext = np.asarray(psi_ext, dtype=float)
    v_min, _ = min_electro_energy(mesh, Q0, psi_ext)
    if not E0 > v_min:
        raise InfeasibleError(f"infeasible: E0={E0:g} does not exceed V={v_min:g}", v_min)
    q = np.asarray(model.charges, dtype=float)
    rho = minimal_energy_density(operator, Q0, psi_ext)
    ip, im = int(np.argmax(q)), int(np.argmin(q))
    c = np.zeros((mesh.size, q.size))
    pos, neg = np.maximum(rho, 0.0), np.maximum(-rho, 0.0)
    if np.any(pos > 0):
        if q[ip] <= 0:
            raise ValueError("positive charge density is not representable by the charges")
        c[:, ip] += pos / q[ip]
    if np.any(neg > 0):
        if q[im] >= 0:
            raise ValueError("negative charge density is not representable by the charges")
        c[:, im] += neg / -q[im]
    if floor > 0:
        if q[ip] > 0 and q[im] < 0:
            c[:, ip] += floor * -q[im]
            c[:, im] += floor * q[ip]
        else:
            neutral = np.flatnonzero(q == 0)
            if neutral.size == 0:
                raise ValueError("a positive floor needs bipolar or neutral species")
            c[:, neutral] += floor
        others = [i for i in range(q.size) if i not in (ip, im)]
        c[:, others] = np.maximum(c[:, others], floor)
    e_el = electrostatic_energy(operator, c @ q, psi_ext, check=False)
    u = np.full(mesh.size, (E0 - e_el) / mesh.length)
    if np.any(u < 0):
        raise InfeasibleError("electrostatic energy of the construction exceeds E0", v_min)
    state = PrimalState(c, u)
    energy = e_el + mesh.weights @ u
    charge = mesh.weights @ (c @ q)
    return FeasibilityCertificate(state, float(abs(energy - E0)), float(abs(charge - Q0)), float(e_el))


def default_floor(model, E0, length):
    u0 = E0 / length
    return 0.25 * (u0**model.alpha / model.alpha) / max(model.charges.size, 1)


def extract_multipliers(problem, grad, jac):
    """Least-squares ``(eta, kappa)`` with ``grad ~ eta D energy + kappa D charge`` in ``M^-1``."""
    w = np.sqrt(problem.metric())
    coef, *_ = np.linalg.lstsq((jac * w).T, grad * w, rcond=None)
    resid = grad - jac.T @ coef
    return coef, float(np.sqrt(np.sum(problem.metric() * resid**2)) / problem.scale())


def _maximize(problem, objective, z, tol, max_iter, patience, positive, rho):
    value = objective.value(z)
    trace = []
    best_norm = np.inf
    stall = 0
    converged = False
    hess_e = problem.energy_hessian()
    metric = problem.metric()
    eta = kappa = np.nan
    gnorm = np.inf
    it = 0
    for it in range(max_iter + 1):
        grad = objective.gradient(z)
        jac = problem.jacobian(z)
        (eta, kappa), gnorm = extract_multipliers(problem, grad, jac)
        e_res = abs(problem.energy(z) - problem.E0)
        q_res = abs(problem.charge(z) - problem.Q0)
        trace.append((it, value, gnorm, e_res, q_res))
        if gnorm <= tol and e_res <= tol * problem.scale() and q_res <= tol * problem.scale():
            converged = True
            break
        if it == max_iter:
            break
        if gnorm < best_norm * (1 - 1e-3):
            best_norm, stall = gnorm, 0
        else:
            stall += 1
            if stall > patience:
                break
        w = objective.neg_hessian(z) + max(eta, 0.0) * hess_e
        # augmentation rho J^T (J M^-1 J^T)^-1 J, scale-free in the mesh
        gram = (jac * metric) @ jac.T
        w += rho * (jac.T @ np.linalg.solve(gram, jac))
        n = z.size
        kkt = np.zeros((n + 2, n + 2))
        kkt[:n, :n] = w
        kkt[:n, n:] = jac.T
        kkt[n:, :n] = jac
        residual = np.array([problem.energy(z) - problem.E0, problem.charge(z) - problem.Q0])
        rhs = np.concatenate([grad, -residual])
        sol = linalg.solve(kkt, rhs, assume_a="sym")
        dz = sol[:n]
        t = 1.0
        if positive:
            # fraction to the boundary: keep every component above a margin of its value
            neg = dz < 0
            if np.any(neg):
                t = min(1.0, float(np.min((1 - POSITIVITY_MARGIN) * z[neg] / -dz[neg])))
        accepted = False
        for _ in range(50):
            trial = z + t * dz
            trial = repair(problem, trial, allow_negative=not positive)
            if trial is not None:
                tv = objective.value(trial)
                if np.isfinite(tv) and tv >= value - ACCEPT_SLACK * max(abs(value), 1.0):
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            break
        z, value = trial, tv
    return z, value, eta, kappa, gnorm, it, converged, trace


def maximize_entropy(model, operator, E0, Q0, psi_ext, start=None, tol=1e-8, max_iter=200,
                     patience=20, rho=1.0, raise_on_failure=True) -> PrimalSolution:
    """Maximise the total entropy on the feasible set, starting from ``start``."""
    problem = PrimalProblem(model, operator, E0, Q0, psi_ext)
    if start is None:
        start = feasible_point(model, operator, E0, Q0, psi_ext,
                               floor=default_floor(model, E0, operator.mesh.length)).state
    z = repair(problem, start.stacked())
    if z is None or np.any(z <= 0):
        raise ValueError("start must be strictly positive after repair")
    obj = _EntropyObjective(problem)
    z, value, eta, kappa, gnorm, it, ok, trace = _maximize(problem, obj, z, tol, max_iter, patience, True, rho)
    return _finish(problem, z, value, eta, kappa, gnorm, it, ok, trace, raise_on_failure)


def maximize_entropy_regularized(model, operator, E0, Q0, psi_ext, delta, start=None, tol=1e-8,
                                 max_iter=200, patience=20, rho=1.0, raise_on_failure=True) -> PrimalSolution:
    """Maximise ``-int H_delta`` on the constraint set; no positivity constraint."""
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    problem = PrimalProblem(model, operator, E0, Q0, psi_ext)
    if start is None:
        start = feasible_point(model, operator, E0, Q0, psi_ext,
                               floor=default_floor(model, E0, operator.mesh.length)).state
    z = repair(problem, start.stacked(), allow_negative=True)
    obj = _EnvelopeObjective(problem, delta)
    z, value, eta, kappa, gnorm, it, ok, trace = _maximize(problem, obj, z, tol, max_iter, patience, False, rho)
    return _finish(problem, z, value, eta, kappa, gnorm, it, ok, trace, raise_on_failure)


def _finish(problem, z, value, eta, kappa, gnorm, it, ok, trace, raise_on_failure):
    state = PrimalState.from_stacked(z, problem.species)
    sol = PrimalSolution(
        state=state,
        entropy=value,
        eta=float(eta),
        kappa=float(kappa),
        grad_norm=gnorm,
        iterations=it,
        converged=ok,
        energy_residual=float(abs(problem.energy(z) - problem.E0)),
        charge_residual=float(abs(problem.charge(z) - problem.Q0)),
        trace=trace,
    )
    if not ok and raise_on_failure:
        raise StallError(f"direct method stalled at projected gradient {gnorm:.3e} after {it} iterations", sol)
    return sol


def cross_validate(dual_result, primal_state, mesh, model, l1_tol=1e-3, entropy_tol=1e-6) -> dict:
    """Distances between two equilibria and a pass/fail verdict."""
    m = mesh.weights
    za = np.column_stack([dual_result.c, dual_result.u])
    zb = np.column_stack([primal_state.c, primal_state.u])
    if za.shape != zb.shape:
        raise ValueError("states live on different meshes or species counts")
    l1 = float(m @ np.abs(za - zb).sum(1))
    l1_rel = l1 / float(m @ np.abs(za).sum(1))
    linf = float(np.max(np.abs(za - zb)))
    sa = float(m @ model.entropy(dual_result.c, dual_result.u))
    sb = float(m @ model.entropy(primal_state.c, primal_state.u))
    gap = abs(sa - sb) / max(abs(sa), 1e-300)
    return {
        "l1": l1,
        "l1_relative": l1_rel,
        "linf": linf,
        "entropy_dual": sa,
        "entropy_direct": sb,
        "entropy_gap_relative": gap,
        "pass": bool(l1_rel <= l1_tol and gap <= entropy_tol),
    }
