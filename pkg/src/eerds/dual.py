"""Convex dual functional ``K(eta, kappa, lambda)`` and recovery of the equilibrium.

Discretely,

    K = sum_j m_j Hbar*(kappa + lambda_j, eta) + kappa Q0 + eta E0
        - lambda^T A psi_ext + lambda^T A lambda / (2 eta)

with lumped weights ``m`` and the Poisson matrix ``A``. The regularised family
``K_delta`` replaces ``H*`` by ``H* + delta/2 |xi|^2``. The minimiser yields
the equilibrium through ``(c, u) = DH*(-(lambda + kappa) q, -eta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize

from .discretization import PURE_NEUMANN
from .electrostatics import InfeasibleError, min_electro_energy

__all__ = [
    "ConvergenceError",
    "DualProblem",
    "DualPoint",
    "DualSolution",
    "EquilibriumResult",
    "k_value",
    "k_gradient",
    "k_hessian",
    "initial_point",
    "random_initial_point",
    "minimize_k",
    "minimize_k_regularized",
    "recover_state",
    "verify_equilibrium",
    "total_entropy",
    "solve_dual",
    "grad_norm",
]

ARMIJO = 1e-4
MAX_LOG_STEP = 1.0


class ConvergenceError(RuntimeError):
    """Iteration limit reached before the gradient tolerance."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


@dataclass(eq=False)
class DualProblem:
    """Data shared by all dual evaluations."""

    model: object
    operator: object
    E0: float
    Q0: float
    psi_ext: np.ndarray
    delta: float = 0.0

    def __post_init__(self):
        self.psi_ext = np.asarray(self.psi_ext, dtype=float)
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        self.mesh = self.operator.mesh
        self.v_min, self.kappa_star = min_electro_energy(self.mesh, self.Q0, self.psi_ext)
        if not self.E0 > self.v_min:
            raise InfeasibleError(
                f"infeasible: E0={self.E0:g} does not exceed V={self.v_min:g}", self.v_min
            )
        self._a_psi_ext = self.operator.apply(self.psi_ext)
        self._q2 = float(self.model.charges @ self.model.charges)

    def with_delta(self, delta):
        return replace(self, delta=float(delta))

    @property
    def free(self):
        return self.operator.free

    @property
    def pure_neumann(self):
        return self.mesh.case == PURE_NEUMANN


@dataclass(frozen=True, eq=False)
class DualPoint:
    """``(eta, kappa, lambda)`` with ``eta > 0``."""

    eta: float
    kappa: float
    lam: np.ndarray

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        object.__setattr__(self, "lam", np.asarray(self.lam, dtype=float))

    def distance(self, other) -> float:
        return float(
            max(abs(self.eta - other.eta), abs(self.kappa - other.kappa), np.max(np.abs(self.lam - other.lam)))
        )


@dataclass
class DualSolution:
    point: DualPoint
    value: float
    grad_norm: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


@dataclass
class EquilibriumResult:
    """Recovered state and its diagnostics."""

    c: np.ndarray
    u: np.ndarray
    Psi: np.ndarray
    psi: np.ndarray
    eta: float
    kappa: float
    lam: np.ndarray
    theta: float
    residuals: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)


def _reduced(problem, mu, eta):
    with np.errstate(over="ignore", invalid="ignore"):
        val, dmu, deta, dmumu, dmueta, detaeta = problem.model.reduced_dual_derivatives(mu, eta)
    d = problem.delta
    if d:
        q2 = problem._q2
        val = val + 0.5 * d * (q2 * mu**2 + eta**2)
        dmu = dmu + d * q2 * mu
        deta = deta + d * eta
        dmumu = dmumu + d * q2
        detaeta = detaeta + d
    return val, dmu, deta, dmumu, dmueta, detaeta


def _parts(point):
    return float(point.eta), float(point.kappa), np.asarray(point.lam, dtype=float)


def k_value(point: DualPoint, problem: DualProblem) -> float:
    eta, kappa, lam = _parts(point)
    if not eta > 0:
        raise ValueError("K requires eta > 0")
    with np.errstate(over="ignore", invalid="ignore"):
        hbar = problem.model.reduced_dual(kappa + lam, eta)
    if problem.delta:
        hbar = hbar + 0.5 * problem.delta * (problem._q2 * (kappa + lam) ** 2 + eta**2)
    a_lam = problem.operator.apply(lam)
    return float(
        problem.mesh.weights @ hbar
        + kappa * problem.Q0
        + eta * problem.E0
        - lam @ problem._a_psi_ext
        + lam @ a_lam / (2 * eta)
    )


def _gradient_functional(point, problem):
    eta, kappa, lam = _parts(point)
    m = problem.mesh.weights
    _, dmu, deta, *_ = _reduced(problem, kappa + lam, eta)
    a_lam = problem.operator.apply(lam)
    g_eta = m @ deta + problem.E0 - lam @ a_lam / (2 * eta**2)
    g_kappa = m @ dmu + problem.Q0
    g_lam = m * dmu - problem._a_psi_ext + a_lam / eta
    return float(g_eta), float(g_kappa), g_lam


def k_gradient(point: DualPoint, problem: DualProblem):
    """``(dK/deta, dK/dkappa, Riesz field of dK/dlambda)``.

    The lambda derivative is returned as the nodal field ``r`` with
    ``dK[h] = sum_j m_j r_j h_j`` for admissible ``h``.
    """
    g_eta, g_kappa, g_lam = _gradient_functional(point, problem)
    return g_eta, g_kappa, _riesz(problem, g_lam)


def _riesz(problem, g_lam):
    m = problem.mesh.weights
    out = np.zeros_like(g_lam)
    free = problem.free
    g = g_lam[free]
    if problem.pure_neumann:
        g = g - m * (g.sum() / m.sum())
    out[free] = g / m[free]
    return out


def k_hessian(point: DualPoint, problem: DualProblem) -> np.ndarray:
    """Dense Hessian ordered as ``(eta, kappa, lambda_1..lambda_N)``."""
    eta, kappa, lam = _parts(point)
    m = problem.mesh.weights
    _, _, _, dmumu, dmueta, detaeta = _reduced(problem, kappa + lam, eta)
    a = problem.operator.matrix
    a_lam = a @ lam
    n = lam.size
    h = np.zeros((n + 2, n + 2))
    h[0, 0] = m @ detaeta + lam @ a_lam / eta**3
    h[0, 1] = h[1, 0] = m @ dmueta
    h[0, 2:] = h[2:, 0] = m * dmueta - a_lam / eta**2
    h[1, 1] = m @ dmumu
    h[1, 2:] = h[2:, 1] = m * dmumu
    h[2:, 2:] = a / eta
    h[2 + np.arange(n), 2 + np.arange(n)] += m * dmumu
    return h


def grad_norm(problem, g_eta, g_kappa, g_lam) -> float:
    """Scaled norm using the lumped ``M^-1`` metric for the lambda part."""
    r = _riesz(problem, g_lam)
    m = problem.mesh.weights
    total = g_eta**2 + g_kappa**2 + m @ r**2
    return float(np.sqrt(total) / (1.0 + abs(problem.E0) + abs(problem.Q0)))


def initial_point(problem: DualProblem) -> DualPoint:
    """Spatially constant ansatz: ``int u(eta) = E0`` at ``kappa = 0``, ``lambda = 0``."""
    length = problem.mesh.length
    model = problem.model

    def gap(log_eta):
        eta = np.exp(log_eta)
        _, u = model.state_from_potentials(np.zeros(1), eta)
        if problem.delta:
            u = u - problem.delta * eta
        return float(u[0]) * length - problem.E0

    lo, hi = -1.0, 1.0
    while gap(lo) < 0:
        lo -= 2.0
    while gap(hi) > 0:
        hi += 2.0
    log_eta = optimize.brentq(gap, lo, hi, xtol=1e-14, rtol=1e-15)
    return DualPoint(float(np.exp(log_eta)), 0.0, np.zeros(problem.mesh.size))


def random_initial_point(problem: DualProblem, rng, scale=0.5) -> DualPoint:
    """Perturbation of :func:`initial_point` for uniqueness checks."""
    base = initial_point(problem)
    lam = scale * rng.standard_normal(problem.mesh.size)
    lam = problem.operator.project(lam)
    eta = base.eta * np.exp(scale * rng.uniform(-1, 1))
    return DualPoint(eta, scale * rng.standard_normal(), lam)


def _reduced_system(problem, point):
    """Gradient and Hessian in ``(log eta, kappa, lambda_free)``."""
    eta = point.eta
    g_eta, g_kappa, g_lam = _gradient_functional(point, problem)
    hess = k_hessian(point, problem)
    idx = np.concatenate([[0, 1], 2 + problem.free])
    g = np.concatenate([[g_eta, g_kappa], g_lam])[idx]
    h = hess[np.ix_(idx, idx)]
    scale = np.ones(idx.size)
    scale[0] = eta
    g_s = g * scale
    h_convex = h * np.outer(scale, scale)
    h_s = h_convex.copy()
    h_s[0, 0] += eta * g_eta
    return (g_eta, g_kappa, g_lam), g_s, h_s, h_convex


def _newton_direction(problem, g, h_s, h_convex):
    n = g.size
    if problem.pure_neumann:
        c = np.zeros(n)
        c[2:] = problem.mesh.weights

        def solve(h):
            kkt = np.zeros((n + 1, n + 1))
            kkt[:n, :n] = h
            kkt[:n, n] = kkt[n, :n] = c
            rhs = np.concatenate([-g, [0.0]])
            return linalg.solve(kkt, rhs, assume_a="sym")[:n]
    else:

        def solve(h):
            return linalg.cho_solve(linalg.cho_factor(h), -g)

    for h in (h_s, h_convex):
        try:
            d = solve(h)
        except (linalg.LinAlgError, ValueError):
            continue
        if np.all(np.isfinite(d)) and g @ d < 0:
            return d, "newton"
    m = problem.mesh.weights[problem.free]
    d = -g.copy()
    d[2:] /= m
    if problem.pure_neumann:
        d[2:] -= (m @ d[2:]) / m.sum()
    return d, "gradient"


def _apply(problem, point, d, t):
    lam = point.lam.copy()
    lam[problem.free] += t * d[2:]
    return DualPoint(point.eta * np.exp(t * d[0]), point.kappa + t * d[1], lam)


def minimize_k(problem: DualProblem, initial: DualPoint = None, tol_grad=1e-8, max_iter=200, raise_on_failure=True):
    """Damped Newton on ``(log eta, kappa, lambda)`` with Armijo backtracking."""
    point = initial_point(problem) if initial is None else initial
    point = DualPoint(point.eta, point.kappa, problem.operator.project(point.lam))
    value = k_value(point, problem)
    trace = []
    converged = False
    it = 0
    gnorm = np.inf
    for it in range(max_iter + 1):
        parts, g, h_s, h_convex = _reduced_system(problem, point)
        gnorm = grad_norm(problem, *parts)
        if it == 0:
            trace.append((0, value, gnorm, 0.0, "start"))
        if gnorm <= tol_grad:
            converged = True
            break
        if it == max_iter:
            break
        d, kind = _newton_direction(problem, g, h_s, h_convex)
        if abs(d[0]) > MAX_LOG_STEP:
            d = d * (MAX_LOG_STEP / abs(d[0]))
        slope = float(g @ d)
        t = 1.0
        accepted = False
        for _ in range(60):
            trial = _apply(problem, point, d, t)
            tv = k_value(trial, problem)
            if np.isfinite(tv) and tv <= value + ARMIJO * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # at the rounding floor the Armijo test can fail for a full step
            trial = _apply(problem, point, d, 1.0)
            tv = k_value(trial, problem)
            tparts, *_ = _reduced_system(problem, trial)
            if tv <= value + 1e-13 * max(abs(value), 1.0) and grad_norm(problem, *tparts) < gnorm:
                t, accepted = 1.0, True
        if not accepted:
            break
        point, value = trial, tv
        trace.append((it + 1, value, gnorm, t, kind))
    solution = DualSolution(point, value, gnorm, it, converged, trace)
    if not converged and raise_on_failure:
        raise ConvergenceError(
            f"dual minimisation stopped at gradient norm {gnorm:.3e} after {it} iterations", solution
        )
    return solution


def minimize_k_regularized(problem: DualProblem, delta, initial=None, **kwargs):
    """Minimise ``K_delta`` (``delta = 0`` gives ``K``)."""
    return minimize_k(problem.with_delta(delta), initial, **kwargs)


def recover_state(point: DualPoint, problem: DualProblem) -> EquilibriumResult:
    """Apply ``DH*`` (or ``DH*_delta``) nodewise and collect potentials."""
    eta, kappa, lam = _parts(point)
    mu = kappa + lam
    c, u = problem.model.state_from_potentials(mu, eta)
    if problem.delta:
        c = c - problem.delta * mu[:, None] * problem.model.charges
        u = u - problem.delta * eta
    u = np.broadcast_to(u, mu.shape).copy()
    psi_total = lam / eta
    return EquilibriumResult(
        c=c,
        u=u,
        Psi=psi_total,
        psi=psi_total - problem.psi_ext,
        eta=eta,
        kappa=kappa,
        lam=lam,
        theta=1.0 / eta,
    )


def total_entropy(model, mesh, c, u) -> float:
    return float(mesh.weights @ model.entropy(c, u))


def verify_equilibrium(result: EquilibriumResult, problem: DualProblem) -> dict:
    """Constraint residuals, temperature spread and electrochemical-potential defect."""
    model, op, mesh = problem.model, problem.operator, problem.mesh
    q = model.charges
    rho = result.c @ q
    psi_c = op.solve(op.load_from_density(rho), check=False)
    energy = 0.5 * op.bilinear(psi_c + problem.psi_ext) + mesh.weights @ result.u
    charge = mesh.weights @ rho
    y, v = model.neg_gradient(result.c, result.u)
    theta = -1.0 / v
    zeta = theta[:, None] * (-y) - result.Psi[:, None] * q
    i0 = int(np.argmax(np.abs(q)))
    defect = np.max(np.abs(zeta * q[i0] - zeta[:, [i0]] * q))
    poisson = np.max(np.abs((psi_c - result.psi)[problem.free])) / max(1.0, np.max(np.abs(result.psi)))
    report = {
        "energy": float(energy),
        "charge": float(charge),
        "energy_residual": float(abs(energy - problem.E0)),
        "charge_residual": float(abs(charge - problem.Q0)),
        "theta_spread": float((theta.max() - theta.min()) / np.mean(theta)),
        "theta_mean": float(np.mean(theta)),
        "zeta_defect": float(defect),
        "poisson_residual": float(poisson),
        "entropy": total_entropy(model, mesh, result.c, result.u),
    }
    result.residuals.update(
        energy=report["energy_residual"], charge=report["charge_residual"], poisson=report["poisson_residual"]
    )
    result.diagnostics.update(
        theta_spread=report["theta_spread"], zeta_defect=report["zeta_defect"], entropy=report["entropy"]
    )
    return report


def solve_dual(problem: DualProblem, initial=None, **kwargs):
    """Minimise ``K``, recover the state and attach the verification report."""
    sol = minimize_k(problem, initial, **kwargs)
    result = recover_state(sol.point, problem)
    report = verify_equilibrium(result, problem)
    result.residuals["gradient"] = sol.grad_norm
    result.diagnostics["k_value"] = sol.value
    result.diagnostics["iterations"] = sol.iterations
    return sol, result, report
