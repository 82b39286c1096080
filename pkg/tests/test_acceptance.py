"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed in the pytest
terminal summary and also when this file is run as a script.
"""

import time

import numpy as np
import pytest

from eerds.direct import cross_validate, default_floor, feasible_point, maximize_entropy, maximize_entropy_regularized
from eerds.discretization import build_uniform_mesh, l2_error
from eerds.dual import minimize_k, minimize_k_regularized, random_initial_point, solve_dual
from eerds.electrostatics import (
    PoissonProblem,
    assemble,
    dirichlet_charge_concentration,
    electrostatic_energy,
    min_electro_energy,
    minimal_energy_density,
    solve_internal_potential,
)
from eerds.entropy import BoltzmannEntropyModel, legendre_oracle, young_lower_bound_constant, young_violations
from eerds.evolution import evolve, initial_state, total_rate

from conftest import canonical_problem, evolution_problem

RESULTS = []


def record(number, title, checks, elapsed):
    """Store a verdict line; ``checks`` maps a label to ``(value, limit, ok)``."""
    ok = all(c[2] for c in checks.values())
    fmt = lambda x: f"{x:.3g}" if isinstance(x, float) else str(x)
    detail = "; ".join(f"{k}={fmt(v)} (limit {fmt(lim)})" for k, (v, lim, _) in checks.items())
    RESULTS.append(f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail} [{elapsed:.1f} s]")
    return ok


@pytest.fixture(scope="module")
def canonical_run():
    problem = canonical_problem(401)
    return problem, solve_dual(problem)


def test_criterion_1_legendre_duality():
    t0 = time.perf_counter()
    model = BoltzmannEntropyModel.unit((-1.0, 1.0))
    rng = np.random.default_rng(1)
    z = rng.uniform(1e-2, 50.0, size=(1000, 3))
    y, v = model.neg_gradient(z[:, :2], z[:, 2])
    c, u = model.dual_gradient(y, v)
    err = np.linalg.norm(np.column_stack([c, u]) - z, axis=1) / (1 + np.linalg.norm(z, axis=1))
    rel = []
    for yy, vv in zip(rng.uniform(-1, 1, (49, 2)), rng.uniform(-3, -1, 49)):
        exact = float(model.dual_entropy(yy, vv))
        rel.append(abs(legendre_oracle(model, yy, vv, box=(1e-3, 50.0), levels=5) - exact) / abs(exact))
    unit = BoltzmannEntropyModel.unit((1.0,))
    anchor = float(unit.dual_entropy([0.0], -1.0))
    anchor_oracle = legendre_oracle(unit, [0.0], -1.0, box=(1e-3, 20.0), levels=5)
    rel.append(abs(anchor_oracle - 5.0) / 5.0)
    ok = record(1, "Legendre duality", {
        "round-trip error / (1+|z|)": (err.max(), 1e-9, err.max() <= 1e-9),
        "oracle relative error (50 points)": (max(rel), 1e-5, max(rel) <= 1e-5),
        "|H*(0,-1) - 5|": (abs(anchor - 5.0), 1e-12, abs(anchor - 5.0) <= 1e-12),
    }, time.perf_counter() - t0)
    assert ok


def test_criterion_2_minimal_energy():
    t0 = time.perf_counter()
    n = 401
    mesh = build_uniform_mesh(0.0, 1.0, n, (("robin", 1.0), ("robin", 1.0)))
    op = assemble(PoissonProblem(mesh))
    v, kappa = min_electro_energy(op, 2.0, np.zeros(n))
    attained = electrostatic_energy(op, minimal_energy_density(op, 2.0, np.zeros(n)), np.zeros(n))
    h2 = 2 * mesh.hmax**2
    dmesh = build_uniform_mesh(0.0, 1.0, 2001, ("dirichlet", "neumann"))
    dop = assemble(PoissonProblem(dmesh))
    v_d, _ = min_electro_energy(dop, 1.0, np.zeros(dmesh.size))
    ns = np.array([4, 16, 64])
    norms = [dop.dual_norm(dirichlet_charge_concentration(dmesh, k)) for k in ns]
    slope = float(np.polyfit(np.log(ns), np.log(norms), 1)[0])
    ok = record(2, "minimal electrostatic energy", {
        "|V - 1|": (abs(v - 1), 1e-12, abs(v - 1) <= 1e-12),
        "|kappa* - 1|": (abs(kappa - 1), 1e-12, abs(kappa - 1) <= 1e-12),
        "|E(rho*) - V|": (abs(attained - v), h2, abs(attained - v) <= h2),
        "Dirichlet V": (v_d, 0.0, v_d == 0.0),
        "dual-norm slope + 0.5": (slope + 0.5, 0.1, abs(slope + 0.5) <= 0.1),
    }, time.perf_counter() - t0)
    assert ok


def test_criterion_3_dual_pipeline(canonical_run):
    t0 = time.perf_counter()
    problem, (sol, res, rep) = canonical_run
    rng = np.random.default_rng(2024)
    a = minimize_k(problem, random_initial_point(problem, rng))
    b = minimize_k(problem, random_initial_point(problem, rng))
    spread = max(a.point.distance(b.point), a.point.distance(sol.point))
    ok = record(3, "dual pipeline (canonical, N=401)", {
        "gradient norm": (sol.grad_norm, 1e-8, sol.grad_norm <= 1e-8),
        "|E - E0|": (rep["energy_residual"], 1e-7, rep["energy_residual"] <= 1e-7),
        "|Q - Q0|": (rep["charge_residual"], 1e-7, rep["charge_residual"] <= 1e-7),
        "theta spread": (rep["theta_spread"], 1e-8, rep["theta_spread"] <= 1e-8),
        "zeta defect": (rep["zeta_defect"], 1e-7, rep["zeta_defect"] <= 1e-7),
        "random-start distance": (spread, 1e-6, spread <= 1e-6),
    }, time.perf_counter() - t0)
    assert ok


def test_criterion_4_route_equivalence(canonical_run):
    t0 = time.perf_counter()
    problem, (_, res, _) = canonical_run
    primal = maximize_entropy(problem.model, problem.operator, problem.E0, problem.Q0, problem.psi_ext)
    cv = cross_validate(res, primal.state, problem.mesh, problem.model)
    ok = record(4, "route equivalence", {
        "relative L1": (cv["l1_relative"], 1e-3, cv["l1_relative"] <= 1e-3),
        "relative entropy gap": (cv["entropy_gap_relative"], 1e-6, cv["entropy_gap_relative"] <= 1e-6),
    }, time.perf_counter() - t0)
    assert ok


def test_criterion_5_regularization(canonical_run):
    t0 = time.perf_counter()
    problem, (sol, res, _) = canonical_run
    m = problem.mesh.weights
    ref = np.column_stack([res.c, res.u])
    args = (problem.model, problem.operator, problem.E0, problem.Q0, problem.psi_ext)
    dual_gaps, primal_gaps = [], []
    for delta in (1e-1, 1e-2, 1e-3):
        kd = minimize_k_regularized(problem, delta, sol.point)
        dual_gaps.append(kd.point.distance(sol.point))
        pd = maximize_entropy_regularized(*args, delta)
        z = np.column_stack([pd.state.c, pd.state.u])
        primal_gaps.append(float(m @ np.abs(z - ref).sum(1)) / float(m @ np.abs(ref).sum(1)))
    mono = bool(np.all(np.diff(dual_gaps) < 0) and np.all(np.diff(primal_gaps) < 0))
    ok = record(5, "regularisation continuation", {
        "monotone (1 = yes)": (float(mono), 1, mono),
        "K_delta final gap": (dual_gaps[-1], 1e-3, dual_gaps[-1] <= 1e-3),
        "H_delta final gap": (primal_gaps[-1], 1e-3, primal_gaps[-1] <= 1e-3),
    }, time.perf_counter() - t0)
    assert ok


def test_criterion_6_young_bound():
    t0 = time.perf_counter()
    mu = np.linspace(-100.0, 100.0, 100)
    eta = np.geomspace(1e-4, 1e4, 100)
    bad = 0
    for p in (0.5, 1.0, 2.0):
        for delta in (0.25, 1.0, 4.0):
            bad += young_violations(p, 1.0 + p, delta, mu, eta)
    c = young_lower_bound_constant(1.0, 1.0)
    m = np.abs(mu[mu != 0])
    # p = 1, q = 2: |mu|^2 / eta >= c |mu| - eta with equality at eta = |mu|
    gap = np.max(np.abs(m**2 / m - (c * m - m)) / np.maximum(1.0, m))
    ok = record(6, "Young bound", {
        "violations on 9 x 10^4 points": (float(bad), 0, bad == 0),
        "equality defect at eta=|mu|": (gap, 1e-12, gap <= 1e-12),
    }, time.perf_counter() - t0)
    assert ok


def test_criterion_7_evolution(canonical_run):
    t0 = time.perf_counter()
    problem, (_, res, _) = canonical_run
    ep = evolution_problem(problem)
    floor = default_floor(problem.model, problem.E0, problem.mesh.length)
    cert = feasible_point(problem.model, problem.operator, problem.E0, problem.Q0, problem.psi_ext, floor=floor)
    traj = evolve(ep, initial_state(ep, cert.state.c, cert.state.u), 200.0, 1e-3, (res.c, res.u), tol=1e-6)
    inc = traj.entropy_increments().min()
    dq = np.max(np.abs(np.array(traj.charge) - problem.Q0))
    de = np.max(np.abs(np.array(traj.energy) - problem.E0)) / problem.E0
    dist = traj.distance[-1]
    rc, ru = total_rate(ep, res.c, res.u)
    rate = max(np.abs(rc).max(), np.abs(ru).max())
    bound = 10 * (problem.mesh.hmax**2 + 1e-8)
    ok = record(7, "evolution (pair reaction 0 <=> C1 + C2)", {
        "min entropy increment": (inc, -1e-10, inc >= -1e-10),
        "max |Q - Q0|": (dq, 1e-10, dq <= 1e-10),
        "max |E - E0| / E0": (de, 1e-8, de <= 1e-8),
        "final relative L1 distance": (dist, 1e-4, dist <= 1e-4),
        "rate norm at equilibrium": (rate, bound, rate <= bound),
    }, time.perf_counter() - t0)
    assert ok


def test_criterion_8_discretization(canonical_run):
    t0 = time.perf_counter()
    exact = lambda x: np.sin(np.pi * x)
    f = lambda x: -np.pi * np.cos(np.pi * x) + (1 + x) * np.pi**2 * np.sin(np.pi * x)
    ns = np.array([51, 101, 201])
    errs = []
    for n in ns:
        mesh = build_uniform_mesh(0.0, 1.0, n, ("dirichlet", "dirichlet"))
        op = assemble(PoissonProblem(mesh, 1.0 + mesh.nodes))
        errs.append(l2_error(mesh, solve_internal_potential(op, f(mesh.nodes)), exact))
    order = float(np.polyfit(np.log(1.0 / (ns - 1)), np.log(errs), 1)[0])
    theta_fine = canonical_run[1][1].theta
    _, coarse, _ = solve_dual(canonical_problem(201))
    change = abs(coarse.theta - theta_fine) / theta_fine
    ok = record(8, "discretisation convergence", {
        "|L2 order - 2|": (abs(order - 2), 0.2, abs(order - 2) <= 0.2),
        "theta* change N=201 vs 401": (change, 1e-4, change <= 1e-4),
    }, time.perf_counter() - t0)
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
