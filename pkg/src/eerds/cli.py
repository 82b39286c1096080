"""Command-line front end: ``eerds run``, ``eerds selfcheck``."""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .direct import cross_validate, default_floor, feasible_point, maximize_entropy, StallError
from .discretization import build_uniform_mesh, l2_error, write_fields_csv
from .dual import ConvergenceError, DualProblem, minimize_k, minimize_k_regularized, random_initial_point, solve_dual
from .electrostatics import PoissonProblem, assemble, min_electro_energy, solve_internal_potential
from .entropy import BoltzmannEntropyModel, legendre_oracle, young_violations
from .evolution import EvolutionProblem, StepFailure, evolve, initial_state, total_rate
from .scenario import STAGES, ScenarioError, load_scenario

SCHEMA_ID = "eerds-summary/1"
OUTPUT_ENV = "EERDS_OUTPUT_DIR"

DUAL_LIMITS = {"energy_residual": 1e-7, "charge_residual": 1e-7, "theta_spread": 1e-8, "zeta_defect": 1e-7}
EVOLVE_LIMITS = {"entropy_slack": 1e-10, "charge_drift": 1e-10, "energy_drift": 1e-8, "distance": 1e-4}


# -- output helpers ---------------------------------------------------------

def format_json(obj, indent=0) -> str:
    """JSON text with floats at 17 significant digits; non-finite floats become null."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {format_json(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if any(isinstance(v, (dict, list, tuple)) for v in obj):
            items = [pad + format_json(v, indent + 1) for v in obj]
            return "[\n" + ",\n".join(items) + "\n" + end + "]"
        return "[" + ", ".join(format_json(v, indent + 1) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return "null"
        text = "%.17g" % x
        if all(ch not in text for ch in ".en"):
            text += ".0"
        return text
    return json.dumps(str(obj))


def load_schema() -> dict:
    text = resources.files("eerds").joinpath("schemas/summary-1.json").read_text()
    return json.loads(text)


def write_summary(path, summary):
    jsonschema.validate(summary, load_schema())
    Path(path).write_text(format_json(summary) + "\n")


def _cell(v):
    return ("%.17g" % v) if isinstance(v, (float, np.floating)) else str(v)


def _write_dat(path, header, rows):
    with Path(path).open("w") as fh:
        fh.write("# " + " ".join(header) + "\n")
        for row in rows:
            fh.write(" ".join(_cell(v) for v in row) + "\n")


def write_table(path, header, rows, dat=False):
    """CSV table, plus a whitespace-separated ``.dat`` twin when ``dat`` is set."""
    rows = [list(r) for r in rows]
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    if dat:
        _write_dat(path.with_suffix(".dat"), header, rows)


def _write_fields(path, mesh, columns, dat):
    write_fields_csv(path, mesh, columns)
    if dat:
        cols = [np.asarray(v, dtype=float) for v in columns.values()]
        rows = [[float(x), *(float(c[j]) for c in cols)] for j, x in enumerate(mesh.nodes)]
        _write_dat(Path(path).with_suffix(".dat"), ["x", *columns], rows)


# -- pipeline ---------------------------------------------------------------

def run_scenario(scenario_path, output_dir, stages=None, tol_grad=None, seed=None, dat=False) -> int:
    """Run the enabled stages and write artifacts; returns the exit status."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"schema": SCHEMA_ID, "version": __version__, "scenario": Path(scenario_path).stem,
               "status": "ok", "stages": [], "verdicts": {}}
    try:
        sc = load_scenario(scenario_path)
    except ScenarioError as exc:
        summary.update(status="error", error=str(exc))
        write_summary(out / "summary.json", summary)
        print(f"error: {exc}", file=sys.stderr)
        return 3
    if stages is not None:
        sc.stages = {s: s in stages for s in STAGES}
    if tol_grad is not None:
        sc.solver["tol_grad"] = tol_grad
    if seed is not None:
        sc.solver["seed"] = seed
    summary["scenario"] = sc.name
    summary["stages"] = [s for s in STAGES if sc.enabled(s)]
    mesh, model = sc.mesh, sc.model

    op, psi_ext = sc.operator, sc.psi_ext
    v_min, kappa_star = min_electro_energy(mesh, sc.Q0, psi_ext)
    summary["electro"] = {"case": mesh.case, "V": v_min, "kappa_star": kappa_star, "E0": sc.E0, "Q0": sc.Q0}
    if sc.enabled("electro"):
        summary["electro"]["coercivity"] = op.coercivity_constant()
        summary["verdicts"]["electro"] = bool(sc.E0 > v_min)
        _write_fields(out / "electro_fields.csv", mesh, {
            "psi_ext": psi_ext, "doping": sc.problem.doping, "permittivity": sc.problem.permittivity}, dat)
    if not sc.E0 > v_min:
        summary["status"] = "infeasible"
        summary["error"] = f"infeasible: E0={sc.E0:.17g} does not exceed V={v_min:.17g}"
        write_summary(out / "summary.json", summary)
        print(summary["error"], file=sys.stderr)
        return 2

    equilibrium = None
    dual_result = None
    if sc.enabled("dual"):
        dual_result = _dual_stage(sc, summary, out, dat)
        if dual_result is not None:
            equilibrium = (dual_result.c, dual_result.u)
    if sc.enabled("direct"):
        primal = _direct_stage(sc, summary, out, dat, dual_result)
        if equilibrium is None and primal is not None:
            equilibrium = (primal.c, primal.u)
    if sc.enabled("evolve"):
        _evolve_stage(sc, summary, out, dat, equilibrium)

    ok = all(summary["verdicts"].values())
    if not ok:
        summary["status"] = "failed"
    write_summary(out / "summary.json", summary)
    return 0 if ok else 1


def _dual_stage(sc, summary, out, dat):
    problem = DualProblem(sc.model, sc.operator, sc.E0, sc.Q0, sc.psi_ext)
    kw = {"tol_grad": sc.solver["tol_grad"], "max_iter": sc.solver["max_iter"]}
    info = {}
    try:
        sol, res, rep = solve_dual(problem, **kw)
    except ConvergenceError as exc:
        summary["dual"] = {"converged": False, "grad_norm": exc.solution.grad_norm,
                           "iterations": exc.solution.iterations}
        summary["verdicts"]["dual"] = False
        return None
    rng = np.random.default_rng(sc.solver["seed"])
    other = minimize_k(problem, random_initial_point(problem, rng), **kw)
    info.update(
        converged=True, iterations=sol.iterations, grad_norm=sol.grad_norm, k_value=sol.value,
        eta=res.eta, kappa=res.kappa, theta=res.theta,
        uniqueness_distance=other.point.distance(sol.point), **rep,
    )
    deltas = sc.solver["deltas"]
    if deltas:
        gaps = []
        for d in sorted(deltas, reverse=True):
            s_d = minimize_k_regularized(problem, d, sol.point, **kw)
            gaps.append({"delta": d, "gap": s_d.point.distance(sol.point), "k_value": s_d.value})
        info["regularization"] = gaps
    summary["dual"] = info
    summary["verdicts"]["dual"] = bool(
        sol.grad_norm <= sc.solver["tol_grad"] and all(rep[k] <= v for k, v in DUAL_LIMITS.items())
    )
    cols = {f"c{i + 1}": res.c[:, i] for i in range(res.c.shape[1])}
    cols.update(u=res.u, Psi=res.Psi, psi=res.psi, lam=res.lam)
    _write_fields(out / "dual_fields.csv", sc.mesh, cols, dat)
    write_table(out / "dual_trace.csv", ["iteration", "K", "grad_norm", "step", "direction"], sol.trace, dat)
    return res


def _direct_stage(sc, summary, out, dat, dual_result):
    try:
        sol = maximize_entropy(sc.model, sc.operator, sc.E0, sc.Q0, sc.psi_ext, tol=sc.solver["direct_tol"],
                               max_iter=sc.solver["max_iter"])
    except StallError as exc:
        s = exc.solution
        summary["direct"] = {"converged": False, "grad_norm": s.grad_norm, "iterations": s.iterations}
        summary["verdicts"]["direct"] = False
        return None
    info = {"converged": True, "iterations": sol.iterations, "grad_norm": sol.grad_norm, "entropy": sol.entropy,
            "eta": sol.eta, "kappa": sol.kappa, "energy_residual": sol.energy_residual,
            "charge_residual": sol.charge_residual}
    verdict = True
    if dual_result is not None:
        cv = cross_validate(dual_result, sol.state, sc.mesh, sc.model)
        summary["cross_validation"] = cv
        verdict = cv["pass"]
    summary["direct"] = info
    summary["verdicts"]["direct"] = bool(verdict)
    cols = {f"c{i + 1}": sol.state.c[:, i] for i in range(sol.state.c.shape[1])}
    cols["u"] = sol.state.u
    _write_fields(out / "direct_fields.csv", sc.mesh, cols, dat)
    write_table(out / "direct_trace.csv", ["iteration", "S", "grad_norm", "energy_residual", "charge_residual"],
                sol.trace, dat)
    return sol.state


def _evolve_stage(sc, summary, out, dat, equilibrium):
    problem = EvolutionProblem(sc.model, sc.operator, sc.psi_ext, sc.network, sc.mobility)
    ev = sc.evolution
    floor = ev["floor"] if ev["floor"] is not None else default_floor(sc.model, sc.E0, sc.mesh.length)
    cert = feasible_point(sc.model, sc.operator, sc.E0, sc.Q0, sc.psi_ext, floor=floor)
    start = initial_state(problem, cert.state.c, cert.state.u)
    try:
        traj = evolve(problem, start, ev["T"], ev["dt"], equilibrium, tol=ev["tol"] if equilibrium else None)
    except StepFailure as exc:
        summary["evolution"] = {"completed": False, "error": str(exc)}
        summary["verdicts"]["evolve"] = False
        return
    inc = np.diff(traj.entropy)
    info = {
        "completed": True,
        "steps": len(traj.times) - 1,
        "final_time": traj.times[-1],
        "min_entropy_increment": float(inc.min()) if inc.size else 0.0,
        "charge_drift": float(np.max(np.abs(np.asarray(traj.charge) - sc.Q0))),
        "energy_drift": float(np.max(np.abs(np.asarray(traj.energy) - sc.E0)) / abs(sc.E0)),
        "final_distance": traj.distance[-1] if equilibrium else None,
    }
    verdict = (info["min_entropy_increment"] >= -EVOLVE_LIMITS["entropy_slack"]
               and info["charge_drift"] <= EVOLVE_LIMITS["charge_drift"]
               and info["energy_drift"] <= EVOLVE_LIMITS["energy_drift"])
    if equilibrium is not None:
        verdict = verdict and traj.distance[-1] <= EVOLVE_LIMITS["distance"]
        rc, ru = total_rate(problem, *equilibrium)
        info["equilibrium_rate_norm"] = float(max(np.abs(rc).max(), np.abs(ru).max()))
    summary["evolution"] = info
    summary["verdicts"]["evolve"] = bool(verdict)
    write_table(out / "evolution_trace.csv", ["t", "S", "E", "Q", "distance"], list(traj.rows()), dat)
    final = traj.final
    cols = {f"c{i + 1}": final.c[:, i] for i in range(final.c.shape[1])}
    cols.update(u=final.u, Psi=final.Psi)
    _write_fields(out / "evolution_final.csv", sc.mesh, cols, dat)


# -- self check -------------------------------------------------------------

SELFCHECK_TOLERANCES = {
    "legendre_round_trip": 1e-9,
    "dual_anchor": 1e-12,
    "oracle": 1e-5,
    "poisson_order": 0.2,
    "young_bound": 0,
    "minimal_energy": 1e-12,
}


def selfcheck(tolerances=None, stream=None):
    """Fast invariant suite; returns a list of ``(name, passed, value, tolerance)``."""
    tol = dict(SELFCHECK_TOLERANCES)
    tol.update(tolerances or {})
    stream = sys.stdout if stream is None else stream
    rng = np.random.default_rng(0)
    rows = []

    model = BoltzmannEntropyModel.unit((-1.0, 1.0))
    z = rng.uniform(0.05, 10.0, size=(100, 3))
    y, v = model.neg_gradient(z[:, :2], z[:, 2])
    c, u = model.dual_gradient(y, v)
    err = np.max(np.linalg.norm(np.column_stack([c, u]) - z, axis=1) / (1 + np.linalg.norm(z, axis=1)))
    rows.append(("legendre_round_trip", err <= tol["legendre_round_trip"], err, tol["legendre_round_trip"]))

    unit = BoltzmannEntropyModel.unit((1.0,))
    anchor = abs(float(unit.dual_entropy([0.0], -1.0)) - 5.0)
    rows.append(("dual_anchor", anchor <= tol["dual_anchor"], anchor, tol["dual_anchor"]))

    oracle = legendre_oracle(unit, [0.0], -1.0, box=(0.01, 20.0), levels=4)
    rel = abs(oracle - 5.0) / 5.0
    rows.append(("oracle", rel <= tol["oracle"], rel, tol["oracle"]))

    errs = []
    ns = (51, 101, 201)
    for n in ns:
        mesh = build_uniform_mesh(0.0, 1.0, n, ("dirichlet", "dirichlet"))
        op = assemble(PoissonProblem(mesh))
        psi = solve_internal_potential(op, np.ones(n))
        errs.append(l2_error(mesh, psi, lambda x: 0.5 * x * (1 - x)))
    order = float(np.polyfit(np.log([1.0 / (n - 1) for n in ns]), np.log(errs), 1)[0])
    rows.append(("poisson_order", abs(order - 2.0) <= tol["poisson_order"], order, tol["poisson_order"]))

    mu = np.linspace(-100, 100, 100)
    eta = np.linspace(1e-3, 100, 100)
    bad = sum(young_violations(p, 2.0 * (1 + p), d, mu, eta) for p in (0.5, 1, 2) for d in (0.25, 1, 4))
    rows.append(("young_bound", bad <= tol["young_bound"], float(bad), tol["young_bound"]))

    mesh = build_uniform_mesh(0.0, 1.0, 11, (("robin", 1.0), ("robin", 1.0)))
    vmin, kap = min_electro_energy(mesh, 2.0, np.zeros(11))
    dev = max(abs(vmin - 1.0), abs(kap - 1.0))
    rows.append(("minimal_energy", dev <= tol["minimal_energy"], dev, tol["minimal_energy"]))

    width = max(len(r[0]) for r in rows)
    for name, ok, value, limit in rows:
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  value={value:.3e}  tol={limit:.1e}", file=stream)
    return rows


# -- entry point --------------------------------------------------------------

def _batch_worker(args):
    path, out, stages, tol_grad, seed, dat = args
    return str(path), run_scenario(path, out, stages, tol_grad, seed, dat)


def build_parser():
    parser = argparse.ArgumentParser(prog="eerds", description="Constrained entropy-maximising equilibria.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario file or a directory of scenarios")
    run.add_argument("scenario", nargs="?", help="scenario TOML file")
    run.add_argument("-o", "--output", help=f"output directory (default ${OUTPUT_ENV} or ./eerds-output)")
    run.add_argument("--stages", help="comma-separated subset of " + ",".join(STAGES))
    run.add_argument("--tol-grad", type=float, help="override the dual gradient tolerance")
    run.add_argument("--seed", type=int, help="seed for the randomised uniqueness check")
    run.add_argument("--dat", action="store_true", help="also write gnuplot-friendly .dat files")
    run.add_argument("--batch", metavar="DIR", help="run every *.toml in DIR concurrently")
    run.add_argument("--workers", type=int, default=None, help="worker processes for --batch")
    chk = sub.add_parser("selfcheck", help="run the fast invariant suite")
    chk.add_argument("--tolerance", action="append", default=[], metavar="NAME=VALUE",
                     help="override a check tolerance (for testing the checker)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "selfcheck":
        overrides = {}
        for item in args.tolerance:
            name, _, value = item.partition("=")
            if name not in SELFCHECK_TOLERANCES:
                parser.error(f"unknown check {name!r}")
            overrides[name] = float(value)
        start = time.perf_counter()
        rows = selfcheck(overrides)
        print(f"{sum(r[1] for r in rows)}/{len(rows)} checks passed in {time.perf_counter() - start:.2f} s")
        return 0 if all(r[1] for r in rows) else 1

    out = args.output or os.environ.get(OUTPUT_ENV) or "eerds-output"
    stages = None
    if args.stages:
        stages = [s.strip() for s in args.stages.split(",") if s.strip()]
        bad = [s for s in stages if s not in STAGES]
        if bad:
            parser.error(f"unknown stage(s): {', '.join(bad)}")
    if args.batch:
        files = sorted(Path(args.batch).glob("*.toml"))
        if not files:
            parser.error(f"no *.toml scenarios in {args.batch}")
        jobs = [(f, Path(out) / f.stem, stages, args.tol_grad, args.seed, args.dat) for f in files]
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_batch_worker, jobs))
        for path, code in results:
            print(f"{path}: exit {code}")
        return max(code for _, code in results)
    if not args.scenario:
        parser.error("a scenario file or --batch DIR is required")
    code = run_scenario(args.scenario, out, stages, args.tol_grad, args.seed, args.dat)
    print(f"{args.scenario}: exit {code}, artifacts in {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
