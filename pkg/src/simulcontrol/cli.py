"""Command-line entry point.

Every subcommand writes its machine-readable result (JSON) to stdout or
``--json``; tabular data goes to CSV files. ``--emit-plots PATH`` writes a
long-format CSV with columns ``series,index,x,y`` that any plotting tool
can pivot.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .conditions import check_all
from .errors import ControlError
from .local_control import build_reference, linearized_control, load_reference, local_steer, random_tangent
from .lyapunov import LyapunovConfig, init_alpha, stabilize, write_log_csv
from .moment import FrequencyLadder, MomentProblem, build_ladder, moment_residuals, solve_moment
from .pipeline import Scenario, gate_realization, load_scenario, plan_global, prepare
from .plans import _plain
from .propagator import Control, propagate
from .spectral import (Potential, basis_to_csv, build_basis, dipole_matrix, h3_distance, make_grid,
                       sobolev_norm)


# ------------------------------------------------------------ helpers

def parse_potential(text):
    """``kind:c0,c1,...`` or a JSON object such as ``{"kind": "polynomial", "coefficients": [0, 1]}``."""
    text = text.strip()
    if text.startswith("{"):
        return Potential.from_dict(json.loads(text))
    kind, _, rest = text.partition(":")
    vals = [float(v) for v in rest.split(",") if v.strip()]
    return Potential(kind, tuple(vals))


def emit_json(obj, path=None):
    text = json.dumps(_plain(obj), sort_keys=True, indent=2)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


class LongCSV:
    """Accumulates (series, index, x, y) rows."""

    def __init__(self):
        self.rows = []

    def add(self, series, x, y, index=0):
        for a, b in zip(np.ravel(x), np.ravel(y)):
            self.rows.append((series, index, float(a), float(b)))

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("series,index,x,y\n")
            for s, i, x, y in self.rows:
                fh.write(f"{s},{i},{x!r},{y!r}\n")


def _plot_trajectory(lc, traj, stride=None):
    n = traj.times.size
    stride = stride or max(1, n // 2000)
    t = traj.times[::stride]
    st = traj.states[::stride]
    for j in range(st.shape[1]):
        for k in range(st.shape[2]):
            lc.add(f"population_{j + 1}", t, np.abs(st[:, j, k]) ** 2, index=k + 1)
    u = traj.control
    lc.add("control", u.t_grid[:-1:stride], u.samples[::stride])


def _scenario_from_args(args):
    if getattr(args, "scenario", None):
        return load_scenario(args.scenario)
    d = {"N": args.N, "K": args.K}
    sc = Scenario.from_dict(d)
    if getattr(args, "V", None):
        sc.V = parse_potential(args.V)
    if getattr(args, "mu", None):
        sc.mu = parse_potential(args.mu)
    default = json.dumps({"eigenstates": list(range(1, sc.N + 1))})
    sc.psi0_spec = json.loads(getattr(args, "psi0", None) or default)
    sc.psif_spec = json.loads(getattr(args, "psif", None) or default)
    return sc


def _add_system(p, with_N=True):
    p.add_argument("--scenario", help="YAML scenario file (overrides the options below)")
    p.add_argument("--V", default="zero:", help="potential, e.g. 'polynomial:0,1'")
    p.add_argument("--mu", default="polynomial:0,0,1", help="dipole, e.g. 'polynomial:0,0,1'")
    p.add_argument("--K", type=int, default=16)
    if with_N:
        p.add_argument("--N", type=int, default=1)
    p.add_argument("--psi0", help="initial state spec as JSON, e.g. '{\"eigenstates\": [1, 2]}'")
    p.add_argument("--psif", help="target state spec as JSON")
    p.add_argument("--json", help="write the JSON summary here instead of stdout")
    p.add_argument("--emit-plots", dest="emit_plots", help="long-format CSV for plotting")


# ------------------------------------------------------------ subcommands

def cmd_eig(args):
    V = parse_potential(args.V)
    grid = make_grid(args.n_points)
    b = build_basis(V, args.K, grid)
    if args.csv:
        basis_to_csv(b, args.csv)
    if args.emit_plots:
        lc = LongCSV()
        for k in range(b.K):
            lc.add("phi", grid.x, b.phi[k], index=k + 1)
        lc.add("lambda", np.arange(1, b.K + 1), b.lam)
        lc.write(args.emit_plots)
    emit_json({"K": b.K, "lambda": b.lam, "mean_V": b.mean_V}, args.json)
    return 0


def cmd_check_conditions(args):
    sc = _scenario_from_args(args)
    b = build_basis(sc.V, sc.K, make_grid(sc.n_points))
    d = dipole_matrix(sc.mu, b)
    reps = check_all(b, d, sc.N, args.R_max)
    emit_json({k: r.to_dict() for k, r in reps.items()}, args.json)
    return 0 if all(r.holds_at_truncation for r in reps.values()) else 1


def cmd_simulate(args):
    sc = _scenario_from_args(args)
    setup = prepare(sc)
    u = Control.from_csv(args.control) if args.control else Control.zero(args.T, 1)
    traj = propagate(setup.psi0, u, setup.basis, setup.dipole, dt_max=args.dt_max, method=args.method)
    if args.trajectory:
        traj.to_csv(args.trajectory)
    if args.emit_plots:
        lc = LongCSV()
        _plot_trajectory(lc, traj)
        lc.write(args.emit_plots)
    emit_json({"T": u.T, "norm_drift": traj.norm_drift(), "gram_drift": traj.gram_drift(),
               "final_H3": sobolev_norm(traj.states[-1], 3), "snapshots": int(traj.times.size)}, args.json)
    return 0


def cmd_lyapunov_steer(args):
    sc = _scenario_from_args(args)
    setup = prepare(sc)
    z = setup.psi0
    # explicit flags win over the scenario's lyapunov section
    cfg = LyapunovConfig(alpha=args.alpha or init_alpha(z, setup.basis, sc.N), N=sc.N, K=sc.K,
                         max_iters=sc.lyapunov_max_iters if args.max_iters is None else args.max_iters,
                         target_value=sc.lyapunov_target if args.target is None else args.target,
                         segment_T=sc.lyapunov_segment_T)
    logrows = []
    plan, state, M = stabilize(z, cfg, setup.basis, setup.dipole, log=logrows)
    if args.log:
        write_log_csv(logrows, args.log)
    u = plan.control()
    if args.control:
        u.to_csv(args.control)
    vals = plan.info["lyapunov_values"]
    if args.emit_plots:
        lc = LongCSV()
        lc.add("V", np.arange(len(vals)), vals)
        if u.samples.size:
            lc.add("control", u.t_grid[:-1], u.samples)
        lc.write(args.emit_plots)
    emit_json({"alpha": cfg.alpha, "iterations": len(vals) - 1, "V_initial": vals[0], "V_final": vals[-1],
               "M": M, "total_T": plan.total_T}, args.json)
    return 0


def cmd_moment_solve(args):
    rng = np.random.default_rng(args.seed)
    if args.omega:
        om = np.array([float(v) for v in args.omega.split(",")])
        lad = FrequencyLadder(omega=np.sort(om), pairs=[None] * om.size, R_map={}, N=0,
                              gamma=float(np.min(np.diff(np.sort(om)))) if om.size > 1 else np.inf)
    else:
        b = build_basis(parse_potential(args.V), args.K, make_grid(args.n_points))
        lad = build_ladder(b.lam, args.N, args.K)
    if args.targets:
        with open(args.targets, encoding="utf-8") as fh:
            d = np.array([complex(*v) if isinstance(v, list) else complex(v) for v in json.load(fh)])
    else:
        d = (rng.normal(size=lad.omega.size) + 1j * rng.normal(size=lad.omega.size)) * args.scale
        d[lad.omega == 0.0] = d[lad.omega == 0.0].real
    u = solve_moment(MomentProblem(lad, args.T, d))
    res = moment_residuals(u, lad.omega, d)
    if args.control:
        u.to_csv(args.control)
    if args.emit_plots:
        lc = LongCSV()
        lc.add("control", u.t_grid[:-1], u.samples)
        lc.add("residual", lad.omega, res)
        lc.write(args.emit_plots)
    emit_json({"frequencies": int(lad.omega.size), "gamma": lad.gamma, "max_residual": float(res.max()),
               "condition_number": u.condition_number, "l2_norm": u.l2_norm()}, args.json)
    return 0


def _perturbed(z, delta, rng, modes=6):
    """Orthonormal tuple at k^3-weighted distance ``delta`` from ``z``."""
    from scipy.linalg import expm
    K = z.shape[1]
    m = min(modes, K)
    H = rng.normal(size=(m, m)) + 1j * rng.normal(size=(m, m))
    Hf = np.zeros((K, K), dtype=complex)
    Hf[:m, :m] = H + H.conj().T

    def f(s):
        return z @ expm(1j * s * Hf).T
    s = delta / max(h3_distance(f(1.0), z), 1e-300)
    for _ in range(6):
        s *= delta / h3_distance(f(s), z)
    return f(s)


def cmd_local_steer(args):
    sc = _scenario_from_args(args)
    b = build_basis(sc.V, sc.K, make_grid(sc.n_points))
    d = dipole_matrix(sc.mu, b)
    if args.reference and args.load_reference:
        ref = load_reference(args.reference, b, d)
    else:
        ref = build_reference(args.eta, args.T, basis=b, B=d, N=sc.N)
        if args.reference:
            ref.save(args.reference)
    rng = np.random.default_rng(args.seed)
    start = np.zeros((sc.N, sc.K), dtype=complex)
    start[np.arange(sc.N), np.arange(sc.N)] = 1.0
    p0 = _perturbed(start, args.delta, rng)
    pf = _perturbed(ref.anchor_final, args.delta, rng)
    lin = linearized_control(np.zeros_like(start), random_tangent(ref, args.delta, rng), ref, b, d)
    res = local_steer(p0, pf, ref, b, d, tol=args.tol, max_iter=args.max_iter)
    if args.control:
        res.control.to_csv(args.control)
    if args.emit_plots:
        lc = LongCSV()
        lc.add("u_ref", ref.u_ref.t_grid[:-1], ref.u_ref.samples)
        lc.add("control", res.control.t_grid[:-1], res.control.samples)
        lc.add("newton_error", [h["iter"] for h in res.history], [h["error_H3"] for h in res.history])
        lc.write(args.emit_plots)
    emit_json({"eta": ref.eta, "theta": ref.theta, "reference_residuals": ref.residuals,
               "linearized_verification": lin.verification_error, "newton_iters": res.newton_iters,
               "final_error_H3": res.final_error_H3, "delta_used": res.delta_used}, args.json)
    return 0 if res.final_error_H3 <= args.tol else 1


def _finish_plan(plan, setup, sc, args):
    u = plan.control()
    if args.control:
        u.to_csv(args.control)
    if args.trajectory or args.emit_plots:
        traj = propagate(setup.psi0, u, setup.basis, setup.dipole, check_truncation=False) if u.samples.size \
            else None
        if traj is not None and args.trajectory:
            traj.to_csv(args.trajectory)
        if args.emit_plots:
            lc = LongCSV()
            if traj is not None:
                _plot_trajectory(lc, traj)
            lc.write(args.emit_plots)
    emit_json(plan.summary(), args.json)
    tol = args.tol if args.tol is not None else sc.tolerance
    return 0 if plan.achieved_error <= tol else 1


def _plan_args(p):
    p.add_argument("--control", help="control CSV output")
    p.add_argument("--trajectory", help="trajectory CSV output")
    p.add_argument("--tol", type=float, help="requested tolerance (default: scenario tolerance)")


def cmd_plan(args):
    sc = _scenario_from_args(args)
    if args.seed is not None:
        sc.seed = args.seed
    setup = prepare(sc)
    plan = plan_global(sc, setup)
    return _finish_plan(plan, setup, sc, args)


def named_gate(text):
    """``identity:n``, ``phase:gamma`` (diag(e^{i gamma}, 1)), ``hadamard`` or a JSON matrix."""
    text = text.strip()
    if text.startswith("["):
        return np.array([[complex(*v) if isinstance(v, list) else complex(v) for v in row]
                         for row in json.loads(text)])
    name, _, arg = text.partition(":")
    if name == "identity":
        return np.eye(int(arg or 2), dtype=complex)
    if name == "phase":
        return np.diag([np.exp(1j * float(arg or np.pi / 2)), 1.0])
    if name == "hadamard":
        return np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
    raise ValueError(f"unknown gate {text!r}")


def cmd_gate(args):
    sc = _scenario_from_args(args)
    if args.seed is not None:
        sc.seed = args.seed
    U = named_gate(args.gate)
    plan = gate_realization(U, sc)
    n = U.shape[0]
    sc2 = sc.with_states({"eigenstates": list(range(1, n + 1))},
                         {"unitary": [[[float(v.real), float(v.imag)] for v in row] for row in U]}, N=n)
    return _finish_plan(plan, prepare(sc2), sc2, args)


# ------------------------------------------------------------ parser

def build_parser():
    ap = argparse.ArgumentParser(prog="simulcontrol", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eig", help="eigenvalues and eigenfunctions of -d2/dx2 + V")
    p.add_argument("--V", default="zero:")
    p.add_argument("--K", type=int, default=16)
    p.add_argument("--n-points", dest="n_points", type=int, default=1024)
    p.add_argument("--csv", help="write k, lambda_k, r_k")
    p.add_argument("--json")
    p.add_argument("--emit-plots", dest="emit_plots")
    p.set_defaults(func=cmd_eig)

    p = sub.add_parser("check-conditions", help="spectral and coupling checks at truncation")
    _add_system(p)
    p.add_argument("--R-max", dest="R_max", type=int, default=10)
    p.set_defaults(func=cmd_check_conditions)

    p = sub.add_parser("simulate", help="propagate psi0 of a scenario under a control CSV")
    _add_system(p)
    p.add_argument("--control", help="control CSV (t,u); default zero control for --T")
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--dt-max", dest="dt_max", type=float)
    p.add_argument("--method", choices=("exact", "strang"), default="exact")
    p.add_argument("--trajectory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("lyapunov-steer", help="Lyapunov descent from psi0 of a scenario")
    _add_system(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int, help="default: scenario value (60)")
    p.add_argument("--target", type=float, help="stop once V drops below this (default: scenario value, 1e-4)")
    p.add_argument("--log", help="per-iteration CSV")
    p.add_argument("--control")
    p.set_defaults(func=cmd_lyapunov_steer)

    p = sub.add_parser("moment-solve", help="minimal-norm solution of a trigonometric moment problem")
    p.add_argument("--V", default="zero:")
    p.add_argument("--K", type=int, default=8)
    p.add_argument("--N", type=int, default=1)
    p.add_argument("--n-points", dest="n_points", type=int, default=1024)
    p.add_argument("--omega", help="explicit comma-separated frequencies instead of a ladder")
    p.add_argument("--T", type=float, default=2.0)
    p.add_argument("--targets", help="JSON list of targets ([re, im] or numbers)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=1e-2)
    p.add_argument("--control")
    p.add_argument("--json")
    p.add_argument("--emit-plots", dest="emit_plots")
    p.set_defaults(func=cmd_moment_solve)

    p = sub.add_parser("local-steer", help="reference trajectory and local exact steering")
    _add_system(p)
    p.add_argument("--eta", type=float, default=1e-3)
    p.add_argument("--T", type=float, default=4.0)
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reference", help="cache prefix (PREFIX.csv + PREFIX.json)")
    p.add_argument("--load-reference", dest="load_reference", action="store_true")
    p.add_argument("--control")
    p.set_defaults(func=cmd_local_steer)

    p = sub.add_parser("plan", help="global steering plan psi0 -> psif")
    _add_system(p)
    p.add_argument("--seed", type=int)
    _plan_args(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("gate", help="realize an n x n unitary on (phi_1..phi_n)")
    _add_system(p, with_N=False)
    p.add_argument("--gate", default="identity:2", help="identity:n, phase:gamma, hadamard or JSON")
    p.add_argument("--seed", type=int)
    p.set_defaults(N=1)
    _plan_args(p)
    p.set_defaults(func=cmd_gate)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ControlError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
