"""Command-line front end: solve, verify, export-kernel, report.

All diagnostics go to standard error; data goes to files in --out. Exit
codes follow the sysexits convention: 0 success, 1 failed verification,
2 invalid problem data, 3 solver failure, 64 usage error, 66 missing
input file. Identical inputs, seed, and flags produce byte-identical JSON
when the manifest timestamp is pinned through the environment.
"""

from __future__ import annotations

import argparse
import os
import sys

from .problem import ConfigError, parse_problem, validate
from .serialize import (RunManifest, mc_report, solution_summary, write_json,
                        write_kernel_grid_csv, write_paths_csv,
                        write_trajectories_csv)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INVALID = 2
EXIT_SOLVER = 3
EXIT_USAGE = 64
EXIT_NOINPUT = 66

METHODS = ("cos", "kernel", "nonlinear", "stochastic", "kernel-stochastic",
           "oracle")


def _err(message: str) -> None:
    print(f"mfckit: {message}", file=sys.stderr)


def _resolve_seed(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MFCKIT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"MFCKIT_SEED is not an integer: {env!r}")
    return None


def _load_problem(args):
    try:
        with open(args.problem) as fh:
            text = fh.read()
    except FileNotFoundError:
        _err(f"problem file not found: {args.problem}")
        raise SystemExit(EXIT_NOINPUT)
    except OSError as exc:
        _err(f"cannot read {args.problem}: {exc}")
        raise SystemExit(EXIT_NOINPUT)
    p = parse_problem(text, override_K=args.grid_k)
    report = validate(p)
    if not report.ok:
        for name, node, ev in report.violations[:20]:
            _err(f"validation: {name} violated at node {node} "
                 f"(eigenvalue {ev:g})")
        raise SystemExit(EXIT_INVALID)
    return p


def _manifest(args, command: str, seed) -> RunManifest:
    grid_overrides = {} if args.grid_k is None else {"K": int(args.grid_k)}
    tol = getattr(args, "tol", None)
    tol_overrides = {} if tol is None else {"tol": float(tol)}
    return RunManifest(command=command, input=args.problem,
                       out_dir=args.out, seed=seed,
                       grid_overrides=grid_overrides,
                       tol_overrides=tol_overrides)


def _initial_field(p):
    if p.ensemble is None or p.initial_field is None:
        _err("this command needs ensemble and initial_field sections "
             "in the problem file")
        raise SystemExit(EXIT_INVALID)
    return p.initial_field


def _noise_spec(p, args, seed):
    from .stochastic import NoiseSpec

    if p.noise is None:
        _err("--method stochastic needs a noise section in the problem file")
        raise SystemExit(EXIT_INVALID)
    spec = NoiseSpec.from_problem(p)
    n_paths = args.paths if args.paths is not None else spec.n_paths
    used_seed = seed if seed is not None else spec.seed
    return NoiseSpec(spec.eta, n_paths, used_seed)


def _run_method(p, X0, args, seed):
    """Dispatch one solve; returns (summary dict, artifacts dict)."""
    from . import solver, stochastic

    method = args.method
    if method == "cos":
        sol = solver.solve_cos(p, X0)
    elif method == "kernel":
        sol = solver.solve_kernel_lq(p, X0)
    elif method == "nonlinear":
        phi = solver.PhiSpec.quadratic(p)
        tol = args.tol if args.tol is not None else 1e-9
        sol = solver.solve_nonlinear(p, X0, phi, tol=tol)
    elif method == "oracle":
        tol = args.tol if args.tol is not None else 1e-8
        sol = solver.brute_force_oracle(p, X0, coarse_K=min(100, p.K),
                                        tol=tol)
    elif method in ("stochastic", "kernel-stochastic"):
        noise = _noise_spec(p, args, seed)
        if method == "stochastic":
            bundle, policy = stochastic.solve_stochastic(p)
            paths = stochastic.simulate(p, X0, noise, policy)
            V = stochastic.realized_controls(paths, policy)
            mean, stderr = stochastic.estimate_cost_mc(p, paths, V)
            value = stochastic.stochastic_value(p, X0, noise)
            residuals = {"mc_stderr": stderr}
        else:
            sol_st = stochastic.solve_kernel_stochastic(p, X0, noise)
            paths, V = sol_st.paths, sol_st.V
            mean, stderr = sol_st.mc_mean, sol_st.mc_stderr
            value = sol_st.value_closed_form
            residuals = dict(sol_st.residuals)
            residuals["mc_stderr"] = stderr
        summary = {"method": method.replace("-", "_"), "cost": float(mean),
                   "value_closed_form": float(value),
                   "residuals": residuals, "iterations": None}
        report = mc_report(mean, stderr, noise.n_paths, noise.seed, value)
        return summary, {"paths": paths, "controls": V[0],
                         "states": paths.values[0], "mc": report}
    else:
        raise AssertionError(method)
    return solution_summary(sol), {"states": sol.X.values,
                                   "controls": sol.V.values, "solution": sol}


def cmd_solve(args, command: str = "solve") -> int:
    p = _load_problem(args)
    X0 = _initial_field(p)
    seed = _resolve_seed(args)
    manifest = _manifest(args, command, seed)
    os.makedirs(args.out, exist_ok=True)
    try:
        summary, artifacts = _run_method(p, X0, args, seed)
    except (FloatingPointError, ArithmeticError) as exc:
        write_json(os.path.join(args.out, "diagnostics.json"),
                   {"error": str(exc), "kind": type(exc).__name__}, manifest)
        _err(f"solver failure: {exc}")
        return EXIT_SOLVER
    except Exception as exc:
        from .solver import FixedPointError

        if isinstance(exc, FixedPointError):
            write_json(os.path.join(args.out, "diagnostics.json"),
                       {"error": str(exc), "kind": "FixedPointError",
                        "residual_history": list(exc.history)}, manifest)
            _err(f"solver failure: {exc}")
            return EXIT_SOLVER
        raise
    with open(os.path.join(args.out, "trajectories.csv"), "w",
              newline="") as fh:
        write_trajectories_csv(fh, p.grid, artifacts["states"],
                               artifacts["controls"])
    if "paths" in artifacts:
        with open(os.path.join(args.out, "paths.csv"), "w", newline="") as fh:
            write_paths_csv(fh, artifacts["paths"])
        write_json(os.path.join(args.out, "mc_report.json"),
                   artifacts["mc"], manifest)
    write_json(os.path.join(args.out, "summary.json"), summary, manifest)
    if command == "report":
        _render_figures(p, args, artifacts)
    return EXIT_OK


def _render_figures(p, args, artifacts) -> None:
    from . import report
    from .propagator import RiccatiBundle

    report.save_trajectory_figure(p.grid, artifacts["states"],
                                  artifacts["controls"], args.out)
    report.save_riccati_figure(RiccatiBundle.build(p), args.out)
    if "paths" in artifacts:
        report.save_paths_figure(artifacts["paths"], args.out)


def cmd_verify(args) -> int:
    from . import verify

    p = None
    if args.problem is not None:
        p = _load_problem(args)
    seed = _resolve_seed(args)
    if seed is None:
        seed = 0
    manifest = _manifest(args, "verify", seed)
    names = [args.check] if args.check else None
    try:
        results = verify.run_checks(
            names, seed=seed, trials=args.trials, p=p,
            inject_gamma_sign_error=args.inject_gamma_sign_error)
    except ValueError as exc:
        _err(str(exc))
        return EXIT_USAGE
    os.makedirs(args.out, exist_ok=True)
    payload = {"checks": [r.as_dict() for r in results],
               "all_passed": all(r.passed for r in results)}
    write_json(os.path.join(args.out, "verify.json"), payload, manifest)
    for r in results:
        status = "pass" if r.passed else "FAIL"
        _err(f"check {r.name}: {status} "
             f"(worst residual {r.worst_residual:.3e}, "
             f"tolerance {r.tolerance:.0e}, trials {r.trials})")
    return EXIT_OK if payload["all_passed"] else EXIT_CHECK_FAILED


def cmd_export_kernel(args) -> int:
    from .kernel import KernelHandle

    p = _load_problem(args)
    seed = _resolve_seed(args)
    manifest = _manifest(args, "export-kernel", seed)
    if args.stride < 1:
        _err(f"--stride must be positive, got {args.stride}")
        return EXIT_USAGE
    handle = KernelHandle.build(p, include_initial_term=False)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "kernel_grid.csv")
    with open(path, "w", newline="") as fh:
        write_kernel_grid_csv(fh, handle, args.stride)
    write_json(os.path.join(args.out, "export.json"),
               {"csv": "kernel_grid.csv", "stride": int(args.stride),
                "nodes": int(p.K + 1)}, manifest)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfckit",
        description="Linear-quadratic mean-field control toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(sp, with_problem=True):
        if with_problem:
            sp.add_argument("problem", help="problem file (JSON)")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, default=None,
                        help="seed override (falls back to MFCKIT_SEED)")
        sp.add_argument("--grid-k", type=int, default=None,
                        help="override grid step count K")

    solve = sub.add_parser("solve", help="run one solver on a problem file")
    add_common(solve)
    solve.add_argument("--method", required=True, choices=METHODS)
    solve.add_argument("--paths", type=int, default=None,
                       help="scenario count override for stochastic methods")
    solve.add_argument("--tol", type=float, default=None,
                       help="tolerance override (nonlinear fixed point, "
                            "oracle descent)")

    rep = sub.add_parser("report",
                         help="solve and render figures beside the CSV")
    add_common(rep)
    rep.add_argument("--method", required=True, choices=METHODS)
    rep.add_argument("--paths", type=int, default=None)
    rep.add_argument("--tol", type=float, default=None)

    ver = sub.add_parser("verify", help="run invariant check suites")
    ver.add_argument("problem", nargs="?", default=None,
                     help="optional problem file; default is the built-in "
                          "randomized suite")
    ver.add_argument("--out", default="out")
    ver.add_argument("--seed", type=int, default=None)
    ver.add_argument("--grid-k", type=int, default=None)
    ver.add_argument("--check", default=None,
                     help="run a single named check")
    ver.add_argument("--trials", type=int, default=None,
                     help="trial count per check")
    ver.add_argument("--inject-gamma-sign-error", action="store_true",
                     help=argparse.SUPPRESS)

    exp = sub.add_parser("export-kernel",
                         help="dump kernel blocks over the node lattice")
    add_common(exp)
    exp.add_argument("--stride", type=int, default=1,
                     help="node stride of the exported lattice")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; the contract wants 64
        if exc.code not in (0, None):
            return EXIT_USAGE
        raise
    try:
        if args.command == "solve":
            return cmd_solve(args)
        if args.command == "report":
            return cmd_solve(args, command="report")
        if args.command == "verify":
            return cmd_verify(args)
        if args.command == "export-kernel":
            return cmd_export_kernel(args)
    except ConfigError as exc:
        _err(f"invalid problem: {exc}")
        return EXIT_INVALID
    except SystemExit as exc:
        return int(exc.code)
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
