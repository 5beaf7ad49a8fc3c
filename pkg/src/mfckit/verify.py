"""Named invariant suites behind the command-line verify path.

Each check is a self-contained randomized experiment with a fixed seed
policy: trial i of a run with seed s draws from streams keyed by (s, i),
so reports are reproducible and extending the trial count only appends
trials. Checks return their worst residual against an absolute tolerance;
the deliberate-fault hook flips the sign of the consistency combination
in the Riccati check so the harness can prove the check has teeth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ensemble import Ensemble, Field
from .kernel import KernelHandle, reproducing_residual
from .problem import ProblemSpec
from .propagator import RiccatiBundle, weak_riccati_residual
from .rng import stream
from .solver import solve_cos, solve_kernel_lq
from .stochastic import (NoiseSpec, realized_controls, simulate,
                         solve_kernel_stochastic, solve_stochastic,
                         stochastic_value)

# stream indices for the verify suite, away from path and ensemble streams
_CHECK_STREAM = 2 ** 48


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst_residual: float
    tolerance: float
    trials: int

    def as_dict(self) -> dict:
        return {"check_name": self.name,
                "status": "pass" if self.passed else "fail",
                "worst_residual": float(self.worst_residual),
                "tolerance": float(self.tolerance),
                "trials": int(self.trials)}


def _random_problem(gen, n, d, K, time_varying=False):
    """A well-conditioned random instance, mirrored from the test suite."""
    from .problem import parse_problem_dict

    def spd(k, scale):
        A = gen.normal(size=(k, k))
        return scale * (A @ A.T + k * np.eye(k))

    T = 1.0
    cfg = {
        "dims": {"n": n, "d": d},
        "grid": {"T": T, "K": K},
        "coefficients": {
            "F": gen.normal(scale=0.4, size=(n, n)).tolist(),
            "Fbar": gen.normal(scale=0.3, size=(n, n)).tolist(),
            "G": gen.normal(scale=0.6, size=(n, d)).tolist(),
            "f": gen.normal(scale=0.3, size=n).tolist(),
            "M": spd(n, 0.3).tolist(),
            "Mbar": spd(n, 0.2).tolist(),
            "S": gen.normal(scale=0.4, size=(n, n)).tolist(),
            "N": spd(d, 0.5).tolist(),
            "alpha": gen.normal(scale=0.2, size=n).tolist(),
            "beta": gen.normal(scale=0.2, size=d).tolist(),
        },
        "terminal": {
            "M_T": spd(n, 0.3).tolist(),
            "Mbar_T": spd(n, 0.2).tolist(),
            "S_T": gen.normal(scale=0.4, size=(n, n)).tolist(),
            "alpha_T": gen.normal(scale=0.2, size=n).tolist(),
        },
    }
    return parse_problem_dict(cfg)


def _random_state(gen, N, n) -> Field:
    pts = gen.normal(size=(N, n))
    w = gen.uniform(0.5, 1.5, size=N)
    w = w / w.sum()
    w[-1] = 1.0 - w[:-1].sum()
    ens = Ensemble(pts, w)
    return Field(ens, gen.normal(size=(N, n)))


def _independent_gamma(pi: ProblemSpec, bundle: RiccatiBundle) -> np.ndarray:
    """Integrate the mean-interaction block by its own backward equation.

    Subtracting the two Riccati equations leaves an equation for the
    difference driven by the already-solved deviation block, so this path
    never touches the mean-block integration it is checked against.
    """
    from .grids import rk4_segment

    sc = bundle.coeffs
    out = np.zeros((pi.K + 1, pi.n, pi.n))
    out[pi.K] = pi.terminal_mean_block() - pi.terminal_dev_block()

    def rhs(k, s, G):
        P = bundle.P_st.stage(k, s)
        F = sc.F.stage(k, s)
        FF = sc.FF.stage(k, s)
        gng = sc.GNG.stage(k, s)
        S = P + G
        drift = FF.T @ G + G @ FF + (FF - F).T @ P + P @ (FF - F)
        quad = S @ gng @ S - P @ gng @ P
        load = sc.MMS.stage(k, s) - sc.MM.stage(k, s)
        return -(drift - quad + load)

    rk4_segment(out, pi.K, 0, pi.h, rhs)
    return out


def check_riccati(seed: int, trials: int, p: ProblemSpec | None,
                  inject_gamma_sign_error: bool = False) -> CheckResult:
    """Gamma consistency and the weak operator Riccati identity."""
    worst = 0.0
    for i in range(trials):
        gen = stream(seed, _CHECK_STREAM + i)
        pi = p if p is not None else _random_problem(gen, 2, 1, 200)
        bundle = RiccatiBundle.build(pi)
        gamma = bundle.Gamma.values
        if inject_gamma_sign_error:
            gamma = -gamma
        gap = np.max(np.abs(gamma - _independent_gamma(pi, bundle)))
        worst = max(worst, float(gap))
        tol_weak = 10.0 * pi.h * pi.h
        X = _random_state(gen, 6, pi.n)
        Y = Field(X.ensemble, gen.normal(size=X.values.shape))
        for k in (pi.K // 4, pi.K // 2, (3 * pi.K) // 4):
            r = abs(weak_riccati_residual(bundle, k, X, Y))
            # scale the weak defect onto the pointwise tolerance axis
            worst = max(worst, r / tol_weak * 1e-8)
    return CheckResult("riccati", worst <= 1e-8, worst, 1e-8, trials)


def check_cross_method(seed: int, trials: int,
                       p: ProblemSpec | None) -> CheckResult:
    """Value agreement between the closed form and the kernel route."""
    worst = 0.0
    for i in range(trials):
        gen = stream(seed, _CHECK_STREAM + i)
        pi = p if p is not None else _random_problem(gen, 2, 1, 300)
        X0 = pi.initial_field if pi.initial_field is not None \
            else _random_state(gen, 6, pi.n)
        a = solve_cos(pi, X0)
        b = solve_kernel_lq(pi, X0)
        rel = abs(a.cost - b.cost) / (1.0 + abs(a.cost))
        worst = max(worst, float(rel))
    return CheckResult("cross_method", worst <= 1e-5, worst, 1e-5, trials)


def check_reproducing(seed: int, trials: int,
                      p: ProblemSpec | None) -> CheckResult:
    """Reproducing identity of the trajectory kernel on random data."""
    from .kernel import TrajectoryWithControl
    from .ensemble import FieldPath
    from .grids import NodeMid, rk4_segment
    from .propagator import StageCoeffs

    worst = 0.0
    for i in range(trials):
        gen = stream(seed, _CHECK_STREAM + i)
        pi = p if p is not None else _random_problem(gen, 2, 1, 400)
        handle = KernelHandle.build(pi, include_initial_term=False)
        N = 5
        ens = _random_state(gen, N, pi.n).ensemble
        # smooth control, state integrated by the dynamics
        a = gen.normal(size=(N, pi.d))
        b = gen.normal(size=(N, pi.d))
        nodes = pi.grid.nodes
        V = (np.sin(np.pi * nodes)[:, None, None] * a
             + nodes[:, None, None] * b)
        v_st = NodeMid.from_samples(V)
        sc = StageCoeffs(pi)
        w = ens.weights

        def rhs(k, s, y):
            ybar = w @ y
            return ((y - ybar) @ sc.F.stage(k, s).T
                    + ybar @ sc.FF.stage(k, s).T
                    + v_st.stage(k, s) @ sc.G.stage(k, s).T)

        xi = np.zeros((pi.K + 1, N, pi.n))
        rk4_segment(xi, 0, pi.K, pi.h, rhs)
        traj = TrajectoryWithControl(FieldPath(ens, xi, grid=pi.grid),
                                     FieldPath(ens, V, grid=pi.grid))
        Z = Field(ens, gen.normal(size=(N, pi.n)))
        kt = int(gen.integers(pi.K // 2, pi.K + 1))
        t = nodes[kt]
        r = reproducing_residual(handle, traj, t, Z)
        lhs = float(np.einsum("N,Ni,Ni->", w, xi[kt], Z.values))
        worst = max(worst, float(r / (1.0 + abs(lhs))))
    return CheckResult("reproducing", worst <= 1e-6, worst, 1e-6, trials)


def check_stochastic(seed: int, trials: int,
                     p: ProblemSpec | None) -> CheckResult:
    """Noiseless reduction of every stochastic entry point."""
    worst = 0.0
    for i in range(trials):
        gen = stream(seed, _CHECK_STREAM + i)
        pi = p if p is not None else _random_problem(gen, 2, 1, 150)
        X0 = pi.initial_field if pi.initial_field is not None \
            else _random_state(gen, 5, pi.n)
        zero = NoiseSpec(np.zeros((pi.n, pi.n)), 2, seed=seed)
        det = solve_cos(pi, X0)
        bundle, policy = solve_stochastic(pi)
        paths = simulate(pi, X0, zero, policy)
        V = realized_controls(paths, policy)
        worst = max(worst, float(np.max(np.abs(paths.values - det.X.values))))
        worst = max(worst, float(np.max(np.abs(V - det.V.values))))
        worst = max(worst, abs(stochastic_value(pi, X0, zero)
                               - det.value_closed_form))
        detk = solve_kernel_lq(pi, X0)
        sol = solve_kernel_stochastic(pi, X0, zero)
        worst = max(worst, float(np.max(np.abs(sol.paths.values
                                               - detk.X.values))))
        worst = max(worst, float(np.max(np.abs(sol.V - detk.V.values))))
    return CheckResult("stochastic", worst <= 1e-10, worst, 1e-10, trials)


_CHECKS = {
    "riccati": (check_riccati, 3),
    "cross_method": (check_cross_method, 3),
    "reproducing": (check_reproducing, 5),
    "stochastic": (check_stochastic, 2),
}


def available_checks() -> list[str]:
    return list(_CHECKS)


def run_checks(names=None, seed: int = 0, trials: int | None = None,
               p: ProblemSpec | None = None,
               inject_gamma_sign_error: bool = False) -> list[CheckResult]:
    """Run the selected suites and collect their reports."""
    selected = list(_CHECKS) if not names else list(names)
    results = []
    for name in selected:
        if name not in _CHECKS:
            raise ValueError(f"unknown check {name!r}; available: "
                             + ", ".join(_CHECKS))
        fn, default_trials = _CHECKS[name]
        count = default_trials if trials is None else trials
        if name == "riccati":
            results.append(fn(seed, count, p,
                              inject_gamma_sign_error=inject_gamma_sign_error))
        else:
            results.append(fn(seed, count, p))
    return results
