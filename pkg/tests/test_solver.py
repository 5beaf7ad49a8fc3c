"""Solution routes: completion of square, kernel variational, nonlinear
terminal, and the brute-force oracle.

Independent references: a plain-python loop quadrature for the cost, the
analytic value tanh(T)/2 of the scalar worked case, a standalone
single-agent LQR built on scipy's DOP853, and exact closed forms for the
kernel-weighted quadrature on the min(s, t) kernel.
"""

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from conftest import (
    make_problem,
    random_ensemble,
    random_field,
    random_problem,
    two_point_ensemble,
)
from mfckit.ensemble import Ensemble, Field, FieldPath, inner_H
from mfckit.grids import piecewise_simpson
from mfckit.kernel import (
    KernelHandle,
    TrajectoryWithControl,
    rkhs_inner,
    rkhs_norm_sq,
)
from mfckit.solver import (
    FixedPointError,
    PhiSpec,
    Solution,
    brute_force_oracle,
    cost,
    cost_split,
    drift_trajectory,
    euler_residual,
    phi_gradient,
    phi_value,
    quadrature_response,
    solve_cos,
    solve_kernel_lq,
    solve_nonlinear,
)
from mfckit.solver import _lq_backward_forward, _source_stages, \
    _state_under_control, _terminal_source
from mfckit.propagator import RiccatiBundle
from test_kernel import control_trajectory

WORKED_VALUE = 0.5 * np.tanh(1.0)


def classical_lqr(A, B, Q, R, QT, T, times, x0,
                  f=None, alpha=None, beta=None, alpha_T=None):
    """Single-agent LQ reference solved with DOP853 at tight tolerance."""
    A = np.atleast_2d(np.asarray(A, float))
    n = A.shape[0]
    B = np.asarray(B, float).reshape(n, -1)
    d = B.shape[1]
    Q = np.atleast_2d(np.asarray(Q, float))
    R = np.atleast_2d(np.asarray(R, float))
    QT = np.atleast_2d(np.asarray(QT, float))
    f = np.zeros(n) if f is None else np.asarray(f, float).reshape(n)
    alpha = np.zeros(n) if alpha is None else np.asarray(alpha, float).reshape(n)
    beta = np.zeros(d) if beta is None else np.asarray(beta, float).reshape(d)
    alpha_T = (np.zeros(n) if alpha_T is None
               else np.asarray(alpha_T, float).reshape(n))
    Rinv = np.linalg.inv(R)
    BRB = B @ Rinv @ B.T

    def back(t, y):
        # reversed time: y(t) holds [P, lam, c] at s = T - t
        P = y[:n * n].reshape(n, n)
        lam = y[n * n:n * n + n]
        blam = B.T @ lam + beta
        dP = P @ A + A.T @ P - P @ BRB @ P + Q
        dlam = A.T @ lam - P @ BRB @ lam + alpha + P @ (f - B @ Rinv @ beta)
        dc = f @ lam - 0.5 * blam @ Rinv @ blam
        return np.concatenate([dP.ravel(), dlam, [dc]])

    y0 = np.concatenate([QT.ravel(), alpha_T, [0.0]])
    bw = solve_ivp(back, (0.0, T), y0, method="DOP853",
                   rtol=1e-12, atol=1e-14, dense_output=True)

    def P_at(s):
        return bw.sol(T - s)[:n * n].reshape(n, n)

    def lam_at(s):
        return bw.sol(T - s)[n * n:n * n + n]

    def fwd(s, x):
        P = P_at(s)
        lam = lam_at(s)
        return (A - BRB @ P) @ x - B @ Rinv @ (B.T @ lam + beta) + f

    fsol = solve_ivp(fwd, (0.0, T), np.asarray(x0, float).reshape(n),
                     method="DOP853", rtol=1e-12, atol=1e-14,
                     dense_output=True)
    xs = np.stack([fsol.sol(t) for t in times])
    us = np.stack([
        -Rinv @ (B.T @ (P_at(t) @ fsol.sol(t) + lam_at(t)) + beta)
        for t in times])
    x0v = np.asarray(x0, float).reshape(n)
    value = (0.5 * x0v @ P_at(0.0) @ x0v + lam_at(0.0) @ x0v
             + bw.sol(T)[-1])
    return {"x": xs, "u": us, "value": float(value)}


def worked_problem(K=400):
    return make_problem(K=K)


# ---------------------------------------------------------------------- cost


def test_cost_zero_cost_matrices():
    p = make_problem(M=0.0, K=60)
    ens = two_point_ensemble()
    X0 = Field(ens, np.array([[0.4], [-0.9]]))
    V = FieldPath.zero(ens, p.K + 1, 1, grid=p.grid)
    assert cost(p, X0, V) == 0.0


def test_cost_null_trajectory():
    p = make_problem(M=1.0, M_T=0.3, alpha=0.0, K=60)
    ens = two_point_ensemble()
    X0 = Field(ens, np.zeros((2, 1)))
    V = FieldPath.zero(ens, p.K + 1, 1, grid=p.grid)
    assert cost(p, X0, V) == 0.0


def test_cost_matches_scalar_loop_oracle():
    p = make_problem(F=0.3, Fbar=0.2, f=0.1, M=0.8, Mbar=0.4, alpha=0.2,
                     N=2.0, M_T=0.6, alpha_T=0.1, K=150)
    ens = two_point_ensemble()
    X0 = Field(ens, np.array([[0.4], [-0.9]]))
    V = FieldPath.zero(ens, p.K + 1, 1, grid=p.grid)
    got = cost(p, X0, V)

    h = p.h

    def rhs(pair):
        xbar = 0.5 * pair[0] + 0.5 * pair[1]
        return [0.3 * x + 0.2 * xbar + 0.1 for x in pair]

    def step(pair):
        k1 = rhs(pair)
        k2 = rhs([x + 0.5 * h * k for x, k in zip(pair, k1)])
        k3 = rhs([x + 0.5 * h * k for x, k in zip(pair, k2)])
        k4 = rhs([x + h * k for x, k in zip(pair, k3)])
        return [x + h / 6.0 * (a + 2 * b + 2 * c + e)
                for x, a, b, c, e in zip(pair, k1, k2, k3, k4)]

    def integrand(pair):
        xbar = 0.5 * pair[0] + 0.5 * pair[1]
        devsq = 0.5 * (pair[0] - xbar) ** 2 + 0.5 * (pair[1] - xbar) ** 2
        return 0.5 * 1.2 * (devsq + xbar ** 2) + 0.2 * xbar

    pair = [0.4, -0.9]
    samples = [integrand(pair)]
    for _ in range(p.K):
        pair = step(pair)
        samples.append(integrand(pair))
    ref = h * (0.5 * samples[0] + sum(samples[1:-1]) + 0.5 * samples[-1])
    xbar = 0.5 * pair[0] + 0.5 * pair[1]
    devsq = 0.5 * (pair[0] - xbar) ** 2 + 0.5 * (pair[1] - xbar) ** 2
    ref += 0.5 * 0.6 * (devsq + xbar ** 2) + 0.1 * xbar
    assert abs(got - ref) < 1e-12


def test_cost_two_forms_agree():
    p = random_problem(71, n=2, K=120, time_varying=True)
    ens = random_ensemble(72, 5, 2)
    X0 = random_field(73, ens, 2)
    gen = np.random.Generator(np.random.Philox(key=[74, 905]))
    V = FieldPath(ens, gen.normal(size=(p.K + 1, 5, 1)), grid=p.grid)
    a = cost(p, X0, V, form="operator")
    b = cost(p, X0, V, form="raw")
    assert abs(a - b) <= 1e-10 * (1.0 + abs(a))


def test_cost_decomposition_identity():
    p = random_problem(75, n=2, K=100)
    ens = random_ensemble(76, 6, 2)
    X0 = random_field(77, ens, 2)
    gen = np.random.Generator(np.random.Philox(key=[78, 905]))
    V = FieldPath(ens, gen.normal(size=(p.K + 1, 6, 1)), grid=p.grid)
    total = cost(p, X0, V)
    dev_part, mean_part = cost_split(p, X0, V)
    assert abs(total - (dev_part + mean_part)) <= 1e-10 * (1.0 + abs(total))


# ----------------------------------------------------------------- solve_cos


def test_solve_cos_zero_data():
    p = make_problem(M=0.0, F=0.2, K=80)
    ens = two_point_ensemble()
    X0 = Field(ens, np.array([[0.3], [-0.6]]))
    sol = solve_cos(p, X0)
    assert np.array_equal(sol.V.values, np.zeros_like(sol.V.values))
    assert sol.value_closed_form == 0.0
    assert sol.cost == 0.0


def test_solve_cos_scalar_worked_value():
    p = worked_problem()
    ens = two_point_ensemble()
    X0 = Field.coordinates(ens)
    sol = solve_cos(p, X0)
    assert abs(sol.value_closed_form - WORKED_VALUE) < 1e-9
    assert abs(sol.cost - sol.value_closed_form) < 1e-5


def test_solve_cos_control_is_feedback_of_state():
    p = random_problem(79, n=2, d=2, K=120, time_varying=True)
    ens = random_ensemble(80, 5, 2)
    X0 = random_field(81, ens, 2)
    sol = solve_cos(p, X0)
    bundle = RiccatiBundle.build(p)
    w = ens.weights
    for k in (0, 40, 120):
        px = bundle.apply_P_arr(k, sol.X.values[k], w)
        px = px + bundle.lam.values[k]
        ninv = np.linalg.inv(p.N.values[k])
        expect = -px @ (p.G.values[k] @ ninv) - p.beta.values[k] @ ninv
        assert np.max(np.abs(sol.V.values[k] - expect)) < 1e-12


def test_solve_cos_matches_classical_lqr_mean_only():
    p = make_problem(F=0.3, Fbar=0.2, G=1.2, M=0.7, Mbar=0.3, S=0.4, N=1.5,
                     M_T=0.5, Mbar_T=0.2, S_T=0.1, f=0.15, alpha=0.1,
                     beta=0.05, alpha_T=0.2, K=300)
    ens = random_ensemble(82, 6, 1)
    X0 = Field.constant(ens, [0.7])
    sol = solve_cos(p, X0)

    Q = 0.7 + 0.3 * (1.0 - 0.4) ** 2
    QT = 0.5 + 0.2 * (1.0 - 0.1) ** 2
    ref = classical_lqr(A=0.5, B=1.2, Q=Q, R=1.5, QT=QT, T=1.0,
                        times=p.grid.nodes, x0=[0.7], f=[0.15],
                        alpha=[0.1], beta=[0.05], alpha_T=[0.2])
    assert abs(sol.value_closed_form - ref["value"]) < 1e-8
    assert np.max(np.abs(sol.X.means() - ref["x"])) < 1e-7
    assert np.max(np.abs(sol.V.means() - ref["u"])) < 1e-7
    # a constant initial field stays constant: no deviation develops
    spread = sol.X.values - sol.X.means()[:, None, :]
    assert np.max(np.abs(spread)) < 1e-12


def test_one_particle_reduces_to_single_agent_lq():
    gen = np.random.Generator(np.random.Philox(key=[83, 906]))
    n = 2
    F = 0.4 * gen.normal(size=(n, n))
    Fb = 0.3 * gen.normal(size=(n, n))
    M = gen.normal(size=(n, n))
    M = M @ M.T / n + 0.2 * np.eye(n)
    Mb = gen.normal(size=(n, n))
    Mb = Mb @ Mb.T / n + 0.1 * np.eye(n)
    S = 0.5 * gen.normal(size=(n, n))
    MT = gen.normal(size=(n, n))
    MT = MT @ MT.T / n + 0.1 * np.eye(n)
    G = gen.normal(size=(n, 1))
    f = 0.2 * gen.normal(size=n)
    alpha = 0.2 * gen.normal(size=n)
    p = make_problem(n=n, d=1, K=300, F=F.tolist(), Fbar=Fb.tolist(),
                     G=G.tolist(), M=M.tolist(), Mbar=Mb.tolist(),
                     S=S.tolist(), N=[[1.3]], M_T=MT.tolist(),
                     f=f.tolist(), alpha=alpha.tolist(), beta=[0.1],
                     alpha_T=[0.1, -0.2])
    ens = Ensemble(np.array([[0.6, -0.2]]), np.array([1.0]))
    X0 = Field(ens, np.array([[0.6, -0.2]]))
    sol = solve_cos(p, X0)
    ImS = np.eye(n) - S
    Q = M + ImS.T @ Mb @ ImS
    # Mbar_T is zero here, so the terminal mean block collapses to M_T
    QT = MT
    ref = classical_lqr(A=F + Fb, B=G, Q=Q, R=[[1.3]], QT=QT, T=1.0,
                        times=p.grid.nodes, x0=[0.6, -0.2], f=f,
                        alpha=alpha, beta=[0.1], alpha_T=[0.1, -0.2])
    assert abs(sol.value_closed_form - ref["value"]) < 1e-8
    assert np.max(np.abs(sol.X.values[:, 0, :] - ref["x"])) < 1e-7
    assert np.max(np.abs(sol.V.values[:, 0, :] - ref["u"])) < 1e-7
    kern = solve_kernel_lq(p, X0)
    assert np.max(np.abs(kern.X.values - sol.X.values)) < 1e-7
    assert np.max(np.abs(kern.V.values - sol.V.values)) < 1e-7


# ------------------------------------------------------------ drift & kernel


def test_drift_trajectory_constant_and_linear():
    p = make_problem(K=50)
    ens = two_point_ensemble()
    X0 = Field(ens, np.array([[0.2], [-0.5]]))
    path = drift_trajectory(p, X0)
    assert np.array_equal(path.values,
                          np.broadcast_to(X0.values, path.values.shape))
    p2 = make_problem(f=0.3, K=50)
    path2 = drift_trajectory(p2, X0)
    expect = X0.values[None] + 0.3 * p2.grid.nodes[:, None, None]
    assert np.max(np.abs(path2.values - expect)) < 1e-14


def test_drift_trajectory_matches_refined_grid():
    coarse = random_problem(85, n=2, K=100)
    fine = random_problem(85, n=2, K=1000)
    ens = random_ensemble(86, 4, 2)
    X0 = random_field(87, ens, 2)
    a = drift_trajectory(coarse, X0)
    b = drift_trajectory(fine, X0)
    assert np.max(np.abs(a.values - b.values[::10])) < 1e-7


def test_solve_kernel_zero_data():
    p = make_problem(M=0.0, F=0.1, K=60)
    ens = two_point_ensemble()
    X0 = Field(ens, np.zeros((2, 1)))
    sol = solve_kernel_lq(p, X0)
    assert np.array_equal(sol.X.values, np.zeros_like(sol.X.values))
    assert np.array_equal(sol.V.values, np.zeros_like(sol.V.values))
    assert sol.cost == 0.0


def test_solve_kernel_scalar_worked_case():
    p = worked_problem()
    ens = two_point_ensemble()
    X0 = Field.coordinates(ens)
    kern = solve_kernel_lq(p, X0)
    cos = solve_cos(p, X0)
    assert abs(kern.cost - cos.value_closed_form) <= 1e-6 * (
        1.0 + abs(cos.value_closed_form))
    assert np.max(np.abs(kern.X.values - cos.X.values)) < 1e-8
    assert np.max(np.abs(kern.V.values - cos.V.values)) < 1e-8


def test_cross_method_agreement_random_problems():
    cases = [(201, 1, 1), (202, 2, 1), (203, 2, 2), (204, 3, 2)]
    for seed, n, d in cases:
        p = random_problem(seed, n=n, d=d, K=300, time_varying=bool(seed % 2))
        ens = random_ensemble(seed + 1, 8, n)
        X0 = random_field(seed + 2, ens, n)
        cos = solve_cos(p, X0)
        kern = solve_kernel_lq(p, X0)
        assert abs(cos.cost - kern.cost) <= 1e-5 * (1.0 + abs(cos.cost))
        assert np.max(np.abs(cos.X.values - kern.X.values)) < 5e-5
        assert np.max(np.abs(cos.V.values - kern.V.values)) < 1e-3


def test_cross_method_gap_shrinks_at_fourth_order_rate():
    # the stiffest of the random cases above; both routes are fourth order,
    # so halving the step must shrink the path gap well beyond the factor 4
    # a second-order defect would allow
    gaps = {}
    for K in (300, 600):
        p = random_problem(203, n=2, d=2, K=K, time_varying=True)
        ens = random_ensemble(204, 8, 2)
        X0 = random_field(205, ens, 2)
        cos = solve_cos(p, X0)
        kern = solve_kernel_lq(p, X0)
        gaps[K] = max(np.max(np.abs(cos.X.values - kern.X.values)),
                      np.max(np.abs(cos.V.values - kern.V.values)))
    assert gaps[300] / gaps[600] > 6.0
    assert gaps[600] < 1e-4


def test_quadrature_response_min_kernel_closed_form():
    ens = two_point_ensemble()
    a = np.array([[1.0], [-0.5]])
    gT = np.array([[0.3], [0.8]])
    for J0, C in ((None, 0.0), (2.0, 0.5)):
        kwargs = {} if J0 is None else {"J0": J0}
        p = make_problem(M=0.0, K=100, **kwargs)
        handle = KernelHandle.build(p, include_initial_term=J0 is not None)
        g = FieldPath(ens, np.broadcast_to(
            a, (p.K + 1, 2, 1)).copy(), grid=p.grid)
        out = quadrature_response(handle, g, Field(ens, gT))
        s = p.grid.nodes[:, None, None]
        expect = C * a * p.T + (s - 0.5 * s ** 2) * a + (C + s) * gT
        assert np.max(np.abs(out.values - expect)) < 1e-13


def test_euler_residual_of_kernel_solution():
    p = worked_problem(K=500)
    ens = two_point_ensemble()
    X0 = Field.coordinates(ens)
    assert euler_residual(p, X0, solve_kernel_lq(p, X0)) <= 1e-6

    p2 = random_problem(206, n=1, K=1000, affine=False)
    ens2 = random_ensemble(207, 6, 1)
    X02 = random_field(208, ens2, 1)
    assert euler_residual(p2, X02, solve_kernel_lq(p2, X02)) <= 1e-6


def test_euler_residual_refines_at_second_order():
    # the residual check quadrature is the pinned trapezoid, so on a problem
    # with a larger source scale the residual sits higher but must shrink
    # by a factor of four per halving
    res = {}
    for K in (1000, 2000):
        p = random_problem(205, n=2, K=K)
        ens = random_ensemble(206, 6, 2)
        X0 = random_field(207, ens, 2)
        res[K] = euler_residual(p, X0, solve_kernel_lq(p, X0))
    assert 3.5 <= res[1000] / res[2000] <= 4.5


# ------------------------------------------------------------- terminal cost


def test_phi_gradient_quadratic_identity_map():
    p = make_problem(M_T=1.0, K=20)
    ens = random_ensemble(90, 5, 1)
    XT = random_field(91, ens, 1)
    out = phi_gradient(PhiSpec.quadratic(p), XT)
    assert np.max(np.abs(out.values - XT.values)) < 1e-14


def test_phi_gradient_standard_gaussian():
    phi = PhiSpec.gradient_log_density(lambda x: -x)
    ens = random_ensemble(92, 5, 2)
    XT = random_field(93, ens, 2)
    out = phi_gradient(phi, XT)
    assert np.array_equal(out.values, XT.values)


def test_phi_gradient_quadratic_matches_finite_differences():
    p = random_problem(94, n=2, K=20)
    phi = PhiSpec.quadratic(p)
    ens = random_ensemble(95, 6, 2)
    XT = random_field(96, ens, 2)
    grad = phi_gradient(phi, XT)
    eps = 1e-4
    for trial in range(5):
        H = random_field(97 + trial, ens, 2)
        plus = phi_value(phi, Field(ens, XT.values + eps * H.values))
        minus = phi_value(phi, Field(ens, XT.values - eps * H.values))
        fd = (plus - minus) / (2.0 * eps)
        direct = inner_H(grad, H)
        assert abs(fd - direct) <= 1e-6 * (1.0 + abs(direct))


def test_phi_callback_failure_names_particle():
    ens = random_ensemble(98, 5, 2)
    XT = random_field(99, ens, 2)
    poison = XT.values[2]

    def grad_fn(xs):
        if np.any(np.all(xs == poison, axis=-1)):
            raise RuntimeError("cannot evaluate here")
        return -xs

    with pytest.raises(ValueError, match="particle 2"):
        phi_gradient(PhiSpec.gradient_log_density(grad_fn), XT)

    def nonfinite(xs):
        out = -np.array(xs, dtype=float)
        out[np.all(xs == XT.values[1], axis=-1)] = np.inf
        return out

    with pytest.raises(ValueError, match="non-finite.*particle 1"):
        phi_gradient(PhiSpec.gradient_log_density(nonfinite), XT)

    with pytest.raises(ValueError, match="shape"):
        phi_gradient(PhiSpec.gradient_log_density(
            lambda xs: xs.sum(axis=-1)), XT)

    with pytest.raises(ValueError, match="must return a Field"):
        phi_gradient(PhiSpec.custom(lambda X, e: X.values), XT)


def test_solve_nonlinear_quadratic_matches_kernel_lq():
    p = make_problem(n=2, d=1, K=300, F=[[0.2, -0.1], [0.05, 0.3]],
                     Fbar=[[0.1, 0.0], [0.0, 0.1]], G=[[1.0], [0.4]],
                     M=[[0.6, 0.1], [0.1, 0.5]], Mbar=[[0.2, 0.0], [0.0, 0.2]],
                     N=[[1.2]], M_T=[[0.3, 0.0], [0.0, 0.3]],
                     f=[0.1, -0.05], alpha=[0.2, 0.1], beta=[0.05],
                     alpha_T=[0.1, -0.1])
    ens = random_ensemble(209, 6, 2)
    X0 = random_field(210, ens, 2)
    lq = solve_kernel_lq(p, X0)
    sol = solve_nonlinear(p, X0, PhiSpec.quadratic(p), tol=1e-10, max_iter=40)
    assert sol.iterations <= 30
    assert np.max(np.abs(sol.X.values - lq.X.values)) <= 1e-6
    assert np.max(np.abs(sol.V.values - lq.V.values)) <= 1e-6
    assert abs(sol.cost - lq.cost) <= 1e-8 * (1.0 + abs(lq.cost))


def test_solve_nonlinear_quadratic_stiff_terminal():
    # terminal curvature large enough that undamped iteration is marginal;
    # the residual-based halving must still carry it to convergence
    p = random_problem(208, n=2, K=300)
    ens = random_ensemble(209, 6, 2)
    X0 = random_field(210, ens, 2)
    lq = solve_kernel_lq(p, X0)
    sol = solve_nonlinear(p, X0, PhiSpec.quadratic(p), tol=1e-9, max_iter=80)
    assert np.max(np.abs(sol.X.values - lq.X.values)) <= 1e-6
    assert np.max(np.abs(sol.V.values - lq.V.values)) <= 1e-6
    assert abs(sol.cost - lq.cost) <= 1e-8 * (1.0 + abs(lq.cost))


def test_solve_nonlinear_zero_phi_is_zero_terminal_lq():
    gen = np.random.Generator(np.random.Philox(key=[211, 906]))
    n = 2
    F = 0.4 * gen.normal(size=(n, n))
    M = gen.normal(size=(n, n))
    M = M @ M.T / n + 0.3 * np.eye(n)
    G = gen.normal(size=(n, 1))
    base = dict(n=n, d=1, K=150, F=F.tolist(), G=G.tolist(), M=M.tolist(),
                N=[[1.1]], alpha=[0.2, -0.1], f=[0.1, 0.3])
    p = make_problem(**base, M_T=(0.4 * np.eye(n)).tolist())
    p_zero = make_problem(**base)
    ens = random_ensemble(212, 5, n)
    X0 = random_field(213, ens, n)
    phi = PhiSpec.custom(lambda X, e: Field(e, np.zeros_like(X.values)),
                         value=lambda X, e: 0.0)
    sol = solve_nonlinear(p, X0, phi, tol=1e-12)
    assert sol.iterations == 1
    lq = solve_kernel_lq(p_zero, X0)
    assert np.max(np.abs(sol.X.values - lq.X.values)) < 1e-9
    assert np.max(np.abs(sol.V.values - lq.V.values)) < 1e-9


def gaussian_phi(n):
    const = 0.5 * n * np.log(2.0 * np.pi)
    return PhiSpec.gradient_log_density(
        lambda xs: -xs,
        log_density=lambda xs: -0.5 * np.sum(xs ** 2, axis=-1) - const)


def test_solve_nonlinear_cross_entropy_gaussian():
    p = make_problem(F=0.2, G=1.0, M=0.5, N=1.0, K=1000)
    ens = random_ensemble(214, 8, 1)
    X0 = random_field(215, ens, 1)
    phi = gaussian_phi(1)
    sol = solve_nonlinear(p, X0, phi, tol=1e-11, max_iter=50)

    # optimality condition against the direct kernel quadrature
    zero = np.zeros((1, 1))
    handle = KernelHandle.build(p, terminal_P=zero, terminal_Sigma=zero)
    sc = handle.bundle.coeffs
    w = ens.weights
    X0path = drift_trajectory(p, X0)
    g = _source_stages(p, sc, X0path.values, w)
    gT = phi_gradient(phi, sol.X.node(p.K))
    quad = quadrature_response(
        handle, FieldPath(ens, g.node, grid=p.grid), gT)
    res = (sol.X.values - X0path.values) + quad.values
    norms = np.sqrt(np.einsum("kNi,kNi,N->k", res, res, w))
    assert float(norms.max()) <= 1e-6

    # no random control perturbation of relative size 1e-3 improves it
    gen = np.random.Generator(np.random.Philox(key=[216, 907]))
    scale = 1e-3 * np.max(np.abs(sol.V.values))
    for _ in range(10):
        dV = FieldPath(ens, sol.V.values + scale * gen.normal(
            size=sol.V.values.shape), grid=p.grid)
        run = cost(p, X0, dV, include_terminal=False)
        XT = _state_under_control(p, X0, dV).node(p.K)
        assert run + phi_value(phi, XT) >= sol.cost - 1e-8


def test_solve_nonlinear_reports_divergence():
    # a gradient callback with the wrong sign makes the map expansive
    p = make_problem(F=0.0, G=1.0, M=0.0, N=0.05, K=60)
    ens = two_point_ensemble()
    X0 = Field(ens, np.array([[0.5], [-0.5]]))
    phi = PhiSpec.custom(lambda X, e: Field(e, 40.0 * X.values))
    with pytest.raises(FixedPointError) as info:
        solve_nonlinear(p, X0, phi, tol=1e-12, max_iter=8)
    assert len(info.value.history) == 8


# -------------------------------------------------------------------- oracle


def test_brute_force_zero_data():
    p = make_problem(M=0.0, K=80)
    ens = two_point_ensemble()
    X0 = Field(ens, np.array([[0.4], [-0.2]]))
    sol = brute_force_oracle(p, X0, coarse_K=40)
    assert sol.cost == 0.0
    assert np.array_equal(sol.V.values, np.zeros_like(sol.V.values))
    assert sol.residuals["gradient_norm"] == 0.0


def test_brute_force_worked_case_refinement():
    p = worked_problem(K=500)
    ens = two_point_ensemble()
    X0 = Field.coordinates(ens)
    gaps = []
    for Kc in (25, 50, 100):
        sol = brute_force_oracle(p, X0, coarse_K=Kc)
        assert sol.residuals["gradient_norm"] <= 1e-8
        gaps.append(sol.cost - WORKED_VALUE)
    assert all(g > 0.0 for g in gaps)
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] <= 0.02 * WORKED_VALUE


def test_brute_force_mean_only_matches_lqr():
    p = make_problem(F=0.3, Fbar=0.2, G=1.2, M=0.7, Mbar=0.3, S=0.4,
                     N=1.5, M_T=0.5, K=400)
    ens = two_point_ensemble()
    X0 = Field.constant(ens, [0.7])
    Q = 0.7 + 0.3 * (1.0 - 0.4) ** 2
    ref = classical_lqr(A=0.5, B=1.2, Q=Q, R=1.5, QT=0.5, T=1.0,
                        times=p.grid.nodes, x0=[0.7])
    sol = brute_force_oracle(p, X0, coarse_K=80)
    assert abs(sol.cost - ref["value"]) <= 0.03 * (1.0 + abs(ref["value"]))


# ----------------------------------------------------------------- gradients


def test_rkhs_gradient_matches_finite_differences():
    p = random_problem(217, n=2, K=300)
    handle = KernelHandle.build(p)
    bundle = handle.bundle
    sc = bundle.coeffs
    ens = random_ensemble(218, 5, 2)
    w = ens.weights
    X0 = random_field(219, ens, 2)
    X0path = drift_trajectory(p, X0)
    g = _source_stages(p, sc, X0path.values, w)
    gT = _terminal_source(p, X0path.values[-1], w)

    xi_lq, r = _lq_backward_forward(bundle, w, g, gT)
    chi = np.einsum("kij,kNj->kNi", bundle.P.values,
                    xi_lq - np.einsum("kNi,N->ki", xi_lq, w)[:, None, :])
    chi = chi + np.einsum(
        "kij,kj->ki", bundle.Sigma.values,
        np.einsum("kNi,N->ki", xi_lq, w))[:, None, :] + r
    v_lq = -np.einsum("kNi,kij->kNj", chi, sc.GNi.node)
    w_traj = TrajectoryWithControl(FieldPath(ens, xi_lq, grid=p.grid),
                                   FieldPath(ens, v_lq, grid=p.grid))

    def functional(traj):
        lin = np.einsum("kNi,kNi,N->k", g.node, traj.xi.values, w)
        out = 0.5 * rkhs_norm_sq(handle, traj)
        out += piecewise_simpson(lin, p.h, {})
        out += float(np.einsum("Ni,Ni,N->", gT, traj.xi.values[-1], w))
        return out

    xi = control_trajectory(p, ens, 220)
    grad = xi - w_traj
    eps = 1e-3
    for trial in range(10):
        eta = control_trajectory(p, ens, 221 + trial)
        fd = (functional(xi + eta * eps) - functional(xi - eta * eps))
        fd /= 2.0 * eps
        direct = rkhs_inner(handle, grad, eta)
        assert abs(fd - direct) <= 1e-5 * (1.0 + abs(direct))


def smooth_control_directions(gen, shape, nodes):
    """Random admissible control perturbations: smooth in time, sup-norm one.

    Rough node-by-node noise is not a discretized control; it probes the
    one-sided interpolation stencils at the grid's ends instead of the
    control space, and those carry O(h) node weights that cancel only
    against smooth directions.
    """
    _, N, d = shape
    t = nodes[:, None, None]
    a, b, c = (gen.normal(size=(N, d)) for _ in range(3))
    out = a * np.sin(np.pi * t) + b * t + c
    return out / np.max(np.abs(out))


def test_first_order_optimality_at_cos_solution():
    cases = []
    p = worked_problem(K=1000)
    ens = two_point_ensemble()
    cases.append((p, ens, Field.coordinates(ens)))
    p2 = random_problem(222, n=2, K=1000)
    ens2 = random_ensemble(223, 5, 2)
    cases.append((p2, ens2, random_field(224, ens2, 2)))
    gen = np.random.Generator(np.random.Philox(key=[225, 907]))
    eps = 1e-3
    for p, ens, X0 in cases:
        sol = solve_cos(p, X0)
        worst = 0.0
        for _ in range(20):
            dV = smooth_control_directions(gen, sol.V.values.shape,
                                           p.grid.nodes)
            plus = cost(p, X0, FieldPath(ens, sol.V.values + eps * dV,
                                         grid=p.grid))
            minus = cost(p, X0, FieldPath(ens, sol.V.values - eps * dV,
                                          grid=p.grid))
            worst = max(worst, abs(plus - minus) / (2.0 * eps))
        assert worst <= 1e-6
