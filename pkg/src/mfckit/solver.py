"""Deterministic solution routes for the mean-field control problem.

Three routes produce the same optimum by different mechanisms: a
completion-of-square solver driven by the Riccati paths, a kernel
variational solver that realizes the optimality condition through one
backward and one forward sweep, and a nonlinear-terminal solver wrapping
that machinery in a damped fixed point on the terminal state. A
brute-force coarse-grid minimizer, sharing no code with any of them,
serves as an independent check.
"""

import warnings
from dataclasses import dataclass, field as _field
from typing import Callable, Optional

import numpy as np

from .ensemble import Ensemble, Field, FieldPath, apply_blocks_arr
from .grids import (NodeMid, TimeGrid, cubic_midpoints, piecewise_simpson,
                    rk4_segment, trapezoid_weights)
from .kernel import KernelHandle, kernel_apply_ode
from .problem import ProblemSpec, mbar_s_batch
from .propagator import RiccatiBundle, StageCoeffs


@dataclass
class Solution:
    """Optimal state/control pair with its cost and route diagnostics.

    ``value_closed_form`` is populated only by the completion-of-square
    route; ``iterations`` only by iterative routes. ``residuals`` holds
    route-specific diagnostics keyed by name.
    """

    method: str
    X: FieldPath
    V: FieldPath
    cost: float
    value_closed_form: Optional[float] = None
    iterations: Optional[int] = None
    residuals: dict = _field(default_factory=dict)


class FixedPointError(RuntimeError):
    """Terminal fixed point failed to converge; carries the residual history."""

    def __init__(self, message: str, history):
        super().__init__(message)
        self.history = list(history)


def _apply_blocks_path(dev_mats, mean_mats, values, weights):
    # per-node block application with matrices varying along the leading axis
    xbar = np.einsum("kNi,N->ki", values, weights)
    dev = values - xbar[:, None, :]
    out = np.einsum("kij,kNj->kNi", dev_mats, dev)
    return out + np.einsum("kij,kj->ki", mean_mats, xbar)[:, None, :]


def _state_under_control(p: ProblemSpec, X0: Field, V: FieldPath,
                         sc: StageCoeffs | None = None) -> FieldPath:
    """Forward integration of the dynamics under a given node-sampled control."""
    sc = sc or StageCoeffs(p)
    w = X0.ensemble.weights
    v_st = NodeMid.from_samples(V.values)
    X = np.zeros((p.K + 1,) + X0.values.shape)
    X[0] = X0.values

    def rhs(k, s, y):
        out = apply_blocks_arr(sc.F.stage(k, s), sc.FF.stage(k, s), y, w)
        return out + v_st.stage(k, s) @ sc.G.stage(k, s).T + sc.f.stage(k, s)

    rk4_segment(X, 0, p.K, p.h, rhs)
    return FieldPath(X0.ensemble, X, grid=p.grid)


def _running_samples(p, sc, Xv, Vv, w, form):
    xbar = np.einsum("kNi,N->ki", Xv, w)
    vbar = np.einsum("kNi,N->ki", Vv, w)
    qN = np.einsum("kij,kNj,kNi,N->k", p.N.values, Vv, Vv, w)
    lin = np.einsum("ki,ki->k", p.alpha.values, xbar)
    lin = lin + np.einsum("ki,ki->k", p.beta.values, vbar)
    if form == "operator":
        dev = Xv - xbar[:, None, :]
        quad = np.einsum("kij,kNj,kNi,N->k", sc.MM.node, dev, dev, w)
        quad = quad + np.einsum("kij,kj,ki->k", sc.MMS.node, xbar, xbar)
    elif form == "raw":
        quad = np.einsum("kij,kNj,kNi,N->k", p.M.values, Xv, Xv, w)
        shifted = Xv - np.einsum("kij,kj->ki", p.S.values, xbar)[:, None, :]
        quad = quad + np.einsum("kij,kNj,kNi,N->k", p.Mbar.values,
                                shifted, shifted, w)
    else:
        raise ValueError(f"unknown cost form {form!r}")
    return 0.5 * (quad + qN) + lin


def _terminal_cost(p, XT, w, form):
    xbar = w @ XT
    lin = float(p.alpha_T @ xbar)
    if form == "operator":
        dev = XT - xbar
        quad = np.einsum("ij,Nj,Ni,N->", p.terminal_dev_block(), dev, dev, w)
        quad += float(xbar @ p.terminal_mean_block() @ xbar)
    else:
        quad = np.einsum("ij,Nj,Ni,N->", p.M_T, XT, XT, w)
        shifted = XT - p.S_T @ xbar
        quad += np.einsum("ij,Nj,Ni,N->", p.Mbar_T, shifted, shifted, w)
    return 0.5 * float(quad) + lin


def cost(p: ProblemSpec, X0: Field, V: FieldPath,
         include_terminal: bool = True, form: str = "operator",
         state_path: FieldPath | None = None) -> float:
    """Objective value of a control: simulate the state, then quadrature.

    The running integrand is sampled at grid nodes and integrated by the
    trapezoid rule. ``form`` selects between the block-operator assembly
    and the raw per-particle assembly with the explicit mean-shift terms;
    the two agree to rounding. ``include_terminal=False`` drops the
    quadratic terminal, for objectives that replace it with their own.
    ``state_path`` skips the simulation and integrates the given states,
    for callers that already marched the trajectory themselves.
    """
    sc = StageCoeffs(p)
    X = state_path if state_path is not None else _state_under_control(
        p, X0, V, sc)
    w = X0.ensemble.weights
    g = _running_samples(p, sc, X.values, V.values, w, form)
    total = float(np.dot(trapezoid_weights(p.K, p.h), g))
    if include_terminal:
        total += _terminal_cost(p, X.values[-1], w, form)
    return total


def cost_split(p: ProblemSpec, X0: Field, V: FieldPath) -> tuple[float, float]:
    """The objective as (deviation part, mean part); the parts sum to cost()."""
    sc = StageCoeffs(p)
    X = _state_under_control(p, X0, V, sc)
    w = X0.ensemble.weights
    xbar = np.einsum("kNi,N->ki", X.values, w)
    vbar = np.einsum("kNi,N->ki", V.values, w)
    xdev = X.values - xbar[:, None, :]
    vdev = V.values - vbar[:, None, :]
    g_dev = 0.5 * (np.einsum("kij,kNj,kNi,N->k", sc.MM.node, xdev, xdev, w)
                   + np.einsum("kij,kNj,kNi,N->k", p.N.values, vdev, vdev, w))
    g_mean = 0.5 * (np.einsum("kij,kj,ki->k", sc.MMS.node, xbar, xbar)
                    + np.einsum("kij,kj,ki->k", p.N.values, vbar, vbar))
    g_mean = g_mean + np.einsum("ki,ki->k", p.alpha.values, xbar)
    g_mean = g_mean + np.einsum("ki,ki->k", p.beta.values, vbar)
    wq = trapezoid_weights(p.K, p.h)
    dev_T = xdev[-1]
    part_dev = float(np.dot(wq, g_dev)) + 0.5 * float(
        np.einsum("ij,Nj,Ni,N->", p.terminal_dev_block(), dev_T, dev_T, w))
    part_mean = float(np.dot(wq, g_mean)) + 0.5 * float(
        xbar[-1] @ p.terminal_mean_block() @ xbar[-1]) + float(
        p.alpha_T @ xbar[-1])
    return part_dev, part_mean


def closed_form_value(p: ProblemSpec, bundle: RiccatiBundle,
                      X0: Field) -> float:
    """Completed-square optimal value at time zero from the backward paths."""
    sc = bundle.coeffs
    w = X0.ensemble.weights
    lam = bundle.lam.values
    xb0 = w @ X0.values
    quad0 = np.einsum("ij,Nj,Ni,N->", bundle.P.values[0],
                      X0.values, X0.values, w)
    value = 0.5 * float(quad0) + 0.5 * float(
        xb0 @ bundle.Gamma.values[0] @ xb0) + float(lam[0] @ xb0)
    flam = np.einsum("ki,ki->k", p.f.values, lam)
    glb = np.einsum("kji,kj->ki", p.G.values, lam) + p.beta.values
    qlam = np.einsum("kij,kj,ki->k", sc.Ninv.node, glb, glb)
    value += piecewise_simpson(flam, p.h, {})
    value -= 0.5 * piecewise_simpson(qlam, p.h, {})
    return value


def solve_cos(p: ProblemSpec, X0: Field) -> Solution:
    """Completion-of-square route: Riccati feedback plus closed-form value."""
    bundle = RiccatiBundle.build(p)
    sc = bundle.coeffs
    ens = X0.ensemble
    w = ens.weights

    X = np.zeros((p.K + 1,) + X0.values.shape)
    X[0] = X0.values

    def rhs(k, s, y):
        gng = sc.GNG.stage(k, s)
        dev_m = sc.F.stage(k, s) - gng @ bundle.P_st.stage(k, s)
        mean_m = sc.FF.stage(k, s) - gng @ bundle.Sigma_st.stage(k, s)
        shift = (sc.f.stage(k, s) - gng @ bundle.lam_st.stage(k, s)
                 - sc.gnb.stage(k, s))
        return apply_blocks_arr(dev_m, mean_m, y, w) + shift

    rk4_segment(X, 0, p.K, p.h, rhs, label="feedback state")

    lam = bundle.lam.values
    PX = _apply_blocks_path(bundle.P.values, bundle.Sigma.values, X, w)
    PX = PX + lam[:, None, :]
    V = -np.einsum("kNi,kij->kNj", PX, sc.GNi.node)
    V = V - np.einsum("kij,kj->ki", sc.Ninv.node, p.beta.values)[:, None, :]

    value = closed_form_value(p, bundle, X0)

    Xpath = FieldPath(ens, X, grid=p.grid)
    Vpath = FieldPath(ens, V, grid=p.grid)
    total = cost(p, X0, Vpath)
    return Solution(method="cos", X=Xpath, V=Vpath, cost=total,
                    value_closed_form=value,
                    residuals={"value_gap": abs(total - value)})


def drift_trajectory(p: ProblemSpec, X0: Field,
                     sc: StageCoeffs | None = None) -> FieldPath:
    """The uncontrolled shifted flow: dynamics forced by f - G N^{-1} beta."""
    sc = sc or StageCoeffs(p)
    w = X0.ensemble.weights
    X = np.zeros((p.K + 1,) + X0.values.shape)
    X[0] = X0.values

    def rhs(k, s, y):
        out = apply_blocks_arr(sc.F.stage(k, s), sc.FF.stage(k, s), y, w)
        return out + sc.f.stage(k, s) - sc.gnb.stage(k, s)

    rk4_segment(X, 0, p.K, p.h, rhs)
    return FieldPath(X0.ensemble, X, grid=p.grid)


def _source_stages(p, sc, X0_values, w):
    # running-cost gradient along the drift path, at nodes and midpoints
    gn = _apply_blocks_path(sc.MM.node, sc.MMS.node, X0_values, w)
    gn = gn + p.alpha.values[:, None, :]
    x_mid = cubic_midpoints(X0_values)
    gm = _apply_blocks_path(sc.MM.mid, sc.MMS.mid, x_mid, w)
    gm = gm + p.alpha.mids[:, None, :]
    return NodeMid(gn, gm)


def _terminal_source(p, XT_values, w):
    out = apply_blocks_arr(p.terminal_dev_block(), p.terminal_mean_block(),
                           XT_values, w)
    return out + p.alpha_T


def _lq_backward_forward(bundle: RiccatiBundle, w, g: NodeMid, gT):
    """One backward companion sweep with source g and terminal gT, then the
    forward optimal deviation driven by it. Returns (xi, r) node arrays."""
    p = bundle.p
    sc = bundle.coeffs
    r = np.zeros((p.K + 1,) + gT.shape)
    r[p.K] = gT

    def rhs_back(k, s, y):
        gng = sc.GNG.stage(k, s)
        dev_m = sc.F.stage(k, s).T - bundle.P_st.stage(k, s) @ gng
        mean_m = sc.FF.stage(k, s).T - bundle.Sigma_st.stage(k, s) @ gng
        return -(apply_blocks_arr(dev_m, mean_m, y, w) + g.stage(k, s))

    rk4_segment(r, p.K, 0, p.h, rhs_back)
    r_st = NodeMid(r, cubic_midpoints(r))

    xi = np.zeros_like(r)

    def rhs_fwd(k, s, y):
        gng = sc.GNG.stage(k, s)
        dev_m = sc.F.stage(k, s) - gng @ bundle.P_st.stage(k, s)
        mean_m = sc.FF.stage(k, s) - gng @ bundle.Sigma_st.stage(k, s)
        out = apply_blocks_arr(dev_m, mean_m, y, w)
        return out - r_st.stage(k, s) @ gng.T

    rk4_segment(xi, 0, p.K, p.h, rhs_fwd)
    return xi, r


def _control_from_companion(bundle, sc, w, xi, r):
    chi = _apply_blocks_path(bundle.P.values, bundle.Sigma.values, xi, w) + r
    V = -np.einsum("kNi,kij->kNj", chi, sc.GNi.node)
    shift = np.einsum("kij,kj->ki", sc.Ninv.node, bundle.p.beta.values)
    return V - shift[:, None, :]


def solve_kernel_lq(p: ProblemSpec, X0: Field) -> Solution:
    """Kernel variational route for the quadratic-terminal problem.

    Splits the state into the uncontrolled drift plus an optimal deviation,
    obtained by the backward companion sweep with the running-cost source
    and the quadratic terminal gradient.
    """
    bundle = RiccatiBundle.build(p)
    sc = bundle.coeffs
    ens = X0.ensemble
    w = ens.weights
    X0path = drift_trajectory(p, X0, sc)
    g = _source_stages(p, sc, X0path.values, w)
    gT = _terminal_source(p, X0path.values[-1], w)
    xi, r = _lq_backward_forward(bundle, w, g, gT)
    V = _control_from_companion(bundle, sc, w, xi, r)
    Xpath = FieldPath(ens, X0path.values + xi, grid=p.grid)
    Vpath = FieldPath(ens, V, grid=p.grid)
    return Solution(method="kernel", X=Xpath, V=Vpath,
                    cost=cost(p, X0, Vpath))


def quadrature_response(handle: KernelHandle, g: FieldPath,
                        g_terminal: Field) -> FieldPath:
    """Direct assembly of the kernel-weighted response to a source path.

    Evaluates, at every node s, the trapezoid quadrature of the kernel
    applied to g over time plus the kernel applied to the terminal field.
    The solvers never assemble this sum; they integrate its equivalent
    backward companion instead. This direct form exists to cross-check
    them, and runs off prefix sums of the factored kernel, not the full
    node-pair lattice.
    """
    p = handle.bundle.p
    w = g.ensemble.weights
    wq = trapezoid_weights(p.K, p.h)

    gbar = np.einsum("kNi,N->ki", g.values, w)
    gdev = g.values - gbar[:, None, :]
    tbar = w @ g_terminal.values
    tdev = g_terminal.values - tbar

    def mode_response(mode, vals, tval):
        fwd, C, Q = handle._select(mode)
        u = np.einsum("kNa,kab->kNb", vals, fwd)
        uw = wq[:, None, None] * u
        total = uw.sum(axis=0)
        suffix = np.cumsum(uw[::-1], axis=0)[::-1]
        uQ = np.einsum("kNa,kab->kNb", uw, Q)
        prefix = np.zeros_like(uQ)
        prefix[1:] = np.cumsum(uQ[:-1], axis=0)
        uT = tval @ fwd[-1]
        sq = np.einsum("kNa,kab->kNb", suffix + uT[None], Q)
        sC = (total + uT) @ C
        return np.einsum("kNa,kba->kNb", sq + prefix + sC[None], fwd)

    out = mode_response("P", gdev, tdev)
    out = out + mode_response("Sigma", gbar[:, None, :], tbar[None, :])
    return FieldPath(g.ensemble, out, grid=p.grid)


def euler_residual(p: ProblemSpec, X0: Field, sol: Solution,
                   handle: KernelHandle | None = None,
                   stride: int | None = None) -> float:
    """Worst sampled-node defect of the variational optimality condition.

    The optimal deviation must equal minus the kernel-weighted response to
    the running-cost source; this measures the gap in the ensemble norm,
    with the response assembled by direct quadrature.
    """
    if handle is None:
        handle = KernelHandle.build(p)
    sc = handle.bundle.coeffs
    w = X0.ensemble.weights
    X0path = drift_trajectory(p, X0, sc)
    gn = _apply_blocks_path(sc.MM.node, sc.MMS.node, X0path.values, w)
    gn = gn + p.alpha.values[:, None, :]
    gT = Field(X0.ensemble, _terminal_source(p, X0path.values[-1], w))
    quad = quadrature_response(
        handle, FieldPath(X0.ensemble, gn, grid=p.grid), gT)
    res = (sol.X.values - X0path.values) + quad.values
    norms = np.sqrt(np.einsum("kNi,kNi,N->k", res, res, w))
    if stride is None:
        stride = max(1, p.K // 16)
    return float(max(norms[::stride].max(), norms[-1]))


# ------------------------------------------------------------------ terminal


@dataclass(frozen=True)
class PhiSpec:
    """Terminal cost on the ensemble's law, given through its gradient.

    Variants: ``quadratic`` reuses the problem's terminal data;
    ``gradient_log_density`` holds a callback returning the log-density
    gradient of a target at particle positions (the terminal cost is then
    the cross-entropy against that target); ``custom`` holds an arbitrary
    per-particle gradient callback. Callbacks must be vectorized over
    leading batch dimensions. ``log_density`` and ``value_fn`` are
    optional value evaluators; without one the objective's terminal part
    cannot be reported.
    """

    variant: str
    p: Optional[ProblemSpec] = None
    gradient: Optional[Callable] = None
    log_density: Optional[Callable] = None
    value_fn: Optional[Callable] = None

    @classmethod
    def quadratic(cls, p: ProblemSpec) -> "PhiSpec":
        return cls(variant="quadratic", p=p)

    @classmethod
    def gradient_log_density(cls, grad_ln_pi: Callable,
                             log_density: Callable | None = None) -> "PhiSpec":
        return cls(variant="gradient_log_density", gradient=grad_ln_pi,
                   log_density=log_density)

    @classmethod
    def custom(cls, gradient: Callable,
               value: Callable | None = None) -> "PhiSpec":
        return cls(variant="custom", gradient=gradient, value_fn=value)


def _checked_callback_values(fn, positions, what):
    try:
        out = np.asarray(fn(positions), dtype=float)
    except Exception as exc:
        for i in range(positions.shape[0]):
            try:
                fn(positions[i:i + 1])
            except Exception:
                raise ValueError(
                    f"{what} callback failed for particle {i}") from exc
        raise
    if out.shape != positions.shape:
        raise ValueError(f"{what} callback returned shape {out.shape}, "
                         f"expected {positions.shape}")
    finite = np.isfinite(out).all(axis=-1)
    if not finite.all():
        bad = int(np.argmin(finite))
        raise ValueError(f"{what} callback returned a non-finite value "
                         f"for particle {bad}")
    return out


def phi_gradient(phi: PhiSpec, XT: Field) -> Field:
    """Per-particle gradient of the terminal cost at the terminal state."""
    if phi.variant == "quadratic":
        p = phi.p
        vals = _terminal_source(p, XT.values, XT.ensemble.weights)
        return Field(XT.ensemble, vals)
    if phi.variant == "gradient_log_density":
        grads = _checked_callback_values(phi.gradient, XT.values,
                                         "log-density gradient")
        return Field(XT.ensemble, -grads)
    if phi.variant == "custom":
        out = phi.gradient(XT, XT.ensemble)
        if not isinstance(out, Field) or out.values.shape != XT.values.shape:
            raise ValueError("custom terminal gradient must return a Field "
                             "matching the input shape")
        return out
    raise ValueError(f"unknown terminal cost variant {phi.variant!r}")


def phi_value(phi: PhiSpec, XT: Field) -> Optional[float]:
    """Terminal cost value at the terminal state, when it can be evaluated."""
    w = XT.ensemble.weights
    if phi.variant == "quadratic":
        return _terminal_cost(phi.p, XT.values, w, "operator")
    if phi.variant == "gradient_log_density":
        if phi.log_density is None:
            return None
        return -float(w @ np.asarray(phi.log_density(XT.values), dtype=float))
    if phi.value_fn is None:
        return None
    return float(phi.value_fn(XT, XT.ensemble))


def solve_nonlinear(p: ProblemSpec, X0: Field, phi: PhiSpec,
                    damping: float = 0.5, tol: float = 1e-9,
                    max_iter: int = 60) -> Solution:
    """Nonlinear-terminal route: damped fixed point on the terminal state.

    The zero-terminal kernel machinery turns the optimality condition into
    a map on the terminal deviation alone; the map is iterated with
    damping, halving the damping whenever the update residual grows. On
    convergence the full path is reconstructed by one more backward and
    forward sweep with the converged terminal gradient.
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    zero = np.zeros((p.n, p.n))
    handle = KernelHandle.build(p, terminal_P=zero, terminal_Sigma=zero)
    bundle = handle.bundle
    sc = bundle.coeffs
    ens = X0.ensemble
    w = ens.weights

    X0path = drift_trajectory(p, X0, sc)
    g = _source_stages(p, sc, X0path.values, w)
    xi_q, _ = _lq_backward_forward(bundle, w, g,
                                   np.zeros_like(X0.values))

    xiT = xi_q[-1].copy()
    theta = damping
    prev = np.inf
    history = []
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        XT = Field(ens, X0path.values[-1] + xiT)
        gT = phi_gradient(phi, XT)
        lifted = kernel_apply_ode(handle, p.T, gT)
        new = xi_q[-1] - lifted.xi.values[-1]
        res = float(np.max(np.abs(new - xiT)))
        history.append(res)
        if res <= tol:
            xiT = new
            converged = True
            break
        if res > prev:
            theta = 0.5 * theta
        prev = res
        xiT = (1.0 - theta) * xiT + theta * new
    if not converged:
        raise FixedPointError(
            f"terminal fixed point did not converge after {max_iter} "
            f"iterations (last residual {history[-1]:.3e})", history)

    gT = phi_gradient(phi, Field(ens, X0path.values[-1] + xiT)).values
    xi, r = _lq_backward_forward(bundle, w, g, gT)
    V = _control_from_companion(bundle, sc, w, xi, r)
    Xpath = FieldPath(ens, X0path.values + xi, grid=p.grid)
    Vpath = FieldPath(ens, V, grid=p.grid)
    run_cost = cost(p, X0, Vpath, include_terminal=False)
    terminal = phi_value(phi, Xpath.node(p.K))
    total = run_cost if terminal is None else run_cost + terminal
    residuals = {"fixed_point": history[-1], "history": history}
    if terminal is None:
        residuals["terminal_value_missing"] = True
    return Solution(method="nonlinear", X=Xpath, V=Vpath, cost=total,
                    iterations=iterations, residuals=residuals)


# -------------------------------------------------------------------- oracle


def _interp_nodes(values: np.ndarray, fine_h: float, fine_K: int,
                  times: np.ndarray) -> np.ndarray:
    pos = times / fine_h
    j = np.clip(np.floor(pos).astype(int), 0, fine_K - 1)
    frac = (pos - j).reshape((-1,) + (1,) * (values.ndim - 1))
    return values[j] * (1.0 - frac) + values[j + 1] * frac


def brute_force_oracle(p: ProblemSpec, X0: Field,
                       phi: Optional[PhiSpec] = None, coarse_K: int = 100,
                       tol: float = 1e-8,
                       max_iter: int | None = None) -> Solution:
    """Independent check: minimize the coarse discretized objective directly.

    Controls are piecewise constant per particle on a coarse grid, the
    dynamics are forward Euler, the state cost is a coarse trapezoid and
    the control cost an exact rectangle sum. The finite-dimensional
    problem is minimized by conjugate gradients when it is quadratic and
    by gradient descent otherwise, with every gradient taken from batched
    central differences of the objective, so no Riccati, kernel, or
    adjoint code is involved.
    """
    ens = X0.ensemble
    w = ens.weights
    Np, n, d = ens.size, p.n, p.d
    Kc = int(coarse_K)
    hc = p.T / Kc
    tc = np.linspace(0.0, p.T, Kc + 1)

    def sample(path_values):
        return _interp_nodes(path_values, p.h, p.K, tc)

    F = sample(p.F.values)
    FF = F + sample(p.Fbar.values)
    G = sample(p.G.values)
    f = sample(p.f.values)
    al = sample(p.alpha.values)
    be = sample(p.beta.values)
    Nmat = sample(p.N.values)
    MM = sample(p.M.values) + sample(p.Mbar.values)
    MMS = MM + mbar_s_batch(sample(p.S.values), sample(p.Mbar.values))
    wtr = trapezoid_weights(Kc, hc)
    quadratic = phi is None or phi.variant == "quadratic"

    def simulate(U):
        X = np.empty(U.shape[:-3] + (Kc + 1, Np, n))
        X[..., 0, :, :] = X0.values
        for j in range(Kc):
            xj = X[..., j, :, :]
            xb = np.einsum("...Ni,N->...i", xj, w)
            dev = xj - xb[..., None, :]
            drift = dev @ F[j].T + (xb @ FF[j].T)[..., None, :]
            drift = drift + U[..., j, :, :] @ G[j].T + f[j]
            X[..., j + 1, :, :] = xj + hc * drift
        return X

    def objective(U):
        X = simulate(U)
        xb = np.einsum("...kNi,N->...ki", X, w)
        dev = X - xb[..., None, :]
        run = 0.5 * np.einsum("kij,...kNj,...kNi,N->...k", MM, dev, dev, w)
        run = run + 0.5 * np.einsum("kij,...kj,...ki->...k", MMS, xb, xb)
        run = run + np.einsum("ki,...ki->...k", al, xb)
        total = np.einsum("k,...k->...", wtr, run)
        ub = np.einsum("...kNi,N->...ki", U, w)
        ctrl = 0.5 * np.einsum("kij,...kNj,...kNi,N->...k",
                               Nmat[:-1], U, U, w)
        ctrl = ctrl + np.einsum("ki,...ki->...k", be[:-1], ub)
        total = total + hc * ctrl.sum(axis=-1)
        XT = X[..., Kc, :, :]
        xbT = np.einsum("...Ni,N->...i", XT, w)
        if quadratic:
            devT = XT - xbT[..., None, :]
            term = 0.5 * np.einsum("ij,...Nj,...Ni,N->...",
                                   p.terminal_dev_block(), devT, devT, w)
            term = term + 0.5 * np.einsum("ij,...j,...i->...",
                                          p.terminal_mean_block(), xbT, xbT)
            term = term + np.einsum("i,...i->...", p.alpha_T, xbT)
        elif phi.variant == "gradient_log_density":
            if phi.log_density is None:
                raise ValueError("the oracle needs a terminal value "
                                 "evaluator for non-quadratic costs")
            term = -np.einsum("...N,N->...",
                              np.asarray(phi.log_density(XT), dtype=float), w)
        else:
            if phi.value_fn is None:
                raise ValueError("the oracle needs a terminal value "
                                 "evaluator for non-quadratic costs")
            flat = XT.reshape((-1, Np, n))
            vals = np.array([phi.value_fn(Field(ens, xt), ens)
                             for xt in flat])
            term = vals.reshape(XT.shape[:-2])
        return total + term

    dim = Kc * Np * d
    eps = 1.0 if quadratic else 1e-5
    chunk = max(1, min(dim, 2_000_000 // max(1, Kc * Np * max(n, d))))

    def gradient(u_flat):
        g = np.empty(dim)
        base = u_flat.reshape(Kc, Np, d)
        for lo in range(0, dim, chunk):
            hi = min(dim, lo + chunk)
            m = hi - lo
            batch = np.broadcast_to(base, (2 * m, Kc, Np, d)).copy()
            flat = batch.reshape(2 * m, dim)
            rows = np.arange(m)
            flat[rows, lo + rows] += eps
            flat[m + rows, lo + rows] -= eps
            vals = objective(batch)
            g[lo:hi] = (vals[:m] - vals[m:]) / (2.0 * eps)
        return g

    if max_iter is None:
        max_iter = 4 * dim + 50
    iterations = 0
    if quadratic:
        b = gradient(np.zeros(dim))
        u = np.zeros(dim)
        r = -b
        gnorm = float(np.linalg.norm(r))
        pdir = r.copy()
        rr = gnorm * gnorm
        while gnorm > tol and iterations < max_iter:
            Ap = gradient(pdir) - b
            denom = float(pdir @ Ap)
            if denom <= 0.0:
                break
            alpha = rr / denom
            u = u + alpha * pdir
            r = r - alpha * Ap
            rr_new = float(r @ r)
            gnorm = np.sqrt(rr_new)
            pdir = r + (rr_new / rr) * pdir
            rr = rr_new
            iterations += 1
    else:
        u = np.zeros(dim)
        gcur = gradient(u)
        gnorm = float(np.linalg.norm(gcur))
        Jcur = float(objective(u.reshape(Kc, Np, d)))
        step = 1.0
        u_prev = None
        g_prev = None
        while gnorm > tol and iterations < max_iter:
            if u_prev is not None:
                sdiff = u - u_prev
                ydiff = gcur - g_prev
                yy = float(ydiff @ ydiff)
                if yy > 0.0:
                    step = abs(float(sdiff @ ydiff)) / yy
            step = min(max(step, 1e-12), 1e6)
            while True:
                trial = u - step * gcur
                Jtrial = float(objective(trial.reshape(Kc, Np, d)))
                if Jtrial <= Jcur - 1e-4 * step * gnorm * gnorm:
                    break
                step *= 0.5
                if step < 1e-14:
                    break
            u_prev, g_prev = u, gcur
            u, Jcur = trial, Jtrial
            gcur = gradient(u)
            gnorm = float(np.linalg.norm(gcur))
            iterations += 1
    if gnorm > tol:
        warnings.warn(f"oracle descent stalled at gradient norm {gnorm:.3e}",
                      RuntimeWarning)

    U = u.reshape(Kc, Np, d)
    X = simulate(U)
    J = float(objective(U))
    coarse_grid = TimeGrid(p.T, Kc)
    Vv = np.concatenate([U, U[-1:]], axis=0)
    return Solution(method="oracle", X=FieldPath(ens, X, grid=coarse_grid),
                    V=FieldPath(ens, Vv, grid=coarse_grid), cost=J,
                    iterations=iterations,
                    residuals={"gradient_norm": gnorm})
