"""Common-noise extension: simulation, closed-form value, adapted kernel.

One Brownian path per scenario shifts every particle identically, so the
expectation mean E int X dm stays deterministic: mean-block operator
contractions always run on noise-free paths marched once, never on sampled
ones, and each scenario only adds deviation content. Random fields affine
in the noise increments close the algebra exactly: conditional expectations
truncate loadings, operator blocks act on loadings through their deviation
side (a zero-expectation constant-in-x field has no mean part), and second
moments reduce to h-weighted traces. Every kernel identity is therefore
testable without sampling; Monte Carlo enters only through the cost
estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field as _field

import numpy as np

from .ensemble import Ensemble, Field
from .grids import (NodeMid, TimeGrid, cubic_midpoints, piecewise_simpson,
                    rk4_segment, trapezoid_weights)
from .kernel import (MEMBERSHIP_FACTOR, KernelHandle, TrajectoryWithControl,
                     _stage_value, kernel_apply, kernel_apply_ode, rkhs_inner)
from .problem import ProblemSpec
from .propagator import RiccatiBundle, StageCoeffs
from .rng import brownian_increments
from .solver import closed_form_value, solve_kernel_lq


@dataclass(frozen=True)
class NoiseSpec:
    """Common-noise description: loading matrix, scenario count, seed.

    ``eta`` multiplies the shared Brownian increments (column j scales
    noise channel j); a zero matrix recovers the deterministic problem
    with every scenario identical.
    """

    eta: np.ndarray
    n_paths: int
    seed: int = 0

    def __post_init__(self):
        eta = np.atleast_2d(np.asarray(self.eta, dtype=float))
        if eta.ndim != 2 or eta.shape[0] != eta.shape[1]:
            raise ValueError(
                f"eta must be a square matrix, got shape {eta.shape}")
        eta = eta.copy()
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)
        if self.n_paths < 1:
            raise ValueError(f"n_paths must be at least 1, got {self.n_paths}")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed}")

    @classmethod
    def from_problem(cls, p: ProblemSpec) -> "NoiseSpec":
        if p.noise is None:
            raise ValueError("the problem file has no noise section")
        return cls(p.noise["eta"], p.noise["n_paths"], p.noise["seed"])

    @property
    def is_zero(self) -> bool:
        return not np.any(self.eta)


def draw_increments(noise: NoiseSpec, K: int, h: float) -> np.ndarray:
    """All Brownian increments, shape (n_paths, K, n), entries N(0, h).

    Each path owns one counter-based generator keyed by (seed, path) and
    draws in (node, component) order, so any single path of any run can be
    reproduced in isolation and path work parallelizes deterministically.
    """
    n = noise.eta.shape[0]
    out = np.empty((noise.n_paths, K, n))
    for idx in range(noise.n_paths):
        out[idx] = brownian_increments(noise.seed, idx, K, n, h)
    return out


@dataclass
class PathEnsemble:
    """Noisy scenarios over one particle ensemble and grid.

    ``values`` has shape (n_paths, K+1, N, n) and ``increments``
    (n_paths, K, n); one increment row is shared by all particles of its
    path. ``mean_path`` (K+1, n) and ``mean_control`` (K+1, d) are the
    deterministic expectation paths -- the mean over particles and noise
    jointly, which no single scenario realizes.
    """

    ensemble: Ensemble
    grid: TimeGrid
    values: np.ndarray
    increments: np.ndarray
    mean_path: np.ndarray
    mean_control: np.ndarray
    noise: NoiseSpec

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def field(self, path: int, k: int) -> Field:
        """The particle field of one scenario at one node."""
        return Field(self.ensemble, self.values[path, k])


class FeedbackPolicy:
    """Linear optimal feedback with the expectation mean supplied externally.

    The operator split separates deviation from the expectation mean, and a
    single noisy scenario cannot recover that mean from its own particles,
    so the stage evaluators take the deterministic mean path alongside the
    sampled states. Calling the policy as a Field map uses the field's own
    ensemble mean instead, which coincides with the expectation mean only
    in the noise-free case.
    """

    def __init__(self, p: ProblemSpec, bundle: RiccatiBundle):
        self.p = p
        self.bundle = bundle
        sc = bundle.coeffs
        self.nb = NodeMid(
            np.einsum("kij,kj->ki", sc.Ninv.node, p.beta.values),
            np.einsum("kij,kj->ki", sc.Ninv.mid, p.beta.mids))

    def stage(self, k: int, s: int, values: np.ndarray,
              xbar: np.ndarray) -> np.ndarray:
        """Control at stage (k, s) for sampled states about the given mean."""
        b = self.bundle
        chi = ((values - xbar) @ b.P_st.stage(k, s).T
               + (xbar @ b.Sigma_st.stage(k, s).T + b.lam_st.stage(k, s)))
        return -(chi @ b.coeffs.GNi.stage(k, s)) - self.nb.stage(k, s)

    def mean_stage(self, k: int, s: int, xbar: np.ndarray) -> np.ndarray:
        """Control of the deterministic mean at stage (k, s)."""
        b = self.bundle
        chi = xbar @ b.Sigma_st.stage(k, s).T + b.lam_st.stage(k, s)
        return -(chi @ b.coeffs.GNi.stage(k, s)) - self.nb.stage(k, s)

    def __call__(self, k: int, X: Field) -> Field:
        xbar = X.ensemble.weights @ X.values
        return Field(X.ensemble, self.stage(k, 0, X.values, xbar))


def solve_stochastic(p: ProblemSpec) -> tuple[RiccatiBundle, FeedbackPolicy]:
    """Backward pass for the common-noise problem.

    Additive noise leaves the Riccati flows and the affine offset exactly
    as in the deterministic problem, so the returned lambda path depends on
    neither seed nor path count. All noise effects are forward-side: the
    simulation and the trace correction to the value.
    """
    bundle = RiccatiBundle.build(p)
    return bundle, FeedbackPolicy(p, bundle)


def _check_noise_dim(p: ProblemSpec, noise: NoiseSpec) -> None:
    if noise.eta.shape[0] != p.n:
        raise ValueError(
            f"noise loading is {noise.eta.shape[0]}-dimensional but the "
            f"problem state is {p.n}-dimensional")


def simulate(p: ProblemSpec, X0: Field, noise: NoiseSpec,
             policy) -> PathEnsemble:
    """March every scenario under a policy, sharing one deterministic mean.

    ``policy`` is either a FeedbackPolicy or an open-loop control
    FieldPath. The deterministic mean ODE advances inside the same RK4
    loop as the scenarios, so both see identical stage arithmetic; the
    additive term eta*dw enters exactly, after each drift step, never
    inside one. With zero noise and the optimal feedback this reproduces
    the completion-of-square trajectory on every path.
    """
    _check_noise_dim(p, noise)
    feedback = isinstance(policy, FeedbackPolicy)
    sc = policy.bundle.coeffs if feedback else StageCoeffs(p)
    w = X0.ensemble.weights
    K, h = p.K, p.h
    if not feedback:
        if policy.values.shape != (K + 1, X0.values.shape[0], p.d):
            raise ValueError(
                f"open-loop control has shape {policy.values.shape}, "
                f"expected {(K + 1, X0.values.shape[0], p.d)}")
        v_st = NodeMid.from_samples(policy.values)
        vbar_st = NodeMid.from_samples(
            np.einsum("kNi,N->ki", policy.values, w))

    def v_stage(k, s, y, xb):
        if feedback:
            return policy.stage(k, s, y, xb)
        return v_st.stage(k, s)

    def vbar_stage(k, s, xb):
        if feedback:
            return policy.mean_stage(k, s, xb)
        return vbar_st.stage(k, s)

    def mean_rate(k, s, xb):
        return (xb @ sc.FF.stage(k, s).T
                + vbar_stage(k, s, xb) @ sc.G.stage(k, s).T
                + sc.f.stage(k, s))

    def path_rate(k, s, y, xb):
        return ((y - xb) @ sc.F.stage(k, s).T + xb @ sc.FF.stage(k, s).T
                + v_stage(k, s, y, xb) @ sc.G.stage(k, s).T
                + sc.f.stage(k, s))

    dW = draw_increments(noise, K, h)
    kick = dW @ noise.eta.T
    vals = np.empty((noise.n_paths, K + 1) + X0.values.shape)
    vals[:, 0] = X0.values
    xbar = np.empty((K + 1, p.n))
    xbar[0] = w @ X0.values
    Y = vals[:, 0].copy()
    xb = xbar[0]
    for k in range(K):
        kb1 = mean_rate(k, 0, xb)
        kY1 = path_rate(k, 0, Y, xb)
        b2 = xb + 0.5 * h * kb1
        kb2 = mean_rate(k, 1, b2)
        kY2 = path_rate(k, 1, Y + 0.5 * h * kY1, b2)
        b3 = xb + 0.5 * h * kb2
        kb3 = mean_rate(k, 1, b3)
        kY3 = path_rate(k, 1, Y + 0.5 * h * kY2, b3)
        b4 = xb + h * kb3
        kb4 = mean_rate(k, 2, b4)
        kY4 = path_rate(k, 2, Y + h * kY3, b4)
        xb = xb + (h / 6.0) * (kb1 + 2.0 * kb2 + 2.0 * kb3 + kb4)
        Y = Y + (h / 6.0) * (kY1 + 2.0 * kY2 + 2.0 * kY3 + kY4)
        Y = Y + kick[:, k][:, None, :]
        xbar[k + 1] = xb
        vals[:, k + 1] = Y
    vbar = np.empty((K + 1, p.d))
    for k in range(K + 1):
        vbar[k] = vbar_stage(k, 0, xbar[k])
    return PathEnsemble(X0.ensemble, p.grid, vals, dW, xbar, vbar, noise)


def realized_controls(paths: PathEnsemble, policy) -> np.ndarray:
    """Node-sampled controls for every scenario, (n_paths, K+1, N, d).

    Open-loop policies broadcast unchanged; a feedback policy evaluates on
    each scenario's particles about the deterministic mean.
    """
    n_paths, Kp1 = paths.values.shape[:2]
    if isinstance(policy, FeedbackPolicy):
        N = paths.values.shape[2]
        out = np.empty((n_paths, Kp1, N, policy.p.d))
        for k in range(Kp1):
            out[:, k] = policy.stage(k, 0, paths.values[:, k],
                                     paths.mean_path[k])
        return out
    return np.broadcast_to(policy.values,
                           (n_paths,) + policy.values.shape).copy()


def _trace_correction(p: ProblemSpec, bundle: RiccatiBundle,
                      noise: NoiseSpec) -> float:
    # The noise rides entirely on the deviation about the expectation mean
    # (a zero-expectation constant-in-x field has no mean part), so the
    # Ito correction contracts eta against the deviation block P, not the
    # mean block Sigma.
    integrand = np.einsum("ja,kjb,ba->k", noise.eta, bundle.P.values,
                          noise.eta)
    return 0.5 * piecewise_simpson(integrand, p.h, {})


def stochastic_value(p: ProblemSpec, X0: Field, noise: NoiseSpec) -> float:
    """Optimal expected cost under common noise, in closed form.

    The deterministic completed square plus the Ito trace correction
    (1/2) int tr(eta* P(s) eta) ds. With eta = 0 the correction term is
    exactly zero and the value equals the deterministic closed form.
    """
    _check_noise_dim(p, noise)
    bundle = RiccatiBundle.build(p)
    return closed_form_value(p, bundle, X0) + _trace_correction(
        p, bundle, noise)


def estimate_cost_mc(p: ProblemSpec, paths: PathEnsemble,
                     V: np.ndarray) -> tuple[float, float]:
    """Sample mean and standard error of the objective over scenarios.

    Every integrand is split about the deterministic mean path: the
    mean-block terms are computed once, exactly, and each scenario
    contributes only its deviation energy. The dropped cross terms average
    to zero over the noise, so the estimator is unbiased for the expected
    cost and tighter than naive per-path objectives. With zero noise the
    estimate equals the deterministic cost of the same trajectory and the
    standard error vanishes to rounding.
    """
    if V.shape != paths.values.shape[:3] + (p.d,):
        raise ValueError(
            f"controls have shape {V.shape}, expected "
            f"{paths.values.shape[:3] + (p.d,)}")
    w = paths.ensemble.weights
    sc = StageCoeffs(p)
    xbar, vbar = paths.mean_path, paths.mean_control
    wq = trapezoid_weights(p.K, p.h)
    j = np.zeros(paths.n_paths)
    for k in range(p.K + 1):
        Xd = paths.values[:, k] - xbar[k]
        Vd = V[:, k] - vbar[k]
        gk = 0.5 * (np.einsum("ij,pNj,pNi,N->p", sc.MM.node[k], Xd, Xd, w)
                    + np.einsum("ij,pNj,pNi,N->p", p.N.values[k], Vd, Vd, w))
        j += wq[k] * gk
    g_mean = 0.5 * (np.einsum("kij,kj,ki->k", sc.MMS.node, xbar, xbar)
                    + np.einsum("kij,kj,ki->k", p.N.values, vbar, vbar))
    g_mean = g_mean + np.einsum("ki,ki->k", p.alpha.values, xbar)
    g_mean = g_mean + np.einsum("ki,ki->k", p.beta.values, vbar)
    devT = paths.values[:, -1] - xbar[-1]
    j = j + float(np.dot(wq, g_mean))
    j = j + 0.5 * np.einsum("ij,pNj,pNi,N->p", p.terminal_dev_block(),
                            devT, devT, w)
    j = j + 0.5 * float(xbar[-1] @ p.terminal_mean_block() @ xbar[-1])
    j = j + float(p.alpha_T @ xbar[-1])
    mean = float(np.mean(j))
    if paths.n_paths < 2:
        return mean, 0.0
    return mean, float(np.std(j, ddof=1) / np.sqrt(paths.n_paths))


# ------------------------------------------------------- affine noise algebra


@dataclass(frozen=True)
class AffineRandomField:
    """A random field affine in the Brownian increments.

    ``base`` is the noise-independent part (a deterministic particle
    field); ``loadings`` maps increment index k to an n-by-n matrix A,
    contributing the particle-uniform term A dw_k. Zero-expectation and
    constant in x, every loading term is pure deviation: operator blocks
    act on it through their deviation side, and only the base reaches the
    mean blocks.
    """

    base: Field
    loadings: dict
    num_steps: int
    h: float

    def __post_init__(self):
        n = self.base.values.shape[1]
        clean = {}
        for k in sorted(self.loadings):
            A = np.asarray(self.loadings[k], dtype=float)
            k = int(k)
            if not 0 <= k < self.num_steps:
                raise ValueError(
                    f"loading index {k} outside the {self.num_steps} "
                    "grid increments")
            if A.shape != (n, n):
                raise ValueError(
                    f"loading {k} has shape {A.shape}, expected {(n, n)}")
            clean[k] = A
        object.__setattr__(self, "loadings", clean)

    def inner(self, other: "AffineRandomField") -> float:
        """Expected H inner product, exact in the noise algebra.

        Distinct increments are independent and zero-mean, so only shared
        loading indices contribute, each an h-weighted matrix trace.
        """
        w = self.base.ensemble.weights
        total = float(np.einsum("N,Ni,Ni->", w, self.base.values,
                                other.base.values))
        for k, A in self.loadings.items():
            B = other.loadings.get(k)
            if B is not None:
                total += self.h * float(np.sum(A * B))
        return total

    def realize(self, increments: np.ndarray) -> Field:
        """The field for one draw of all increments, shape (K, n)."""
        vals = self.base.values.copy()
        for k, A in self.loadings.items():
            vals = vals + increments[k] @ A.T
        return Field(self.base.ensemble, vals)


def conditional_expectation(z: AffineRandomField,
                            tau: float) -> AffineRandomField:
    """Project onto the information available at time tau.

    Keeps exactly the loadings whose increment is fully revealed by tau
    (index k with t_{k+1} <= tau); the base, independent of the noise, is
    never modified. tau must be a grid node. Idempotent; tau = 0 drops all
    loadings and tau = T keeps them all.
    """
    steps = tau / z.h
    j = int(round(steps))
    if not 0 <= j <= z.num_steps or abs(steps - j) > 1e-9:
        raise ValueError(
            f"tau = {tau!r} is not a node of the grid with step {z.h} "
            f"and {z.num_steps} increments")
    kept = {k: A for k, A in z.loadings.items() if k + 1 <= j}
    return AffineRandomField(z.base, kept, z.num_steps, z.h)


def _check_grid_match(p: ProblemSpec, z: AffineRandomField) -> None:
    if z.num_steps != p.K or abs(z.h - p.h) > 1e-12 * p.h:
        raise ValueError(
            f"random field lives on {z.num_steps} steps of {z.h}, the "
            f"problem grid has {p.K} steps of {p.h}")


def kernel_apply_stochastic(handle: KernelHandle, s: float, t: float,
                            z: AffineRandomField) -> AffineRandomField:
    """Adapted kernel action on an affine random field.

    The base passes through the deterministic kernel. Each loading, a
    zero-expectation constant field, propagates through the deviation
    block alone, and only over the part of the integration window where
    its increment is already revealed: the accumulated control Gramian
    between the reveal node and min(s, t). Loadings revealed after
    min(s, t) drop out entirely.
    """
    p = handle.bundle.p
    if handle.include_initial_term:
        raise ValueError("the adapted kernel is defined for the "
                         "zero-initial-value variant only")
    _check_grid_match(p, z)
    js = p.grid.node_index(s)
    jt = p.grid.node_index(t)
    m = min(js, jt)
    base = kernel_apply(handle, s, t, z.base)
    fwd, _, Q = handle._select("P")
    out = {}
    for k, A in z.loadings.items():
        cut = k + 1
        if cut >= m:
            continue
        out[k] = fwd[js] @ (Q[m] - Q[cut]) @ fwd[jt].T @ A
    return AffineRandomField(base, out, z.num_steps, z.h)


# ------------------------------------------------------ adapted trajectories


@dataclass
class LoadingTrajectory:
    """Matrix trajectory riding one noise increment.

    ``xi`` has shape (K+1, n, n) and ``v`` (K+1, d, n); column c is the
    state/control pair multiplying component c of the increment, driven by
    the plain deviation dynamics. ``v_left`` holds pre-jump control values
    keyed by node, with the same conventions as the field machinery.
    """

    xi: np.ndarray
    v: np.ndarray
    v_left: dict = _field(default_factory=dict)

    def _merge(self, other, sign):
        vl = {}
        for m in set(self.v_left) | set(other.v_left):
            a = self.v_left.get(m, self.v[m])
            b = other.v_left.get(m, other.v[m])
            vl[m] = a + sign * b
        return LoadingTrajectory(self.xi + sign * other.xi,
                                 self.v + sign * other.v, vl)

    def __add__(self, other):
        return self._merge(other, 1.0)

    def __sub__(self, other):
        return self._merge(other, -1.0)


@dataclass
class AdaptedTrajectory:
    """A deterministic trajectory plus adapted noise loadings.

    Each loading rides one increment and must vanish until that increment
    is revealed; the base carries all mean-block content.
    """

    base: TrajectoryWithControl
    loadings: dict


def adapted_trajectory(p: ProblemSpec, base: TrajectoryWithControl,
                       loading_controls: dict) -> AdaptedTrajectory:
    """Integrate loading states from loading controls.

    ``loading_controls`` maps an increment index k to a control array of
    shape (K+1, d, n) that must vanish strictly before node k+1; each
    column then drives the deviation dynamics from zero. Controls active
    before their increment is revealed are rejected as non-adapted.
    """
    sc = StageCoeffs(p)
    loadings = {}
    for k0 in sorted(loading_controls):
        V = np.asarray(loading_controls[k0], dtype=float)
        if V.shape != (p.K + 1, p.d, p.n):
            raise ValueError(
                f"loading control {k0} has shape {V.shape}, expected "
                f"{(p.K + 1, p.d, p.n)}")
        cut = int(k0) + 1
        if not 1 <= cut <= p.K:
            raise ValueError(
                f"loading index {k0} outside the {p.K} grid increments")
        if np.any(V[:cut]):
            raise ValueError(
                f"loading control {k0} is active before node {cut}, where "
                "its increment is first revealed; the trajectory would not "
                "be adapted")
        v_st = NodeMid.from_samples(V)

        def rhs(k, s, y, v_st=v_st):
            return sc.F.stage(k, s) @ y + sc.G.stage(k, s) @ v_st.stage(k, s)

        xi = np.zeros((p.K + 1, p.n, p.n))
        rk4_segment(xi, 0, p.K, p.h, rhs)
        loadings[int(k0)] = LoadingTrajectory(xi, V.copy())
    return AdaptedTrajectory(base, loadings)


def _check_loading(handle: KernelHandle, k0: int,
                   L: LoadingTrajectory) -> None:
    # same defect test as the field machinery, run columnwise on matrices
    p = handle.bundle.p
    sc = handle.bundle.coeffs
    h = p.h
    xi, v = L.xi, L.v
    scale = 1.0 + np.max(np.abs(xi)) + np.max(np.abs(v))
    tol = MEMBERSHIP_FACTOR * h * h * scale
    cut = k0 + 1
    early = max(np.max(np.abs(xi[:cut + 1])), np.max(np.abs(v[:cut])))
    if early > tol:
        raise ValueError(
            f"loading {k0} is active before its increment is revealed at "
            f"node {cut}; the trajectory is not adapted")
    rate = (np.einsum("kij,kja->kia", sc.F.node, xi)
            + np.einsum("kij,kja->kia", sc.G.node, v))
    rate_left = rate.copy()
    for m, vl in L.v_left.items():
        rate_left[m] += sc.G.node[m] @ (vl - v[m])
    defect = xi[1:] - xi[:-1] - 0.5 * h * (rate[:-1] + rate_left[1:])
    worst = float(np.max(np.abs(defect)))
    if worst > tol:
        raise ValueError(
            f"loading {k0} dynamics defect {worst:g} exceeds {tol:g}; the "
            "matrix path is not generated by its control")


def _loading_norm_sq(handle: KernelHandle, L: LoadingTrajectory) -> float:
    # deviation-block energy, columnwise; one factor h is applied by the
    # caller from the increment variance
    p = handle.bundle.p
    sc = handle.bundle.coeffs
    R = handle.rep_matrices
    vr = np.einsum("kij,kja->kia", R, L.v)
    g = (np.einsum("kij,kja,kia->k", sc.MM.node, L.xi, L.xi)
         + np.einsum("kij,kja,kia->k", p.N.values, vr, vr))
    left = {}
    for m, vl in L.v_left.items():
        vlr = R[m] @ vl
        left[m] = float(
            np.einsum("ij,ja,ia->", sc.MM.node[m], L.xi[m], L.xi[m])
            + np.einsum("ij,ja,ia->", p.N.values[m], vlr, vlr))
    total = piecewise_simpson(g, p.h, left)
    PT = handle.bundle.P.values[-1]
    total += float(np.einsum("ij,ja,ia->", PT, L.xi[-1], L.xi[-1]))
    return float(total)


def adapted_inner(handle: KernelHandle, a: AdaptedTrajectory,
                  b: AdaptedTrajectory) -> float:
    """Expected trajectory-space inner product of adapted trajectories.

    Base parts pair through the deterministic trajectory norm. Loadings on
    the same increment pair columnwise through the deviation weights, with
    one factor h from the increment variance; loadings on distinct
    increments are orthogonal and drop out. Every loading is checked for
    adaptedness and dynamics consistency.
    """
    p = handle.bundle.p
    for k0, L in a.loadings.items():
        _check_loading(handle, k0, L)
    for k0, L in b.loadings.items():
        _check_loading(handle, k0, L)
    total = rkhs_inner(handle, a.base, b.base)
    for k0 in sorted(set(a.loadings) & set(b.loadings)):
        La, Lb = a.loadings[k0], b.loadings[k0]
        total += 0.25 * p.h * (_loading_norm_sq(handle, La + Lb)
                               - _loading_norm_sq(handle, La - Lb))
    return total


def _kernel_element_adapted(handle: KernelHandle, t: float,
                            z: AffineRandomField) -> AdaptedTrajectory:
    """The trajectory s -> K(s, t)z with adapted loadings.

    The base is the deterministic kernel element. Each loading runs the
    same backward-companion-then-forward sweep on the deviation block
    alone, with the forcing window opening only once the loading's
    increment is revealed, so its control jumps on at the reveal node and
    off at t; loadings revealed at or after t vanish identically.
    """
    bundle = handle.bundle
    p = bundle.p
    sc = bundle.coeffs
    kt = p.grid.node_index(t)
    base = kernel_apply_ode(handle, t, z.base)
    loadings = {}
    for k0, A in sorted(z.loadings.items()):
        cut = k0 + 1
        if cut >= kt:
            continue
        rho = np.zeros((p.K + 1, p.n, p.n))
        rho[kt] = A

        def adj(k, s, y):
            dev = (sc.F.stage(k, s).T
                   - bundle.P_st.stage(k, s) @ sc.GNG.stage(k, s))
            return -(dev @ y)

        rk4_segment(rho, kt, 0, p.h, adj)
        rho_mid = cubic_midpoints(rho[:kt + 1])

        def fwd(k, s, y):
            gng = sc.GNG.stage(k, s)
            out = (sc.F.stage(k, s) - gng @ bundle.P_st.stage(k, s)) @ y
            if cut <= k < kt:
                out = out + gng @ _stage_value(rho, rho_mid, k, s)
            return out

        xi = np.zeros((p.K + 1, p.n, p.n))
        rk4_segment(xi, 0, p.K, p.h, fwd)
        V = np.empty((p.K + 1, p.d, p.n))
        for k in range(p.K + 1):
            core = bundle.P.values[k] @ xi[k]
            if cut <= k < kt:
                core = core - rho[k]
            V[k] = -(sc.GNi.node[k].T @ core)
        v_left = {
            cut: np.zeros((p.d, p.n)),
            kt: -(sc.GNi.node[kt].T
                  @ (bundle.P.values[kt] @ xi[kt] - rho[kt])),
        }
        loadings[k0] = LoadingTrajectory(xi, V, v_left)
    return AdaptedTrajectory(base, loadings)


def reproducing_residual_stochastic(handle: KernelHandle,
                                    traj: AdaptedTrajectory, t: float,
                                    z: AffineRandomField) -> float:
    """Reproducing defect |E(xi(t), z)_H - <xi, K(., t)z>| on adapted data.

    Both sides are evaluated exactly on the affine representations: the
    pairing adds h-weighted loading traces to the base inner product, and
    the trajectory inner product runs base and loadings separately. No
    sampling is involved; deterministic inputs reduce this to the plain
    reproducing residual. Non-adapted trajectories are rejected.
    """
    p = handle.bundle.p
    _check_grid_match(p, z)
    kt = p.grid.node_index(t)
    w = z.base.ensemble.weights
    lhs = float(np.einsum("N,Ni,Ni->", w, traj.base.xi.values[kt],
                          z.base.values))
    for k0, L in traj.loadings.items():
        A = z.loadings.get(k0)
        if A is not None:
            lhs += p.h * float(np.sum(L.xi[kt] * A))
    element = _kernel_element_adapted(handle, t, z)
    return abs(lhs - adapted_inner(handle, traj, element))


# --------------------------------------------------- stochastic kernel route


@dataclass
class StochasticSolution:
    """Per-path optimum with its Monte Carlo cost summary."""

    method: str
    paths: PathEnsemble
    V: np.ndarray
    mc_mean: float
    mc_stderr: float
    value_closed_form: float
    residuals: dict = _field(default_factory=dict)


def _feedback_gap(p: ProblemSpec, bundle: RiccatiBundle,
                  paths: PathEnsemble, V: np.ndarray) -> float:
    policy = FeedbackPolicy(p, bundle)
    worst = 0.0
    for k in range(p.K + 1):
        fb = policy.stage(k, 0, paths.values[:, k], paths.mean_path[k])
        worst = max(worst, float(np.max(np.abs(fb - V[:, k]))))
    return worst


def solve_kernel_stochastic(p: ProblemSpec, X0: Field,
                            noise: NoiseSpec) -> StochasticSolution:
    """Variational route under common noise.

    The deterministic part is the kernel route unchanged. The noise
    response telescopes: the perturbation of the source path and the
    kernel correction it induces sum to a single process driven by the
    deviation closed loop, so each scenario adds one n-vector path marched
    by RK4 with the increment applied after each drift step, and the
    optimal control picks up its deviation feedback. With zero noise that
    response is identically zero and the result reduces to the
    deterministic kernel solution bit for bit. The reported feedback gap
    is the defect of the optimal-control identity on the solution's own
    paths.
    """
    _check_noise_dim(p, noise)
    det = solve_kernel_lq(p, X0)
    bundle = RiccatiBundle.build(p)
    sc = bundle.coeffs
    w = X0.ensemble.weights
    K, h = p.K, p.h
    dW = draw_increments(noise, K, h)
    kick = dW @ noise.eta.T

    def rate(k, s, y):
        mat = sc.F.stage(k, s) - sc.GNG.stage(k, s) @ bundle.P_st.stage(k, s)
        return y @ mat.T

    Wn = np.zeros((noise.n_paths, K + 1, p.n))
    Y = Wn[:, 0].copy()
    for k in range(K):
        k1 = rate(k, 0, Y)
        k2 = rate(k, 1, Y + 0.5 * h * k1)
        k3 = rate(k, 1, Y + 0.5 * h * k2)
        k4 = rate(k, 2, Y + h * k3)
        Y = Y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        Y = Y + kick[:, k]
        Wn[:, k + 1] = Y

    vals = det.X.values[None, :, :, :] + Wn[:, :, None, :]
    PW = np.einsum("kji,pki->pkj", bundle.P.values, Wn)
    vn = -np.einsum("pkj,kjl->pkl", PW, sc.GNi.node)
    V = det.V.values[None] + vn[:, :, None, :]
    xbar = np.einsum("kNi,N->ki", det.X.values, w)
    vbar = np.einsum("kNi,N->ki", det.V.values, w)
    paths = PathEnsemble(X0.ensemble, p.grid, vals, dW, xbar, vbar, noise)
    mc_mean, mc_stderr = estimate_cost_mc(p, paths, V)
    value = closed_form_value(p, bundle, X0) + _trace_correction(
        p, bundle, noise)
    gap = _feedback_gap(p, bundle, paths, V)
    return StochasticSolution(
        method="kernel_stochastic", paths=paths, V=V, mc_mean=mc_mean,
        mc_stderr=mc_stderr, value_closed_form=value,
        residuals={"feedback_gap": gap})
