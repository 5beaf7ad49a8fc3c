"""Operator-valued reproducing kernels for the controlled trajectory space.

The trajectory space collects H-valued paths driven by square-integrable
controls through the mean-field dynamics, normed by the running cost weights,
the terminal weight carried by the Riccati bundle, and (in the full variant)
an initial weight. Point evaluation on that space is represented by an
operator-valued kernel whose deviation and mean blocks have an explicit
factored form: flow times (initial inverse plus an accumulated control
Gramian) times adjoint flow. A KernelHandle caches everything needed to
evaluate any block in O(1) matrix products, and kernel_apply_ode rebuilds the
same trajectories by direct integration, giving an independent route that
also yields the representative control and the trajectory norm.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np

from .ensemble import Field, FieldPath, apply_blocks_arr
from .grids import cubic_midpoints, piecewise_simpson, rk4_segment
from .problem import ProblemSpec
from .propagator import RiccatiBundle, StageCoeffs

# relative eigenvalue cutoff for the pseudo-inverse of G N^-1 G*
PINV_CUTOFF = 1e-12
# dynamics-defect tolerance factor: a trajectory belongs to the space when
# every per-step defect is below 10 h^2 (1 + sup|xi| + sup|v|)
MEMBERSHIP_FACTOR = 10.0


class TrajectoryWithControl:
    """A state path in H with the control path that generates it.

    v_left maps a node index to pre-jump control values at that node for
    controls with a jump there (kernel trajectories jump where the kernel's
    time argument sits). Quadrature and dynamics checks use the left value
    for the step ending at such a node.
    """

    def __init__(self, xi: FieldPath, v: FieldPath, v_left: dict | None = None):
        if xi.values.shape[0] != v.values.shape[0]:
            raise ValueError(
                f"state path has {xi.values.shape[0]} nodes, control path "
                f"{v.values.shape[0]}")
        self.xi = xi
        self.v = v
        self.v_left = {} if v_left is None else dict(v_left)

    @property
    def ensemble(self):
        return self.xi.ensemble

    def _merge(self, other: "TrajectoryWithControl", sign: float):
        xi = FieldPath(self.xi.ensemble, self.xi.values + sign * other.xi.values,
                       grid=self.xi.grid)
        v = FieldPath(self.v.ensemble, self.v.values + sign * other.v.values,
                      grid=self.v.grid)
        merged = {}
        for k in set(self.v_left) | set(other.v_left):
            a = self.v_left.get(k, self.v.values[k])
            b = other.v_left.get(k, other.v.values[k])
            merged[k] = a + sign * b
        return TrajectoryWithControl(xi, v, merged)

    def __add__(self, other: "TrajectoryWithControl") -> "TrajectoryWithControl":
        return self._merge(other, 1.0)

    def __sub__(self, other: "TrajectoryWithControl") -> "TrajectoryWithControl":
        return self._merge(other, -1.0)

    def __mul__(self, scalar: float) -> "TrajectoryWithControl":
        xi = FieldPath(self.xi.ensemble, scalar * self.xi.values,
                       grid=self.xi.grid)
        v = FieldPath(self.v.ensemble, scalar * self.v.values,
                      grid=self.v.grid)
        return TrajectoryWithControl(
            xi, v, {k: scalar * val for k, val in self.v_left.items()})

    __rmul__ = __mul__


class KernelHandle:
    """Immutable evaluation cache for one kernel.

    include_initial_term selects between the two kernel variants: with it the
    initial inverses (J0 + P(0))^-1 and (J0 + Jbar0 + Sigma(0))^-1 seed the
    factored form; without it trajectories are pinned to start at zero and
    the inverses are dropped. The accumulated control Gramians Q are
    trapezoidal on the problem grid, matching the pinned quadrature order.
    """

    def __init__(self, bundle: RiccatiBundle, include_initial_term: bool = False):
        self.bundle = bundle
        self.include_initial_term = include_initial_term
        p = bundle.p
        n = p.n
        if include_initial_term:
            CP = np.linalg.inv(p.J0 + bundle.P.values[0])
            CS = np.linalg.inv(p.J0 + p.Jbar0 + bundle.Sigma.values[0])
            CP = 0.5 * (CP + CP.T)
            CS = 0.5 * (CS + CS.T)
            for name, C in (("deviation", CP), ("mean", CS)):
                ev = float(np.min(np.linalg.eigvalsh(C)))
                if ev <= 0.0:
                    raise ValueError(
                        f"initial inverse for the {name} block is not positive "
                        f"definite (min eigenvalue {ev:g})")
        else:
            CP = np.zeros((n, n))
            CS = np.zeros((n, n))
        self.CP = CP
        self.CS = CS
        self.QP = self._gramian(bundle.flowP.inv_values)
        self.QS = self._gramian(bundle.flowSigma.inv_values)
        for arr in (self.CP, self.CS, self.QP, self.QS):
            arr.setflags(write=False)

    def _gramian(self, inv_values: np.ndarray) -> np.ndarray:
        p = self.bundle.p
        gng = self.bundle.coeffs.GNG.node
        B = inv_values @ gng @ np.swapaxes(inv_values, 1, 2)
        Q = np.zeros_like(B)
        steps = 0.5 * p.h * (B[:-1] + B[1:])
        Q[1:] = np.cumsum(steps, axis=0)
        return Q

    @classmethod
    def build(cls, p: ProblemSpec, include_initial_term: bool = False,
              terminal_P=None, terminal_Sigma=None,
              coeffs: StageCoeffs | None = None) -> "KernelHandle":
        bundle = RiccatiBundle.build(p, terminal_P=terminal_P,
                                     terminal_Sigma=terminal_Sigma, coeffs=coeffs)
        return cls(bundle, include_initial_term=include_initial_term)

    def _select(self, mode: str):
        if mode == "P":
            return self.bundle.flowP.fwd_values, self.CP, self.QP
        if mode == "Sigma":
            return self.bundle.flowSigma.fwd_values, self.CS, self.QS
        raise ValueError(f"kernel mode must be 'P' or 'Sigma', got {mode!r}")

    @cached_property
    def rep_matrices(self) -> np.ndarray:
        return representative_matrices(self.bundle.p)


def kernel_block(handle: KernelHandle, mode: str, s: float, t: float) -> np.ndarray:
    """One n-by-n kernel block at (s, t); O(1) after handle construction."""
    grid = handle.bundle.p.grid
    fwd, C, Q = handle._select(mode)
    j = grid.node_index(s)
    k = grid.node_index(t)
    return fwd[j] @ (C + Q[min(j, k)]) @ fwd[k].T


def kernel_block_grid(handle: KernelHandle, mode: str,
                      indices: np.ndarray) -> np.ndarray:
    """All kernel blocks over a set of node indices, shape (J, J, n, n)."""
    fwd, C, Q = handle._select(mode)
    idx = np.asarray(indices, dtype=int)
    core = C + Q[np.minimum.outer(idx, idx)]
    return np.einsum("jab,jkbc,kdc->jkad", fwd[idx], core, fwd[idx])


def kernel_apply(handle: KernelHandle, s: float, t: float, Z: Field) -> Field:
    """K(s, t) applied to a field: deviation and mean blocks separately."""
    KP = kernel_block(handle, "P", s, t)
    KS = kernel_block(handle, "Sigma", s, t)
    return Field(Z.ensemble, apply_blocks_arr(KP, KS, Z.values,
                                              Z.ensemble.weights))


def _stage_value(node_vals: np.ndarray, mid_vals: np.ndarray, k: int, s: int):
    if s == 0:
        return node_vals[k]
    if s == 1:
        return mid_vals[k]
    return node_vals[k + 1]


def kernel_apply_ode(handle: KernelHandle, t: float, Z: Field
                     ) -> TrajectoryWithControl:
    """The full trajectory s -> K(s, t)Z with its representative control.

    Integrates one backward companion of Z along the closed loop's adjoint,
    then the forward trajectory with that companion as control forcing up to
    t. The control follows from the Riccati operator acting on the trajectory
    minus the companion while the forcing is active (the remaining backward
    quantities cancel), with its jump at s = t recorded as a pre-jump value.
    """
    bundle = handle.bundle
    p = bundle.p
    sc = bundle.coeffs
    grid = p.grid
    kt = grid.node_index(t)
    w = Z.ensemble.weights
    N, n = Z.values.shape
    K, h = p.K, p.h

    def adj_closed(k, s, y):
        dev = sc.F.stage(k, s).T - bundle.P_st.stage(k, s) @ sc.GNG.stage(k, s)
        mn = sc.FF.stage(k, s).T - bundle.Sigma_st.stage(k, s) @ sc.GNG.stage(k, s)
        return -apply_blocks_arr(dev, mn, y, w)

    rho = np.zeros((K + 1, N, n))
    rho[kt] = Z.values
    rk4_segment(rho, kt, 0, h, adj_closed)
    if kt > 0:
        rho_mid = cubic_midpoints(rho[:kt + 1])
    else:
        rho_mid = np.zeros((0, N, n))

    def forward(k, s, y):
        devA = sc.F.stage(k, s) - sc.GNG.stage(k, s) @ bundle.P_st.stage(k, s)
        meanA = sc.FF.stage(k, s) - sc.GNG.stage(k, s) @ bundle.Sigma_st.stage(k, s)
        out = apply_blocks_arr(devA, meanA, y, w)
        if k < kt:
            out = out + _stage_value(rho, rho_mid, k, s) @ sc.GNG.stage(k, s).T
        return out

    Y = np.zeros((K + 1, N, n))
    if handle.include_initial_term:
        Y[0] = apply_blocks_arr(handle.CP, handle.CS, rho[0], w)
    rk4_segment(Y, 0, K, h, forward)

    V = np.empty((K + 1, N, p.d))
    for k in range(K + 1):
        core = bundle.apply_P_arr(k, Y[k], w)
        if k < kt:
            core = core - rho[k]
        V[k] = -(core @ sc.GNi.node[k])
    v_left = {}
    if kt > 0:
        core = bundle.apply_P_arr(kt, Y[kt], w) - Z.values
        v_left[kt] = -(core @ sc.GNi.node[kt])

    return TrajectoryWithControl(
        FieldPath(Z.ensemble, Y, grid=grid),
        FieldPath(Z.ensemble, V, grid=grid), v_left)


def representative_matrices(p: ProblemSpec) -> np.ndarray:
    """Per-node d-by-d projectors onto controls N-orthogonal to ker G.

    v_rep = N^-1 G* (G N^-1 G*)^+ G v keeps the acceleration Gv while
    minimizing the N-weighted control energy; the pseudo-inverse uses a
    relative eigenvalue cutoff so rank-deficient G is handled exactly.
    """
    ninv = np.linalg.inv(p.N.values)
    G = p.G.values
    gni = G @ ninv
    gng = gni @ np.swapaxes(G, 1, 2)
    pinv = np.linalg.pinv(gng, rcond=PINV_CUTOFF, hermitian=True)
    return np.swapaxes(gni, 1, 2) @ pinv @ G


def representative_control(p: ProblemSpec, v: FieldPath) -> FieldPath:
    """Project a control path nodewise onto its representative."""
    R = representative_matrices(p)
    out = np.einsum("kij,kNj->kNi", R, v.values)
    return FieldPath(v.ensemble, out, grid=v.grid)


def _check_membership(handle: KernelHandle, traj: TrajectoryWithControl) -> None:
    """Per-step dynamics defect check; raises when the trajectory is not in
    the space (wrong dynamics, or nonzero start without the initial term)."""
    p = handle.bundle.p
    sc = handle.bundle.coeffs
    w = traj.ensemble.weights
    xi = traj.xi.values
    v = traj.v.values
    h = p.h
    scale = 1.0 + np.max(np.abs(xi)) + np.max(np.abs(v))
    tol = MEMBERSHIP_FACTOR * h * h * scale
    if not handle.include_initial_term and np.max(np.abs(xi[0])) > tol:
        raise ValueError(
            "trajectory does not start at zero, so it lies outside the "
            f"zero-initial-value space (|xi(0)| = {np.max(np.abs(xi[0])):g})")

    xibar = np.tensordot(xi, w, axes=(1, 0))
    dev = xi - xibar[:, None, :]
    rate = (np.einsum("kij,kNj->kNi", sc.F.node, dev)
            + np.einsum("kij,kj->ki", sc.FF.node, xibar)[:, None, :]
            + np.einsum("kij,kNj->kNi", sc.G.node, v))
    rate_left = rate.copy()
    for m, vl in traj.v_left.items():
        rate_left[m] += np.einsum("ij,Nj->Ni", sc.G.node[m], vl - v[m])
    defect = xi[1:] - xi[:-1] - 0.5 * h * (rate[:-1] + rate_left[1:])
    worst = int(np.argmax(np.max(np.abs(defect), axis=(1, 2))))
    if np.max(np.abs(defect[worst])) > tol:
        raise ValueError(
            f"trajectory dynamics defect {np.max(np.abs(defect[worst])):g} "
            f"on the step ending at node {worst + 1} exceeds {tol:g}; "
            "the path is not generated by its control")


def rkhs_norm_sq(handle: KernelHandle, traj: TrajectoryWithControl) -> float:
    """Squared trajectory-space norm of a dynamics-consistent trajectory.

    Terminal and running weights come from the handle's bundle; the control
    enters through its representative, and the time integrals are Simpson
    split at control-jump nodes so a jump costs no quadrature order.
    """
    _check_membership(handle, traj)
    bundle = handle.bundle
    p = bundle.p
    sc = bundle.coeffs
    w = traj.ensemble.weights
    xi = traj.xi.values
    R = handle.rep_matrices
    vr = np.einsum("kij,kNj->kNi", R, traj.v.values)

    xibar = np.tensordot(xi, w, axes=(1, 0))
    dev = xi - xibar[:, None, :]
    Mxi = (np.einsum("kij,kNj->kNi", sc.MM.node, dev)
           + np.einsum("kij,kj->ki", sc.MMS.node, xibar)[:, None, :])
    Nv = np.einsum("kij,kNj->kNi", p.N.values, vr)
    g = (np.einsum("N,kNi,kNi->k", w, Mxi, xi)
         + np.einsum("N,kNi,kNi->k", w, Nv, vr))

    left_values = {}
    for m, vl in traj.v_left.items():
        vl_rep = vl @ R[m].T
        left_values[m] = float(
            np.einsum("N,Ni,Ni->", w, Mxi[m], xi[m])
            + np.einsum("N,Ni,Ni->", w, vl_rep @ p.N.values[m].T, vl_rep))
    total = piecewise_simpson(g, p.h, left_values)

    def block_energy(dev_mat, mean_mat, values):
        out = apply_blocks_arr(dev_mat, mean_mat, values, w)
        return float(np.einsum("N,Ni,Ni->", w, out, values))

    total += block_energy(bundle.P.values[-1], bundle.Sigma.values[-1], xi[-1])
    if handle.include_initial_term:
        total += block_energy(p.J0, p.J0 + p.Jbar0, xi[0])
    return float(total)


def rkhs_inner(handle: KernelHandle, a: TrajectoryWithControl,
               b: TrajectoryWithControl) -> float:
    """Trajectory-space inner product by polarization of the norm."""
    return 0.25 * (rkhs_norm_sq(handle, a + b) - rkhs_norm_sq(handle, a - b))


def reproducing_residual(handle: KernelHandle, traj: TrajectoryWithControl,
                         t: float, Z: Field) -> float:
    """|(xi(t), Z)_H - <xi, K(.,t)Z>| : the reproducing-property defect."""
    p = handle.bundle.p
    kt = p.grid.node_index(t)
    w = Z.ensemble.weights
    lhs = float(np.einsum("N,Ni,Ni->", w, traj.xi.values[kt], Z.values))
    eta = kernel_apply_ode(handle, t, Z)
    return abs(lhs - rkhs_inner(handle, traj, eta))
