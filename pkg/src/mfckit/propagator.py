"""Backward Riccati paths and the closed-loop fundamental flows.

Every operator in this problem family acts block-diagonally on the orthogonal
split of a field into deviation and mean parts, so each operator-valued path
reduces to a pair of n-by-n matrix paths: P drives the deviation block and
Sigma the mean block. Both solve matrix Riccati equations backward from the
terminal data; the affine offset lambda rides along Sigma; and the closed-loop
state propagators are the fundamental solutions of the linear dynamics the
Riccati feedback induces. A RiccatiBundle collects all of these for one
problem and one choice of terminal weight.
"""

from __future__ import annotations

import csv
import warnings
from functools import cached_property

import numpy as np

from .ensemble import Field, apply_blocks_arr
from .grids import CoeffPath, NodeMid, rk4_march
from .problem import ProblemSpec, mbar_s_batch

# Riccati integration aborts when any entry passes this magnitude.
BLOWUP_LIMIT = 1e12
# Factored flow products lose accuracy past this growth/decay spread.
CONDITION_LIMIT = 1e8


class MatrixPath(CoeffPath):
    """Grid-sampled matrix path; calls interpolate linearly between nodes.

    Paths produced by the integrators are fourth-order accurate at the
    nodes; stage values for further integrations must come from
    NodeMid.from_samples, not from calling the path at midpoints.
    """


class VectorPath(CoeffPath):
    """Grid-sampled vector path; same node/stage convention as MatrixPath."""


class StageCoeffs:
    """Problem coefficients and derived products at all RK4 stage points.

    Midpoint values of products are assembled from midpoint values of the
    piecewise-linear inputs (never by averaging the product), and N is
    inverted at each stage point rather than interpolating inverses.
    """

    def __init__(self, p: ProblemSpec):
        self.p = p
        self.F = NodeMid.from_coeff(p.F)
        self.Fbar = NodeMid.from_coeff(p.Fbar)
        self.FF = NodeMid(p.F.values + p.Fbar.values, p.F.mids + p.Fbar.mids)
        self.G = NodeMid.from_coeff(p.G)
        self.f = NodeMid.from_coeff(p.f)
        self.alpha = NodeMid.from_coeff(p.alpha)
        self.beta = NodeMid.from_coeff(p.beta)
        ninv_node = np.linalg.inv(p.N.values)
        ninv_mid = np.linalg.inv(p.N.mids)
        self.Ninv = NodeMid(ninv_node, ninv_mid)
        gni_node = p.G.values @ ninv_node
        gni_mid = p.G.mids @ ninv_mid
        self.GNi = NodeMid(gni_node, gni_mid)
        self.GNG = NodeMid(gni_node @ np.swapaxes(p.G.values, 1, 2),
                           gni_mid @ np.swapaxes(p.G.mids, 1, 2))
        self.gnb = NodeMid(
            np.einsum("kij,kj->ki", gni_node, p.beta.values),
            np.einsum("kij,kj->ki", gni_mid, p.beta.mids))
        mm_node = p.M.values + p.Mbar.values
        mm_mid = p.M.mids + p.Mbar.mids
        self.MM = NodeMid(mm_node, mm_mid)
        self.MMS = NodeMid(mm_node + mbar_s_batch(p.S.values, p.Mbar.values),
                           mm_mid + mbar_s_batch(p.S.mids, p.Mbar.mids))


def _symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def _riccati_march(p: ProblemSpec, A: NodeMid, GNG: NodeMid, W: NodeMid,
                   terminal: np.ndarray, label: str) -> np.ndarray:
    """Backward RK4 for P' + PA + A*P - P GNG P + W = 0, resymmetrized each step."""

    def rhs(k, s, P):
        a = A.stage(k, s)
        return -(P @ a + a.T @ P - P @ GNG.stage(k, s) @ P + W.stage(k, s))

    terminal = _symmetrize(np.asarray(terminal, dtype=float))
    return rk4_march(terminal, p.K, p.h, rhs, forward=False,
                     blowup=BLOWUP_LIMIT, label=label, post=_symmetrize)


def integrate_riccati(p: ProblemSpec, terminal_P=None, terminal_Sigma=None,
                      coeffs: StageCoeffs | None = None
                      ) -> tuple[MatrixPath, MatrixPath]:
    """Solve both Riccati blocks backward from the given terminal weights.

    Defaults to the terminal cost data of the problem: M_T + Mbar_T on the
    deviation block and additionally the terminal shift correction on the
    mean block. Raises FloatingPointError naming the failing node if either
    path blows up.
    """
    sc = coeffs if coeffs is not None else StageCoeffs(p)
    if terminal_P is None:
        terminal_P = p.terminal_dev_block()
    if terminal_Sigma is None:
        terminal_Sigma = p.terminal_mean_block()
    P_vals = _riccati_march(p, sc.F, sc.GNG, sc.MM, terminal_P, "P")
    S_vals = _riccati_march(p, sc.FF, sc.GNG, sc.MMS, terminal_Sigma, "Sigma")
    return MatrixPath(p.grid, P_vals), MatrixPath(p.grid, S_vals)


def gamma_path(P: MatrixPath, Sigma: MatrixPath) -> MatrixPath:
    """The mean-interaction block Gamma = Sigma - P, nodewise."""
    return MatrixPath(P.grid, Sigma.values - P.values)


def integrate_lambda(p: ProblemSpec, Sigma: MatrixPath,
                     coeffs: StageCoeffs | None = None) -> VectorPath:
    """Backward affine offset driven by the mean-block Riccati path.

    Solves 0 = lambda' + ((F + Fbar)* - Sigma G N^-1 G*) lambda + alpha
    + Sigma (f - G N^-1 beta) with lambda(T) = alpha_T.
    """
    sc = coeffs if coeffs is not None else StageCoeffs(p)
    sig = NodeMid.from_samples(Sigma.values)

    def rhs(k, s, lam):
        Sg = sig.stage(k, s)
        drift = sc.f.stage(k, s) - sc.gnb.stage(k, s)
        return -(sc.FF.stage(k, s).T @ lam - Sg @ (sc.GNG.stage(k, s) @ lam)
                 + sc.alpha.stage(k, s) + Sg @ drift)

    vals = rk4_march(p.alpha_T.astype(float), p.K, p.h, rhs, forward=False,
                     blowup=BLOWUP_LIMIT, label="lambda")
    return VectorPath(p.grid, vals)


class FlowPair:
    """Fundamental solution Psi(s, t) of a linear matrix ODE on the grid.

    Stored factored as Psi(s, 0) and Psi(0, t), each integrated from the
    identity by its own ODE (the inverse factor is never obtained by matrix
    inversion). Queries are by node index so any (s, t) product costs one
    matrix multiply. Emits a warning when the factors are so ill-conditioned
    that their products lose more than about half the available precision.
    """

    def __init__(self, grid, fwd_values: np.ndarray, inv_values: np.ndarray,
                 label: str):
        self.grid = grid
        self.fwd_values = fwd_values
        self.inv_values = inv_values
        self.label = label
        fn = np.linalg.norm(fwd_values, axis=(1, 2))
        iv = np.linalg.norm(inv_values, axis=(1, 2))
        cond = float(np.max(fn * iv))
        self.condition = cond
        if cond > CONDITION_LIMIT:
            warnings.warn(
                f"{label} flow factors are badly conditioned "
                f"(max |Psi(t,0)| |Psi(0,t)| = {cond:.3g} > {CONDITION_LIMIT:g}); "
                "propagated values may lose accuracy", stacklevel=2)

    def psi(self, j: int, k: int) -> np.ndarray:
        """Psi(t_j, t_k) as one n-by-n matrix."""
        return self.fwd_values[j] @ self.inv_values[k]

    def psi_at(self, s: float, t: float) -> np.ndarray:
        return self.psi(self.grid.node_index(s), self.grid.node_index(t))


def _flow_pair(p: ProblemSpec, A0: NodeMid, GNG: NodeMid, ric: NodeMid,
               label: str) -> FlowPair:
    def closed(k, s):
        return A0.stage(k, s) - GNG.stage(k, s) @ ric.stage(k, s)

    eye = np.eye(p.n)
    fwd = rk4_march(eye, p.K, p.h, lambda k, s, Y: closed(k, s) @ Y)
    inv = rk4_march(eye, p.K, p.h, lambda k, s, Y: -(Y @ closed(k, s)))
    return FlowPair(p.grid, fwd, inv, label)


def fundamental_flows(p: ProblemSpec, P: MatrixPath, Sigma: MatrixPath,
                      coeffs: StageCoeffs | None = None
                      ) -> tuple[FlowPair, FlowPair]:
    """Closed-loop propagators for the deviation and mean blocks.

    The deviation block flows along F - G N^-1 G* P, the mean block along
    F + Fbar - G N^-1 G* Sigma.
    """
    sc = coeffs if coeffs is not None else StageCoeffs(p)
    flow_P = _flow_pair(p, sc.F, sc.GNG, NodeMid.from_samples(P.values), "P")
    flow_S = _flow_pair(p, sc.FF, sc.GNG, NodeMid.from_samples(Sigma.values),
                        "Sigma")
    return flow_P, flow_S


class RiccatiBundle:
    """All propagation data for one problem and one terminal weight choice.

    lq_terminal records whether the Riccati paths end at the problem's own
    terminal cost data (the closed-form optimal control case) or at an
    externally supplied weight (the kernel construction allows any
    nonnegative terminal operator, including zero).
    """

    def __init__(self, p: ProblemSpec, coeffs: StageCoeffs, P: MatrixPath,
                 Sigma: MatrixPath, Gamma: MatrixPath, lam: VectorPath,
                 flowP: FlowPair, flowSigma: FlowPair, lq_terminal: bool):
        self.p = p
        self.coeffs = coeffs
        self.P = P
        self.Sigma = Sigma
        self.Gamma = Gamma
        self.lam = lam
        self.flowP = flowP
        self.flowSigma = flowSigma
        self.lq_terminal = lq_terminal

    @classmethod
    def build(cls, p: ProblemSpec, terminal_P=None, terminal_Sigma=None,
              coeffs: StageCoeffs | None = None) -> "RiccatiBundle":
        sc = coeffs if coeffs is not None else StageCoeffs(p)
        lq = terminal_P is None and terminal_Sigma is None
        P, Sigma = integrate_riccati(p, terminal_P, terminal_Sigma, coeffs=sc)
        Gamma = gamma_path(P, Sigma)
        lam = integrate_lambda(p, Sigma, coeffs=sc)
        flowP, flowSigma = fundamental_flows(p, P, Sigma, coeffs=sc)
        return cls(p, sc, P, Sigma, Gamma, lam, flowP, flowSigma, lq)

    @cached_property
    def P_st(self) -> NodeMid:
        return NodeMid.from_samples(self.P.values)

    @cached_property
    def Sigma_st(self) -> NodeMid:
        return NodeMid.from_samples(self.Sigma.values)

    @cached_property
    def lam_st(self) -> NodeMid:
        return NodeMid.from_samples(self.lam.values)

    def apply_P_arr(self, k: int, values: np.ndarray,
                    weights: np.ndarray) -> np.ndarray:
        """Apply the Riccati operator at node k to (..., N, n) samples."""
        return apply_blocks_arr(self.P.values[k], self.Sigma.values[k],
                                values, weights)

    def apply_P(self, k: int, X: Field) -> Field:
        return Field(X.ensemble, self.apply_P_arr(
            k, X.values, X.ensemble.weights))

    def apply_P_stage(self, k: int, s: int, values: np.ndarray,
                      weights: np.ndarray) -> np.ndarray:
        return apply_blocks_arr(self.P_st.stage(k, s),
                                self.Sigma_st.stage(k, s), values, weights)


def apply_flow(bundle: RiccatiBundle, s: float, t: float, X: Field) -> Field:
    """Propagate a field from time t to time s along the optimal closed loop.

    Both times must be grid nodes; the deviation part travels by the
    deviation flow and the mean by the mean flow.
    """
    j = bundle.p.grid.node_index(s)
    k = bundle.p.grid.node_index(t)
    return Field(X.ensemble, apply_blocks_arr(
        bundle.flowP.psi(j, k), bundle.flowSigma.psi(j, k),
        X.values, X.ensemble.weights))


def weak_riccati_residual(bundle: RiccatiBundle, k: int, X: Field,
                          Y: Field) -> float:
    """Weak-form defect of the operator Riccati equation at interior node k.

    Uses a central difference in time for the operator derivative, so the
    returned defect is second order in the step even though the paths
    themselves are fourth order. Tested against the pair (X, Y) with all
    operators applied through their deviation/mean blocks.
    """
    p = bundle.p
    if not 0 < k < p.K:
        raise ValueError(f"need an interior node, got {k} of {p.K}")
    w = X.ensemble.weights
    sc = bundle.coeffs
    dP = (bundle.P.values[k + 1] - bundle.P.values[k - 1]) / (2.0 * p.h)
    dS = (bundle.Sigma.values[k + 1] - bundle.Sigma.values[k - 1]) / (2.0 * p.h)

    def inner(a, b):
        return float(np.dot(w, np.sum(a * b, axis=1)))

    dPX = apply_blocks_arr(dP, dS, X.values, w)
    PX = bundle.apply_P_arr(k, X.values, w)
    PY = bundle.apply_P_arr(k, Y.values, w)
    FX = apply_blocks_arr(sc.F.node[k], sc.FF.node[k], X.values, w)
    FY = apply_blocks_arr(sc.F.node[k], sc.FF.node[k], Y.values, w)
    MX = apply_blocks_arr(sc.MM.node[k], sc.MMS.node[k], X.values, w)
    G = sc.G.node[k]
    ninv = sc.Ninv.node[k]
    GPX = PX @ G
    GPY = PY @ G
    return (inner(dPX, Y.values) + inner(FX, PY) + inner(FY, PX)
            - inner(GPX @ ninv.T, GPY) + inner(MX, Y.values))


def export_paths_csv(bundle: RiccatiBundle, stream) -> None:
    """Write node, time, and all P/Sigma/Gamma/lambda entries as CSV.

    Matrix entries are flattened row-major and formatted with %.17g so the
    written floats round-trip exactly.
    """
    p = bundle.p
    n = p.n
    writer = csv.writer(stream, lineterminator="\n")
    header = ["node", "time"]
    for name in ("P", "Sigma", "Gamma"):
        header += [f"{name}_{i}_{j}" for i in range(n) for j in range(n)]
    header += [f"lambda_{i}" for i in range(n)]
    writer.writerow(header)
    for k in range(p.K + 1):
        row = [str(k), f"{p.grid.nodes[k]:.17g}"]
        for path in (bundle.P, bundle.Sigma, bundle.Gamma):
            row += [f"{x:.17g}" for x in path.values[k].ravel()]
        row += [f"{x:.17g}" for x in bundle.lam.values[k]]
        writer.writerow(row)
