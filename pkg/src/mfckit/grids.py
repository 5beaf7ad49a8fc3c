"""Time grid, coefficient paths, interpolation and quadrature primitives.

Everything downstream integrates on one uniform grid of K steps over [0, T].
Coefficient paths are piecewise-linear between nodes, so they can be evaluated
exactly anywhere; grid-sampled paths (Riccati solutions, forcings) expose
midpoint values through a 4-point cubic stencil so that classical RK4 steps of
size h keep their full order when a sampled path appears on the right-hand
side.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import simpson


class TimeGrid:
    """Uniform grid t_k = k*T/K, k = 0..K."""

    def __init__(self, T: float, K: int):
        if not (T > 0.0):
            raise ValueError(f"horizon T must be positive, got {T}")
        if not (isinstance(K, (int, np.integer)) and K >= 1):
            raise ValueError(f"step count K must be a positive integer, got {K}")
        self.T = float(T)
        self.K = int(K)
        self.h = self.T / self.K
        self.nodes = np.linspace(0.0, self.T, self.K + 1)

    def node_index(self, t: float) -> int:
        """Index of the grid node equal to t (within 1e-9 h)."""
        k = int(round(t / self.h))
        if k < 0 or k > self.K or abs(t - k * self.h) > 1e-9 * max(self.h, 1.0):
            raise ValueError(f"t={t} is not a grid node (h={self.h})")
        return k

    def __eq__(self, other) -> bool:
        return isinstance(other, TimeGrid) and self.T == other.T and self.K == other.K

    def __repr__(self) -> str:
        return f"TimeGrid(T={self.T}, K={self.K})"


class CoeffPath:
    """A time-varying coefficient sampled on the grid, piecewise-linear in t.

    values has shape (K+1,) + entry_shape where entry_shape is (r, c) for
    matrices and (r,) for vectors.  A constant coefficient is stored broadcast
    to every node.
    """

    def __init__(self, grid: TimeGrid, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape[0] != grid.K + 1:
            raise ValueError(
                f"path needs {grid.K + 1} node values, got {values.shape[0]}")
        if not np.all(np.isfinite(values)):
            raise ValueError("coefficient path contains non-finite entries")
        self.grid = grid
        self.values = values

    @classmethod
    def constant(cls, grid: TimeGrid, entry: np.ndarray) -> "CoeffPath":
        entry = np.asarray(entry, dtype=float)
        return cls(grid, np.broadcast_to(entry, (grid.K + 1,) + entry.shape).copy())

    @property
    def entry_shape(self) -> tuple:
        return self.values.shape[1:]

    def __call__(self, t: float) -> np.ndarray:
        """Exact piecewise-linear evaluation at any t in [0, T]."""
        g = self.grid
        if t <= 0.0:
            return self.values[0]
        if t >= g.T:
            return self.values[-1]
        x = t / g.h
        k = min(int(x), g.K - 1)
        w = x - k
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    @property
    def mids(self) -> np.ndarray:
        """Values at step midpoints t_k + h/2 (exact for piecewise-linear)."""
        return 0.5 * (self.values[:-1] + self.values[1:])


def cubic_midpoints(values: np.ndarray) -> np.ndarray:
    """Midpoint values of a smooth grid-sampled path via 4-point cubics.

    values: (K+1,) + shape.  Returns (K,) + shape with entry k approximating
    the path at t_k + h/2 to O(h^4).  Needs K >= 3; smaller grids fall back to
    the 2-point average (O(h^2), only hit on toy grids).
    """
    v = np.asarray(values)
    K = v.shape[0] - 1
    if K < 3:
        return 0.5 * (v[:-1] + v[1:])
    mids = np.empty((K,) + v.shape[1:], dtype=v.dtype)
    # centered stencil at x = k + 1/2 on nodes k-1..k+2
    mids[1:-1] = (-v[:-3] + 9.0 * v[1:-2] + 9.0 * v[2:-1] - v[3:]) / 16.0
    # one-sided cubics at the two boundary intervals
    mids[0] = (5.0 * v[0] + 15.0 * v[1] - 5.0 * v[2] + v[3]) / 16.0
    mids[-1] = (5.0 * v[-1] + 15.0 * v[-2] - 5.0 * v[-3] + v[-4]) / 16.0
    return mids


def trapezoid(samples: np.ndarray, h: float) -> float:
    """Composite trapezoid of scalar node samples."""
    s = np.asarray(samples, dtype=float)
    return float(h * (np.sum(s) - 0.5 * (s[0] + s[-1])))


def trapezoid_weights(K: int, h: float) -> np.ndarray:
    w = np.full(K + 1, h)
    w[0] = w[-1] = 0.5 * h
    return w


def piecewise_simpson(samples: np.ndarray, h: float,
                      left_values: dict[int, float] | None = None) -> float:
    """Composite Simpson of node samples, split at annotated jump nodes.

    samples[k] is the integrand at t_k; left_values maps a node index to the
    integrand's left limit there.  The integral is assembled piece by piece
    between consecutive jump nodes so that a discontinuity at a node costs no
    accuracy.  Pieces of a single step fall back to the trapezoid rule.
    """
    s = np.asarray(samples, dtype=float)
    K = s.shape[0] - 1
    if not left_values:
        return _simpson_piece(s, h)
    breaks = sorted(b for b in left_values if 0 < b < K + 1)
    total = 0.0
    lo = 0
    for b in breaks + [K]:
        if b <= lo:
            continue
        piece = s[lo:b + 1].copy()
        if b in left_values:
            piece[-1] = left_values[b]
        total += _simpson_piece(piece, h)
        lo = b
    return total


def _simpson_piece(piece: np.ndarray, h: float) -> float:
    if piece.shape[0] < 2:
        return 0.0
    if piece.shape[0] == 2:
        return float(0.5 * h * (piece[0] + piece[1]))
    return float(simpson(piece, dx=h))


class NodeMid:
    """Stage values for RK4 steps: node samples (K+1, ...) plus midpoints (K, ...).

    stage(k, 0) is the left node of step k, stage(k, 1) the midpoint,
    stage(k, 2) the right node.
    """

    def __init__(self, node: np.ndarray, mid: np.ndarray):
        self.node = np.asarray(node)
        self.mid = np.asarray(mid)

    def stage(self, k: int, s: int) -> np.ndarray:
        if s == 0:
            return self.node[k]
        if s == 1:
            return self.mid[k]
        return self.node[k + 1]

    @classmethod
    def from_coeff(cls, cp: "CoeffPath") -> "NodeMid":
        return cls(cp.values, cp.mids)

    @classmethod
    def from_samples(cls, values: np.ndarray) -> "NodeMid":
        """For smooth grid-sampled paths; midpoints by 4-point cubics."""
        return cls(values, cubic_midpoints(values))


def rk4_march(y0: np.ndarray, K: int, h: float, rhs, forward: bool = True,
              blowup: float | None = None, label: str = "path", post=None):
    """Classical RK4 over the whole grid; returns the (K+1, ...) node path.

    rhs(k, stage, y) evaluates the derivative for the step between nodes k and
    k+1; stage 0/1/2 corresponds to the left node, the midpoint, and the right
    node of that step.  Backward integration marches from node K down to 0
    (same stage convention, with the step taken as -h).  post, if given, maps
    each new state before it is stored (e.g. resymmetrization).
    """
    path = np.empty((K + 1,) + np.shape(y0), dtype=float)
    if forward:
        path[0] = y0
        rk4_segment(path, 0, K, h, rhs, blowup=blowup, label=label, post=post)
    else:
        path[K] = y0
        rk4_segment(path, K, 0, h, rhs, blowup=blowup, label=label, post=post)
    return path


def rk4_segment(path: np.ndarray, k_from: int, k_to: int, h: float, rhs,
                blowup: float | None = None, label: str = "path",
                post=None) -> None:
    """RK4 march filling path nodes from k_from to k_to (either direction).

    path is a preallocated (K+1, ...) array with path[k_from] already set;
    entries outside the covered range are left untouched. Stage convention
    matches rk4_march: rhs(k, stage, y) with k the step's left-node index.
    """
    if k_to == k_from:
        return
    forward = k_to > k_from
    step = h if forward else -h
    nodes = range(k_from, k_to) if forward else range(k_from, k_to, -1)
    for node in nodes:
        if forward:
            k, s0, s2, dst = node, 0, 2, node + 1
        else:
            k, s0, s2, dst = node - 1, 2, 0, node - 1
        y = path[node]
        k1 = rhs(k, s0, y)
        k2 = rhs(k, 1, y + 0.5 * step * k1)
        k3 = rhs(k, 1, y + 0.5 * step * k2)
        k4 = rhs(k, s2, y + step * k3)
        ynew = y + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if post is not None:
            ynew = post(ynew)
        if blowup is not None and not np.max(np.abs(ynew)) <= blowup:
            raise FloatingPointError(
                f"{label} integration blew up at node {dst} "
                f"(entry magnitude > {blowup:g})")
        path[dst] = ynew
