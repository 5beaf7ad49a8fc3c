"""Weighted particle ensembles and the empirical Hilbert spaces over them.

The base measure m is a finite weighted particle cloud. An element of
H = L2_m(R^n, R^k) is a Field: one vector per particle. Every integral over
m reduces to a weighted sum over particles, evaluated in fixed particle
order, so means, inner products, and covariances are exact linear algebra.
"""

from __future__ import annotations

import numpy as np

from . import rng


class Ensemble:
    """Particle cloud (points x_i, weights w_i) representing the measure m.

    Weights must be nonnegative and sum to 1 within 1e-12. Points live in
    R^n and are only used as labels for fields (and as the identity initial
    field); the Hilbert-space algebra touches the weights alone.
    """

    def __init__(self, points, weights=None, seed=None):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.ndim != 2:
            raise ValueError(f"points must be (N, n), got shape {points.shape}")
        N = points.shape[0]
        if weights is None:
            weights = np.full(N, 1.0 / N)
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (N,):
            raise ValueError(
                f"weights shape {weights.shape} does not match {N} particles")
        if np.any(weights < 0.0):
            raise ValueError("weights must be nonnegative")
        total = float(np.sum(weights))
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {total!r}, expected 1 within 1e-12")
        if not np.all(np.isfinite(points)):
            raise ValueError("particle points contain non-finite entries")
        self.points = points
        self.weights = weights
        self.seed = seed

    @classmethod
    def gaussian(cls, mean, cov, count: int, seed: int) -> "Ensemble":
        """Equal-weight cloud sampled from N(mean, cov), reproducible by seed.

        Uses the symmetric eigendecomposition square root of cov, so the
        draw is a fixed function of the Philox stream for (seed, ensemble
        stream), independent of any other random state.
        """
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        n = mean.shape[0]
        if cov.shape != (n, n):
            raise ValueError(f"cov shape {cov.shape} does not match mean dim {n}")
        vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
        if np.min(vals) < -1e-10 * max(1.0, np.max(np.abs(vals))):
            raise ValueError("cov must be positive semidefinite")
        root = vecs @ np.diag(np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
        z = rng.ensemble_stream(seed).standard_normal((count, n))
        return cls(mean + z @ root.T, seed=seed)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def average(self, values: np.ndarray) -> np.ndarray:
        """Weighted average over particles of (N, ...) samples."""
        return np.tensordot(self.weights, values, axes=(0, 0))

    def same_as(self, other: "Ensemble") -> bool:
        return self is other or (
            np.array_equal(self.points, other.points)
            and np.array_equal(self.weights, other.weights))


class Field:
    """An element of L2_m(R^n, R^k): one value vector per particle."""

    def __init__(self, ensemble: Ensemble, values):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != ensemble.size:
            raise ValueError(
                f"field has {values.shape[0]} values for "
                f"{ensemble.size} particles")
        self.ensemble = ensemble
        self.values = values

    @classmethod
    def constant(cls, ensemble: Ensemble, vector) -> "Field":
        vector = np.atleast_1d(np.asarray(vector, dtype=float))
        return cls(ensemble, np.tile(vector, (ensemble.size, 1)))

    @classmethod
    def coordinates(cls, ensemble: Ensemble) -> "Field":
        """The identity map x -> x, pushing m forward to itself."""
        return cls(ensemble, ensemble.points.copy())

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __add__(self, other: "Field") -> "Field":
        return Field(self.ensemble, self.values + other.values)

    def __sub__(self, other: "Field") -> "Field":
        return Field(self.ensemble, self.values - other.values)

    def __mul__(self, scalar: float) -> "Field":
        return Field(self.ensemble, self.values * scalar)

    __rmul__ = __mul__

    def __neg__(self) -> "Field":
        return Field(self.ensemble, -self.values)


def mean(X: Field) -> np.ndarray:
    """Average of the field over m: Xbar = sum_i w_i X_i."""
    return X.ensemble.average(X.values)


def inner_H(X: Field, Y: Field) -> float:
    """Empirical inner product (X, Y)_H = sum_i w_i X_i . Y_i."""
    if X.values.shape != Y.values.shape:
        raise ValueError(
            f"field shapes {X.values.shape} and {Y.values.shape} differ")
    return float(np.dot(X.ensemble.weights, np.sum(X.values * Y.values, axis=1)))


def norm_H(X: Field) -> float:
    return float(np.sqrt(max(inner_H(X, X), 0.0)))


def deviation(X: Field) -> Field:
    """The zero-mean part X - Xbar."""
    return Field(X.ensemble, X.values - mean(X))


def apply_mf_operator(A, Abar, X: Field) -> Field:
    """The mean-field operator X_x -> A X_x + Abar Xbar applied particlewise."""
    A = np.asarray(A, dtype=float)
    Abar = np.asarray(Abar, dtype=float)
    return Field(X.ensemble, X.values @ A.T + mean(X) @ Abar.T)


def apply_blocks_arr(dev_mat: np.ndarray, mean_mat: np.ndarray,
                     values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Apply an operator given by its deviation/mean blocks to (..., N, k) samples.

    Mean-field operators here act diagonally on the orthogonal split
    X = (X - Xbar) + Xbar: one matrix on the deviation, another on the mean.
    Weighted averaging is over the second-to-last axis.
    """
    xbar = np.tensordot(values, weights, axes=(-2, 0))
    dev = values - xbar[..., None, :]
    out = dev @ dev_mat.T + (xbar @ mean_mat.T)[..., None, :]
    return out


def apply_blocks(dev_mat, mean_mat, X: Field) -> Field:
    """Field version of apply_blocks_arr."""
    return Field(X.ensemble, apply_blocks_arr(
        np.asarray(dev_mat, dtype=float), np.asarray(mean_mat, dtype=float),
        X.values, X.ensemble.weights))


def push_forward_stats(X: Field) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the push-forward measure X_# m."""
    mu = mean(X)
    dev = X.values - mu
    cov = (dev * X.ensemble.weights[:, None]).T @ dev
    return mu, cov


class FieldPath:
    """A grid-sampled trajectory of fields: values stacked (K+1, N, k)."""

    def __init__(self, ensemble: Ensemble, values, grid=None):
        values = np.asarray(values, dtype=float)
        if values.ndim != 3:
            raise ValueError(f"path values must be (K+1, N, k), got {values.shape}")
        if values.shape[1] != ensemble.size:
            raise ValueError(
                f"path has {values.shape[1]} particles, ensemble {ensemble.size}")
        self.ensemble = ensemble
        self.values = values
        self.grid = grid

    @classmethod
    def zero(cls, ensemble: Ensemble, nodes: int, dim: int, grid=None) -> "FieldPath":
        return cls(ensemble, np.zeros((nodes, ensemble.size, dim)), grid=grid)

    def node(self, k: int) -> Field:
        return Field(self.ensemble, self.values[k])

    @property
    def nodes(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def means(self) -> np.ndarray:
        """Per-node field averages, shape (K+1, k)."""
        return np.tensordot(self.values, self.ensemble.weights, axes=(1, 0))

    def __add__(self, other: "FieldPath") -> "FieldPath":
        return FieldPath(self.ensemble, self.values + other.values, grid=self.grid)

    def __sub__(self, other: "FieldPath") -> "FieldPath":
        return FieldPath(self.ensemble, self.values - other.values, grid=self.grid)

    def __mul__(self, scalar: float) -> "FieldPath":
        return FieldPath(self.ensemble, self.values * scalar, grid=self.grid)

    __rmul__ = __mul__


def build_ensemble(config: dict, n: int) -> Ensemble:
    """Construct an ensemble from its config section (inline points or gaussian)."""
    if "gaussian" in config:
        g = config["gaussian"]
        for key in ("mean", "cov", "count", "seed"):
            if key not in g:
                raise ValueError(f"ensemble.gaussian missing key '{key}'")
        ens = Ensemble.gaussian(g["mean"], g["cov"], int(g["count"]), int(g["seed"]))
    elif "points" in config:
        ens = Ensemble(config["points"], config.get("weights"))
    else:
        raise ValueError("ensemble config needs 'points' or 'gaussian'")
    if ens.dim != n:
        raise ValueError(f"ensemble points are {ens.dim}-dimensional, problem has n={n}")
    return ens


def build_initial_field(config: dict | None, ens: Ensemble) -> Field:
    """Initial state map X0 from its config section; defaults to coordinates."""
    if config is None:
        return Field.coordinates(ens)
    kind = config.get("kind", "coordinates")
    if kind == "coordinates":
        return Field.coordinates(ens)
    if kind == "constant":
        return Field.constant(ens, config["value"])
    if kind == "affine":
        A = np.atleast_2d(np.asarray(config["A"], dtype=float))
        b = np.atleast_1d(np.asarray(config.get("b", np.zeros(A.shape[0])), dtype=float))
        return Field(ens, ens.points @ A.T + b)
    if kind == "values":
        return Field(ens, config["values"])
    raise ValueError(f"unknown initial_field kind '{kind}'")
