"""Problem data: coefficient paths, terminal data, parsing and validation.

A problem file is JSON with sections dims, grid, coefficients, terminal,
initial_weights (optional), ensemble (optional), initial_field (optional),
noise (optional). Each time-varying coefficient is given either once
(constant in time) or as a list of exactly K+1 node values; any other count
is rejected rather than resampled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .ensemble import Ensemble, Field, build_ensemble, build_initial_field
from .grids import CoeffPath, TimeGrid


class ConfigError(ValueError):
    """Schema or shape error in a problem file, naming the offending key."""


@dataclass(frozen=True)
class Dims:
    n: int
    d: int

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ConfigError(f"dims must be positive, got n={self.n}, d={self.d}")


@dataclass
class ValidationReport:
    ok: bool
    violations: list = field(default_factory=list)


# coefficient name -> target shape in terms of (n, d)
_MATRIX_COEFFS = {
    "F": ("n", "n"), "Fbar": ("n", "n"), "G": ("n", "d"),
    "M": ("n", "n"), "Mbar": ("n", "n"), "S": ("n", "n"), "N": ("d", "d"),
}
_VECTOR_COEFFS = {"f": "n", "alpha": "n", "beta": "d"}


class ProblemSpec:
    """Immutable container for all coefficients of one control problem.

    Attributes F, Fbar, G, f, M, Mbar, S, N, alpha, beta are CoeffPath;
    M_T, Mbar_T, S_T, alpha_T, J0, Jbar0 are fixed arrays. The optional
    ensemble / initial_field / noise sections of the config are carried
    along for the CLI; solvers take them as explicit arguments.
    """

    def __init__(self, dims: Dims, grid: TimeGrid, coeffs: dict, terminal: dict,
                 J0=None, Jbar0=None, ensemble: Ensemble | None = None,
                 initial_field: Field | None = None, noise: dict | None = None):
        self.dims = dims
        self.grid = grid
        n, d = dims.n, dims.d
        for name in list(_MATRIX_COEFFS) + list(_VECTOR_COEFFS):
            if name not in coeffs:
                raise ConfigError(f"coefficients.{name}: missing")
            setattr(self, name, coeffs[name])
        self.M_T = _fix_matrix(terminal.get("M_T"), (n, n), "terminal.M_T")
        self.Mbar_T = _fix_matrix(terminal.get("Mbar_T"), (n, n), "terminal.Mbar_T")
        if terminal.get("S_T") is None:
            self.S_T = self.S.values[-1].copy()
        else:
            self.S_T = _fix_matrix(terminal["S_T"], (n, n), "terminal.S_T")
        self.alpha_T = _fix_vector(terminal.get("alpha_T"), n, "terminal.alpha_T")
        self.J0 = np.eye(n) if J0 is None else _fix_matrix(J0, (n, n), "initial_weights.J0")
        self.Jbar0 = np.zeros((n, n)) if Jbar0 is None else _fix_matrix(
            Jbar0, (n, n), "initial_weights.Jbar0")
        self.ensemble = ensemble
        self.initial_field = initial_field
        self.noise = noise
        for arr in (self.M_T, self.Mbar_T, self.S_T, self.alpha_T, self.J0, self.Jbar0):
            arr.setflags(write=False)
        for name in list(_MATRIX_COEFFS) + list(_VECTOR_COEFFS):
            getattr(self, name).values.setflags(write=False)

    @property
    def n(self) -> int:
        return self.dims.n

    @property
    def d(self) -> int:
        return self.dims.d

    @property
    def K(self) -> int:
        return self.grid.K

    @property
    def T(self) -> float:
        return self.grid.T

    @property
    def h(self) -> float:
        return self.grid.h

    def mbar_s_nodes(self) -> np.ndarray:
        """M̄_S at every node, shape (K+1, n, n)."""
        return mbar_s_batch(self.S.values, self.Mbar.values)

    def mbar_s_terminal(self) -> np.ndarray:
        """M̄_S(T) built from the terminal data (S_T, Mbar_T)."""
        return mbar_s_batch(self.S_T, self.Mbar_T)

    def terminal_dev_block(self) -> np.ndarray:
        return self.M_T + self.Mbar_T

    def terminal_mean_block(self) -> np.ndarray:
        return self.M_T + self.Mbar_T + self.mbar_s_terminal()


def mbar_s_batch(S: np.ndarray, Mbar: np.ndarray) -> np.ndarray:
    """S* M̄ S − S* M̄ − M̄ S for stacked (..., n, n) inputs."""
    St = np.swapaxes(S, -1, -2)
    return St @ Mbar @ S - St @ Mbar - Mbar @ S


def mbar_s(p: ProblemSpec, t: float) -> np.ndarray:
    """S*(t) M̄(t) S(t) − S*(t) M̄(t) − M̄(t) S(t); terminal data at t = T."""
    if t >= p.T:
        return p.mbar_s_terminal()
    return mbar_s_batch(p.S(t), p.Mbar(t))


def _depth(value) -> int:
    depth = 0
    while isinstance(value, (list, tuple)):
        if len(value) == 0:
            raise ConfigError("empty list in coefficient value")
        value = value[0]
        depth += 1
    return depth


def _as_array(value, path: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: not a rectangular numeric array ({exc})") from None
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{path}: non-finite entries")
    return arr


def _fix_matrix(value, shape: tuple, path: str) -> np.ndarray:
    if value is None:
        raise ConfigError(f"{path}: missing")
    if np.isscalar(value):
        if shape != (1, 1):
            raise ConfigError(f"{path}: scalar given but shape {shape} required")
        return np.array([[float(value)]])
    arr = _as_array(value, path)
    if arr.shape != shape:
        raise ConfigError(f"{path}: expected shape {shape}, got {arr.shape}")
    return arr.copy()


def _fix_vector(value, n: int, path: str) -> np.ndarray:
    if value is None:
        raise ConfigError(f"{path}: missing")
    if np.isscalar(value):
        if n != 1:
            raise ConfigError(f"{path}: scalar given but length {n} required")
        return np.array([float(value)])
    arr = _as_array(value, path)
    if arr.shape != (n,):
        raise ConfigError(f"{path}: expected shape ({n},), got {arr.shape}")
    return arr.copy()


def _coeff_path(value, grid: TimeGrid, entry_shape: tuple, path: str) -> CoeffPath:
    """Accept a scalar, one entry, or exactly K+1 entries; reject other counts."""
    if value is None:
        raise ConfigError(f"{path}: missing")
    is_vector = len(entry_shape) == 1
    if np.isscalar(value):
        if int(np.prod(entry_shape)) != 1:
            raise ConfigError(f"{path}: scalar given but shape {entry_shape} required")
        entry = np.full(entry_shape, float(value))
        return CoeffPath.constant(grid, entry)
    depth = _depth(value)
    constant_depth = 1 if is_vector else 2
    arr = _as_array(value, path)
    if depth == constant_depth:
        if arr.shape != entry_shape:
            raise ConfigError(f"{path}: expected shape {entry_shape}, got {arr.shape}")
        return CoeffPath.constant(grid, arr)
    if depth == constant_depth + 1:
        if arr.shape[0] != grid.K + 1:
            raise ConfigError(
                f"{path}: time-varying value needs exactly {grid.K + 1} node "
                f"entries (one per grid node) or a single entry, got {arr.shape[0]}")
        if arr.shape[1:] != entry_shape:
            raise ConfigError(
                f"{path}: expected node shape {entry_shape}, got {arr.shape[1:]}")
        return CoeffPath(grid, arr)
    raise ConfigError(f"{path}: unrecognized nesting depth {depth}")


def parse_problem(config_text: str, override_K: int | None = None) -> ProblemSpec:
    try:
        config = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return parse_problem_dict(config, override_K=override_K)


def parse_problem_dict(config: dict, override_K: int | None = None) -> ProblemSpec:
    for section in ("dims", "grid", "coefficients", "terminal"):
        if section not in config:
            raise ConfigError(f"{section}: missing section")
    dd = config["dims"]
    if "n" not in dd or "d" not in dd:
        raise ConfigError("dims: needs keys n and d")
    dims = Dims(int(dd["n"]), int(dd["d"]))
    gg = config["grid"]
    if "T" not in gg or "K" not in gg:
        raise ConfigError("grid: needs keys T and K")
    K = int(override_K) if override_K is not None else int(gg["K"])
    grid = TimeGrid(float(gg["T"]), K)
    if override_K is not None and _has_time_varying(config["coefficients"]):
        raise ConfigError(
            "grid.K override is only allowed when all coefficients are constant")

    n, d = dims.n, dims.d
    sizes = {"n": n, "d": d}
    cc = config["coefficients"]
    coeffs = {}
    for name, shape_spec in _MATRIX_COEFFS.items():
        shape = tuple(sizes[s] for s in shape_spec)
        coeffs[name] = _coeff_path(cc.get(name), grid, shape, f"coefficients.{name}")
    for name, size_spec in _VECTOR_COEFFS.items():
        coeffs[name] = _coeff_path(cc.get(name), grid, (sizes[size_spec],),
                                   f"coefficients.{name}")
    iw = config.get("initial_weights", {})

    ens = None
    x0 = None
    if "ensemble" in config:
        ens = build_ensemble(config["ensemble"], n)
        x0 = build_initial_field(config.get("initial_field"), ens)
    elif "initial_field" in config:
        raise ConfigError("initial_field: requires an ensemble section")

    noise = None
    if "noise" in config:
        nz = config["noise"]
        if "eta" not in nz:
            raise ConfigError("noise.eta: missing")
        noise = {
            "eta": _fix_matrix(nz["eta"], (n, n), "noise.eta"),
            "n_paths": int(nz.get("n_paths", 1)),
            "seed": int(nz.get("seed", 0)),
        }
        if noise["n_paths"] < 1:
            raise ConfigError("noise.n_paths: must be at least 1")

    return ProblemSpec(dims, grid, coeffs, config["terminal"],
                       J0=iw.get("J0"), Jbar0=iw.get("Jbar0"),
                       ensemble=ens, initial_field=x0, noise=noise)


def _has_time_varying(cc: dict) -> bool:
    for name in list(_MATRIX_COEFFS) + list(_VECTOR_COEFFS):
        value = cc.get(name)
        if value is None or np.isscalar(value):
            continue
        vec = name in _VECTOR_COEFFS
        if _depth(value) == (2 if vec else 3):
            return True
    return False


def emit_problem(p: ProblemSpec) -> str:
    """Canonical JSON for a ProblemSpec; parse(emit(p)) round-trips bit-exactly.

    All coefficients are written as full per-node lists, ensembles as their
    realized points, so no sampling or broadcasting happens on re-parse.
    """
    config = {
        "dims": {"n": p.n, "d": p.d},
        "grid": {"T": p.T, "K": p.K},
        "coefficients": {
            name: getattr(p, name).values.tolist()
            for name in list(_MATRIX_COEFFS) + list(_VECTOR_COEFFS)
        },
        "terminal": {
            "M_T": p.M_T.tolist(), "Mbar_T": p.Mbar_T.tolist(),
            "S_T": p.S_T.tolist(), "alpha_T": p.alpha_T.tolist(),
        },
        "initial_weights": {"J0": p.J0.tolist(), "Jbar0": p.Jbar0.tolist()},
    }
    if p.ensemble is not None:
        config["ensemble"] = {
            "points": p.ensemble.points.tolist(),
            "weights": p.ensemble.weights.tolist(),
        }
    if p.initial_field is not None:
        config["initial_field"] = {"kind": "values",
                                   "values": p.initial_field.values.tolist()}
    if p.noise is not None:
        config["noise"] = {"eta": p.noise["eta"].tolist(),
                           "n_paths": p.noise["n_paths"], "seed": p.noise["seed"]}
    return json.dumps(config, indent=1, sort_keys=True)


def _min_eig(A: np.ndarray) -> float:
    return float(np.min(np.linalg.eigvalsh(0.5 * (A + A.T))))


def _asymmetry(A: np.ndarray) -> float:
    return float(np.max(np.abs(A - A.T)))


def validate(p: ProblemSpec) -> ValidationReport:
    """Eigenvalue checks of every required definiteness condition, per node."""
    violations = []
    psd_tol = -1e-10

    def check_psd(name, node, A):
        ev = _min_eig(A)
        if ev < psd_tol:
            violations.append((name, node, ev))

    def check_pd(name, node, A):
        if _asymmetry(A) > 1e-10:
            violations.append((name + "_symmetric", node, -_asymmetry(A)))
        ev = _min_eig(A)
        if ev <= 0.0:
            violations.append((name, node, ev))

    mbars = p.mbar_s_nodes()
    for k in range(p.K + 1):
        check_pd("N_pd", k, p.N.values[k])
        MM = p.M.values[k] + p.Mbar.values[k]
        check_psd("M_plus_Mbar_psd", k, MM)
        check_psd("M_plus_Mbar_plus_MbarS_psd", k, MM + mbars[k])
    check_psd("terminal_psd", p.K, p.terminal_dev_block())
    check_psd("terminal_mean_psd", p.K, p.terminal_mean_block())
    check_pd("J0_pd", 0, p.J0)
    check_psd("Jbar0_psd", 0, p.Jbar0)
    return ValidationReport(ok=not violations, violations=violations)
