"""Shared builders for test problems.

make_problem accepts scalars for any coefficient and broadcasts them to the
right shape (c times the identity for square matrices, c times eye(n, d) for
G, constant vectors for affine terms), so scalar worked cases and full matrix
cases share one construction path.
"""

import numpy as np

from mfckit.ensemble import Ensemble, Field
from mfckit.problem import parse_problem_dict


def _matrix(value, rows, cols):
    if value is None:
        return None
    value = np.asarray(value, dtype=float)
    if value.ndim == 0:
        return (float(value) * np.eye(rows, cols)).tolist()
    return value.tolist()


def _vector(value, size):
    if value is None:
        return None
    value = np.asarray(value, dtype=float)
    if value.ndim == 0:
        return (float(value) * np.ones(size)).tolist()
    return value.tolist()


def problem_config(n=1, d=1, T=1.0, K=100, F=0.0, Fbar=0.0, G=1.0, f=0.0,
                   M=1.0, Mbar=0.0, S=0.0, N=1.0, alpha=0.0, beta=0.0,
                   M_T=0.0, Mbar_T=0.0, S_T=None, alpha_T=0.0,
                   J0=None, Jbar0=None, ensemble=None, initial_field=None,
                   noise=None):
    """Full problem config dict with scalar broadcasting for convenience."""
    config = {
        "dims": {"n": n, "d": d},
        "grid": {"T": T, "K": K},
        "coefficients": {
            "F": _matrix(F, n, n), "Fbar": _matrix(Fbar, n, n),
            "G": _matrix(G, n, d), "f": _vector(f, n),
            "M": _matrix(M, n, n), "Mbar": _matrix(Mbar, n, n),
            "S": _matrix(S, n, n), "N": _matrix(N, d, d),
            "alpha": _vector(alpha, n), "beta": _vector(beta, d),
        },
        "terminal": {
            "M_T": _matrix(M_T, n, n), "Mbar_T": _matrix(Mbar_T, n, n),
            "S_T": _matrix(S_T, n, n), "alpha_T": _vector(alpha_T, n),
        },
    }
    iw = {}
    if J0 is not None:
        iw["J0"] = _matrix(J0, n, n)
    if Jbar0 is not None:
        iw["Jbar0"] = _matrix(Jbar0, n, n)
    if iw:
        config["initial_weights"] = iw
    if ensemble is not None:
        config["ensemble"] = ensemble
    if initial_field is not None:
        config["initial_field"] = initial_field
    if noise is not None:
        config["noise"] = noise
    return config


def make_problem(**kwargs):
    return parse_problem_dict(problem_config(**kwargs))


def two_point_ensemble():
    """The {-1, +1} equal-weight cloud with unit second moment."""
    return Ensemble(np.array([[-1.0], [1.0]]), np.array([0.5, 0.5]))


def random_ensemble(seed, N, n, centered=False):
    gen = np.random.Generator(np.random.Philox(key=[seed, 900]))
    pts = gen.normal(size=(N, n))
    if centered:
        pts -= pts.mean(axis=0)
    w = gen.uniform(0.5, 1.5, size=N)
    w /= w.sum()
    # renormalize exactly so the 1e-12 weight-sum invariant holds
    w[-1] += 1.0 - w.sum()
    return Ensemble(pts, w)


def random_field(seed, ens, dim):
    gen = np.random.Generator(np.random.Philox(key=[seed, 901]))
    return Field(ens, gen.normal(size=(ens.size, dim)))


def random_spd(gen, k, scale=1.0):
    A = gen.normal(size=(k, k))
    return scale * (A @ A.T / k + 0.2 * np.eye(k))


def random_problem(seed, n=2, d=1, K=200, T=1.0, time_varying=False,
                   affine=True, with_S=True):
    """Seeded random problem that always passes validation.

    M and Mbar are built positive semidefinite, which makes both running
    weight blocks PSD for any S. Optional smooth time variation exercises
    the piecewise-linear coefficient path machinery.
    """
    gen = np.random.Generator(np.random.Philox(key=[seed, 902]))
    nodes = np.linspace(0.0, T, K + 1)

    def path(entry, amp_entry=None):
        if not time_varying or amp_entry is None:
            return entry.tolist()
        bump = np.sin(2.0 * np.pi * nodes / T)
        return (entry[None] + bump[:, None, None] * amp_entry[None]).tolist()

    F0 = 0.7 * gen.normal(size=(n, n)) / np.sqrt(n)
    Fb0 = 0.5 * gen.normal(size=(n, n)) / np.sqrt(n)
    G0 = gen.normal(size=(n, d))
    M0 = random_spd(gen, n, 0.8)
    Mb0 = random_spd(gen, n, 0.5)
    S0 = 0.6 * gen.normal(size=(n, n)) / np.sqrt(n) if with_S else np.zeros((n, n))
    N0 = random_spd(gen, d, 1.0)
    kw = dict(
        n=n, d=d, T=T, K=K,
        F=path(F0, 0.3 * gen.normal(size=(n, n)) / np.sqrt(n)),
        Fbar=Fb0.tolist(), G=G0.tolist(),
        M=path(M0), Mbar=Mb0.tolist(), S=S0.tolist(), N=N0.tolist(),
        M_T=random_spd(gen, n, 0.5).tolist(), Mbar_T=random_spd(gen, n, 0.3).tolist(),
    )
    if affine:
        kw.update(
            f=(0.4 * gen.normal(size=n)).tolist(),
            alpha=(0.4 * gen.normal(size=n)).tolist(),
            beta=(0.4 * gen.normal(size=d)).tolist(),
            alpha_T=(0.4 * gen.normal(size=n)).tolist(),
        )
    return make_problem(**kw)
