"""Artifact writers: canonical JSON summaries and fixed-precision CSV.

Every JSON artifact embeds the run manifest and is rendered with sorted
keys, so identical inputs produce byte-identical files; the manifest
timestamp honors MFCKIT_TIMESTAMP and SOURCE_DATE_EPOCH for that purpose.
CSV values are written with 17 significant digits so doubles round-trip
exactly.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import numpy as np

FLOAT_FMT = "%.17g"


def _fmt(x) -> str:
    return FLOAT_FMT % float(x)


def run_timestamp() -> str:
    """UTC timestamp, overridable for reproducible artifacts."""
    explicit = os.environ.get("MFCKIT_TIMESTAMP")
    if explicit:
        return explicit
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        moment = datetime.fromtimestamp(int(epoch), tz=timezone.utc)
    else:
        moment = datetime.now(tz=timezone.utc)
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class RunManifest:
    """What produced an artifact: command, inputs, seed, overrides, time."""

    command: str
    input: str
    out_dir: str
    seed: int | None = None
    grid_overrides: dict = field(default_factory=dict)
    tol_overrides: dict = field(default_factory=dict)
    timestamp: str = field(default_factory=run_timestamp)

    def as_dict(self) -> dict:
        return asdict(self)


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (np.floating, float)):
        return float(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    return value


def canonical_json(payload: dict) -> str:
    return json.dumps(_plain(payload), sort_keys=True, indent=2) + "\n"


def write_json(path: str, payload: dict, manifest: RunManifest) -> None:
    body = dict(payload)
    body["manifest"] = manifest.as_dict()
    with open(path, "w", newline="") as fh:
        fh.write(canonical_json(body))


def solution_summary(sol) -> dict:
    out = {
        "method": sol.method,
        "cost": float(sol.cost),
        "value_closed_form": None if sol.value_closed_form is None
        else float(sol.value_closed_form),
        "residuals": _plain(sol.residuals),
        "iterations": sol.iterations,
    }
    return out


def mc_report(mean: float, stderr: float, n_paths: int, seed: int,
              closed_form: float) -> dict:
    z = 0.0 if stderr == 0.0 else (mean - closed_form) / stderr
    return {"mean": float(mean), "stderr": float(stderr),
            "n_paths": int(n_paths), "seed": int(seed),
            "closed_form": float(closed_form), "z_score": float(z)}


def write_trajectories_csv(stream, grid, state_values: np.ndarray,
                           control_values: np.ndarray) -> None:
    """Node-sampled optimal trajectory, one row per (node, particle)."""
    Kp1, N, n = state_values.shape
    d = control_values.shape[2]
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["node_time", "particle_id"]
                    + [f"state_{i}" for i in range(n)]
                    + [f"control_{i}" for i in range(d)])
    for k in range(Kp1):
        t = _fmt(grid.nodes[k])
        for a in range(N):
            writer.writerow([t, str(a)]
                            + [_fmt(x) for x in state_values[k, a]]
                            + [_fmt(x) for x in control_values[k, a]])


def write_paths_csv(stream, paths) -> None:
    """Noisy scenario states, one row per (path, node, particle)."""
    n_paths, Kp1, N, n = paths.values.shape
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["path_id", "node_time", "particle_id"]
                    + [f"state_{i}" for i in range(n)])
    for idx in range(n_paths):
        for k in range(Kp1):
            t = _fmt(paths.grid.nodes[k])
            for a in range(N):
                writer.writerow([str(idx), t, str(a)]
                                + [_fmt(x) for x in paths.values[idx, k, a]])


def write_kernel_grid_csv(stream, handle, stride: int) -> None:
    """Both kernel block families over the strided node lattice.

    Long form: one row per lattice pair (j, k), with the deviation and
    mean blocks flattened row-major.
    """
    from .kernel import kernel_block_grid

    p = handle.bundle.p
    idx = np.arange(0, p.K + 1, stride)
    if idx[-1] != p.K:
        idx = np.append(idx, p.K)
    KP = kernel_block_grid(handle, "P", idx)
    KS = kernel_block_grid(handle, "Sigma", idx)
    n = p.n
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["s_node", "t_node", "s", "t"]
                    + [f"KP_{i}_{j}" for i in range(n) for j in range(n)]
                    + [f"KS_{i}_{j}" for i in range(n) for j in range(n)])
    for a, j in enumerate(idx):
        for b, k in enumerate(idx):
            writer.writerow(
                [str(int(j)), str(int(k)), _fmt(p.grid.nodes[j]),
                 _fmt(p.grid.nodes[k])]
                + [_fmt(x) for x in KP[a, b].ravel()]
                + [_fmt(x) for x in KS[a, b].ravel()])
