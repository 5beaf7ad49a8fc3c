"""Figure rendering to files, for the command-line report path.

Uses the non-interactive backend unconditionally: figures are artifacts
next to the CSV output, never windows. Each function writes one PNG and
returns its path.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _finish(fig, out_dir: str, name: str) -> str:
    path = os.path.join(out_dir, name)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def save_trajectory_figure(grid, state_values: np.ndarray,
                           control_values: np.ndarray, out_dir: str,
                           name: str = "trajectories.png") -> str:
    """Per-particle state and control traces over time, one panel each."""
    t = grid.nodes
    n = state_values.shape[2]
    d = control_values.shape[2]
    fig, (ax_x, ax_v) = plt.subplots(1, 2, figsize=(10.0, 4.0))
    for a in range(state_values.shape[1]):
        for i in range(n):
            label = f"particle {a}" if i == 0 and a < 8 else None
            ax_x.plot(t, state_values[:, a, i], lw=1.0, label=label)
        for i in range(d):
            ax_v.plot(t, control_values[:, a, i], lw=1.0)
    ax_x.set_xlabel("time")
    ax_x.set_ylabel("state")
    ax_x.set_title("optimal state")
    if state_values.shape[1] <= 8:
        ax_x.legend(fontsize=8)
    ax_v.set_xlabel("time")
    ax_v.set_ylabel("control")
    ax_v.set_title("optimal control")
    return _finish(fig, out_dir, name)


def save_riccati_figure(bundle, out_dir: str,
                        name: str = "riccati.png") -> str:
    """Entrywise Riccati block paths and the affine offset."""
    p = bundle.p
    t = p.grid.nodes
    fig, axes = plt.subplots(1, 3, figsize=(12.0, 3.6))
    for ax, path, title in zip(
            axes, (bundle.P, bundle.Sigma, bundle.Gamma),
            ("deviation block P", "mean block Sigma", "difference Gamma")):
        flat = path.values.reshape(p.K + 1, -1)
        for j in range(flat.shape[1]):
            ax.plot(t, flat[:, j], lw=1.0)
        ax.set_xlabel("time")
        ax.set_title(title)
    return _finish(fig, out_dir, name)


def save_paths_figure(paths, out_dir: str, name: str = "paths.png",
                      max_paths: int = 40) -> str:
    """Scenario fan of the first state component with the mean overlaid."""
    t = paths.grid.nodes
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    shown = min(paths.n_paths, max_paths)
    w = paths.ensemble.weights
    for idx in range(shown):
        field_mean = w @ paths.values[idx]
        ax.plot(t, field_mean[:, 0], lw=0.7, alpha=0.5, color="tab:blue")
    ax.plot(t, paths.mean_path[:, 0], lw=2.0, color="tab:red",
            label="expectation mean")
    ax.set_xlabel("time")
    ax.set_ylabel("ensemble mean, first component")
    ax.set_title(f"{shown} of {paths.n_paths} scenarios")
    ax.legend(fontsize=8)
    return _finish(fig, out_dir, name)
