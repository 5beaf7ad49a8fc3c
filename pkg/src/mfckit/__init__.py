"""Linear-quadratic mean-field control over particle ensembles.

Two solution routes for the same problem: a completion-of-square closed form
built on matrix Riccati equations, and a variational method in a reproducing
kernel Hilbert space of controlled trajectories. The package cross-verifies
the two, handles nonlinear terminal costs by a fixed point in the kernel
space, and extends both routes to dynamics driven by a common Brownian noise.
"""

__version__ = "0.1.0"

from .ensemble import (Ensemble, Field, FieldPath, apply_mf_operator,
                       deviation, inner_H, mean, push_forward_stats)
from .grids import TimeGrid
from .problem import (ProblemSpec, ValidationReport, emit_problem, mbar_s,
                      parse_problem, validate)

__all__ = [
    "Ensemble", "Field", "FieldPath", "ProblemSpec", "TimeGrid",
    "ValidationReport", "apply_mf_operator", "deviation", "emit_problem",
    "inner_H", "mbar_s", "mean", "parse_problem", "push_forward_stats",
    "validate",
]
