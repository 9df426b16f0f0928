"""Degenerate-Lagrangian integration and learning for non-canonical Hamiltonian systems.

The package provides:

* analytic reference systems (Lotka-Volterra, massless charged particle,
  tokamak guiding center) with exact derivatives,
* a first-order degenerate variational integrator (DVI) together with
  classical explicit integrators and a high-accuracy adaptive reference
  solver,
* a small reverse-mode automatic-differentiation engine,
* neural parameterizations of the symplectic potential and Hamiltonian,
* the two training strategies (vector-field learning with a gauge-sensitive
  regularizer, and scheme learning on trajectory triples),
* a command-line experiment runner (``degenlag``).

Hot kernels (analytic-model evaluation and time-stepping loops) are served
by a compiled Cython extension when available, with a pure-Python fallback
selected at import time (see :mod:`degenlag._kernels`).
"""

__version__ = "0.1.0"

from .core import (
    DegenerateModel,
    DomainError,
    GaugeFunction,
    ModelEvaluation,
    NonConvergenceError,
    Order,
    PhaseState,
    SingularMatrixError,
    gauge_perturb,
    symplectic_form,
    vector_field,
)

__all__ = [
    "DegenerateModel",
    "DomainError",
    "GaugeFunction",
    "ModelEvaluation",
    "NonConvergenceError",
    "Order",
    "PhaseState",
    "SingularMatrixError",
    "gauge_perturb",
    "symplectic_form",
    "vector_field",
    "__version__",
]
