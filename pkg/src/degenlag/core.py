"""Phase-space types, the degenerate-model interface and the continuous dynamics.

A *properly degenerate* Lagrangian ``L(x, y, x_t, y_t) = theta(x, y) . x_t - H(x, y)``
generates the non-canonical Hamiltonian system ``W(z) zdot = grad H(z)`` with the
symplectic two-form assembled from the Jacobians of the potential ``theta``.
Everything downstream (integrators, losses, neural models) works through the
:class:`DegenerateModel` interface defined here.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

# Beyond this condition number the y-Jacobian of the potential is treated as
# numerically singular (double-precision heuristic).
COND_LIMIT = 1e12

# Mixed-partial symmetry tolerance for second-order evaluations.
SYMMETRY_RTOL = 1e-10


class DegenlagError(Exception):
    """Base class for all library errors."""


class DomainError(DegenlagError):
    """A model was evaluated outside its declared domain."""


class SingularMatrixError(DegenlagError):
    """A required linear system is (numerically) singular."""


class SingularErrorSystem(SingularMatrixError):
    """The saddle system of the local-error estimate is singular."""


class NonConvergenceError(DegenlagError):
    """Newton iterations exhausted without meeting the residual tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ConfigError(DegenlagError):
    """Invalid or inconsistent run configuration."""


class Order(enum.Enum):
    """Derivative order requested from a model evaluation."""

    VALUE = 0
    FIRST = 1
    SECOND = 2


@dataclass(frozen=True)
class PhaseState:
    """A point z = (x, y) in 2d-dimensional phase space."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if x.ndim != 1 or y.ndim != 1 or x.size != y.size or x.size < 1:
            raise ValueError("x and y must be 1-d vectors of equal positive length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("phase-space coordinates must be finite")

    @property
    def d(self) -> int:
        return self.x.size

    @property
    def z(self) -> np.ndarray:
        """Concatenated coordinates (x, y), length 2d."""
        return np.concatenate([self.x, self.y])

    @staticmethod
    def from_z(z: np.ndarray) -> "PhaseState":
        z = np.asarray(z, dtype=float)
        if z.ndim != 1 or z.size % 2 != 0:
            raise ValueError("flat state must have even length")
        d = z.size // 2
        return PhaseState(z[:d], z[d:])


@dataclass(frozen=True)
class SecondOrderBlock:
    """All second derivatives of theta and H at a point.

    ``theta_zz[j, k, kp]`` is the second partial of the j-th potential
    component with respect to the full coordinates z_k and z_kp;
    ``h_zz`` is the Hessian of the Hamiltonian.
    """

    theta_zz: np.ndarray  # (d, 2d, 2d)
    h_zz: np.ndarray  # (2d, 2d)


@dataclass(frozen=True)
class ModelEvaluation:
    """theta, H and their derivatives at one phase-space point."""

    theta: np.ndarray  # (d,)
    hamiltonian: float
    d_x_theta: Optional[np.ndarray] = None  # (d, d)
    d_y_theta: Optional[np.ndarray] = None  # (d, d)
    grad_x_h: Optional[np.ndarray] = None  # (d,)
    grad_y_h: Optional[np.ndarray] = None  # (d,)
    second_order: Optional[SecondOrderBlock] = None

    def __post_init__(self):
        d = np.asarray(self.theta).size
        for mat in (self.d_x_theta, self.d_y_theta):
            if mat is not None and np.shape(mat) != (d, d):
                raise ValueError("potential Jacobian blocks must be d x d")
        for vec in (self.grad_x_h, self.grad_y_h):
            if vec is not None and np.shape(vec) != (d,):
                raise ValueError("Hamiltonian gradient blocks must have length d")
        if self.second_order is not None:
            so = self.second_order
            if so.theta_zz.shape != (d, 2 * d, 2 * d) or so.h_zz.shape != (2 * d, 2 * d):
                raise ValueError("second-order blocks have inconsistent shapes")
            scale = max(np.max(np.abs(so.theta_zz)), np.max(np.abs(so.h_zz)), 1.0)
            tol = SYMMETRY_RTOL * scale
            for j in range(d):
                if np.max(np.abs(so.theta_zz[j] - so.theta_zz[j].T)) > tol:
                    raise ValueError("mixed partials of theta are not symmetric")
            if np.max(np.abs(so.h_zz - so.h_zz.T)) > tol:
                raise ValueError("Hamiltonian Hessian is not symmetric")

    @property
    def d(self) -> int:
        return np.asarray(self.theta).size


class DegenerateModel:
    """Interface every system (analytic or neural) implements.

    Subclasses provide :meth:`evaluate`; ``evaluate(z, Order.SECOND)`` must
    also fill all first-order fields.
    """

    dimension: int
    name: str = "degenerate-model"

    def evaluate(self, z: PhaseState, order: Order = Order.FIRST) -> ModelEvaluation:
        raise NotImplementedError

    def evaluate_z(self, z_flat: np.ndarray, order: Order = Order.FIRST) -> ModelEvaluation:
        """Evaluate at a flat (2d,) coordinate vector."""
        return self.evaluate(PhaseState.from_z(z_flat), order)


def check_invertible(d_y_theta: np.ndarray) -> None:
    """Raise if the y-Jacobian of the potential is numerically singular."""
    if not np.all(np.isfinite(d_y_theta)):
        raise SingularMatrixError("y-Jacobian of the potential is not finite")
    if d_y_theta.shape == (1, 1):
        if d_y_theta[0, 0] == 0.0:
            raise SingularMatrixError("y-Jacobian of the potential vanishes")
        return
    cond = np.linalg.cond(d_y_theta)
    if not np.isfinite(cond) or cond >= COND_LIMIT:
        raise SingularMatrixError(
            f"y-Jacobian of the potential is ill-conditioned (cond={cond:.3e})"
        )


def symplectic_form(model: DegenerateModel, z: PhaseState) -> np.ndarray:
    """Assemble the 2d x 2d symplectic two-form at ``z``.

    Block layout: ``[[Dx theta^T - Dx theta, -Dy theta], [Dy theta^T, 0]]``;
    skew-symmetry holds exactly by construction.
    """
    ev = model.evaluate(z, Order.FIRST)
    d = ev.d
    w = np.zeros((2 * d, 2 * d))
    w[:d, :d] = ev.d_x_theta.T - ev.d_x_theta
    w[:d, d:] = -ev.d_y_theta
    w[d:, :d] = ev.d_y_theta.T
    return w


def vector_field_from_eval(ev: ModelEvaluation) -> np.ndarray:
    """Invert ``W zdot = grad H`` given a first-order evaluation.

    Uses the block solve
    ``xdot = Dy theta^-T grad_y H`` and
    ``ydot = Dy theta^-1 ((Dx theta^T - Dx theta) xdot - grad_x H)``.
    """
    check_invertible(ev.d_y_theta)
    try:
        xdot = np.linalg.solve(ev.d_y_theta.T, ev.grad_y_h)
        skew = ev.d_x_theta.T - ev.d_x_theta
        ydot = np.linalg.solve(ev.d_y_theta, skew @ xdot - ev.grad_x_h)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(str(exc)) from exc
    return np.concatenate([xdot, ydot])


def vector_field(model: DegenerateModel, z: PhaseState) -> np.ndarray:
    """Continuous dynamics zdot = W(z)^-1 grad H(z) as a flat (2d,) vector."""
    return vector_field_from_eval(model.evaluate(z, Order.FIRST))


def gradient(model: DegenerateModel, z: PhaseState) -> np.ndarray:
    """Full gradient of H at z, stacked as (grad_x H, grad_y H)."""
    ev = model.evaluate(z, Order.FIRST)
    return np.concatenate([ev.grad_x_h, ev.grad_y_h])


@dataclass(frozen=True)
class GaugeFunction:
    """A map g(x) with symmetric Jacobian used to shift the potential.

    ``jacobian`` and ``hessian`` may be omitted, in which case central
    finite differences (step 1e-6) are substituted; analytic derivatives
    are recommended whenever the perturbed model feeds the local-error
    estimator.
    """

    value: Callable[[np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def val(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.value(x), dtype=float))

    def jac(self, x: np.ndarray) -> np.ndarray:
        if self.jacobian is not None:
            return np.atleast_2d(np.asarray(self.jacobian(x), dtype=float))
        return _fd_jacobian(self.val, x)

    def hess(self, x: np.ndarray) -> np.ndarray:
        if self.hessian is not None:
            h = np.asarray(self.hessian(x), dtype=float)
            d = x.size
            return h.reshape(d, d, d)
        return _fd_jacobian_of(self.jac, x)


def _fd_jacobian(f, x, step=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        cols.append((f(x + e) - f(x - e)) / (2 * step))
    return np.stack(cols, axis=-1)


def _fd_jacobian_of(jac_fn, x, step=1e-6):
    x = np.asarray(x, dtype=float)
    slabs = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        slabs.append((jac_fn(x + e) - jac_fn(x - e)) / (2 * step))
    return np.stack(slabs, axis=-1)


class GaugePerturbedModel(DegenerateModel):
    """Model with potential shifted by an x-only gauge term, H unchanged."""

    def __init__(self, base: DegenerateModel, gauge: GaugeFunction):
        self.base = base
        self.gauge = gauge
        self.dimension = base.dimension
        self.name = f"{base.name}+gauge"

    def evaluate(self, z: PhaseState, order: Order = Order.FIRST) -> ModelEvaluation:
        ev = self.base.evaluate(z, order)
        d = self.dimension
        theta = ev.theta + self.gauge.val(z.x)
        d_x_theta = ev.d_x_theta
        second = ev.second_order
        if order in (Order.FIRST, Order.SECOND):
            d_x_theta = ev.d_x_theta + self.gauge.jac(z.x)
        if order is Order.SECOND:
            theta_zz = ev.second_order.theta_zz.copy()
            theta_zz[:, :d, :d] += self.gauge.hess(z.x)
            second = SecondOrderBlock(theta_zz=theta_zz, h_zz=ev.second_order.h_zz)
        return ModelEvaluation(
            theta=theta,
            hamiltonian=ev.hamiltonian,
            d_x_theta=d_x_theta,
            d_y_theta=ev.d_y_theta,
            grad_x_h=ev.grad_x_h,
            grad_y_h=ev.grad_y_h,
            second_order=second,
        )


def gauge_perturb(model: DegenerateModel, g: GaugeFunction) -> DegenerateModel:
    """Shift the potential, theta <- theta + g(x), leaving H untouched.

    The continuous dynamics are invariant (the caller asserts D_x g is
    symmetric); the discrete variational integrator is not.
    """
    return GaugePerturbedModel(model, g)
