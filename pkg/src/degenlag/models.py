"""Analytic reference models with exact derivatives to second order.

All derivatives are hand-derived and hard-coded (not finite-differenced):
the local-error regularizer divides by step-free quantities and needs full
precision. Finite differences are used only as test oracles.
"""

from __future__ import annotations

import enum
from typing import Callable, Optional, Tuple

import numpy as np

from .core import (
    DegenerateModel,
    DomainError,
    ModelEvaluation,
    Order,
    PhaseState,
    SecondOrderBlock,
)

# |cos(theta)| below which the closed formulas for the poloidal potential
# are replaced by the Gauss-Legendre integral form (both branches stay far
# from their respective failure zones).
GC_BRANCH_SWITCH = 0.2


class LotkaVolterraModel(DegenerateModel):
    """Lotka-Volterra dynamics xdot = x(1 - y), ydot = y(x - 2).

    Potential theta(x, y) = -ln(y)/x and Hamiltonian
    H(x, y) = x + y - 2 ln(x) - ln(y), on the quadrant x, y > 0.
    """

    dimension = 1
    name = "lotka-volterra"

    def evaluate(self, z: PhaseState, order: Order = Order.FIRST) -> ModelEvaluation:
        x, y = z.x[0], z.y[0]
        if x <= 0.0 or y <= 0.0:
            raise DomainError(f"Lotka-Volterra requires x, y > 0, got ({x}, {y})")
        ln_x, ln_y = np.log(x), np.log(y)
        theta = np.array([-ln_y / x])
        ham = x + y - 2.0 * ln_x - ln_y
        if order is Order.VALUE:
            return ModelEvaluation(theta=theta, hamiltonian=ham)
        d_x_theta = np.array([[ln_y / x**2]])
        d_y_theta = np.array([[-1.0 / (x * y)]])
        grad_x_h = np.array([1.0 - 2.0 / x])
        grad_y_h = np.array([1.0 - 1.0 / y])
        second = None
        if order is Order.SECOND:
            theta_zz = np.array(
                [
                    [
                        [-2.0 * ln_y / x**3, 1.0 / (x**2 * y)],
                        [1.0 / (x**2 * y), 1.0 / (x * y**2)],
                    ]
                ]
            )
            h_zz = np.array([[2.0 / x**2, 0.0], [0.0, 1.0 / y**2]])
            second = SecondOrderBlock(theta_zz=theta_zz, h_zz=h_zz)
        return ModelEvaluation(
            theta=theta,
            hamiltonian=ham,
            d_x_theta=d_x_theta,
            d_y_theta=d_y_theta,
            grad_x_h=grad_x_h,
            grad_y_h=grad_y_h,
            second_order=second,
        )


class MasslessParticleModel(DegenerateModel):
    """Massless charged particle in a quadratically growing magnetic field.

    theta(x, y) = -A0 y (1 + 2 x^2 + (2/3) y^2) so that the field strength is
    B(x, y) = -d theta/dy = A0 (1 + 2 x^2 + 2 y^2); the Hamiltonian is the
    electrostatic energy H(x, y) = E0 (2 - cos x - sin y).
    """

    name = "massless-particle"
    dimension = 1

    def __init__(self, a0: float = 1.0, e0: float = 1.0):
        if a0 == 0.0:
            raise ValueError("magnetic amplitude a0 must be nonzero")
        self.a0 = float(a0)
        self.e0 = float(e0)

    def evaluate(self, z: PhaseState, order: Order = Order.FIRST) -> ModelEvaluation:
        x, y = z.x[0], z.y[0]
        a0, e0 = self.a0, self.e0
        theta = np.array([-a0 * y * (1.0 + 2.0 * x**2 + (2.0 / 3.0) * y**2)])
        ham = e0 * (2.0 - np.cos(x) - np.sin(y))
        if order is Order.VALUE:
            return ModelEvaluation(theta=theta, hamiltonian=ham)
        d_x_theta = np.array([[-4.0 * a0 * x * y]])
        d_y_theta = np.array([[-a0 * (1.0 + 2.0 * x**2 + 2.0 * y**2)]])
        grad_x_h = np.array([e0 * np.sin(x)])
        grad_y_h = np.array([-e0 * np.cos(y)])
        second = None
        if order is Order.SECOND:
            theta_zz = np.array(
                [
                    [
                        [-4.0 * a0 * y, -4.0 * a0 * x],
                        [-4.0 * a0 * x, -4.0 * a0 * y],
                    ]
                ]
            )
            h_zz = np.array([[e0 * np.cos(x), 0.0], [0.0, e0 * np.sin(y)]])
            second = SecondOrderBlock(theta_zz=theta_zz, h_zz=h_zz)
        return ModelEvaluation(
            theta=theta,
            hamiltonian=ham,
            d_x_theta=d_x_theta,
            d_y_theta=d_y_theta,
            grad_x_h=grad_x_h,
            grad_y_h=grad_y_h,
            second_order=second,
        )


def gauss_legendre_01(n_points: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped to the unit interval."""
    nodes, weights = np.polynomial.legendre.leggauss(n_points)
    return 0.5 * (nodes + 1.0), 0.5 * weights


def gc_a_theta_integral(
    r: float,
    theta: float,
    n_points: int = 20,
    b0: float = 1.0,
    r0: float = 1.0,
) -> Tuple[float, float]:
    """Poloidal potential and its theta-derivative via the integral form.

    A_theta = B0 r^2 int_0^1 t/(1 + rho t) dt and
    dA_theta/dtheta = B0 r^2 Z int_0^1 t^2/(1 + rho t)^2 dt with
    rho = r cos(theta)/R0 and Z = r sin(theta)/R0. Uniformly stable in
    theta, unlike the closed formulas.
    """
    if n_points < 10:
        raise ValueError("quadrature order must be at least 10")
    rho = r * np.cos(theta) / r0
    big_z = r * np.sin(theta) / r0
    if 1.0 + min(rho, 0.0) <= 0.0:
        raise DomainError(f"integrand denominator non-positive (rho={rho})")
    t, w = gauss_legendre_01(n_points)
    den = 1.0 + rho * t
    i1 = float(np.sum(w * t / den))
    i2 = float(np.sum(w * t**2 / den**2))
    return b0 * r**2 * i1, b0 * r**2 * big_z * i2


def _a_theta_integrals_closed(rho: float) -> Tuple[float, float, float]:
    """Closed forms of int t^k/(1+rho t)^k dt for k = 1, 2, 3 on [0, 1].

    Accurate away from rho ~ 0 thanks to log1p; the quadrature branch covers
    the cancellation-prone region.
    """
    lp = np.log1p(rho)
    s = 1.0 + rho
    i1 = (rho - lp) / rho**2
    i2 = (s - 1.0 / s - 2.0 * lp) / rho**3
    i3 = (s - 3.0 * lp - 3.0 / s + 0.5 / s**2 + 1.5) / rho**4
    return i1, i2, i3


def _a_theta_integrals_quad(rho: float, t: np.ndarray, w: np.ndarray):
    den = 1.0 + rho * t
    i1 = float(np.sum(w * t / den))
    i2 = float(np.sum(w * t**2 / den**2))
    i3 = float(np.sum(w * t**3 / den**3))
    return i1, i2, i3


class GuidingCenterModel(DegenerateModel):
    """Guiding-center motion in a tokamak field, coordinates z = (theta, phi, r, u).

    With x = (theta, phi) and y = (r, u), the potential components are the
    poloidal magnetic potential A_theta(r, theta) and the effective toroidal
    potential A_phi(r) + u (R0 + r cos(theta)); the Hamiltonian combines the
    parallel kinetic energy and the magnetic energy,
    H = u^2/2 + mu B(r, theta).
    """

    name = "guiding-center"
    dimension = 2

    def __init__(
        self,
        b0: float = 1.0,
        r0: float = 1.0,
        q0: float = 2.0,
        mu: float = 2.25e-6,
        quadrature_points: int = 20,
    ):
        if quadrature_points < 10:
            raise ValueError("quadrature order must be at least 10")
        self.b0 = float(b0)
        self.r0 = float(r0)
        self.q0 = float(q0)
        self.mu = float(mu)
        self.quadrature_points = int(quadrature_points)
        self._nodes, self._weights = gauss_legendre_01(self.quadrature_points)

    # -- field helpers -------------------------------------------------

    def _a_theta_all(self, r: float, theta: float):
        """A_theta and its derivatives up to second order in (theta, r)."""
        b0, r0 = self.b0, self.r0
        c, s = np.cos(theta), np.sin(theta)
        rho = r * c / r0
        big_z = r * s / r0
        if 1.0 + rho <= 0.0:
            raise DomainError(f"guiding center outside domain: 1 + rho = {1.0 + rho}")
        if abs(c) < GC_BRANCH_SWITCH or rho == 0.0:
            i1, i2, i3 = _a_theta_integrals_quad(rho, self._nodes, self._weights)
        else:
            i1, i2, i3 = _a_theta_integrals_closed(rho)
        a = b0 * r**2 * i1
        a_t = b0 * r**2 * big_z * i2
        a_tt = b0 * r**2 * (rho * i2 + 2.0 * big_z**2 * i3)
        one = 1.0 + rho
        a_r = b0 * r / one
        a_rr = b0 / one**2
        a_rt = b0 * r * big_z / one**2
        return a, a_t, a_r, a_tt, a_rt, a_rr

    def _b_field(self, r: float, theta: float):
        """Field magnitude B(r, theta) and derivatives up to second order."""
        b0, r0, q0 = self.b0, self.r0, self.q0
        c, s = np.cos(theta), np.sin(theta)
        rho = r * c / r0
        big_z = r * s / r0
        one = 1.0 + rho
        if one <= 0.0:
            raise DomainError(f"guiding center outside domain: 1 + rho = {one}")
        rt = r / (q0 * r0)
        a = 1.0 / (q0 * r0)
        g = np.sqrt(1.0 + rt**2)
        g_r = rt * a / g
        g_rr = a**2 / g**3
        b = b0 * g / one
        b_r = b0 * (g_r / one - g * (c / r0) / one**2)
        b_t = b0 * g * big_z / one**2
        b_rr = b0 * (g_rr / one - 2.0 * g_r * (c / r0) / one**2 + 2.0 * g * (c / r0) ** 2 / one**3)
        b_rt = b0 * (
            g_r * big_z / one**2 + g * (s / r0) / one**2 - 2.0 * g * big_z * (c / r0) / one**3
        )
        b_tt = b0 * g * (rho / one**2 + 2.0 * big_z**2 / one**3)
        return b, b_t, b_r, b_tt, b_rt, b_rr

    # -- model interface -----------------------------------------------

    def evaluate(self, z: PhaseState, order: Order = Order.FIRST) -> ModelEvaluation:
        theta_c, _phi = z.x
        r, u = z.y
        b0, r0, q0, mu = self.b0, self.r0, self.q0, self.mu
        c, s = np.cos(theta_c), np.sin(theta_c)

        a, a_t, a_r, a_tt, a_rt, a_rr = self._a_theta_all(r, theta_c)
        b, b_t, b_r, b_tt, b_rt, b_rr = self._b_field(r, theta_c)

        big_r = r0 + r * c
        theta_vec = np.array([a, -b0 * r**2 / (2.0 * q0) + u * big_r])
        ham = 0.5 * u**2 + mu * b
        if order is Order.VALUE:
            return ModelEvaluation(theta=theta_vec, hamiltonian=ham)

        d_x_theta = np.array([[a_t, 0.0], [-u * r * s, 0.0]])
        d_y_theta = np.array([[a_r, 0.0], [-b0 * r / q0 + u * c, big_r]])
        grad_x_h = np.array([mu * b_t, 0.0])
        grad_y_h = np.array([mu * b_r, u])
        second = None
        if order is Order.SECOND:
            # z-order (theta, phi, r, u); only (theta, r, u) couplings survive.
            th1 = np.zeros((4, 4))
            th1[0, 0] = a_tt
            th1[0, 2] = th1[2, 0] = a_rt
            th1[2, 2] = a_rr
            th2 = np.zeros((4, 4))
            th2[0, 0] = -u * r * c
            th2[0, 2] = th2[2, 0] = -u * s
            th2[0, 3] = th2[3, 0] = -r * s
            th2[2, 2] = -b0 / q0
            th2[2, 3] = th2[3, 2] = c
            h_zz = np.zeros((4, 4))
            h_zz[0, 0] = mu * b_tt
            h_zz[0, 2] = h_zz[2, 0] = mu * b_rt
            h_zz[2, 2] = mu * b_rr
            h_zz[3, 3] = 1.0
            second = SecondOrderBlock(theta_zz=np.stack([th1, th2]), h_zz=h_zz)
        return ModelEvaluation(
            theta=theta_vec,
            hamiltonian=ham,
            d_x_theta=d_x_theta,
            d_y_theta=d_y_theta,
            grad_x_h=grad_x_h,
            grad_y_h=grad_y_h,
            second_order=second,
        )


class OrbitClass(enum.Enum):
    PASSING = "passing"
    TRAPPED = "trapped"


def gc_classify_trajectory(trajectory) -> OrbitClass:
    """Trapped iff the parallel velocity u changes sign along the trajectory.

    Accepts a :class:`degenlag.integrate.Trajectory` or a (n, 4) state array
    in (theta, phi, r, u) order.
    """
    states = getattr(trajectory, "states", trajectory)
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[0] < 2:
        raise ValueError("classification needs at least two states")
    u = states[:, 3]
    if np.min(u) < 0.0 < np.max(u):
        return OrbitClass.TRAPPED
    return OrbitClass.PASSING


class HamiltonianFunction:
    """Scalar Hamiltonian with derivatives, pluggable into the canonical wrapper."""

    def __init__(
        self,
        value: Callable[[np.ndarray], float],
        grad: Callable[[np.ndarray], np.ndarray],
        hess: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        name: str = "hamiltonian",
    ):
        self.value = value
        self.grad = grad
        self.hess = hess
        self.name = name

    def h_eval(self, z_flat: np.ndarray, order: Order):
        v = float(self.value(z_flat))
        if order is Order.VALUE:
            return v, None, None
        g = np.asarray(self.grad(z_flat), dtype=float)
        if order is Order.FIRST:
            return v, g, None
        if self.hess is None:
            raise ValueError(f"{self.name} provides no Hessian")
        return v, g, np.asarray(self.hess(z_flat), dtype=float)


class CanonicalModel(DegenerateModel):
    """Canonical system as a degenerate model: theta(x, y) = y."""

    def __init__(self, h_model, dimension: int, name: str = "canonical"):
        self.h_model = h_model
        self.dimension = dimension
        self.name = name

    def evaluate(self, z: PhaseState, order: Order = Order.FIRST) -> ModelEvaluation:
        d = self.dimension
        value, grad, hess = self.h_model.h_eval(z.z, order)
        theta = z.y.copy()
        if order is Order.VALUE:
            return ModelEvaluation(theta=theta, hamiltonian=value)
        second = None
        if order is Order.SECOND:
            second = SecondOrderBlock(
                theta_zz=np.zeros((d, 2 * d, 2 * d)), h_zz=hess
            )
        return ModelEvaluation(
            theta=theta,
            hamiltonian=value,
            d_x_theta=np.zeros((d, d)),
            d_y_theta=np.eye(d),
            grad_x_h=grad[:d],
            grad_y_h=grad[d:],
            second_order=second,
        )


def canonical_wrapper(h_model, dimension: Optional[int] = None) -> CanonicalModel:
    """Wrap a Hamiltonian into the degenerate interface with theta(x, y) = y.

    The resulting vector field equals the canonical J^-1 grad H.
    """
    dim = dimension if dimension is not None else getattr(h_model, "dimension", None)
    if dim is None:
        raise ValueError("dimension must be provided for the canonical wrapper")
    return CanonicalModel(h_model, int(dim), name=f"canonical[{getattr(h_model, 'name', 'H')}]")


def harmonic_oscillator(dimension: int = 1) -> CanonicalModel:
    """Canonical H = (|x|^2 + |y|^2)/2; handy reference with known period 2 pi."""

    h = HamiltonianFunction(
        value=lambda z: 0.5 * float(z @ z),
        grad=lambda z: z.copy(),
        hess=lambda z: np.eye(z.size),
        name="harmonic",
    )
    return canonical_wrapper(h, dimension)
