"""Time integrators: RK4, adaptive Dormand-Prince reference, and the DVI.

The degenerate variational integrator advances (x_n, y_n) by solving the
coupled update

    theta(z_{n+1}) = theta(z_n) + Dx theta(z_n)^T (x_n - x_{n-1}) - h grad_x H(z_n)
    Dy theta(z_{n+1})^T x_{n+1} = Dy theta(z_{n+1})^T x_n + h grad_y H(z_{n+1})

with a damped Newton method; the residual of this system doubles as the
one-step error used by scheme learning, and its Jacobian with respect to
z_{n+1} is both the Newton matrix and the conditioning target of the
scheme-learning regularizer.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .core import (
    DegenerateModel,
    DegenlagError,
    DomainError,
    NonConvergenceError,
    Order,
    PhaseState,
    SingularErrorSystem,
    SingularMatrixError,
    check_invertible,
    vector_field,
    vector_field_from_eval,
)

VectorField = Callable[[np.ndarray], np.ndarray]


class StepUnderflowError(DegenlagError):
    """Adaptive step size shrank below the resolvable limit."""


@dataclass(frozen=True)
class NewtonConfig:
    """Damped-Newton controls for the implicit DVI update."""

    abs_tol: float = 1e-11
    max_iter: int = 50
    damping: float = 1.0

    def __post_init__(self):
        if self.abs_tol <= 0.0:
            raise ValueError("abs_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")


@dataclass(frozen=True)
class DviStepWorkspace:
    """Carries x_{n-1} along a DVI trajectory; the scheme is one-step otherwise."""

    previous_x: np.ndarray
    current: PhaseState
    step: float

    def __post_init__(self):
        if self.step <= 0.0:
            raise ValueError("step must be positive")


@dataclass
class Trajectory:
    """Time grid, states, and per-step diagnostics of one simulation."""

    times: np.ndarray  # (n,)
    states: np.ndarray  # (n, 2d)
    energies: np.ndarray  # (n,)
    newton_iterations: np.ndarray  # (n,) int
    residuals: np.ndarray  # (n,)
    diverged: bool = False
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.times.ndim != 1 or self.states.shape[0] != self.times.size:
            raise ValueError("states and times must have matching lengths")
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")

    def __len__(self) -> int:
        return self.times.size

    @property
    def d(self) -> int:
        return self.states.shape[1] // 2

    def state(self, i: int) -> PhaseState:
        return PhaseState.from_z(self.states[i])


def hamiltonian_series(model: DegenerateModel, states: np.ndarray) -> np.ndarray:
    """H evaluated along a state array; NaN where evaluation fails."""
    out = np.full(len(states), np.nan)
    for i, row in enumerate(np.asarray(states, dtype=float)):
        try:
            out[i] = model.evaluate(PhaseState.from_z(row), Order.VALUE).hamiltonian
        except DegenlagError:
            pass
    return out


def _as_vf(model_or_vf: Union[DegenerateModel, VectorField]) -> VectorField:
    if isinstance(model_or_vf, DegenerateModel):
        return lambda z: vector_field_from_eval(model_or_vf.evaluate_z(z, Order.FIRST))
    return model_or_vf


# ---------------------------------------------------------------------------
# Explicit integrators
# ---------------------------------------------------------------------------


def rk4_step(model_or_vf: Union[DegenerateModel, VectorField], z: PhaseState, h: float) -> PhaseState:
    """One classical fourth-order Runge-Kutta update."""
    f = _as_vf(model_or_vf)
    z0 = z.z
    k1 = f(z0)
    k2 = f(z0 + 0.5 * h * k1)
    k3 = f(z0 + 0.5 * h * k2)
    k4 = f(z0 + h * k3)
    return PhaseState.from_z(z0 + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))


# Dormand-Prince 5(4) tableau (FSAL).
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# b - b_hat: coefficients of the embedded error estimate.
_DP_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


def _initial_step(f, t0, z0, direction, rtol, atol):
    """Hairer-style starting step from scaled derivative magnitudes."""
    sc = atol + rtol * np.abs(z0)
    f0 = f(z0)
    d0 = np.sqrt(np.mean((z0 / sc) ** 2))
    d1 = np.sqrt(np.mean((f0 / sc) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    z1 = z0 + direction * h0 * f0
    f1 = f(z1)
    d2 = np.sqrt(np.mean(((f1 - f0) / sc) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100.0 * h0, h1)


def reference_solve(
    model_or_vf: Union[DegenerateModel, VectorField],
    z0: PhaseState,
    t_span: Sequence[float],
    rtol: float = 1e-10,
    atol: float = 1e-12,
    t_eval: Optional[Sequence[float]] = None,
    max_steps: int = 50_000_000,
    backend: str = "auto",
) -> Trajectory:
    """High-accuracy adaptive solution, the stand-in for the exact flow.

    Embedded Dormand-Prince 5(4) pair with PI step control; requested output
    times are hit exactly by clamping the step, so interpolation error never
    enters oracle comparisons.
    """
    from . import _kernels

    t0, t1 = float(t_span[0]), float(t_span[1])
    if t_eval is not None:
        t_eval = np.asarray(t_eval, dtype=float)
        if t_eval.size and (t_eval[0] < min(t0, t1) - 1e-12 or t_eval[-1] > max(t0, t1) + 1e-12):
            raise ValueError("t_eval must lie within t_span")

    if backend != "python" and isinstance(model_or_vf, DegenerateModel):
        spec = _kernels.spec_for(model_or_vf)
        if spec is not None and _kernels.compiled_available():
            times, states, energies = _kernels.dopri(
                spec, z0.z, t0, t1, t_eval, rtol, atol, max_steps
            )
            return Trajectory(
                times=times,
                states=states,
                energies=energies,
                newton_iterations=np.zeros(len(times), dtype=int),
                residuals=np.zeros(len(times)),
                metadata={"scheme": "dopri54", "rtol": rtol, "atol": atol},
            )
        if spec is not None and backend == "compiled":
            raise RuntimeError("compiled backend requested but not available")

    f = _as_vf(model_or_vf)
    direction = 1.0 if t1 >= t0 else -1.0

    targets = list(t_eval) if t_eval is not None else None
    out_t, out_z = [], []

    t, z = t0, z0.z.copy()
    next_target = 0
    if targets is not None:
        while next_target < len(targets) and abs(targets[next_target] - t) <= 1e-14 * max(1.0, abs(t)):
            out_t.append(targets[next_target])
            out_z.append(z.copy())
            next_target += 1
    else:
        out_t.append(t)
        out_z.append(z.copy())

    h = _initial_step(f, t0, z, direction, rtol, atol)
    h = min(h, abs(t1 - t0))
    err_prev = 1e-4
    k = np.zeros((7, z.size))
    k[0] = f(z)
    n_steps = 0
    safety, min_factor, max_factor = 0.9, 0.2, 10.0
    alpha, beta = 0.17, 0.04

    while direction * (t1 - t) > 1e-14 * max(1.0, abs(t)):
        n_steps += 1
        if n_steps > max_steps:
            raise StepUnderflowError("maximum number of adaptive steps exceeded")
        h = min(h, abs(t1 - t))
        if targets is not None and next_target < len(targets):
            h = min(h, abs(targets[next_target] - t))
        if h <= 16 * np.finfo(float).eps * max(1.0, abs(t)):
            raise StepUnderflowError(f"step size underflow at t={t}")

        hd = direction * h
        for i in range(1, 7):
            z_stage = z + hd * (_DP_A[i] @ k[:i])
            k[i] = f(z_stage)
        z_new = z + hd * (_DP_B @ k)
        err_vec = hd * (_DP_E @ k)
        sc = atol + rtol * np.maximum(np.abs(z), np.abs(z_new))
        err = np.sqrt(np.mean((err_vec / sc) ** 2))

        if not np.isfinite(err):
            h *= 0.25
            continue
        if err <= 1.0:
            t = t + hd
            z = z_new
            k[0] = k[6]  # FSAL
            if targets is not None:
                while next_target < len(targets) and abs(targets[next_target] - t) <= 1e-12 * max(
                    1.0, abs(t)
                ):
                    out_t.append(targets[next_target])
                    out_z.append(z.copy())
                    next_target += 1
            else:
                out_t.append(t)
                out_z.append(z.copy())
            factor = safety * err ** (-alpha) * err_prev**beta if err > 0 else max_factor
            err_prev = max(err, 1e-10)
            h *= min(max_factor, max(min_factor, factor))
        else:
            h *= max(min_factor, safety * err**-0.2)

    times = np.asarray(out_t)
    states = np.asarray(out_z)
    energies = (
        hamiltonian_series(model_or_vf, states)
        if isinstance(model_or_vf, DegenerateModel)
        else np.full(len(times), np.nan)
    )
    return Trajectory(
        times=times,
        states=states,
        energies=energies,
        newton_iterations=np.zeros(len(times), dtype=int),
        residuals=np.zeros(len(times)),
        metadata={"scheme": "dopri54", "rtol": rtol, "atol": atol},
    )


# ---------------------------------------------------------------------------
# Degenerate variational integrator
# ---------------------------------------------------------------------------


def dvi_bootstrap(model: DegenerateModel, z0: PhaseState, h: float) -> DviStepWorkspace:
    """Start a DVI trajectory: x_{-1} = x_0 - h Dy theta^{-T} grad_y H at z_0."""
    ev = model.evaluate(z0, Order.FIRST)
    check_invertible(ev.d_y_theta)
    x_prev = z0.x - h * np.linalg.solve(ev.d_y_theta.T, ev.grad_y_h)
    return DviStepWorkspace(previous_x=x_prev, current=z0, step=h)


def dvi_residual(
    model: DegenerateModel, z0: PhaseState, z1: PhaseState, z2: PhaseState, h: float
) -> np.ndarray:
    """One-step error of the scheme on the triple (z0, z1, z2).

    Stacks the two scheme equations; a converged DVI step satisfies
    ``||S||_inf <= abs_tol`` by construction. Only x is consumed from z0.
    """
    ev1 = model.evaluate(z1, Order.FIRST)
    ev2 = model.evaluate(z2, Order.FIRST)
    s1 = ev2.theta - ev1.theta - ev1.d_x_theta.T @ (z1.x - z0.x) + h * ev1.grad_x_h
    s2 = ev2.d_y_theta.T @ (z2.x - z1.x) - h * ev2.grad_y_h
    return np.concatenate([s1, s2])


def dvi_del_jacobian(
    model: DegenerateModel, z0: PhaseState, z1: PhaseState, z2: PhaseState, h: float
) -> np.ndarray:
    """Jacobian of :func:`dvi_residual` with respect to z2.

    Serves as the Newton matrix of :func:`dvi_step` and as the conditioning
    target in scheme learning. Requires second derivatives of the potential
    at z2 (the rows differentiating the y-equation).
    """
    d = model.dimension
    ev2 = model.evaluate(z2, Order.SECOND)
    dx = z2.x - z1.x
    th_zz = ev2.second_order.theta_zz
    h_zz = ev2.second_order.h_zz
    jac = np.zeros((2 * d, 2 * d))
    jac[:d, :d] = ev2.d_x_theta
    jac[:d, d:] = ev2.d_y_theta
    jac[d:, :d] = (
        ev2.d_y_theta.T
        + np.einsum("kaj,k->aj", th_zz[:, d:, :d], dx)
        - h * h_zz[d:, :d]
    )
    jac[d:, d:] = np.einsum("kab,k->ab", th_zz[:, d:, d:], dx) - h * h_zz[d:, d:]
    return jac


@dataclass(frozen=True)
class StepDiagnostics:
    newton_iterations: int
    residual: float


def dvi_step(
    model: DegenerateModel, workspace: DviStepWorkspace, cfg: NewtonConfig = NewtonConfig()
):
    """Advance one DVI step by damped Newton on the scheme equations.

    The initial guess is a single explicit-Euler step on the continuous
    vector field. Divergence surfaces as :class:`NonConvergenceError`, which
    callers treat as trajectory blow-up rather than a bug.
    """
    z1 = workspace.current
    h = workspace.step
    z0 = PhaseState(workspace.previous_x, z1.y)

    guess = z1.z + h * vector_field(model, z1)

    def residual_at(zc: np.ndarray) -> np.ndarray:
        return dvi_residual(model, z0, z1, PhaseState.from_z(zc), h)

    z2 = guess
    try:
        res = residual_at(z2)
    except (DomainError, SingularMatrixError) as exc:
        raise NonConvergenceError(
            f"initial guess not evaluable: {exc}", residual=np.inf, iterations=0
        ) from exc
    res_norm = float(np.max(np.abs(res)))

    iterations = 0
    while res_norm > cfg.abs_tol:
        if iterations >= cfg.max_iter:
            raise NonConvergenceError(
                f"Newton did not converge in {cfg.max_iter} iterations",
                residual=res_norm,
                iterations=iterations,
            )
        try:
            jac = dvi_del_jacobian(model, z0, z1, PhaseState.from_z(z2), h)
            delta = np.linalg.solve(jac, res)
        except (np.linalg.LinAlgError, DomainError) as exc:
            raise SingularMatrixError(f"singular Newton matrix: {exc}") from exc
        if not np.all(np.isfinite(delta)):
            raise SingularMatrixError("non-finite Newton direction")

        lam = cfg.damping
        best = None
        for _ in range(10):
            cand = z2 - lam * delta
            try:
                cand_res = residual_at(cand)
                cand_norm = float(np.max(np.abs(cand_res)))
            except (DomainError, SingularMatrixError):
                cand_norm = np.inf
            else:
                if best is None or cand_norm < best[2]:
                    best = (cand, cand_res, cand_norm)
            if np.isfinite(cand_norm) and cand_norm < res_norm:
                break
            lam *= 0.5
        if best is None:
            raise NonConvergenceError(
                "line search could not evaluate any candidate",
                residual=res_norm,
                iterations=iterations,
            )
        z2, res, res_norm = best
        iterations += 1

    state = PhaseState.from_z(z2)
    new_ws = DviStepWorkspace(previous_x=z1.x.copy(), current=state, step=h)
    return state, new_ws, StepDiagnostics(newton_iterations=iterations, residual=res_norm)


def local_error_estimate(model: DegenerateModel, z: PhaseState, z_dot: np.ndarray) -> np.ndarray:
    """Step-free dominant coefficient r of the DVI one-step error.

    Solves ``[[Dx th + Dx th^T, Dy th], [Dy th^T, 0]] r = Dz[grad_z L] zdot``
    (derivatives applied to the maps only), so that the one-step error is
    ``z(h) - z_h = (h^2/2) r + O(h^3)``. Gauge shifts of the potential move
    r even though they leave the continuous dynamics alone.
    """
    d = model.dimension
    ev = model.evaluate(z, Order.SECOND)
    z_dot = np.asarray(z_dot, dtype=float)
    saddle = np.zeros((2 * d, 2 * d))
    saddle[:d, :d] = ev.d_x_theta + ev.d_x_theta.T
    saddle[:d, d:] = ev.d_y_theta
    saddle[d:, :d] = ev.d_y_theta.T
    m = np.einsum("jik,j->ik", ev.second_order.theta_zz, z_dot[:d]) - ev.second_order.h_zz
    rhs = m @ z_dot
    try:
        r = np.linalg.solve(saddle, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularErrorSystem(f"saddle system singular: {exc}") from exc
    if not np.all(np.isfinite(r)):
        raise SingularErrorSystem("saddle system produced non-finite estimate")
    return r


# ---------------------------------------------------------------------------
# Trajectory composition
# ---------------------------------------------------------------------------


def simulate(
    model: Union[DegenerateModel, VectorField],
    z0: PhaseState,
    h: float,
    n_steps: int,
    scheme: str = "dvi",
    cfg: NewtonConfig = NewtonConfig(),
    backend: str = "auto",
    record_every: int = 1,
) -> Trajectory:
    """Compose integrator steps, recording energy and Newton diagnostics.

    Divergence (Newton failure, domain exit, non-finite state) truncates the
    trajectory and sets the ``diverged`` flag instead of raising: unstable
    runs are a measured outcome for learned models.
    """
    from . import _kernels

    scheme = scheme.lower()
    if scheme not in ("dvi", "rk4"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if scheme == "dvi" and not isinstance(model, DegenerateModel):
        raise TypeError("the DVI requires a DegenerateModel (no Lagrangian structure given)")

    if backend != "python" and isinstance(model, DegenerateModel):
        spec = _kernels.spec_for(model)
        if spec is not None and _kernels.compiled_available():
            return _simulate_compiled(model, spec, z0, h, n_steps, scheme, cfg, record_every)
        if spec is not None and backend == "compiled":
            raise RuntimeError("compiled backend requested but not available")

    return _simulate_python(model, z0, h, n_steps, scheme, cfg, record_every)


def _energy_of(model, state: PhaseState) -> float:
    if isinstance(model, DegenerateModel):
        try:
            return model.evaluate(state, Order.VALUE).hamiltonian
        except DegenlagError:
            return np.nan
    return np.nan


def _simulate_python(model, z0, h, n_steps, scheme, cfg, record_every):
    times = [0.0]
    states = [z0.z.copy()]
    energies = [_energy_of(model, z0)]
    iters = [0]
    residuals = [0.0]
    diverged = False

    if scheme == "dvi":
        try:
            ws = dvi_bootstrap(model, z0, h)
        except DegenlagError:
            ws = None
            diverged = True
    state = z0
    step_fn = None if scheme == "dvi" else _as_vf(model)

    n = 0
    while n < n_steps and not diverged:
        n += 1
        if scheme == "dvi":
            try:
                state, ws, diag = dvi_step(model, ws, cfg)
                it, res = diag.newton_iterations, diag.residual
            except DegenlagError:
                diverged = True
                break
        else:
            znew = _rk4_raw(step_fn, state.z, h)
            if not np.all(np.isfinite(znew)):
                diverged = True
                break
            state = PhaseState.from_z(znew)
            it, res = 0, 0.0
        if n % record_every == 0 or n == n_steps:
            times.append(n * h)
            states.append(state.z.copy())
            energies.append(_energy_of(model, state))
            iters.append(it)
            residuals.append(res)

    return Trajectory(
        times=np.asarray(times),
        states=np.asarray(states),
        energies=np.asarray(energies),
        newton_iterations=np.asarray(iters, dtype=int),
        residuals=np.asarray(residuals),
        diverged=diverged,
        metadata={"scheme": scheme, "h": h, "n_steps": n_steps},
    )


def _rk4_raw(f, z, h):
    k1 = f(z)
    k2 = f(z + 0.5 * h * k1)
    k3 = f(z + 0.5 * h * k2)
    k4 = f(z + h * k3)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _simulate_compiled(model, spec, z0, h, n_steps, scheme, cfg, record_every):
    from . import _kernels

    times, states, energies, iters, residuals, diverged = _kernels.trajectory(
        spec, z0.z, h, n_steps, scheme, cfg.abs_tol, cfg.max_iter, cfg.damping, record_every
    )
    return Trajectory(
        times=times,
        states=states,
        energies=energies,
        newton_iterations=iters,
        residuals=residuals,
        diverged=bool(diverged),
        metadata={"scheme": scheme, "h": h, "n_steps": n_steps, "backend": "compiled"},
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def config_hash(obj) -> str:
    """Stable short hash of a JSON-serializable configuration."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_trajectory(traj: Trajectory, csv_path, metadata: Optional[dict] = None) -> None:
    """CSV (t, x_*, y_*, H, newton_iters, residual, diverged) plus JSON sidecar."""
    import csv as _csv
    from pathlib import Path

    csv_path = Path(csv_path)
    d = traj.d
    header = (
        ["t"]
        + [f"x_{i+1}" for i in range(d)]
        + [f"y_{i+1}" for i in range(d)]
        + ["H", "newton_iters", "residual", "diverged"]
    )
    flag = int(traj.diverged)
    with open(csv_path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(header)
        for i in range(len(traj)):
            row = (
                [repr(float(traj.times[i]))]
                + [repr(float(v)) for v in traj.states[i]]
                + [
                    repr(float(traj.energies[i])),
                    int(traj.newton_iterations[i]),
                    repr(float(traj.residuals[i])),
                    flag,
                ]
            )
            writer.writerow(row)
    meta = dict(traj.metadata)
    if metadata:
        meta.update(metadata)
    meta.setdefault("config_hash", config_hash(meta))
    sidecar = csv_path.with_suffix(".json")
    with open(sidecar, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_trajectory(csv_path) -> Trajectory:
    import csv as _csv
    from pathlib import Path

    csv_path = Path(csv_path)
    with open(csv_path) as fh:
        reader = _csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader]
    if not rows:
        raise ValueError(f"empty trajectory file: {csv_path}")
    d = (len(header) - 5) // 2
    data = np.array([[float(v) for v in row] for row in rows])
    meta = {}
    sidecar = csv_path.with_suffix(".json")
    if sidecar.exists():
        with open(sidecar) as fh:
            meta = json.load(fh)
    return Trajectory(
        times=data[:, 0],
        states=data[:, 1 : 1 + 2 * d],
        energies=data[:, 1 + 2 * d],
        newton_iterations=data[:, 2 + 2 * d].astype(int),
        residuals=data[:, 3 + 2 * d],
        diverged=bool(data[0, 4 + 2 * d]),
        metadata=meta,
    )
