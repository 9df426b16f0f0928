"""Datasets, Gram-informed norms, training losses and the Adam trainer.

Two strategies are implemented. Vector-field learning fits
``W(z)^-1 grad H(z)`` to sampled derivatives and regularizes the
step-free DVI error coefficient, killing the gauge freedom that otherwise
destabilizes the integrator. Scheme learning drives the DVI one-step
residual to zero on trajectory triples (measured in Newton-update units,
``J^-1 S``), with a condition-number penalty keeping the Newton matrix
invertible.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .core import ConfigError, PhaseState, vector_field
from .integrate import reference_solve
from .models import GuidingCenterModel, LotkaVolterraModel, MasslessParticleModel
from .nn import NeuralDegenerateModel, build_neural_model

TRAIN, TEST, VALIDATION = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", TEST: "test", VALIDATION: "validation"}

GC_PERIOD_DT = 37974.6  # deeply-trapped bounce period fixing the time step


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class CollocationDataset:
    """Sampled states with exact time derivatives, split by trajectory."""

    z: np.ndarray  # (N, 2d)
    z_dot: np.ndarray  # (N, 2d)
    split: np.ndarray  # (N,) in {TRAIN, TEST, VALIDATION}
    traj_id: np.ndarray  # (N,)
    metadata: dict = field(default_factory=dict)

    def select(self, split: int) -> Tuple[np.ndarray, np.ndarray]:
        mask = self.split == split
        return self.z[mask], self.z_dot[mask]

    def __len__(self) -> int:
        return len(self.z)


@dataclass
class TripleDataset:
    """Consecutive trajectory snapshots (z0, z1, z2) at fixed spacing h."""

    z0: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    h: float
    split: np.ndarray
    traj_id: np.ndarray
    metadata: dict = field(default_factory=dict)

    def select(self, split: int):
        mask = self.split == split
        return self.z0[mask], self.z1[mask], self.z2[mask]

    def __len__(self) -> int:
        return len(self.z0)


def _assign_splits(n_traj: int, rng: np.random.Generator) -> np.ndarray:
    """Per-trajectory 80/15/5 train/test/validation assignment."""
    order = rng.permutation(n_traj)
    n_train = int(round(0.80 * n_traj))
    n_test = int(round(0.15 * n_traj))
    split = np.full(n_traj, VALIDATION, dtype=int)
    split[order[:n_train]] = TRAIN
    split[order[n_train : n_train + n_test]] = TEST
    return split


def _rollout_datasets(model, ics: np.ndarray, steps: int, h: float, rng, metadata):
    """Reference-solve each initial condition and emit pair + triple data."""
    n_traj = len(ics)
    split = _assign_splits(n_traj, rng)
    t_eval = np.arange(steps + 1) * h
    zs, zdots, pair_split, pair_traj = [], [], [], []
    t0, t1, t2, tri_split, tri_traj = [], [], [], [], []
    for i, z0 in enumerate(ics):
        traj = reference_solve(model, PhaseState.from_z(z0), (0.0, steps * h), t_eval=t_eval)
        states = traj.states
        for s in states:
            zs.append(s)
            zdots.append(vector_field(model, PhaseState.from_z(s)))
            pair_split.append(split[i])
            pair_traj.append(i)
        for j in range(len(states) - 2):
            t0.append(states[j])
            t1.append(states[j + 1])
            t2.append(states[j + 2])
            tri_split.append(split[i])
            tri_traj.append(i)
    pairs = CollocationDataset(
        z=np.asarray(zs),
        z_dot=np.asarray(zdots),
        split=np.asarray(pair_split),
        traj_id=np.asarray(pair_traj),
        metadata=dict(metadata, kind="pairs", pair_extraction="every-snapshot"),
    )
    triples = TripleDataset(
        z0=np.asarray(t0),
        z1=np.asarray(t1),
        z2=np.asarray(t2),
        h=h,
        split=np.asarray(tri_split),
        traj_id=np.asarray(tri_traj),
        metadata=dict(metadata, kind="triples", h=h),
    )
    return pairs, triples


def gen_dataset_lv(
    n_traj: int = 2000, steps: int = 5, h: float = 0.1, seed: int = 0
) -> Tuple[CollocationDataset, TripleDataset]:
    """Lotka-Volterra data: initial conditions uniform on {H <= 4.4}, short rollouts."""
    if n_traj < 1:
        raise ConfigError("need at least one trajectory")
    model = LotkaVolterraModel()
    rng = np.random.default_rng(seed)
    ics = []
    draws = 0
    # Bounding box enclosing the H <= 4.4 sublevel set on x, y > 0.
    while len(ics) < n_traj:
        draws += 1
        if draws > 10_000 * n_traj:
            raise ConfigError("rejection sampling stalled; energy bound too tight")
        x = rng.uniform(0.15, 7.6)
        y = rng.uniform(0.02, 5.0)
        if x + y - 2.0 * np.log(x) - np.log(y) <= 4.4:
            ics.append([x, y])
    meta = {"experiment": "lv", "seed": seed, "n_traj": n_traj, "steps": steps, "energy_max": 4.4}
    return _rollout_datasets(model, np.asarray(ics), steps, h, rng, meta)


def latin_hypercube(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """One sample per stratum and coordinate: stratified uniform design."""
    out = np.empty((n, dim))
    for k in range(dim):
        out[:, k] = (rng.permutation(n) + rng.uniform(0.0, 1.0, n)) / n
    return out


def gen_dataset_mcp(
    n_points: int = 15_000, h: float = 0.5, seed: int = 0, a0: float = 1.0, e0: float = 1.0
) -> Tuple[CollocationDataset, TripleDataset]:
    """Massless-particle data: Latin hypercube in polar coordinates around
    (0, pi/2), radius pi, filtered to electrical energy <= 1.5; triples are
    rolled out two steps from every kept point."""
    model = MasslessParticleModel(a0, e0)
    rng = np.random.default_rng(seed)
    unit = latin_hypercube(n_points, 2, rng)
    radius = np.pi * np.sqrt(unit[:, 0])  # uniform in radius^2
    angle = 2.0 * np.pi * unit[:, 1]
    pts = np.column_stack([radius * np.cos(angle), np.pi / 2 + radius * np.sin(angle)])
    phi = e0 * (2.0 - np.cos(pts[:, 0]) - np.sin(pts[:, 1]))
    pts = pts[phi <= 1.5]
    n_kept = len(pts)
    split = _assign_splits(n_kept, rng)

    zdots = np.array([vector_field(model, PhaseState.from_z(p)) for p in pts])
    pairs = CollocationDataset(
        z=pts,
        z_dot=zdots,
        split=split,
        traj_id=np.arange(n_kept),
        metadata={
            "experiment": "mcp",
            "seed": seed,
            "n_points": n_points,
            "n_kept": n_kept,
            "kind": "pairs",
            "energy_max": 1.5,
            "params": {"A0": a0, "E0": e0},
        },
    )
    t_eval = np.array([0.0, h, 2 * h])
    t1, t2 = [], []
    for p in pts:
        traj = reference_solve(model, PhaseState.from_z(p), (0.0, 2 * h), t_eval=t_eval)
        t1.append(traj.states[1])
        t2.append(traj.states[2])
    triples = TripleDataset(
        z0=pts.copy(),
        z1=np.asarray(t1),
        z2=np.asarray(t2),
        h=h,
        split=split,
        traj_id=np.arange(n_kept),
        metadata={
            "experiment": "mcp",
            "seed": seed,
            "kind": "triples",
            "h": h,
            "triple_rollout": "two-steps-from-each-point",
            "params": {"A0": a0, "E0": e0},
        },
    )
    return pairs, triples


def gen_dataset_gc(
    n_traj: int = 600,
    steps: int = 60,
    seed: int = 0,
    b0: float = 1.0,
    r0: float = 1.0,
    q0: float = 2.0,
    mu: float = 2.25e-6,
) -> Tuple[CollocationDataset, TripleDataset]:
    """Guiding-center data: banded initial conditions around the reference
    orbits, 60 steps at one twentieth of the deeply-trapped period."""
    model = GuidingCenterModel(b0, r0, q0, mu)
    rng = np.random.default_rng(seed)
    h = GC_PERIOD_DT / 20.0
    r_init = np.sqrt(rng.uniform(0.03**2, 0.055**2, n_traj))
    theta0 = rng.uniform(-np.pi / 10, np.pi / 10, n_traj)
    phi0 = rng.uniform(0.0, 2.0 * np.pi, n_traj)
    u0 = rng.uniform(-9e-4, -3e-4, n_traj)
    ics = np.column_stack([theta0, phi0, r_init, u0])
    meta = {
        "experiment": "gc",
        "seed": seed,
        "n_traj": n_traj,
        "steps": steps,
        "h": h,
        "period_dt": GC_PERIOD_DT,
        "params": {"B0": b0, "R0": r0, "q0": q0, "mu": mu},
    }
    return _rollout_datasets(model, ics, steps, h, rng, meta)


# -- CSV persistence ---------------------------------------------------------


def write_pairs_csv(ds: CollocationDataset, path) -> None:
    path = Path(path)
    d2 = ds.z.shape[1]
    header = (
        ["traj", "split"]
        + [f"z_{i+1}" for i in range(d2)]
        + [f"zdot_{i+1}" for i in range(d2)]
    )
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ds)):
            w.writerow(
                [int(ds.traj_id[i]), SPLIT_NAMES[int(ds.split[i])]]
                + [repr(float(v)) for v in ds.z[i]]
                + [repr(float(v)) for v in ds.z_dot[i]]
            )
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(ds.metadata, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def read_pairs_csv(path) -> CollocationDataset:
    path = Path(path)
    rows = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=str)
    rows = np.atleast_2d(rows)
    d2 = (rows.shape[1] - 2) // 2
    names = {v: k for k, v in SPLIT_NAMES.items()}
    meta = {}
    if path.with_suffix(".json").exists():
        meta = json.loads(path.with_suffix(".json").read_text())
    return CollocationDataset(
        z=rows[:, 2 : 2 + d2].astype(float),
        z_dot=rows[:, 2 + d2 :].astype(float),
        split=np.array([names[s] for s in rows[:, 1]]),
        traj_id=rows[:, 0].astype(int),
        metadata=meta,
    )


def write_triples_csv(ds: TripleDataset, path) -> None:
    path = Path(path)
    d2 = ds.z0.shape[1]
    header = ["traj", "split"]
    for tag in ("z0", "z1", "z2"):
        header += [f"{tag}_{i+1}" for i in range(d2)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ds)):
            w.writerow(
                [int(ds.traj_id[i]), SPLIT_NAMES[int(ds.split[i])]]
                + [repr(float(v)) for v in ds.z0[i]]
                + [repr(float(v)) for v in ds.z1[i]]
                + [repr(float(v)) for v in ds.z2[i]]
            )
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(ds.metadata, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def read_triples_csv(path) -> TripleDataset:
    path = Path(path)
    rows = np.atleast_2d(np.genfromtxt(path, delimiter=",", skip_header=1, dtype=str))
    d2 = (rows.shape[1] - 2) // 3
    names = {v: k for k, v in SPLIT_NAMES.items()}
    meta = {}
    if path.with_suffix(".json").exists():
        meta = json.loads(path.with_suffix(".json").read_text())
    return TripleDataset(
        z0=rows[:, 2 : 2 + d2].astype(float),
        z1=rows[:, 2 + d2 : 2 + 2 * d2].astype(float),
        z2=rows[:, 2 + 2 * d2 :].astype(float),
        h=float(meta.get("h", 0.0)),
        split=np.array([names[s] for s in rows[:, 1]]),
        traj_id=rows[:, 0].astype(int),
        metadata=meta,
    )


# ---------------------------------------------------------------------------
# Gram-informed norm
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GramNorm:
    """Second-moment whitening ||u||^2 = u^T M^-1 u via M^{-1/2}."""

    matrix: np.ndarray
    inv_sqrt: np.ndarray
    offset: float


def gram_inverse_sqrt(vectors: np.ndarray, componentwise: bool = False) -> GramNorm:
    """Inverse symmetric square root of the empirical Gram matrix.

    A relative offset (1e-12 of the mean diagonal) keeps the matrix positive
    definite when the data does not span all directions.
    """
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    if len(vectors) < 1:
        raise ValueError("need at least one vector")
    dim = vectors.shape[1]
    if componentwise:
        m = np.diag(np.mean(vectors**2, axis=0))
    else:
        m = vectors.T @ vectors / len(vectors)
    eps = 1e-12 * np.trace(m) / dim
    if eps == 0.0:
        eps = 1e-300  # all-zero data still yields a definite matrix
    m = m + eps * np.eye(dim)
    eigval, eigvec = np.linalg.eigh(m)
    inv_sqrt = (eigvec / np.sqrt(eigval)) @ eigvec.T
    return GramNorm(matrix=m, inv_sqrt=inv_sqrt, offset=eps)


# ---------------------------------------------------------------------------
# Batched model derivatives on the graph
# ---------------------------------------------------------------------------


def _batched_first_order(model: NeuralDegenerateModel, zv: ad.Var, params, create_graph):
    """theta (N,d), H (N,1), and their z-Jacobians for a batch Var."""
    theta = model.theta_on_graph(zv, params)
    h = model.h_on_graph(zv, params)
    d_theta = ad.elementwise_jacobian(theta, zv, create_graph=create_graph)  # (N, d, 2d)
    d_h = ad.elementwise_jacobian(h, zv, create_graph=create_graph)  # (N, 1, 2d)
    return theta, h, d_theta, d_h


def _batched_second_order(model, zv, params, d_theta, d_h):
    """theta_zz (N,d,2d,2d) and h_zz (N,2d,2d) via backward over the Jacobians."""
    n, dim = zv.value.shape
    d = dim // 2
    rows = []
    for j in range(d):
        cols = []
        for k in range(dim):
            seed = np.zeros((n, d, dim))
            seed[:, j, k] = 1.0
            (g,) = ad.backward(d_theta, [zv], cotangent=seed, create_graph=True)
            cols.append(g)  # (N, 2d)
        rows.append(ad.stack(cols, axis=1))  # (N, 2d, 2d)
    theta_zz = ad.stack(rows, axis=1)  # (N, d, 2d, 2d)
    cols = []
    for k in range(dim):
        seed = np.zeros((n, 1, dim))
        seed[:, 0, k] = 1.0
        (g,) = ad.backward(d_h, [zv], cotangent=seed, create_graph=True)
        cols.append(g)
    h_zz = ad.stack(cols, axis=1)  # (N, 2d, 2d)
    return theta_zz, h_zz


def _assemble_w(d_theta, d):
    """Symplectic form batch (N, 2d, 2d) from the potential Jacobian."""
    dx = ad.getitem(d_theta, (slice(None), slice(None), slice(0, d)))
    dy = ad.getitem(d_theta, (slice(None), slice(None), slice(d, 2 * d)))
    dx_t = ad.swapaxes(dx, -1, -2)
    dy_t = ad.swapaxes(dy, -1, -2)
    n = ad.val(d_theta).shape[0]
    zero = np.zeros((n, d, d))
    top = ad.concat([ad.sub(dx_t, dx), ad.mul(-1.0, dy)], axis=2)
    bot = ad.concat([dy_t, zero], axis=2)
    return ad.concat([top, bot], axis=1)


def _guard(a_val: np.ndarray, cond_limit: float = 1e12):
    """Bad-sample mask and a safe stand-in (identity rows) for batched solves."""
    finite = np.isfinite(a_val).all(axis=(-1, -2))
    safe = np.where(finite[:, None, None], a_val, np.eye(a_val.shape[-1]))
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(safe)
    bad = (~finite) | (~np.isfinite(cond)) | (cond > cond_limit)
    safe = np.where(bad[:, None, None], np.eye(a_val.shape[-1]), a_val)
    return bad, safe


def _guarded_solve(a, b, cond_limit: float = 1e12):
    """Batched solve that survives singular members; returns (x, bad mask)."""
    bad, safe_val = _guard(ad.val(a), cond_limit)
    if bad.any():
        a = ad.where_mask(bad[:, None, None], safe_val, a)
    return ad.solve(a, b), bad


def _whiten(u, gram: GramNorm):
    return ad.matmul(u, gram.inv_sqrt)  # inv_sqrt is symmetric


def _capped_mean(per_sample, bad, cap):
    if bad.any():
        per_sample = ad.where_mask(bad, np.full(bad.shape, cap), per_sample)
    return ad.mean(per_sample)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def local_error_batch(model, zv, z_dot, params, first=None, second=None):
    """Batched step-free DVI error coefficient r(z, zdot) on the graph."""
    d = model.dimension
    if first is None:
        theta, h, d_theta, d_h = _batched_first_order(model, zv, params, create_graph=True)
    else:
        theta, h, d_theta, d_h = first
    if second is None:
        theta_zz, h_zz = _batched_second_order(model, zv, params, d_theta, d_h)
    else:
        theta_zz, h_zz = second
    dx = ad.getitem(d_theta, (slice(None), slice(None), slice(0, d)))
    dy = ad.getitem(d_theta, (slice(None), slice(None), slice(d, 2 * d)))
    n = ad.val(d_theta).shape[0]
    zero = np.zeros((n, d, d))
    top = ad.concat([ad.add(dx, ad.swapaxes(dx, -1, -2)), dy], axis=2)
    bot = ad.concat([ad.swapaxes(dy, -1, -2), zero], axis=2)
    saddle = ad.concat([top, bot], axis=1)
    # Dz[grad_z L] zdot with derivatives applied to the maps only.
    xdot = z_dot[:, :d]
    weighted = ad.sum_(ad.mul(theta_zz, xdot[:, :, None, None]), axis=1)  # (N, 2d, 2d)
    m = ad.sub(weighted, h_zz)
    rhs = ad.reshape(ad.matmul(m, z_dot[:, :, None]), (n, 2 * d))
    r, bad = _guarded_solve(saddle, rhs)
    return r, bad


def loss_vf(
    model: NeuralDegenerateModel,
    z_batch: np.ndarray,
    z_dot_batch: np.ndarray,
    params: Sequence,
    epsilon: float,
    gram: Optional[GramNorm] = None,
    use_gram: bool = True,
    componentwise_gram: bool = False,
    cap: float = 1e6,
    monitor_reg: bool = True,
):
    """Vector-field loss: whitened fit error plus the gauge regularizer.

    Returns the scalar loss Var and a dict with the two monitored terms;
    the regularization trace is recorded even when epsilon = 0 unless
    monitoring is switched off explicitly (it needs second derivatives).
    """
    if len(z_batch) == 0:
        raise ValueError("empty batch")
    d = model.dimension
    if use_gram and gram is None:
        gram = gram_inverse_sqrt(z_dot_batch, componentwise=componentwise_gram)
    zv = ad.var(z_batch)
    first = _batched_first_order(model, zv, params, create_graph=True)
    theta, h, d_theta, d_h = first
    w = _assemble_w(d_theta, d)
    grad_h = ad.reshape(d_h, (len(z_batch), 2 * d))
    f_pred, bad = _guarded_solve(w, grad_h)
    err = ad.sub(z_dot_batch, f_pred)
    if use_gram:
        err = _whiten(err, gram)
    fit = ad.sum_(ad.square(err), axis=1)
    fit_term = _capped_mean(fit, bad, cap)

    if epsilon > 0.0 or monitor_reg:
        r, bad_r = local_error_batch(model, zv, z_dot_batch, params, first=first)
        r_w = _whiten(r, gram) if use_gram else r
        reg = ad.sum_(ad.square(r_w), axis=1)
        reg_term = _capped_mean(reg, bad | bad_r, cap)
        loss = ad.add(fit_term, ad.mul(float(epsilon), reg_term))
        reg_value = float(ad.val(reg_term))
    else:
        loss = fit_term
        reg_value = np.nan
    parts = {
        "error_term": float(ad.val(fit_term)),
        "reg_term": reg_value,
    }
    return loss, parts


def _scheme_core(model, z0, z1, z2, h, params):
    """Exact one-step residual S and Jacobian J = d S / d z2, batched."""
    d = model.dimension
    n = len(z1)
    z1v = ad.var(z1)
    z2v = ad.var(z2)
    theta1, h1, d_theta1, d_h1 = _batched_first_order(model, z1v, params, create_graph=True)
    theta2, h2, d_theta2, d_h2 = _batched_first_order(model, z2v, params, create_graph=True)
    theta_zz2, h_zz2 = _batched_second_order(model, z2v, params, d_theta2, d_h2)

    dx1 = ad.getitem(d_theta1, (slice(None), slice(None), slice(0, d)))
    gx1 = ad.getitem(d_h1, (slice(None), slice(0, 1), slice(0, d)))
    dx2 = ad.getitem(d_theta2, (slice(None), slice(None), slice(0, d)))
    dy2 = ad.getitem(d_theta2, (slice(None), slice(None), slice(d, 2 * d)))
    gy2 = ad.getitem(d_h2, (slice(None), slice(0, 1), slice(d, 2 * d)))

    dx01 = (z1[:, :d] - z0[:, :d])[:, :, None]  # x1 - x0, data
    dx12 = z2[:, :d] - z1[:, :d]  # x2 - x1, data

    s1 = ad.sub(
        ad.sub(theta2, theta1),
        ad.sub(
            ad.reshape(ad.matmul(ad.swapaxes(dx1, -1, -2), dx01), (n, d)),
            ad.mul(h, ad.reshape(gx1, (n, d))),
        ),
    )
    s2 = ad.sub(
        ad.reshape(ad.matmul(ad.swapaxes(dy2, -1, -2), dx12[:, :, None]), (n, d)),
        ad.mul(h, ad.reshape(gy2, (n, d))),
    )
    s = ad.concat([s1, s2], axis=1)

    # J rows: d S1 / d z2 = [Dx theta, Dy theta](z2); d S2 / d z2 couples the
    # second derivatives of theta with (x2 - x1) and the H Hessian.
    th_y = ad.getitem(theta_zz2, (slice(None), slice(None), slice(d, 2 * d), slice(None)))
    t_full = ad.sum_(ad.mul(th_y, dx12[:, :, None, None]), axis=1)  # (N, d, 2d)
    h_y = ad.getitem(h_zz2, (slice(None), slice(d, 2 * d), slice(None)))  # (N, d, 2d)
    dy2_t = ad.swapaxes(dy2, -1, -2)
    pad = np.zeros((n, d, d))
    dy_t_ext = ad.concat([dy2_t, pad], axis=2)  # (N, d, 2d)
    bottom = ad.add(dy_t_ext, ad.sub(t_full, ad.mul(h, h_y)))
    top = ad.concat([dx2, dy2], axis=2)
    jac = ad.concat([top, bottom], axis=1)
    return s, jac


def _log10_condition(jac, bad_in):
    """log10 kappa(J) in the spectral norm via power iteration on J^T J.

    The eigenvector iterations run on raw values (30 steps); eigenvalues are
    then Rayleigh quotients on the graph, whose gradients are exact at the
    converged vectors.
    """
    a = ad.matmul(ad.swapaxes(jac, -1, -2), jac)
    a_val = ad.val(a)
    bad, safe = _guard(a_val)
    bad = bad | bad_in
    n, m, _ = a_val.shape
    v = np.tile(1.0 + 0.1 * np.arange(m), (n, 1))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    w = v.copy()
    for _ in range(30):
        v = np.einsum("nij,nj->ni", safe, v)
        v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
        w = np.linalg.solve(safe, w[..., None])[..., 0]
        w /= np.maximum(np.linalg.norm(w, axis=1, keepdims=True), 1e-300)
    if bad.any():
        a = ad.where_mask(bad[:, None, None], safe, a)
    lam_max = ad.sum_(ad.mul(v, ad.reshape(ad.matmul(a, v[..., None]), (n, m))), axis=1)
    lam_min = ad.sum_(ad.mul(w, ad.reshape(ad.matmul(a, w[..., None]), (n, m))), axis=1)
    log_kappa = ad.mul(0.5, ad.sub(ad.log10(lam_max), ad.log10(lam_min)))
    return log_kappa, bad


def loss_scheme(
    model: NeuralDegenerateModel,
    z0: np.ndarray,
    z1: np.ndarray,
    z2: np.ndarray,
    h: float,
    params: Sequence,
    epsilon: float,
    gram: Optional[GramNorm] = None,
    use_gram: bool = True,
    componentwise_gram: bool = False,
    cap: float = 1e6,
    use_approximate_residual: bool = False,
):
    """Scheme loss: whitened Newton-update norm ||M^-1/2 J^-1 S||^2 plus
    epsilon * log10 kappa(J) keeping the Newton matrix well conditioned."""
    if len(z1) == 0:
        raise ValueError("empty batch")
    if use_gram and gram is None:
        gram = gram_inverse_sqrt(z2 - z1, componentwise=componentwise_gram)
    if use_approximate_residual:
        u, jac, bad = _approx_newton_error(model, z0, z1, z2, h, params)
    else:
        s, jac = _scheme_core(model, z0, z1, z2, h, params)
        u, bad = _guarded_solve(jac, s)
    if use_gram:
        u = _whiten(u, gram)
    fit = ad.sum_(ad.square(u), axis=1)
    fit_term = _capped_mean(fit, bad, cap)
    log_kappa, bad_k = _log10_condition(jac, bad)
    kappa_term = _capped_mean(log_kappa, bad_k, np.log10(cap))
    loss = ad.add(fit_term, ad.mul(float(epsilon), kappa_term))
    parts = {
        "error_term": float(ad.val(fit_term)),
        "reg_term": float(ad.val(kappa_term)),
    }
    return loss, parts


def _approx_newton_error(model, z0, z1, z2, h, params):
    """First-order expansion of J^-1 S with every evaluation at z1.

    One network evaluation per sample and only D_y theta inverted; vanishes
    on exact scheme triples (x-rows exactly, y-rows to expansion order).
    Used by the early guiding-center phases.
    """
    d = model.dimension
    n = len(z1)
    z1v = ad.var(z1)
    theta1, h1, d_theta1, d_h1 = _batched_first_order(model, z1v, params, create_graph=True)
    dx = ad.getitem(d_theta1, (slice(None), slice(None), slice(0, d)))
    dy = ad.getitem(d_theta1, (slice(None), slice(None), slice(d, 2 * d)))
    gx = ad.reshape(ad.getitem(d_h1, (slice(None), slice(0, 1), slice(0, d))), (n, d))
    gy = ad.reshape(ad.getitem(d_h1, (slice(None), slice(0, 1), slice(d, 2 * d))), (n, d))
    dx01 = (z1[:, :d] - z0[:, :d])
    dx12 = (z2[:, :d] - z1[:, :d])
    dy12 = (z2[:, d:] - z1[:, d:])

    bad_y, _ = _guard(ad.val(dy))
    r_x_solve, bad1 = _guarded_solve(ad.swapaxes(dy, -1, -2), gy)
    r_x = ad.sub(dx01, ad.mul(h, r_x_solve))
    inner = ad.sub(
        ad.reshape(ad.matmul(ad.swapaxes(dx, -1, -2), dx01[:, :, None]), (n, d)),
        ad.add(
            ad.reshape(ad.matmul(dx, dx12[:, :, None]), (n, d)),
            ad.mul(h, gx),
        ),
    )
    r_y_solve, bad2 = _guarded_solve(dy, inner)
    r_y = ad.sub(dy12, r_y_solve)
    u = ad.concat([r_x, r_y], axis=1)
    # Leading-order Jacobian for the conditioning penalty (no second
    # derivatives needed in the approximate phases).
    zero = np.zeros((n, d, d))
    top = ad.concat([dx, dy], axis=2)
    bot = ad.concat([ad.swapaxes(dy, -1, -2), zero], axis=2)
    jac = ad.concat([top, bot], axis=1)
    return u, jac, bad_y | bad1 | bad2


def approx_scheme_residual(
    model: NeuralDegenerateModel,
    triple: Tuple[PhaseState, PhaseState, PhaseState],
    h: float,
    params: Optional[Sequence] = None,
) -> np.ndarray:
    """Single-triple convenience wrapper around the batched approximate
    Newton error (all evaluations at z1)."""
    params = model.params if params is None else params
    z0, z1, z2 = (np.atleast_2d(s.z) for s in triple)
    u, _, bad = _approx_newton_error(model, z0, z1, z2, h, params)
    if bad.any():
        return np.full(2 * model.dimension, 1e6)
    return ad.val(u)[0]


def loss_mse_vf(net, z_batch: np.ndarray, z_dot_batch: np.ndarray, params: Sequence):
    """Plain mean-squared vector-field fit for the structureless baseline."""
    pred = net.forward_on_graph(z_batch, params)
    err = ad.sub(z_dot_batch, pred)
    loss = ad.mean(ad.sum_(ad.square(err), axis=1))
    return loss, {"error_term": float(ad.val(loss)), "reg_term": 0.0}


# ---------------------------------------------------------------------------
# Optimizer and training loop
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    t: int
    m: List[np.ndarray]
    v: List[np.ndarray]

    @staticmethod
    def init(params: Sequence[np.ndarray]) -> "AdamState":
        return AdamState(
            t=0,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_adam: float = 1e-8,
) -> List[np.ndarray]:
    """Standard Adam with bias correction; updates state in place."""
    state.t += 1
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g**2
        m_hat = state.m[i] / (1.0 - beta1**state.t)
        v_hat = state.v[i] / (1.0 - beta2**state.t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps_adam))
    return out


@dataclass(frozen=True)
class TrainPhase:
    epochs: int
    learning_rate: float
    use_approximate_residual: bool = False


@dataclass
class TrainConfig:
    phases: List[TrainPhase]
    loss: str = "vf"  # "vf", "vf_no_reg" or "scheme"
    epsilon: float = 1e-6
    batch_size: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    use_gram: bool = True
    componentwise_gram: bool = False
    gram_per_batch: bool = True
    cap: float = 1e6
    monitor_reg: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.loss not in ("vf", "vf_no_reg", "scheme"):
            raise ConfigError(f"unknown loss variant {self.loss!r}")

    @property
    def effective_epsilon(self) -> float:
        return 0.0 if self.loss == "vf_no_reg" else self.epsilon


@dataclass
class TrainingRun:
    """Loss traces, final parameters, and abort diagnostics of one training."""

    model: NeuralDegenerateModel
    config: TrainConfig
    trace: List[dict] = field(default_factory=list)
    aborted: bool = False

    def trace_array(self, key: str) -> np.ndarray:
        return np.array([row[key] for row in self.trace])

    def write_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "test_loss", "error_term", "reg_term"])
            for row in self.trace:
                w.writerow(
                    [
                        row["epoch"],
                        repr(row["train_loss"]),
                        repr(row["test_loss"]),
                        repr(row["error_term"]),
                        repr(row["reg_term"]),
                    ]
                )


def _loss_for_batch(model, config, batch, params, gram, use_approx):
    if config.loss in ("vf", "vf_no_reg"):
        z, z_dot = batch
        return loss_vf(
            model,
            z,
            z_dot,
            params,
            epsilon=config.effective_epsilon,
            gram=gram,
            use_gram=config.use_gram,
            componentwise_gram=config.componentwise_gram,
            cap=config.cap,
            monitor_reg=config.monitor_reg,
        )
    z0, z1, z2, h = batch
    return loss_scheme(
        model,
        z0,
        z1,
        z2,
        h,
        params,
        epsilon=config.effective_epsilon,
        gram=gram,
        use_gram=config.use_gram,
        componentwise_gram=config.componentwise_gram,
        cap=config.cap,
        use_approximate_residual=use_approx,
    )


def run_training(
    config: TrainConfig,
    dataset,
    model: NeuralDegenerateModel,
    verbose: bool = False,
) -> TrainingRun:
    """Execute the configured phases of minibatch Adam.

    Records the test-set loss with its error and regularization terms every
    epoch (the regularization trace is monitored even at epsilon = 0). A
    non-finite loss aborts the phase and restores the last finite parameters.
    """
    if config.loss in ("vf", "vf_no_reg"):
        if not isinstance(dataset, CollocationDataset):
            raise ConfigError("vector-field learning needs a pair dataset")
        train_data = dataset.select(TRAIN)
        test_data = dataset.select(TEST)
        n_train = len(train_data[0])
        make_batch = lambda idx: (train_data[0][idx], train_data[1][idx])
        test_batch = test_data
        gram_source = train_data[1]
    else:
        if not isinstance(dataset, TripleDataset):
            raise ConfigError("scheme learning needs a triple dataset")
        tr = dataset.select(TRAIN)
        te = dataset.select(TEST)
        n_train = len(tr[0])
        make_batch = lambda idx: (tr[0][idx], tr[1][idx], tr[2][idx], dataset.h)
        test_batch = (*te, dataset.h)
        gram_source = tr[2] - tr[1]
    if n_train == 0:
        raise ConfigError("empty training split")

    gram = None
    if config.use_gram and not config.gram_per_batch:
        gram = gram_inverse_sqrt(gram_source, componentwise=config.componentwise_gram)

    rng = np.random.default_rng(config.seed)
    run = TrainingRun(model=model, config=config)
    state = AdamState.init(model.params)
    params = [p.copy() for p in model.params]
    last_finite = [p.copy() for p in params]
    epoch_counter = 0

    for phase in config.phases:
        phase_aborted = False
        for _ in range(phase.epochs):
            epoch_counter += 1
            order = rng.permutation(n_train)
            losses = []
            for start in range(0, n_train, config.batch_size):
                idx = order[start : start + config.batch_size]
                batch = make_batch(idx)
                leaves = [ad.var(p) for p in params]
                loss, _parts = _loss_for_batch(
                    model, config, batch, leaves, gram, phase.use_approximate_residual
                )
                grads = ad.backward(loss, leaves)
                losses.append(float(ad.val(loss)))
                if not np.isfinite(losses[-1]):
                    break
                params = adam_step(
                    params, grads, state, phase.learning_rate,
                    config.beta1, config.beta2, config.eps_adam,
                )
            train_loss = float(np.mean(losses)) if losses else np.nan
            if not np.isfinite(train_loss):
                run.aborted = True
                phase_aborted = True
                params = [p.copy() for p in last_finite]
                break
            last_finite = [p.copy() for p in params]
            test_loss, parts = _loss_for_batch(
                model, config, test_batch, params, gram, phase.use_approximate_residual
            )
            row = {
                "epoch": epoch_counter,
                "train_loss": train_loss,
                "test_loss": float(ad.val(test_loss)),
                "error_term": parts["error_term"],
                "reg_term": parts["reg_term"],
            }
            run.trace.append(row)
            if verbose:
                print(
                    f"epoch {row['epoch']:4d}  train {row['train_loss']:.3e}  "
                    f"test {row['test_loss']:.3e}  reg {row['reg_term']:.3e}"
                )
        if phase_aborted:
            break

    model.set_params(params)
    run.model = model
    return run


# ---------------------------------------------------------------------------
# Experiment presets
# ---------------------------------------------------------------------------


def default_phases(experiment: str, loss: str) -> List[TrainPhase]:
    """Per-experiment phase schedules (epochs at stepped learning rates)."""
    if experiment == "lv":
        return [
            TrainPhase(20, 1e-2),
            TrainPhase(500, 1e-3),
            TrainPhase(500, 1e-4),
            TrainPhase(500, 1e-4),
        ]
    if experiment == "mcp":
        return [TrainPhase(20, 1e-2), TrainPhase(500, 1e-3), TrainPhase(500, 1e-4)]
    if experiment == "gc":
        approx = loss == "scheme"
        return [
            TrainPhase(20, 1e-2, use_approximate_residual=approx),
            TrainPhase(500, 1e-3, use_approximate_residual=approx),
            TrainPhase(500, 1e-4),
        ]
    raise ConfigError(f"unknown experiment {experiment!r}")


def default_epsilon(experiment: str, loss: str) -> float:
    if loss == "scheme":
        return 1e-8
    return {"lv": 1e-6, "mcp": 1e-4, "gc": 1.0}[experiment]


def build_experiment_model(
    experiment: str,
    pairs: CollocationDataset,
    seed: int = 0,
    h_rescale_override: Optional[Tuple[float, float]] = None,
) -> NeuralDegenerateModel:
    """Architecture presets: LV 3x30, MCP 2x50, GC 3x48 with the angular
    preprocessor, no final bias, and the Hamiltonian output rescale."""
    train_z, train_zdot = pairs.select(TRAIN)
    if experiment == "lv":
        return build_neural_model(1, [30, 30, 30], train_z, seed=seed, name="lv-neural")
    if experiment == "mcp":
        return build_neural_model(1, [50, 50], train_z, seed=seed, name="mcp-neural")
    if experiment == "gc":
        if h_rescale_override is not None:
            rescale = h_rescale_override
        else:
            speeds = np.linalg.norm(train_zdot, axis=1)
            rescale = (float(np.min(speeds)), float(np.max(speeds)))
        return build_neural_model(
            2,
            [48, 48, 48],
            train_z,
            angular=True,
            angular_k=6,
            final_bias=False,
            h_rescale=rescale,
            seed=seed,
            name="gc-neural",
        )
    raise ConfigError(f"unknown experiment {experiment!r}")


def gc_scheme_rescale(triples: TripleDataset) -> Tuple[float, float]:
    """Hamiltonian output range for scheme learning: extrema of |z2 - z1|/h."""
    z1, z2 = triples.z1, triples.z2
    speeds = np.linalg.norm(z2 - z1, axis=1) / triples.h
    return float(np.min(speeds)), float(np.max(speeds))
