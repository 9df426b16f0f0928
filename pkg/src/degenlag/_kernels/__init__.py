"""Hot-kernel backend selection.

Analytic-model evaluation and the tight stepping loops (RK4, DVI Newton,
adaptive Dormand-Prince) dominate the runtime of long simulations. When the
Cython extension ``degenlag._kernels._compiled`` is importable it serves
those loops for the built-in analytic models; otherwise, and for any model
without a kernel code (neural nets, gauge-perturbed or wrapped models), the
generic pure-Python implementations in :mod:`degenlag.integrate` run.

Set ``DEGENLAG_PURE_PYTHON=1`` to force the fallback (used by the
benchmark to compare both backends in one process).
"""

from __future__ import annotations

import os
from typing import Optional, Tuple

import numpy as np

KIND_LOTKA_VOLTERRA = 1
KIND_MASSLESS_PARTICLE = 2
KIND_GUIDING_CENTER = 3

try:
    from . import _compiled  # type: ignore[attr-defined]
except ImportError:  # pragma: no cover - depends on build environment
    _compiled = None


def compiled_available() -> bool:
    if os.environ.get("DEGENLAG_PURE_PYTHON", "") not in ("", "0"):
        return False
    return _compiled is not None


def backend_name() -> str:
    return "compiled" if compiled_available() else "python"


KernelSpec = Tuple[int, np.ndarray]


def spec_for(model) -> Optional[KernelSpec]:
    """Kernel code and parameter vector for models with a compiled twin."""
    from ..models import GuidingCenterModel, LotkaVolterraModel, MasslessParticleModel

    if type(model) is LotkaVolterraModel:
        return KIND_LOTKA_VOLTERRA, np.zeros(0)
    if type(model) is MasslessParticleModel:
        return KIND_MASSLESS_PARTICLE, np.array([model.a0, model.e0])
    if type(model) is GuidingCenterModel:
        params = np.concatenate(
            [
                np.array([model.b0, model.r0, model.q0, model.mu]),
                model._nodes,
                model._weights,
            ]
        )
        return KIND_GUIDING_CENTER, params
    return None


def evaluate(spec: KernelSpec, z: np.ndarray, order: int):
    """Compiled model evaluation: (theta, H, dxth, dyth, gxh, gyh, th_zz, h_zz)."""
    kind, params = spec
    return _compiled.evaluate(kind, params, np.asarray(z, dtype=float), order)


def trajectory(spec, z0, h, n_steps, scheme, abs_tol, max_iter, damping, record_every):
    kind, params = spec
    scheme_code = 0 if scheme == "rk4" else 1
    return _compiled.trajectory(
        kind,
        params,
        np.asarray(z0, dtype=float),
        float(h),
        int(n_steps),
        scheme_code,
        float(abs_tol),
        int(max_iter),
        float(damping),
        int(record_every),
    )


def dopri(spec, z0, t0, t1, t_eval, rtol, atol, max_steps):
    kind, params = spec
    t_eval_arr = (
        np.asarray(t_eval, dtype=float) if t_eval is not None else np.zeros(0)
    )
    return _compiled.dopri(
        kind,
        params,
        np.asarray(z0, dtype=float),
        float(t0),
        float(t1),
        t_eval_arr,
        1 if t_eval is not None else 0,
        float(rtol),
        float(atol),
        int(max_steps),
    )
