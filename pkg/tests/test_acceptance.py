"""Acceptance suite: one test per criterion, one printed line each.

Run with ``pytest tests/test_acceptance.py -v -s``. The training-backed
criteria share session-scoped fixtures (three reduced Lotka-Volterra
trainings and two reduced guiding-center trainings); the full module takes
on the order of ten minutes with the compiled kernels.
"""

import numpy as np
import pytest

from degenlag import autodiff as ad
from degenlag.core import GaugeFunction, PhaseState, gauge_perturb, vector_field
from degenlag.integrate import (
    NewtonConfig,
    dvi_bootstrap,
    dvi_del_jacobian,
    dvi_residual,
    dvi_step,
    local_error_estimate,
    reference_solve,
    simulate,
)
from degenlag.models import (
    GuidingCenterModel,
    LotkaVolterraModel,
    MasslessParticleModel,
    OrbitClass,
    gc_classify_trajectory,
)
from degenlag.train import (
    VALIDATION,
    TrainConfig,
    TrainPhase,
    _assemble_w,
    _batched_first_order,
    _guarded_solve,
    build_experiment_model,
    gen_dataset_gc,
    gen_dataset_lv,
    gram_inverse_sqrt,
    loss_scheme,
    loss_vf,
    run_training,
)

T_DT = 37974.6


def report(name: str, ok: bool, detail: str) -> None:
    print(f"[acceptance] {name}: {'PASS' if ok else 'FAIL'} - {detail}", flush=True)
    assert ok, f"{name}: {detail}"


def cos2x_gauge() -> GaugeFunction:
    return GaugeFunction(
        value=lambda x: 0.5 * np.cos(2.0 * x),
        jacobian=lambda x: np.diag(-np.sin(2.0 * x)),
        hessian=lambda x: np.diag(-2.0 * np.cos(2.0 * x)).reshape(x.size, x.size, x.size),
    )


# ---------------------------------------------------------------------------
# Shared reduced trainings
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def lv_data():
    return gen_dataset_lv(n_traj=500, seed=0)


@pytest.fixture(scope="session")
def lv_validation_ics(lv_data):
    pairs, _ = lv_data
    mask = pairs.split == VALIDATION
    ids = np.unique(pairs.traj_id[mask])
    ics = [pairs.z[np.where(pairs.traj_id == t)[0][0]] for t in ids]
    return np.asarray(ics)[:20]


def _train_lv(lv_data, loss, epsilon):
    pairs, triples = lv_data
    model = build_experiment_model("lv", pairs, seed=1)
    config = TrainConfig(
        phases=[TrainPhase(20, 1e-2), TrainPhase(200, 1e-3)],
        loss=loss,
        epsilon=epsilon,
        batch_size=500,
        seed=1,
    )
    dataset = pairs if loss.startswith("vf") else triples
    run = run_training(config, dataset, model)
    assert not run.aborted
    return run


@pytest.fixture(scope="session")
def lv_vf_regularized(lv_data):
    return _train_lv(lv_data, "vf", 1e-6)


@pytest.fixture(scope="session")
def lv_vf_unregularized(lv_data):
    return _train_lv(lv_data, "vf", 0.0)


@pytest.fixture(scope="session")
def lv_scheme_model(lv_data):
    return _train_lv(lv_data, "scheme", 1e-8)


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------


def test_criterion_scheme_orders():
    """DVI converges at order one and RK4 at order four on Lotka-Volterra."""
    model = LotkaVolterraModel()
    z0 = PhaseState([1.0], [1.0])
    ref = reference_solve(model, z0, (0.0, 1.0), 1e-12, 1e-14, t_eval=[0.0, 1.0]).states[-1]
    ladder = [0.05, 0.025, 0.0125, 0.00625]
    slopes = {}
    for scheme in ("dvi", "rk4"):
        errs = [
            np.linalg.norm(simulate(model, z0, h, round(1 / h), scheme=scheme).states[-1] - ref)
            for h in ladder
        ]
        slopes[scheme] = np.polyfit(np.log(ladder), np.log(errs), 1)[0]
    ok = abs(slopes["dvi"] - 1.0) <= 0.15 and abs(slopes["rk4"] - 4.0) <= 0.3
    report(
        "scheme orders",
        ok,
        f"DVI slope {slopes['dvi']:.3f} (1.0 +/- 0.15), RK4 slope {slopes['rk4']:.3f} (4.0 +/- 0.3)",
    )


def test_criterion_long_time_split():
    """At h=0.2 the DVI stays on a bounded orbit with trendless energy error
    while RK4 drifts monotonically past 1% within 250k steps."""
    model = LotkaVolterraModel()
    z0 = PhaseState([1.0], [1.0])

    dvi = simulate(model, z0, 0.2, 100_000, scheme="dvi")
    assert not dvi.diverged
    bounded = np.max(np.abs(dvi.states)) < 20.0
    rel = np.abs(dvi.energies - 2.0) / 2.0
    # Trend test on block means over the last 80% of the run: oscillatory
    # residuals are averaged out within blocks so the OLS slope error bar
    # is meaningful.
    n0 = int(0.2 * len(rel))
    t, y = dvi.times[n0:], rel[n0:]
    nb = len(y) // 1000
    tb = t[: nb * 1000].reshape(nb, 1000).mean(axis=1)
    yb = y[: nb * 1000].reshape(nb, 1000).mean(axis=1)
    design = np.vander(tb, 2)
    coef, *_ = np.linalg.lstsq(design, yb, rcond=None)
    resid = yb - design @ coef
    slope_se = np.sqrt(
        np.sum(resid**2) / (len(yb) - 2) / np.sum((tb - tb.mean()) ** 2)
    )
    trendless = abs(coef[0]) < 3.0 * slope_se

    rk4 = simulate(model, z0, 0.2, 250_000, scheme="rk4", record_every=100)
    drift = np.abs(rk4.energies - 2.0) / 2.0
    exceeded = np.argmax(drift > 0.01)
    crossed = drift[exceeded] > 0.01 and exceeded > 0
    monotone = np.all(np.diff(rk4.energies[:: 10]) < 0)

    ok = bounded and trendless and crossed and monotone
    report(
        "long-time qualitative split",
        ok,
        f"DVI bounded={bounded}, |slope|/se={abs(coef[0]) / slope_se:.2f} (<3), "
        f"RK4 drift >1% at step ~{int(rk4.times[exceeded] / 0.2)} (<250k), monotone={monotone}",
    )


def test_criterion_gauge_dichotomy():
    """Identical vector fields and RK4 runs; the DVI separates under the
    cos(2x)/2 gauge shift."""
    model = LotkaVolterraModel()
    pert = gauge_perturb(model, cos2x_gauge())
    rng = np.random.default_rng(2024)

    worst_vf = 0.0
    for _ in range(100):
        z = PhaseState(rng.uniform(0.3, 6.0, 1), rng.uniform(0.2, 4.0, 1))
        v0, v1 = vector_field(model, z), vector_field(pert, z)
        worst_vf = max(worst_vf, np.max(np.abs(v1 - v0)) / max(np.max(np.abs(v0)), 1e-30))
    fields_equal = worst_vf < 1e-12

    z0 = PhaseState([4.0], [3.0])
    rk_a = simulate(model, z0, 0.1, 100, scheme="rk4", backend="python")
    rk_b = simulate(pert, z0, 0.1, 100, scheme="rk4")
    rk4_equal = np.max(np.abs(rk_a.states - rk_b.states)) < 1e-10

    dvi_a = simulate(model, z0, 0.1, 100, scheme="dvi", backend="python")
    dvi_b = simulate(pert, z0, 0.1, 100, scheme="dvi")
    if dvi_b.diverged or len(dvi_b) < len(dvi_a):
        # The perturbed scheme equations lose their nearby root entirely at
        # this step size: the run truncates, an unbounded difference.
        dvi_difference = np.inf
    else:
        dvi_difference = np.max(np.abs(dvi_a.states - dvi_b.states)) / np.max(np.abs(dvi_a.states))
    dvi_split = dvi_difference > 0.10

    # Quantitative variant at the largest step where the perturbed run
    # survives 100 steps.
    small_a = simulate(model, z0, 0.0125, 100, scheme="dvi", backend="python")
    small_b = simulate(pert, z0, 0.0125, 100, scheme="dvi")
    small_diff = np.max(np.abs(small_a.states - small_b.states)) / np.max(np.abs(small_a.states))

    ok = fields_equal and rk4_equal and dvi_split and small_diff > 0.10
    report(
        "gauge dichotomy",
        ok,
        f"vf rel diff {worst_vf:.1e} (<1e-12), RK4 equal={rk4_equal}, "
        f"DVI(h=0.1) rel sup diff {dvi_difference} (>0.1; inf = perturbed run truncated), "
        f"DVI(h=0.0125) rel sup diff {small_diff:.3f} (>0.1)",
    )


LOCAL_ERROR_CASES = [
    ("lotka-volterra", LotkaVolterraModel(), (2e-2, 1e-2, 5e-3)),
    ("massless-particle", MasslessParticleModel(), (2e-2, 1e-2, 5e-3)),
    ("guiding-center", GuidingCenterModel(), (500.0, 250.0, 125.0)),
]


@pytest.mark.parametrize("name,model,ladder", LOCAL_ERROR_CASES, ids=lambda c: str(c))
def test_criterion_local_error_law(name, model, ladder):
    """The one-step error minus (h^2/2) r shrinks at least like h^2.7."""
    rng = np.random.default_rng(77)
    slopes = []
    for _ in range(10):
        if name == "lotka-volterra":
            z0 = PhaseState(rng.uniform(0.5, 4.0, 1), rng.uniform(0.5, 3.0, 1))
        elif name == "massless-particle":
            z0 = PhaseState(rng.uniform(-2, 2, 1), rng.uniform(-2, 2, 1))
        else:
            z0 = PhaseState(
                np.array([rng.uniform(-0.3, 0.3), rng.uniform(0, 2 * np.pi)]),
                np.array([rng.uniform(0.03, 0.055), rng.uniform(-9e-4, -3e-4)]),
            )
        r = local_error_estimate(model, z0, vector_field(model, z0))
        rems = []
        for h in ladder:
            exact = reference_solve(
                model, z0, (0.0, h), 1e-13, 1e-15, t_eval=[0.0, h], backend="python"
            ).states[-1]
            ws = dvi_bootstrap(model, z0, h)
            step, _, _ = dvi_step(model, ws, NewtonConfig(abs_tol=1e-15, max_iter=80))
            rems.append(np.linalg.norm(exact - step.z - (h * h / 2.0) * r))
        slopes.append(np.polyfit(np.log(ladder), np.log(rems), 1)[0])
    worst = min(slopes)
    report(
        f"local-error law [{name}]",
        worst >= 2.7,
        f"remainder slopes in [{worst:.2f}, {max(slopes):.2f}] (>= 2.7)",
    )


JACOBIAN_CASES = [
    ("lotka-volterra", LotkaVolterraModel(), (0.01, 0.2)),
    ("massless-particle", MasslessParticleModel(), (0.05, 0.5)),
    ("guiding-center", GuidingCenterModel(), (50.0, 2000.0)),
]


@pytest.mark.parametrize("name,model,h_range", JACOBIAN_CASES, ids=lambda c: str(c))
def test_criterion_del_jacobian(name, model, h_range):
    """The residual Jacobian matches central finite differences to 1e-5."""
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(50):
        if name == "lotka-volterra":
            z1 = PhaseState(rng.uniform(0.3, 6.0, 1), rng.uniform(0.2, 4.0, 1))
        elif name == "massless-particle":
            z1 = PhaseState(rng.uniform(-3, 3, 1), rng.uniform(-3, 3, 1))
        else:
            z1 = PhaseState(
                np.array([rng.uniform(-np.pi, np.pi), rng.uniform(0, 2 * np.pi)]),
                np.array([rng.uniform(0.02, 0.09), rng.uniform(-1e-3, 1e-3)]),
            )
        scale = np.abs(z1.z) * 0.02 + 1e-4
        z0 = PhaseState.from_z(z1.z + rng.normal(0, 1, 2 * model.dimension) * scale)
        z2 = PhaseState.from_z(z1.z + rng.normal(0, 1, 2 * model.dimension) * scale)
        h = rng.uniform(*h_range)
        jac = dvi_del_jacobian(model, z0, z1, z2, h)
        fd = np.zeros_like(jac)
        for k in range(2 * model.dimension):
            e = np.zeros(2 * model.dimension)
            e[k] = 1e-6
            rp = dvi_residual(model, z0, z1, PhaseState.from_z(z2.z + e), h)
            rm = dvi_residual(model, z0, z1, PhaseState.from_z(z2.z - e), h)
            fd[:, k] = (rp - rm) / 2e-6
        worst = max(worst, np.max(np.abs(jac - fd)) / max(np.max(np.abs(fd)), 1e-8))
    report(
        f"DEL Jacobian [{name}]", worst < 1e-5, f"max rel FD mismatch {worst:.2e} (< 1e-5)"
    )


def _gl20_integral_error(rho: float, power: int) -> float:
    import mpmath

    t, w = np.polynomial.legendre.leggauss(20)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w
    gl = float(np.sum(w * t**power / (1.0 + rho * t) ** power))
    with mpmath.workdps(30):
        exact = float(mpmath.quad(lambda s: s**power / (1 + rho * s) ** power, [0, 1]))
    return abs(gl - exact)


def test_criterion_quadrature_range():
    """20-point Gauss-Legendre error below 1e-10 across rho in [-0.8, 0.9]."""
    worst = max(_gl20_integral_error(rho, 2) for rho in np.linspace(-0.8, 0.9, 18))
    report(
        "quadrature accuracy (range)",
        worst < 1e-10,
        f"max |GL20 - oracle| over rho grid = {worst:.2e} (< 1e-10)",
    )


def test_criterion_quadrature_endpoint():
    """Endpoint bound at rho = -0.9: unattainable for the second integral.

    The criterion inherits the value 1.7e-11, which (verified with exact
    Legendre nodes in 40-digit arithmetic) is the truncation error of the
    *first* poloidal integral at rho = -0.9; the second integral's intrinsic
    GL-20 truncation there is 2.35e-9, two orders above the 5e-11 bound, so
    the bound cannot be met by any correct 20-point rule. Recorded as a
    strict expected failure; see the decisions ledger.
    """
    err2 = _gl20_integral_error(-0.9, 2)
    err1 = _gl20_integral_error(-0.9, 1)
    ok = err2 < 5e-11
    print(
        f"[acceptance] quadrature accuracy (endpoint rho=-0.9): {'PASS' if ok else 'FAIL'} - "
        f"A_theta,theta integral error {err2:.3e} (criterion < 5e-11); "
        f"A_theta integral error {err1:.3e} does satisfy the bound",
        flush=True,
    )
    if not ok:
        pytest.xfail(
            f"intrinsic GL-20 truncation at rho=-0.9 is {err2:.2e} for the second integral; "
            "the paper's 1.7e-11 belongs to the first integral (decisions ledger)"
        )


def test_criterion_gc_misclassification():
    """The DVI at h = T_DT/20 misreads the barely-trapped orbit as passing;
    the reference flow keeps it trapped, and DT stays trapped under both."""
    model = GuidingCenterModel()
    h = T_DT / 20.0

    def classify_dvi(u0):
        traj = simulate(model, PhaseState([0.0, 0.0], [0.05, u0]), h, 30_000, scheme="dvi")
        assert not traj.diverged
        return gc_classify_trajectory(traj.states)

    def classify_ref(u0):
        t_eval = np.linspace(0.0, 20 * T_DT, 2001)
        ref = reference_solve(
            model, PhaseState([0.0, 0.0], [0.05, u0]), (0.0, 20 * T_DT), t_eval=t_eval
        )
        return gc_classify_trajectory(ref.states)

    bt_dvi = classify_dvi(-7.610e-4)
    bt_ref = classify_ref(-7.610e-4)
    dt_dvi = classify_dvi(-4.306e-4)
    dt_ref = classify_ref(-4.306e-4)
    ok = (
        bt_dvi is OrbitClass.PASSING
        and bt_ref is OrbitClass.TRAPPED
        and dt_dvi is OrbitClass.TRAPPED
        and dt_ref is OrbitClass.TRAPPED
    )
    report(
        "GC reference misclassification",
        ok,
        f"BT: DVI={bt_dvi.value} (expect passing), ref={bt_ref.value} (expect trapped); "
        f"DT: DVI={dt_dvi.value}, ref={dt_ref.value} (both trapped)",
    )


def _nondivergent_fraction(model, ics):
    ok = 0
    for z in ics:
        traj = simulate(model, PhaseState.from_z(z), 0.1, 200, scheme="dvi")
        ok += int(not traj.diverged)
    return ok / len(ics)


def test_criterion_training_regularization(
    lv_vf_regularized, lv_vf_unregularized, lv_validation_ics
):
    """Reduced vector-field training: the regularized model stays DVI-stable
    and its monitored regularization trace ends well below the eps = 0 run."""
    frac_reg = _nondivergent_fraction(lv_vf_regularized.model, lv_validation_ics)
    frac_noreg = _nondivergent_fraction(lv_vf_unregularized.model, lv_validation_ics)
    reg_end = np.mean([r["reg_term"] for r in lv_vf_regularized.trace[-10:]])
    noreg_end = np.mean([r["reg_term"] for r in lv_vf_unregularized.trace[-10:]])
    ratio = noreg_end / reg_end
    ok = frac_reg >= 0.90 and ratio >= 5.0
    report(
        "training regularization effect",
        ok,
        f"non-divergent: regularized {frac_reg:.0%} (>= 90%), unregularized {frac_noreg:.0%}; "
        f"final reg-term {reg_end:.1f} vs {noreg_end:.1f} (ratio {ratio:.1f} >= 5)",
    )


def test_criterion_scheme_superiority(lv_scheme_model, lv_vf_regularized, lv_validation_ics):
    """At its training step the scheme-learning model beats vector-field
    learning under the DVI; at h/8 the ordering reverses."""
    truth = LotkaVolterraModel()
    refs = [
        reference_solve(truth, PhaseState.from_z(z), (0.0, 10.0), t_eval=[0.0, 10.0]).states[-1]
        for z in lv_validation_ics
    ]

    def median_error(model, h):
        n = round(10.0 / h)
        errs = []
        for z, ref in zip(lv_validation_ics, refs):
            traj = simulate(model, PhaseState.from_z(z), h, n, scheme="dvi")
            if traj.diverged or len(traj) != n + 1:
                errs.append(np.inf)
            else:
                errs.append(np.linalg.norm(traj.states[-1] - ref))
        return float(np.median(errs))

    sch_coarse = median_error(lv_scheme_model.model, 0.1)
    vf_coarse = median_error(lv_vf_regularized.model, 0.1)
    sch_fine = median_error(lv_scheme_model.model, 0.0125)
    vf_fine = median_error(lv_vf_regularized.model, 0.0125)
    ok = sch_coarse < vf_coarse and vf_fine < sch_fine
    report(
        "scheme-learning superiority at its own step",
        ok,
        f"h=0.1 median: scheme {sch_coarse:.3e} < vf {vf_coarse:.3e}; "
        f"h=0.0125 median: vf {vf_fine:.3e} < scheme {sch_fine:.3e} (plateau)",
    )


def test_criterion_gradient_integrity():
    """Parameter gradients of both losses match finite differences to 1e-4
    on two-parameter toy models."""
    from test_train import ToyDegenerate

    rng = np.random.default_rng(3)
    z = np.column_stack([rng.uniform(0.4, 2.0, 12), rng.uniform(0.4, 2.0, 12)])
    zdot = rng.normal(size=z.shape) * 0.5
    z1 = np.column_stack([rng.uniform(0.6, 1.8, 8), rng.uniform(0.6, 1.8, 8)])
    z0 = z1 - 0.05 * rng.normal(size=z1.shape)
    z2 = z1 + 0.05 * rng.normal(size=z1.shape)

    worst = 0.0
    for loss_name in ("vf", "scheme"):
        toy = ToyDegenerate(a=1.1, b=0.8)

        def loss_at(a, b):
            params = [np.array([a]), np.array([b])]
            if loss_name == "vf":
                loss, _ = loss_vf(toy, z, zdot, params, epsilon=1e-2)
            else:
                loss, _ = loss_scheme(toy, z0, z1, z2, 0.1, params, epsilon=1e-3)
            return float(ad.val(loss))

        leaves = [ad.var(p) for p in toy.params]
        if loss_name == "vf":
            loss, _ = loss_vf(toy, z, zdot, leaves, epsilon=1e-2)
        else:
            loss, _ = loss_scheme(toy, z0, z1, z2, 0.1, leaves, epsilon=1e-3)
        grads = ad.backward(loss, leaves)
        step = 1e-6
        fd_a = (loss_at(1.1 + step, 0.8) - loss_at(1.1 - step, 0.8)) / (2 * step)
        fd_b = (loss_at(1.1, 0.8 + step) - loss_at(1.1, 0.8 - step)) / (2 * step)
        worst = max(
            worst,
            abs(grads[0][0] - fd_a) / max(abs(fd_a), 1e-12),
            abs(grads[1][0] - fd_b) / max(abs(fd_b), 1e-12),
        )
    report("gradient integrity", worst < 1e-4, f"max rel FD mismatch {worst:.2e} (< 1e-4)")


@pytest.fixture(scope="session")
def gc_ablation():
    pairs, _ = gen_dataset_gc(n_traj=60, steps=20, seed=0)
    phases = [TrainPhase(20, 1e-2), TrainPhase(600, 1e-3), TrainPhase(300, 1e-4)]
    out = {}
    for label, use_gram in [("gram", True), ("nogram", False)]:
        model = build_experiment_model("gc", pairs, seed=0)
        config = TrainConfig(
            phases=phases, loss="vf", epsilon=0.0, batch_size=126, seed=0,
            use_gram=use_gram, monitor_reg=False,
        )
        run_training(config, pairs, model)
        zv_, zd_ = pairs.select(VALIDATION)
        zv = ad.var(zv_)
        _, _, d_theta, d_h = _batched_first_order(model, zv, model.params, create_graph=False)
        w = _assemble_w(d_theta, 2)
        grad_h = ad.reshape(d_h, (len(zv_), 4))
        f, _bad = _guarded_solve(ad.var(ad.val(w)), ad.val(grad_h))
        f = ad.val(f)
        out[label] = float(np.mean((f[:, 3] - zd_[:, 3]) ** 2) / np.mean(zd_[:, 3] ** 2))
    return out


def test_criterion_gram_norm_algebra(gc_ablation):
    """Inverse-square-root identity on random second-moment matrices, and
    the multiscale necessity: dropping the Gram norm degrades the smallest
    component (parallel velocity) of the guiding-center fit."""
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        vecs = rng.normal(size=(30, 4)) * rng.uniform(1e-4, 10.0, 4)
        gram = gram_inverse_sqrt(vecs)
        ident = gram.inv_sqrt @ gram.matrix @ gram.inv_sqrt
        worst = max(worst, np.max(np.abs(ident - np.eye(4))))
    algebra_ok = worst < 1e-8

    ordering_ok = gc_ablation["nogram"] > gc_ablation["gram"]
    report(
        "Gram-norm algebra and multiscale necessity",
        algebra_ok and ordering_ok,
        f"max |M^-1/2 M M^-1/2 - I| = {worst:.2e} (< 1e-8); GC u-component validation "
        f"error without Gram {gc_ablation['nogram']:.2f} > with Gram {gc_ablation['gram']:.2f}",
    )
