import numpy as np
import pytest

from degenlag.core import (
    GaugeFunction,
    ModelEvaluation,
    Order,
    PhaseState,
    SecondOrderBlock,
    gauge_perturb,
    gradient,
    symplectic_form,
    vector_field,
)
from degenlag.models import (
    GuidingCenterModel,
    LotkaVolterraModel,
    MasslessParticleModel,
    canonical_wrapper,
    harmonic_oscillator,
)


def lv_points(rng, n):
    return [PhaseState(rng.uniform(0.3, 6.0, 1), rng.uniform(0.2, 4.0, 1)) for _ in range(n)]


def mcp_points(rng, n):
    return [PhaseState(rng.uniform(-3, 3, 1), rng.uniform(-3, 3, 1)) for _ in range(n)]


def gc_points(rng, n):
    return [
        PhaseState(
            np.array([rng.uniform(-np.pi, np.pi), rng.uniform(0, 2 * np.pi)]),
            np.array([rng.uniform(0.02, 0.09), rng.uniform(-1e-3, 1e-3)]),
        )
        for _ in range(n)
    ]


ALL_MODELS = [
    (LotkaVolterraModel(), lv_points),
    (MasslessParticleModel(), mcp_points),
    (GuidingCenterModel(), gc_points),
    (harmonic_oscillator(), mcp_points),
]


class TestPhaseState:
    def test_shapes_and_dimension(self):
        s = PhaseState([1.0, 2.0], [3.0, 4.0])
        assert s.d == 2
        assert np.array_equal(s.z, [1.0, 2.0, 3.0, 4.0])

    def test_rejects_mismatched_lengths(self):
        with pytest.raises(ValueError):
            PhaseState([1.0, 2.0], [3.0])

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            PhaseState([np.nan], [1.0])
        with pytest.raises(ValueError):
            PhaseState([1.0], [np.inf])

    def test_roundtrip_from_z(self):
        s = PhaseState.from_z(np.array([1.0, 2.0, 3.0, 4.0]))
        assert np.array_equal(s.x, [1.0, 2.0])
        assert np.array_equal(s.y, [3.0, 4.0])


class TestModelEvaluation:
    def test_rejects_asymmetric_second_order(self):
        theta_zz = np.zeros((1, 2, 2))
        theta_zz[0, 0, 1] = 1.0  # not mirrored
        with pytest.raises(ValueError):
            ModelEvaluation(
                theta=np.zeros(1),
                hamiltonian=0.0,
                d_x_theta=np.zeros((1, 1)),
                d_y_theta=np.eye(1),
                grad_x_h=np.zeros(1),
                grad_y_h=np.zeros(1),
                second_order=SecondOrderBlock(theta_zz=theta_zz, h_zz=np.zeros((2, 2))),
            )

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            ModelEvaluation(theta=np.zeros(2), hamiltonian=0.0, d_x_theta=np.zeros((1, 1)))


class TestSymplecticForm:
    def test_canonical_block(self):
        model = harmonic_oscillator()
        w = symplectic_form(model, PhaseState([0.3], [-0.7]))
        assert np.array_equal(w, [[0.0, -1.0], [1.0, 0.0]])

    def test_lv_off_diagonal_entry(self):
        # d theta / dy = -1/(x y) = -1 at (1, 1), so W[0, 1] = 1.
        w = symplectic_form(LotkaVolterraModel(), PhaseState([1.0], [1.0]))
        assert w[0, 1] == pytest.approx(1.0, rel=1e-14)

    @pytest.mark.parametrize("model,points", ALL_MODELS, ids=lambda m: getattr(m, "name", ""))
    def test_exact_skewness(self, model, points):
        rng = np.random.default_rng(11)
        for z in points(rng, 20):
            w = symplectic_form(model, z)
            assert np.max(np.abs(w + w.T)) == 0.0


class TestVectorField:
    def test_lv_fixed_point(self):
        assert np.allclose(vector_field(LotkaVolterraModel(), PhaseState([2.0], [1.0])), 0.0)

    def test_lv_known_values(self):
        assert vector_field(LotkaVolterraModel(), PhaseState([1.0], [1.0])) == pytest.approx(
            [0.0, -1.0]
        )
        assert vector_field(LotkaVolterraModel(), PhaseState([4.0], [3.0])) == pytest.approx(
            [-8.0, 6.0]
        )

    def test_canonical_wrapper_value(self):
        # H = (x^2 + y^2)/2 at (1, 0): W zdot = grad H gives zdot = (0, -1).
        vf = vector_field(harmonic_oscillator(), PhaseState([1.0], [0.0]))
        assert vf == pytest.approx([0.0, -1.0])

    @pytest.mark.parametrize("model,points", ALL_MODELS, ids=lambda m: getattr(m, "name", ""))
    def test_defining_identity(self, model, points):
        # W(z) . vector_field(z) = grad H(z), the inversion being exact.
        rng = np.random.default_rng(7)
        for z in points(rng, 30):
            w = symplectic_form(model, z)
            g = gradient(model, z)
            resid = w @ vector_field(model, z) - g
            scale = max(np.max(np.abs(g)), 1e-30)
            assert np.max(np.abs(resid)) <= 1e-10 * max(scale, 1.0)


class TestGaugePerturb:
    def test_zero_gauge_identity(self):
        model = LotkaVolterraModel()
        zero = GaugeFunction(
            value=lambda x: np.zeros_like(x),
            jacobian=lambda x: np.zeros((1, 1)),
            hessian=lambda x: np.zeros((1, 1, 1)),
        )
        pert = gauge_perturb(model, zero)
        z = PhaseState([1.3], [0.8])
        a = model.evaluate(z, Order.SECOND)
        b = pert.evaluate(z, Order.SECOND)
        assert np.array_equal(a.theta, b.theta)
        assert np.array_equal(a.d_x_theta, b.d_x_theta)
        assert np.array_equal(a.second_order.theta_zz, b.second_order.theta_zz)

    def test_cosine_gauge_preserves_vector_field(self):
        # theta <- theta + cos(2x)/2 leaves the continuous dynamics alone.
        model = LotkaVolterraModel()
        pert = gauge_perturb(model, cos2x_gauge())
        rng = np.random.default_rng(3)
        worst = 0.0
        for z in lv_points(rng, 100):
            v0 = vector_field(model, z)
            v1 = vector_field(pert, z)
            worst = max(worst, np.max(np.abs(v1 - v0)) / max(np.max(np.abs(v0)), 1e-30))
        assert worst < 1e-12

    def test_gauge_shifts_theta_and_derivatives(self):
        model = LotkaVolterraModel()
        pert = gauge_perturb(model, cos2x_gauge())
        z = PhaseState([0.9], [1.7])
        a = model.evaluate(z, Order.SECOND)
        b = pert.evaluate(z, Order.SECOND)
        x = z.x[0]
        assert b.theta[0] - a.theta[0] == pytest.approx(0.5 * np.cos(2 * x), rel=1e-14)
        assert b.d_x_theta[0, 0] - a.d_x_theta[0, 0] == pytest.approx(-np.sin(2 * x), rel=1e-13)
        assert b.second_order.theta_zz[0, 0, 0] - a.second_order.theta_zz[0, 0, 0] == pytest.approx(
            -2.0 * np.cos(2 * x), rel=1e-13
        )
        assert b.hamiltonian == a.hamiltonian

    def test_canonical_wrapper_gauge_invariant_field(self):
        model = harmonic_oscillator()
        pert = gauge_perturb(model, cos2x_gauge())
        rng = np.random.default_rng(5)
        for z in mcp_points(rng, 20):
            assert vector_field(pert, z) == pytest.approx(vector_field(model, z), abs=1e-14)


def cos2x_gauge() -> GaugeFunction:
    return GaugeFunction(
        value=lambda x: 0.5 * np.cos(2.0 * x),
        jacobian=lambda x: np.diag(-np.sin(2.0 * x)),
        hessian=lambda x: np.diag(-2.0 * np.cos(2.0 * x)).reshape(x.size, x.size, x.size),
    )
