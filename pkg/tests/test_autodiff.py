import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from degenlag import autodiff as ad


def fd_grad(f, x, step=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = step
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-6)


small_arrays = st.lists(
    st.floats(min_value=-2.0, max_value=2.0, allow_nan=False), min_size=2, max_size=6
).map(lambda v: np.asarray(v))

positive_arrays = st.lists(
    st.floats(min_value=0.2, max_value=3.0, allow_nan=False), min_size=2, max_size=6
).map(lambda v: np.asarray(v))


class TestPrimitiveGradients:
    """Each primitive matches a central finite-difference oracle (step 1e-6)."""

    @settings(max_examples=25, deadline=None)
    @given(small_arrays, small_arrays)
    def test_add_mul(self, a, b):
        n = min(a.size, b.size)
        a, b = a[:n], b[:n]

        def f(x):
            v = ad.var(x)
            return float(ad.val(ad.sum_(ad.mul(ad.add(v, b), ad.mul(v, a)))))

        v = ad.var(a)
        out = ad.sum_(ad.mul(ad.add(v, b), ad.mul(v, a)))
        (g,) = ad.backward(out, [v])
        assert rel(g, fd_grad(f, a)) < 1e-5

    @settings(max_examples=25, deadline=None)
    @given(small_arrays)
    def test_tanh_cos(self, a):
        def build(v):
            return ad.sum_(ad.mul(ad.tanh(v), ad.cos(v)))

        v = ad.var(a)
        (g,) = ad.backward(build(v), [v])
        assert rel(g, fd_grad(lambda x: float(ad.val(build(ad.var(x)))), a)) < 1e-5

    @settings(max_examples=25, deadline=None)
    @given(positive_arrays)
    def test_log_reciprocal_sqrt(self, a):
        def build(v):
            return ad.sum_(ad.add(ad.log(v), ad.add(ad.reciprocal(v), ad.sqrt(v))))

        v = ad.var(a)
        (g,) = ad.backward(build(v), [v])
        assert rel(g, fd_grad(lambda x: float(ad.val(build(ad.var(x)))), a)) < 1e-5

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=1, max_value=4), st.integers(min_value=1, max_value=4))
    def test_matmul(self, n, m):
        rng = np.random.default_rng(n * 7 + m)
        a = rng.normal(size=(n, m))
        b = rng.normal(size=(m, n))

        def build(v):
            return ad.sum_(ad.square(ad.matmul(v, b)))

        v = ad.var(a)
        (g,) = ad.backward(build(v), [v])
        assert rel(g, fd_grad(lambda x: float(ad.val(build(ad.var(x)))), a)) < 1e-5

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=1000))
    def test_linear_solve(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(3, 3)) + 3.0 * np.eye(3)
        b = rng.normal(size=3)

        def build(av, bv):
            return ad.sum_(ad.square(ad.solve(av, bv)))

        av, bv = ad.var(a), ad.var(b)
        ga, gb = ad.backward(build(av, bv), [av, bv])
        assert rel(ga, fd_grad(lambda x: float(ad.val(build(ad.var(x), bv))), a)) < 1e-5
        assert rel(gb, fd_grad(lambda x: float(ad.val(build(av, ad.var(x)))), b)) < 1e-5

    def test_batched_solve(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(5, 2, 2)) + 3.0 * np.eye(2)
        b = rng.normal(size=(5, 2))
        av = ad.var(a)
        out = ad.sum_(ad.square(ad.solve(av, b)))
        (ga,) = ad.backward(out, [av])
        fd = fd_grad(lambda x: float(ad.val(ad.sum_(ad.square(ad.solve(ad.var(x), b))))), a)
        assert rel(ga, fd) < 1e-5


class TestInputJacobian:
    def test_identity(self):
        assert np.array_equal(ad.input_jacobian(lambda z: z, np.array([1.0, 2.0])), np.eye(2))

    def test_hand_chain_rule(self):
        # f(z) = (z1 z2, z1^2) at (2, 3) -> [[3, 2], [4, 0]].
        def f(z):
            return ad.stack([ad.mul(z[0], z[1]), ad.square(z[0])])

        jac = ad.input_jacobian(f, np.array([2.0, 3.0]))
        assert np.allclose(jac, [[3.0, 2.0], [4.0, 0.0]])

    def test_random_mlp_vs_finite_differences(self):
        from degenlag.nn import Mlp, MlpSpec

        rng = np.random.default_rng(0)
        mlp = Mlp(MlpSpec([3, 8, 8, 2]))
        params = mlp.init_params(rng)
        params = [rng.normal(size=p.shape) * 0.5 for p in params]

        def f(z):
            return ad.reshape(mlp.forward(ad.reshape(z, (1, 3)), params), (2,))

        z = rng.normal(size=3)
        jac = ad.input_jacobian(f, z)
        for i in range(2):
            fd = fd_grad(lambda x, i=i: float(ad.val(f(ad.var(x)))[i]), z)
            assert rel(jac[i], fd) < 1e-6


class TestParameterGradient:
    def test_quadratic_norm(self):
        theta = np.array([0.3, -1.2, 2.0])
        v = ad.var(theta)
        loss = ad.mul(0.5, ad.sum_(ad.square(v)))
        (g,) = ad.parameter_gradient(loss, [v])
        assert np.allclose(g, theta)

    def test_gradient_through_solve(self):
        rng = np.random.default_rng(8)
        theta = rng.normal(size=4)
        b = rng.normal(size=3)

        def loss_fn(tv):
            a = ad.add(
                3.0 * np.eye(3),
                ad.mul(tv[0], np.array([[0, 1.0, 0], [1.0, 0, 0], [0, 0, 1.0]])),
            )
            a = ad.add(a, ad.mul(tv[1], np.eye(3)))
            x = ad.solve(a, ad.mul(tv[2], b))
            return ad.sum_(ad.square(ad.mul(tv[3], x)))

        value, (g,) = ad.value_and_grad(lambda tv: loss_fn(tv), [theta])
        fd = fd_grad(lambda t: ad.value_and_grad(lambda tv: loss_fn(tv), [t])[0], theta)
        assert rel(g, fd) < 1e-5

    def test_rejects_non_scalar(self):
        v = ad.var(np.ones(3))
        with pytest.raises(ad.UnregisteredPrimitiveError):
            ad.parameter_gradient(v, [v])

    def test_unregistered_primitive(self):
        with pytest.raises(ad.UnregisteredPrimitiveError):
            ad.add(ad.var(1.0), "text")


class TestSecondOrder:
    def test_affine_is_zero(self):
        w = np.array([[1.0, 2.0], [3.0, 4.0]])

        def f(z):
            return ad.reshape(ad.matmul(ad.reshape(z, (1, 2)), w), (2,))

        assert np.max(np.abs(ad.second_order_eval(f, np.array([0.3, 0.7])))) == 0.0

    def test_mixed_partial_value(self):
        # f = z1^2 z2: d2f/dz1,dz2 = 2 z1 = 2 at (1, 1).
        def f(z):
            return ad.stack([ad.mul(ad.square(z[0]), z[1])])

        hess = ad.second_order_eval(f, np.array([1.0, 1.0]))
        assert hess[0, 0, 1] == pytest.approx(2.0, rel=1e-12)
        assert hess[0, 1, 0] == pytest.approx(2.0, rel=1e-12)

    def test_mlp_mixed_partials_symmetric(self):
        from degenlag.nn import Mlp, MlpSpec

        rng = np.random.default_rng(4)
        mlp = Mlp(MlpSpec([2, 10, 1]))
        params = [rng.normal(size=p.shape) for p in mlp.init_params(rng)]

        def f(z):
            return ad.reshape(mlp.forward(ad.reshape(z, (1, 2)), params), (1,))

        hess = ad.second_order_eval(f, rng.normal(size=2))[0]
        assert np.max(np.abs(hess - hess.T)) <= 1e-10 * max(np.max(np.abs(hess)), 1.0)


class TestNesting:
    def test_parameter_gradient_of_input_jacobian(self):
        # d/dtheta of the input Jacobian of f_theta, against finite
        # differences in theta.
        rng = np.random.default_rng(6)
        theta = rng.normal(size=3)
        z = rng.normal(size=2)

        def jac_entry(theta_arr):
            def f(zv):
                return ad.stack([ad.mul(theta_arr[0], ad.tanh(ad.mul(theta_arr[1], zv[0])))])

            tv = theta_arr if isinstance(theta_arr, ad.Var) else ad.var(theta_arr)

            def f2(zv):
                return ad.stack([ad.mul(tv[0], ad.tanh(ad.mul(tv[1], ad.mul(zv[0], zv[1]))))])

            zv = ad.var(z)
            out = f2(zv)
            (g,) = ad.backward(ad.reshape(out, (1,))[0], [zv], create_graph=True)
            return ad.sum_(ad.square(g)), tv

        def scalar(theta_arr):
            loss, _ = jac_entry(theta_arr)
            return float(ad.val(loss))

        tv = ad.var(theta)
        loss, tv_used = jac_entry(tv)
        (g,) = ad.backward(loss, [tv_used])
        fd = fd_grad(scalar, theta, step=1e-6)
        assert rel(g, fd) < 1e-4


class TestDeterminism:
    def test_bit_identical_replay(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(4, 4))
        b = rng.normal(size=4)

        def run():
            av, bv = ad.var(a.copy()), ad.var(b.copy())
            out = ad.sum_(ad.square(ad.solve(ad.add(av, 3.0 * np.eye(4)), ad.tanh(bv))))
            ga, gb = ad.backward(out, [av, bv])
            return float(ad.val(out)), ga.copy(), gb.copy()

        v1, ga1, gb1 = run()
        v2, ga2, gb2 = run()
        assert v1 == v2
        assert np.array_equal(ga1, ga2)
        assert np.array_equal(gb1, gb2)
