import numpy as np
import pytest

from hdrmask import tensor as T
from hdrmask.errors import ContractError, DimensionError, GraphError, NumericError

from oracles import adam_first_step, avg_pool_loops, conv2d_loops, upsample_map


def rnd(seed):
    return np.random.default_rng(seed)


class TestConv2d:
    def test_all_ones_box(self):
        x = T.constant(np.ones((1, 1, 5, 5)))
        w = T.parameter(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w, T.parameter(np.zeros(1)))
        assert out.data.shape == (1, 1, 3, 3)
        assert np.allclose(out.data, 9.0)

    def test_identity_kernel(self):
        x = T.constant(rnd(0).normal(size=(2, 3, 6, 6)))
        w = np.zeros((3, 3, 1, 1), dtype=np.float64)
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = T.conv2d(x, T.constant(w), None)
        assert np.array_equal(out.data, x.data)

    def test_shape_formula_stride2(self):
        x = T.constant(np.zeros((1, 1, 4, 4)))
        w = T.constant(np.zeros((1, 1, 3, 3)))
        out = T.conv2d(x, w, None, stride=2, padding=1)
        assert out.data.shape == (1, 1, 2, 2)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(T.constant(np.zeros((1, 2, 4, 4))),
                     T.constant(np.zeros((1, 3, 3, 3))), None)

    def test_nonfinite_result(self):
        x = T.constant(np.full((1, 1, 3, 3), 1e300))
        w = T.constant(np.full((1, 1, 3, 3), 1e300))
        with pytest.raises(NumericError):
            T.conv2d(x, w, None)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_loop_oracle_f64(self, seed):
        rng = rnd(seed)
        n, ci, co = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
        h = int(rng.integers(3, 9))
        k = int(rng.choice([1, 3]))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        pad_value = float(rng.choice([0.0, 1.0]))
        x = rng.normal(size=(n, ci, h, h))
        w = rng.normal(size=(co, ci, k, k))
        b = rng.normal(size=co)
        got = T.conv2d(T.constant(x), T.constant(w), T.constant(b),
                       stride, padding, pad_value).data
        want = conv2d_loops(x, w, b, stride, padding, pad_value)
        assert np.max(np.abs(got - want)) <= 1e-12 * max(1.0, np.max(np.abs(want)))


class TestActivation:
    def test_relu_negative(self):
        assert T.activation(T.constant(np.array([-1.5])), "relu").data[0] == 0.0

    def test_leaky_negative(self):
        out = T.activation(T.constant(np.array([-1.0])), "leaky_relu", 0.2)
        assert np.isclose(out.data[0], -0.2)

    def test_identity(self):
        x = rnd(1).normal(size=(4, 3))
        assert np.array_equal(T.activation(T.constant(x), "identity").data, x)

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            T.activation(T.constant(np.zeros(2)), "gelu")


class TestUpsampleAndPool:
    def test_upsample_factor_one_identity(self):
        x = T.constant(rnd(2).normal(size=(1, 2, 3, 3)))
        assert T.upsample_nearest(x, 1) is x

    def test_upsample_single_value(self):
        out = T.upsample_nearest(T.constant(np.full((1, 1, 1, 1), 7.0)), 2)
        assert np.array_equal(out.data, np.full((1, 1, 2, 2), 7.0))

    def test_upsample_matches_index_map(self):
        x = np.arange(1, 5, dtype=np.float64).reshape(1, 1, 2, 2)
        out = T.upsample_nearest(T.constant(x), 2).data
        assert np.array_equal(out, upsample_map(x, 2))

    def test_avg_pool_constant(self):
        out = T.avg_pool(T.constant(np.full((1, 2, 4, 4), 3.25)), 2)
        assert np.allclose(out.data, 3.25)

    def test_avg_pool_direct_mean(self):
        x = np.array([[0.0, 2.0], [4.0, 6.0]]).reshape(1, 1, 2, 2)
        assert T.avg_pool(T.constant(x), 2).data.reshape(()) == 3.0

    def test_avg_pool_window_one_identity(self):
        x = T.constant(rnd(3).normal(size=(1, 1, 3, 3)))
        assert T.avg_pool(x, 1) is x

    def test_avg_pool_indivisible(self):
        with pytest.raises(DimensionError):
            T.avg_pool(T.constant(np.zeros((1, 1, 5, 5))), 2)

    def test_avg_pool_matches_loops(self):
        x = rnd(4).normal(size=(2, 3, 6, 6))
        got = T.avg_pool(T.constant(x), 3).data
        assert np.allclose(got, avg_pool_loops(x, 3), atol=1e-12)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        w = T.parameter(rnd(5).normal(size=(3, 4)))
        T.backward(T.tsum(w))
        assert np.array_equal(w.grad, np.ones((3, 4)))

    def test_square_gradient(self):
        w = T.parameter(rnd(6).normal(size=(5,)))
        T.backward(T.tsum(w * w))
        assert np.allclose(w.grad, 2 * w.data)

    def test_nonscalar_root_rejected(self):
        w = T.parameter(np.zeros((2, 2)))
        with pytest.raises(ContractError):
            T.backward(w * 2.0)

    def test_unreachable_parameter_gets_zero(self):
        used = T.parameter(np.ones(3))
        unused = T.parameter(np.ones(4))
        T.backward(T.tsum(used), parameters=[used, unused])
        assert np.array_equal(unused.grad, np.zeros(4))

    def test_cycle_detection(self):
        a = T.parameter(np.ones(1))
        b = a * 2.0
        b._parents = (b,)  # deliberately corrupt the graph
        with pytest.raises(GraphError):
            T.backward(T.tsum(b))

    def test_two_layer_masked_conv_net_matches_fd(self):
        # conv -> mask multiply -> conv -> scalar, float64 finite differences
        rng = rnd(7)
        mask = (rng.random((1, 2, 6, 6)) > 0.3).astype(np.float64)
        x = T.parameter(rng.normal(size=(1, 2, 6, 6)))
        w1 = T.parameter(rng.normal(size=(2, 2, 3, 3)))
        b1 = T.parameter(rng.normal(size=2))
        w2 = T.parameter(rng.normal(size=(1, 2, 3, 3)))

        def fn(x, w1, b1, w2):
            z = x * T.constant(mask)
            h = T.leaky_relu(T.conv2d(z, w1, b1, 1, 1))
            h = h * T.constant(mask[:, :1].repeat(2, axis=1))
            out = T.conv2d(h, w2, None, 2, 1)
            return T.tmean(T.absolute(out))

        err = T.check_gradients(fn, [x, w1, b1, w2], epsilon=1e-4, max_coords=10,
                                rng=rnd(8))
        assert err < 1e-3

    def test_gradient_linearity_in_loss_sum(self):
        rng = rnd(9)
        w = T.parameter(rng.normal(size=(4, 4)))

        def loss_a(t):
            return T.tmean(t * t)

        def loss_b(t):
            return T.tmean(T.absolute(t))

        w.zero_grad()
        T.backward(loss_a(w))
        ga = w.grad.copy()
        w.zero_grad()
        T.backward(loss_b(w))
        gb = w.grad.copy()
        w.zero_grad()
        T.backward(loss_a(w) + loss_b(w))
        assert np.allclose(w.grad, ga + gb, atol=1e-12)


class TestCheckGradients:
    def test_linear_is_exact(self):
        x = T.parameter(np.array([1.7]))
        err = T.check_gradients(lambda t: T.tsum(t * 3.0), [x], epsilon=1e-4)
        assert err < 1e-10

    def test_square_taylor_bound(self):
        x = T.parameter(np.array([1.0]))
        err = T.check_gradients(lambda t: T.tsum(t * t), [x], epsilon=1e-4)
        assert err < 1e-8  # central differences are O(eps^2) exact here

    def test_rejects_bad_epsilon(self):
        with pytest.raises(ContractError):
            T.check_gradients(lambda t: T.tsum(t), [T.parameter(np.ones(1))], epsilon=0)


class TestDeterminism:
    def test_forward_bit_identical(self):
        rng = rnd(10)
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        runs = [T.conv2d(T.constant(x), T.constant(w), T.constant(b), 1, 1).data
                for _ in range(3)]
        assert all(np.array_equal(runs[0], r) for r in runs[1:])


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        p = {"w": T.parameter(np.array([1.5, -2.0], dtype=np.float32))}
        state = T.AdamState()
        before = p["w"].data.copy()
        T.adam_step(p, {"w": np.zeros(2, dtype=np.float32)}, state, lr=2e-4)
        assert np.array_equal(p["w"].data, before)
        assert state.step == 1

    def test_first_step_closed_form(self):
        p = {"w": T.parameter(np.array([0.0], dtype=np.float64))}
        state = T.AdamState()
        T.adam_step(p, {"w": np.array([0.1])}, state, lr=2e-4)
        want = adam_first_step(0.1, 2e-4)
        assert np.isclose(p["w"].data[0], want, rtol=1e-9)
        assert np.isclose(p["w"].data[0], -2e-4, rtol=1e-4)

    def test_second_moment_positive_after_nonzero_grad(self):
        p = {"w": T.parameter(np.ones(3, dtype=np.float32))}
        state = T.AdamState()
        T.adam_step(p, {"w": np.array([0.1, -0.2, 0.3], dtype=np.float32)}, state, lr=1e-3)
        assert np.all(state.v["w"] > 0)

    def test_shape_mismatch(self):
        p = {"w": T.parameter(np.ones(3))}
        with pytest.raises(DimensionError):
            T.adam_step(p, {"w": np.ones(4)}, T.AdamState(), lr=1e-3)

    def test_missing_gradient_leaves_param(self):
        p = {"w": T.parameter(np.ones(2)), "b": T.parameter(np.ones(2))}
        state = T.AdamState()
        T.adam_step(p, {"w": np.full(2, 0.5)}, state, lr=1e-2)
        assert np.array_equal(p["b"].data, np.ones(2))
