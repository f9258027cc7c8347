import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sanet import tensor as T
from sanet.tensor import NonFiniteError, Tensor

from helpers import TOL, gradcheck, random_inputs


def naive_conv2d(x, w, b):
    """Direct four-loop cross-correlation with zero padding."""
    o, i, v, _ = w.shape
    _, m, n = x.shape
    r = v // 2
    y = np.zeros((o, m, n))
    for oc in range(o):
        for p in range(m):
            for q in range(n):
                s = b[oc]
                for ic in range(i):
                    for a in range(v):
                        for c in range(v):
                            pp, qq = p + a - r, q + c - r
                            if 0 <= pp < m and 0 <= qq < n:
                                s += w[oc, ic, a, c] * x[ic, pp, qq]
                y[oc, p, q] = s
    return y


class TestConstruction:
    def test_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    def test_rejects_inf(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.inf)

    def test_values_are_immutable(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_copies_user_data(self):
        a = np.array([1.0, 2.0])
        t = Tensor(a)
        a[0] = 9.0
        assert t.data[0] == 1.0


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).uniform(-1, 1, (1, 5, 4))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        y = T.conv2d(Tensor(x), Tensor(w), Tensor([0.0]))
        assert np.array_equal(y.data, x)

    def test_box_filter_center_and_corner(self):
        y = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.full((1, 1, 3, 3), 1 / 9)), Tensor([0.0]))
        assert y.data[0, 1, 1] == pytest.approx(1.0, abs=1e-15)
        assert y.data[0, 0, 0] == pytest.approx(4 / 9, abs=1e-15)

    def test_matches_naive_loops(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.normal(size=(2, 5, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        y = T.conv2d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(y.data, naive_conv2d(x, w, b), atol=1e-12)

    def test_5x5_kernel_matches_naive(self):
        rng = np.random.default_rng(2)
        x, w, b = rng.normal(size=(1, 4, 4)), rng.normal(size=(2, 1, 5, 5)), rng.normal(size=2)
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data, naive_conv2d(x, w, b),
                                   atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x1, x2 = rng.uniform(-1, 1, (2, 2, 4, 4))
        w = rng.uniform(-1, 1, (3, 2, 3, 3))
        zero = Tensor(np.zeros(3))
        lhs = T.conv2d(Tensor(0.7 * x1 - 1.3 * x2), Tensor(w), zero).data
        rhs = 0.7 * T.conv2d(Tensor(x1), Tensor(w), zero).data - 1.3 * T.conv2d(Tensor(x2), Tensor(w), zero).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_linear_in_kernel(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, (2, 4, 4))
        w1, w2 = rng.uniform(-1, 1, (2, 3, 2, 3, 3))
        zero = Tensor(np.zeros(3))
        lhs = T.conv2d(Tensor(x), Tensor(w1 + 2 * w2), zero).data
        rhs = T.conv2d(Tensor(x), Tensor(w1), zero).data + 2 * T.conv2d(Tensor(x), Tensor(w2), zero).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.ones((2, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]))

    def test_bias_mismatch_rejected(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((2, 1, 3, 3))), Tensor([0.0]))

    def test_weight_gradient_is_shifted_window_sum(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, (1, 4, 4))
        w = Tensor(rng.uniform(-1, 1, (1, 1, 3, 3)), requires_grad=True)
        T.backward(T.conv2d(Tensor(x), w, Tensor([0.0])).sum())
        padded = np.pad(x[0], 1)
        for i in range(3):
            for j in range(3):
                assert w.grad[0, 0, i, j] == pytest.approx(padded[i:i + 4, j:j + 4].sum(), abs=1e-12)


class TestElementwise:
    def test_hadamard(self):
        assert np.array_equal(T.hadamard(Tensor([2.0, 3.0]), Tensor([4.0, 5.0])).data, [8.0, 15.0])

    def test_hadamard_ones_and_zeros(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3)))
        assert np.array_equal(T.hadamard(x, T.ones((2, 3))).data, x.data)
        assert np.array_equal(T.hadamard(x, T.zeros((2, 3))).data, np.zeros((2, 3)))

    def test_hadamard_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.hadamard(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_dense_example(self):
        assert np.array_equal(T.dense(Tensor([2.0, 3.0]), Tensor([[1.0, 1.0]]), Tensor([1.0])).data, [6.0])

    def test_dense_identity_and_zero(self):
        x = Tensor([0.3, -0.2, 0.9])
        assert np.array_equal(T.dense(x, Tensor(np.eye(3)), T.zeros(3)).data, x.data)
        b = Tensor([1.0, 2.0])
        assert np.array_equal(T.dense(x, T.zeros((2, 3)), b).data, b.data)

    def test_dense_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.dense(Tensor([1.0, 2.0]), Tensor(np.ones((1, 3))), Tensor([0.0]))

    def test_activation_values(self):
        assert T.activate(Tensor(0.0), "sigmoid").item() == 0.5
        assert T.activate(Tensor(0.0), "tanh").item() == 0.0
        assert T.sigmoid(Tensor(1.0)).item() == pytest.approx(1 / (1 + np.exp(-1)), abs=1e-15)
        assert T.sigmoid(Tensor(1.0)).item() == pytest.approx(0.7310585786, abs=1e-10)

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            T.activate(Tensor(0.0), "relu")

    def test_sigmoid_symmetry(self):
        x = np.random.default_rng(0).normal(size=50) * 5
        s = T.sigmoid(Tensor(x)).data + T.sigmoid(Tensor(-x)).data
        np.testing.assert_allclose(s, 1.0, atol=1e-15)

    def test_sigmoid_large_inputs_stay_finite(self):
        out = T.sigmoid(Tensor([-800.0, 800.0])).data
        assert out[0] == 0.0 and out[1] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=20))
def test_activation_codomain(values):
    x = Tensor(values)
    s = T.sigmoid(x).data
    t = T.tanh(x).data
    assert np.all((s >= 0) & (s <= 1))
    assert np.all((t >= -1) & (t <= 1))
    # strict bounds hold where float64 can represent them
    small = np.abs(np.asarray(values)) < 15
    assert np.all((s[small] > 0) & (s[small] < 1))
    assert np.all(np.abs(t[small]) < 1)


class TestBackward:
    def test_sigmoid_derivative_at_zero(self):
        x = Tensor(0.0, requires_grad=True)
        T.backward(T.sigmoid(x))
        assert x.grad == 0.25

    def test_diamond_accumulates(self):
        x = Tensor(3.0, requires_grad=True)
        T.backward(x + x)
        assert x.grad == 2.0

    def test_reused_node_in_product(self):
        x = Tensor(3.0, requires_grad=True)
        y = x * x
        T.backward(y * x)
        assert x.grad == pytest.approx(27.0)

    def test_constant_has_no_gradient_path(self):
        x = Tensor(2.0, requires_grad=True)
        c = Tensor(5.0)
        leaves = T.backward(c * 1.0)
        assert leaves == [] and x.grad is None

    def test_unused_parameter_gets_zero(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([3.0, 4.0], requires_grad=True)
        T.backward((x * 0.0).sum() + y.sum())
        assert np.array_equal(x.grad, [0.0, 0.0])

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ValueError):
            T.backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)

    def test_deep_chain_no_recursion_limit(self):
        x = Tensor(1.0, requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        T.backward(y)
        assert x.grad == 1.0


# finite-difference checks for every differentiable operation

OPS = {
    "add": (lambda t: (t["a"] + t["b"]).sum(), {"a": (3, 4), "b": (3, 4)}),
    "add_broadcast": (lambda t: T.square(t["a"] + t["b"]).sum(), {"a": (3, 4), "b": (4,)}),
    "sub": (lambda t: T.square(t["a"] - t["b"]).sum(), {"a": (3, 4), "b": (3, 4)}),
    "mul": (lambda t: (t["a"] * t["b"]).sum(), {"a": (3, 4), "b": (3, 4)}),
    "hadamard": (lambda t: T.square(T.hadamard(t["a"], t["b"])).sum(), {"a": (2, 5), "b": (2, 5)}),
    "scale_div": (lambda t: T.square(t["a"] / 3.0).sum(), {"a": (6,)}),
    "neg": (lambda t: T.square(-t["a"] + 0.5).sum(), {"a": (6,)}),
    "sigmoid": (lambda t: (T.sigmoid(t["a"]) * t["b"]).sum(), {"a": (4, 4), "b": (4, 4)}),
    "tanh": (lambda t: (T.tanh(t["a"]) * t["b"]).sum(), {"a": (4, 4), "b": (4, 4)}),
    "exp": (lambda t: (T.exp(t["a"]) * t["b"]).sum(), {"a": (4, 4), "b": (4, 4)}),
    "square": (lambda t: (T.square(t["a"]) * t["b"]).sum(), {"a": (4, 4), "b": (4, 4)}),
    "absolute": (lambda t: (T.absolute(t["a"] + 2.0) * t["b"]).sum(), {"a": (4, 4), "b": (4, 4)}),
    "reshape": (lambda t: (T.reshape(t["a"], (6, 2)) * t["b"]).sum(), {"a": (3, 4), "b": (6, 2)}),
    "transpose": (lambda t: (T.transpose(t["a"], (2, 0, 1)) * t["b"]).sum(), {"a": (2, 3, 4), "b": (4, 2, 3)}),
    "take_basic": (lambda t: T.square(t["a"][:, 1:3]).sum(), {"a": (3, 4)}),
    "take_fancy": (lambda t: T.square(t["a"][np.array([0, 2, 0])]).sum(), {"a": (3, 4)}),
    "stack": (lambda t: (T.stack([t["a"], t["b"]], axis=1) * t["c"]).sum(), {"a": (3,), "b": (3,), "c": (3, 2)}),
    "broadcast_to": (lambda t: (T.broadcast_to(t["a"], (4, 3)) * t["b"]).sum(), {"a": (3,), "b": (4, 3)}),
    "matmul": (lambda t: T.square(T.matmul(t["a"], t["b"])).sum(), {"a": (3, 4), "b": (4, 2)}),
    "dense": (lambda t: T.square(T.dense(t["x"], t["w"], t["b"])).sum(), {"x": (5, 3), "w": (2, 3), "b": (2,)}),
    "dense_vector": (lambda t: T.square(T.dense(t["x"], t["w"], t["b"])).sum(), {"x": (3,), "w": (2, 3), "b": (2,)}),
    "conv2d": (lambda t: T.square(T.conv2d(t["x"], t["w"], t["b"])).sum(),
               {"x": (2, 4, 5), "w": (3, 2, 3, 3), "b": (3,)}),
    "conv2d_batched": (lambda t: T.square(T.conv2d(t["x"], t["w"], t["b"])).sum(),
                       {"x": (2, 1, 4, 4), "w": (2, 1, 3, 3), "b": (2,)}),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_operation_gradients(name):
    fn, shapes = OPS[name]
    assert gradcheck(fn, random_inputs(7, **shapes), n_coords=100) < TOL
