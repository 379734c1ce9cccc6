import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sartm import tensor as T
from sartm.errors import ContractError, DomainError, GeometryError, ShapeError
from sartm.tensor import Tensor, Tape


def leaf(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


def central_diff(f, x, h=1e-4):
    """Plain central differences of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def sliding_conv(x, w, pad):
    """Direct loop cross-correlation oracle, stride 1."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((o, h + 2 * pad - k + 1, wd + 2 * pad - k + 1))
    for oc in range(o):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                out[oc, i, j] = np.sum(xp[:, i : i + k, j : j + k] * w[oc])
    return out


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.0, 2], [3, 4]])
        npt.assert_array_equal((Tensor(np.eye(2)) @ Tensor(b)).data, b)

    def test_row_selects(self):
        out = Tensor(np.array([[1.0, 0]])) @ Tensor(np.array([[1.0, 2], [3, 4]]))
        npt.assert_array_equal(out.data, [[1, 2]])

    def test_gradient_against_finite_differences(self):
        a = leaf([[1.0, 1.0]])
        b = np.array([[2.0], [5.0]])
        T.backward(T.sum(a @ Tensor(b)))
        npt.assert_allclose(a.grad, [[2, 5]])
        npt.assert_allclose(a.grad, central_diff(lambda x: np.sum(x @ b), a.data), atol=1e-8)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 5)))
        assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)


class TestConv2d:
    def test_unit_1x1_kernel_is_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 5, 6))
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        npt.assert_array_equal(out.data, x)

    def test_ones_kernel_on_one_hot_center(self):
        x = np.zeros((1, 3, 3))
        x[0, 1, 1] = 1
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), pad=1)
        npt.assert_array_equal(out.data, np.ones((1, 3, 3)))

    @pytest.mark.parametrize("k,pad", [(1, 0), (3, 1), (3, 0), (5, 2)])
    def test_matches_sliding_window_oracle(self, k, pad):
        rng = np.random.default_rng(k)
        x, w = rng.normal(size=(2, 6, 5)), rng.normal(size=(3, 2, k, k))
        npt.assert_allclose(T.conv2d(Tensor(x), Tensor(w), pad=pad).data, sliding_conv(x, w, pad), atol=1e-12)

    def test_stride_two_subsamples_stride_one(self):
        rng = np.random.default_rng(3)
        x, w = rng.normal(size=(1, 2, 7, 7)), rng.normal(size=(2, 2, 3, 3))
        full = T.conv2d(Tensor(x), Tensor(w), pad=1).data
        npt.assert_allclose(T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data, full[..., ::2, ::2], atol=1e-12)

    def test_gradient_on_random_input(self):
        rng = np.random.default_rng(1)
        x0, w = rng.uniform(-1, 1, (2, 4, 4)), rng.uniform(-1, 1, (3, 2, 3, 3))
        x = leaf(x0)
        T.backward(T.sum(T.conv2d(x, Tensor(w), pad=1)))
        num = central_diff(lambda v: np.sum(sliding_conv(v, w, 1)), x0, h=1e-3)
        assert np.abs(x.grad - num).max() / np.abs(num).max() < 1e-3

    def test_non_integral_geometry(self):
        with pytest.raises(GeometryError):
            T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, pad=1)


class TestSoftmax:
    def test_uniform(self):
        npt.assert_allclose(T.softmax(Tensor(np.zeros(3)), axis=-1).data, [1 / 3] * 3)

    def test_large_input_no_overflow(self):
        out = T.softmax(Tensor(np.array([1000.0, 0.0])), axis=-1).data
        assert np.all(np.isfinite(out))
        npt.assert_allclose(out, [1, 0], atol=1e-6)

    def test_log_inputs(self):
        x = np.log([1.0, 2.0, 3.0])
        npt.assert_allclose(T.softmax(Tensor(x), axis=-1).data, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-1e3, 1e3)))
    def test_rows_are_distributions(self, x):
        p = T.softmax(Tensor(x), axis=-1).data
        assert np.all(p >= 0)
        npt.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)

    def test_log_softmax_consistent(self):
        x = np.random.default_rng(0).normal(size=(4, 5))
        npt.assert_allclose(np.exp(T.log_softmax(Tensor(x), axis=-1).data), T.softmax(Tensor(x), axis=-1).data)


class TestBilinearUpsample:
    def test_constant_map(self):
        out = T.bilinear_upsample(Tensor(np.full((2, 3, 3), 5.0)), 2)
        npt.assert_allclose(out.data, 5.0)

    def test_factor_one_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 3, 4))
        npt.assert_array_equal(T.bilinear_upsample(Tensor(x), 1).data, x)

    def test_hand_interpolated_rows(self):
        x = np.array([[[1.0, 3.0], [1.0, 3.0]]])
        out = T.bilinear_upsample(Tensor(x), 2).data
        assert out.shape == (1, 4, 4)
        for row in out[0]:
            npt.assert_allclose(row, [1, 1.5, 2.5, 3])

    def test_sample_centres(self):
        # output pixel i samples source coordinate (i + 0.5)/f - 0.5, clamped to the edges
        n, f = 5, 3
        m = T.interpolation_matrix(n, f)
        src = np.arange(n, dtype=float)
        coords = np.clip((np.arange(n * f) + 0.5) / f - 0.5, 0, n - 1)
        npt.assert_allclose(m @ src, coords, atol=1e-12)

    @pytest.mark.parametrize("factor", [0, -1, 1.5])
    def test_bad_factor(self, factor):
        with pytest.raises(DomainError):
            T.bilinear_upsample(Tensor(np.zeros((1, 2, 2))), factor)


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.zeros((2, 3, 4)))
        T.backward(T.sum(x))
        npt.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_square(self):
        x = leaf([2.0, -3.0])
        T.backward(T.sum(x * x))
        npt.assert_allclose(x.grad, [4, -6])
        npt.assert_allclose(x.grad, central_diff(lambda v: np.sum(v * v), x.data), atol=1e-8)

    def test_frozen_input_has_no_grad(self):
        x = Tensor(np.ones(3))
        y = leaf(np.ones(3))
        T.backward(T.sum(x * y))
        assert x.grad is None
        npt.assert_array_equal(y.grad, np.ones(3))

    def test_two_consumers_accumulate(self):
        # f = sum(x*a) + sum(exp(x)) -> df/dx = a + exp(x)
        x = leaf([0.5, -1.0])
        a = np.array([2.0, 3.0])
        T.backward(T.sum(x * Tensor(a)) + T.sum(T.exp(x)))
        npt.assert_allclose(x.grad, a + np.exp(x.data))

    def test_diamond_reuses_intermediate(self):
        x = leaf([1.5])
        y = x * x
        T.backward(T.sum(y * y + y))  # x^4 + x^2
        npt.assert_allclose(x.grad, 4 * 1.5**3 + 2 * 1.5)

    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            T.backward(leaf(np.ones(3)) * 2.0)

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with T.no_grad():
            y = x * 2.0
        assert y._node is None and not y.requires_grad

    def test_broadcast_gradient_reduced(self):
        a, b = leaf(np.ones((3, 4))), leaf(np.ones(4))
        T.backward(T.sum(a * b))
        assert b.grad.shape == (4,)
        npt.assert_array_equal(b.grad, [3, 3, 3, 3])


class TestTape:
    def test_topological_order_and_single_visit(self):
        x = leaf([1.0, 2.0])
        a = x * 2.0
        b = T.exp(a)
        c = a + b
        loss = T.sum(c * a)
        tape = Tape.from_root(loss)
        pos = {id(t): i for i, t in enumerate(tape.outputs)}
        assert len(pos) == len(tape.outputs)
        for t in tape.outputs:
            for inp in t._node.inputs:
                if inp._node is not None:
                    assert pos[id(inp)] < pos[id(t)]
        assert len(tape) == 5

    def test_backward_frees_graph(self):
        x = leaf([1.0])
        y = T.exp(x)
        loss = T.sum(y)
        T.backward(loss)
        assert y._node is None and loss._node is None


OP_INPUTS = {
    "add": lambda r: (r.normal(size=(3, 4)), r.normal(size=4)),
    "mul": lambda r: (r.normal(size=(3, 4)), r.normal(size=(3, 1))),
    "matmul": lambda r: (r.normal(size=(2, 3)), r.normal(size=(3, 2))),
    "softmax": lambda r: (r.normal(size=(2, 5)),),
    "layer_norm": lambda r: (r.normal(size=(2, 5)), r.normal(size=5), r.normal(size=5)),
}


class TestPurity:
    @pytest.mark.parametrize("name", sorted(OP_INPUTS))
    def test_ops_do_not_mutate_inputs(self, name):
        rng = np.random.default_rng(0)
        arrays = OP_INPUTS[name](rng)
        tensors = [leaf(a) for a in arrays]
        before = [t.data.copy() for t in tensors]
        fn = {"softmax": lambda x: T.softmax(x, axis=-1)}.get(name, getattr(T, name))
        out = fn(*tensors)
        T.backward(T.sum(out * Tensor(rng.normal(size=out.shape))))
        for t, b in zip(tensors, before):
            npt.assert_array_equal(t.data, b)

    def test_conv_does_not_mutate(self):
        rng = np.random.default_rng(2)
        x, w = leaf(rng.normal(size=(1, 2, 5, 5))), leaf(rng.normal(size=(2, 2, 3, 3)))
        xd, wd = x.data.copy(), w.data.copy()
        T.backward(T.sum(T.conv2d(x, w, stride=2, pad=1)))
        npt.assert_array_equal(x.data, xd)
        npt.assert_array_equal(w.data, wd)


class TestMisc:
    def test_grad_length_matches_data(self):
        x = leaf(np.ones((2, 3)))
        T.backward(T.sum(T.reshape(x, (3, 2)) * 2.0))
        assert x.grad.shape == x.shape

    def test_gelu_tanh_form(self):
        v = np.linspace(-3, 3, 13)
        ref = 0.5 * v * (1 + np.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3)))
        npt.assert_allclose(T.gelu(Tensor(v)).data, ref, atol=1e-12)

    def test_layer_norm_statistics(self):
        x = np.random.default_rng(0).normal(3, 2, size=(4, 16))
        out = T.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        npt.assert_allclose(out.mean(axis=-1), 0, atol=1e-10)
        npt.assert_allclose(out.std(axis=-1), 1, atol=1e-3)

    def test_cosine_similarity_matrix(self):
        a = np.random.default_rng(0).normal(size=(3, 4))
        n = a / np.linalg.norm(a, axis=1, keepdims=True)
        npt.assert_allclose(T.cosine_similarity(Tensor(a)).data, n @ n.T, atol=1e-12)

    def test_kl_div_closed_form(self):
        p = np.array([[0.5, 0.5, 0.0]])
        q = np.array([[0.25, 0.25, 0.5]])
        out = T.kl_div(Tensor(p), Tensor(np.log(q))).data
        npt.assert_allclose(out, 0.5 * np.log(2) * 2)

    def test_take_gathers_flat(self):
        a = np.arange(12.0).reshape(3, 4)
        npt.assert_array_equal(T.take(Tensor(a), np.array([0, 5, 11])).data, [0, 5, 11])

    def test_default_dtype_context(self):
        with T.default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    @settings(max_examples=30)
    @given(st.lists(st.integers(1, 3), min_size=1, max_size=3), st.data())
    def test_unbroadcast_inverts_broadcast(self, shape, data):
        # any shape broadcast up and reduced back by unbroadcast keeps the total
        small = tuple(data.draw(st.sampled_from([1, n])) for n in shape)
        g = np.ones((2,) + tuple(shape))
        out = T.unbroadcast(g, small)
        assert out.shape == small
        assert out.sum() == g.sum()
