import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from exprfusion.errors import ConfigError, ContractError, DimensionError, NumericError
from exprfusion.tensor import (
    Tape, Tensor, add, backward, concat_last, conv2d, dropout, layer_norm, log_softmax, make_rng,
    matmul, max_pool2d, mean, mul, no_grad, relu, reshape, softmax, split_last, swapaxes, tsum, zero_grad,
)

from conftest import central_difference, check_gradients, rel_error


def param(rng, *shape):
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), b).data, b.data)

    def test_hand_product(self):
        assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_shape_error_names_both(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_of_sum(self, rng):
        a, b = param(rng, 3, 4), param(rng, 4, 2)
        check_gradients(lambda: tsum(matmul(a, b)), [a, b], rng, probes_per_tensor=6, tol=1e-6)

    def test_batched_with_shared_weight(self, rng):
        a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
        np.testing.assert_allclose(matmul(a, b).data, np.einsum("bik,kn->bin", a.data, b.data))
        check_gradients(lambda: tsum(mul(matmul(a, b), matmul(a, b))), [a, b], rng)

    def test_batched_both(self, rng):
        a, b = param(rng, 2, 3, 4), param(rng, 2, 4, 3)
        check_gradients(lambda: tsum(mul(matmul(a, b), matmul(a, b))), [a, b], rng)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_large_values_do_not_overflow(self):
        np.testing.assert_allclose(softmax(Tensor([1000.0] * 3)).data, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_scalar_oracle(self):
        e = [math.exp(v) for v in (1, 2, 3)]
        expected = [v / sum(e) for v in e]
        got = softmax(Tensor([1.0, 2.0, 3.0])).data
        np.testing.assert_allclose(got, expected, atol=1e-15)
        np.testing.assert_allclose(got, [0.09003, 0.24473, 0.66524], atol=1e-5)

    def test_bad_axis(self):
        with pytest.raises(DimensionError):
            softmax(Tensor([1.0, 2.0]), axis=3)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_normalized_and_shift_invariant(self, x, c):
        y = softmax(Tensor(x)).data
        assert (y >= 0).all()
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
        np.testing.assert_allclose(softmax(Tensor(x + c)).data, y, rtol=0, atol=1e-12)

    def test_gradients(self, rng):
        x, w = param(rng, 3, 5), Tensor(rng.normal(size=(3, 5)))
        check_gradients(lambda: tsum(mul(softmax(x), w)), [x], rng, probes_per_tensor=8)
        check_gradients(lambda: tsum(mul(softmax(x, axis=0), w)), [x], rng)
        check_gradients(lambda: tsum(mul(log_softmax(x), w)), [x], rng, probes_per_tensor=8)


class TestConcat:
    def test_paper_widths(self):
        parts = [Tensor(np.zeros((2, 64, 888))) for _ in range(3)]
        assert concat_last(parts).shape == (2, 64, 2664)

    def test_single_part_identity(self):
        x = Tensor([[1.0, 2.0]])
        assert concat_last([x]) is x

    def test_gradient_of_sum_is_ones(self, rng):
        a, b = param(rng, 2, 3), param(rng, 2, 4)
        backward(tsum(concat_last([a, b])))
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, np.ones((2, 4)))

    def test_mismatched_leading(self):
        with pytest.raises(DimensionError):
            concat_last([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(0, 2**32 - 1))
    def test_split_inverts_concat(self, widths, seed):
        r = np.random.default_rng(seed)
        parts = [Tensor(r.normal(size=(3, w))) for w in widths]
        back = split_last(concat_last(parts), widths)
        for p, q in zip(parts, back):
            np.testing.assert_array_equal(p.data, q.data)

    def test_gradients(self, rng):
        a, b = param(rng, 2, 3), param(rng, 2, 4)
        w = Tensor(rng.normal(size=(2, 7)))
        check_gradients(lambda: tsum(mul(mul(concat_last([a, b]), w), concat_last([b, a]))), [a, b], rng)


class TestDropout:
    def test_eval_identity(self, rng):
        x = Tensor(rng.normal(size=(4, 4)))
        assert dropout(x, 0.5, training=False, rng=make_rng(0)) is x

    def test_zero_rate_identity(self, rng):
        x = Tensor(rng.normal(size=(4, 4)))
        np.testing.assert_array_equal(dropout(x, 0.0, training=True, rng=make_rng(0)).data, x.data)

    def test_inverted_scaling_mean(self):
        out = dropout(Tensor(np.ones(100_000)), 0.5, training=True, rng=make_rng(7)).data
        assert 0.98 <= out.mean() <= 1.02
        assert set(np.unique(out)) <= {0.0, 2.0}

    def test_rate_one_rejected(self):
        with pytest.raises(ConfigError):
            dropout(Tensor([1.0]), 1.0, training=True, rng=make_rng(0))

    def test_same_seed_same_mask(self):
        x = Tensor(np.ones(50))
        a = dropout(x, 0.3, True, make_rng(3)).data
        b = dropout(x, 0.3, True, make_rng(3)).data
        np.testing.assert_array_equal(a, b)

    def test_gradients(self, rng):
        x = param(rng, 3, 4)
        check_gradients(lambda: tsum(mul(dropout(x, 0.4, True, make_rng(11)), x)), [x], rng)


class TestLayerNorm:
    def test_constant_input_is_zero(self):
        out = layer_norm(Tensor(np.full(5, 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)), 1e-5)
        np.testing.assert_array_equal(out.data, np.zeros(5))

    def test_two_point(self):
        out = layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-10)

    def test_standardizes(self, rng):
        x = Tensor(rng.normal(3.0, 5.0, size=(4, 16)))
        out = layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), 1e-5).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-5)

    def test_gradients(self, rng):
        x, g, b = param(rng, 3, 6), param(rng, 6), param(rng, 6)
        w = Tensor(rng.normal(size=(3, 6)))
        worst = check_gradients(lambda: tsum(mul(layer_norm(x, g, b, 1e-5), w)), [x, g, b], rng, 6, tol=1e-5)
        assert worst < 1e-5

    def test_bad_eps(self):
        with pytest.raises(ConfigError):
            layer_norm(Tensor([1.0, 2.0]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), 0.0)


class TestBackward:
    def test_square(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(tsum(mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_constant_loss_leaves_zero_grads(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        zero_grad([x])
        backward(tsum(Tensor([5.0])))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_accumulates(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        loss = tsum(mul(x, x))
        backward(loss)
        backward(loss)
        np.testing.assert_array_equal(x.grad, [4.0, 8.0, 12.0])

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            backward(Tensor([1.0, 2.0], requires_grad=True))

    def test_shared_subexpression(self, rng):
        x = param(rng, 4)
        check_gradients(lambda: tsum(add(mul(x, x), mul(mul(x, x), x))), [x], rng)

    def test_tape_is_topological(self, rng):
        x = param(rng, 2, 2)
        loss = tsum(relu(matmul(x, x)))
        tape = Tape(loss)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for parent in node._parents:
                assert pos[id(parent)] < pos[id(node)]
        assert tape.nodes[-1] is loss

    def test_no_grad_records_nothing(self, rng):
        x = param(rng, 3)
        with no_grad():
            y = mul(x, x)
        assert not y.requires_grad and y._parents == ()

    def test_nonfinite_reported(self):
        with pytest.raises(NumericError), np.errstate(over="ignore"):
            mul(Tensor([1e308]), 1e10)


class TestShapeOps:
    def test_reshape_swap_mean_gradients(self, rng):
        x = param(rng, 2, 3, 4)
        w = Tensor(rng.normal(size=(4, 3, 2)))
        check_gradients(lambda: tsum(mul(reshape(swapaxes(x, 0, 2), (4, 3, 2)), w)), [x], rng)
        check_gradients(lambda: tsum(mul(mean(x, axis=1), mean(x, axis=1))), [x], rng)
        check_gradients(lambda: tsum(mul(relu(x), x)), [x], rng)

    def test_broadcast_add_gradient(self, rng):
        x, b = param(rng, 2, 3, 4), param(rng, 4)
        check_gradients(lambda: tsum(mul(add(x, b), add(x, b))), [x, b], rng)

    def test_bad_broadcast(self):
        with pytest.raises(DimensionError):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


class TestConvPool:
    def test_conv_matches_loop(self, rng):
        x = Tensor(rng.normal(size=(2, 5, 6, 3)))
        w = Tensor(rng.normal(size=(3, 3, 3, 4)))
        b = Tensor(rng.normal(size=4))
        out = conv2d(x, w, b).data
        xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
        ref = np.zeros((2, 5, 6, 4))
        for n in range(2):
            for i in range(5):
                for j in range(6):
                    patch = xp[n, i:i + 3, j:j + 3, :]
                    ref[n, i, j] = np.tensordot(patch, w.data, axes=([0, 1, 2], [0, 1, 2])) + b.data
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_pool_matches_loop(self, rng):
        x = rng.normal(size=(2, 4, 6, 3))
        out = max_pool2d(Tensor(x), 2).data
        ref = x.reshape(2, 2, 2, 3, 2, 3).max(axis=(2, 4))
        np.testing.assert_array_equal(out, ref)

    def test_gradients(self, rng):
        x, w, b = param(rng, 2, 4, 4, 2), param(rng, 3, 3, 2, 3), param(rng, 3)
        check_gradients(lambda: tsum(mul(max_pool2d(conv2d(x, w, b), 2), max_pool2d(conv2d(x, w, b), 2))),
                        [x, w, b], rng, probes_per_tensor=5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_op_chain_gradients(seed):
    """Finite differences agree on random inputs in [-1, 1] for a composite of every dense op."""
    r = np.random.default_rng(seed)
    x, w = param(r, 2, 3, 4), param(r, 4, 4)
    g, b = param(r, 4), param(r, 4)

    def f():
        h = layer_norm(relu(matmul(x, w)) + x, g, b, 1e-5)
        return tsum(mul(softmax(h), h))

    check_gradients(f, [x, w, g, b], r, probes_per_tensor=2)


def test_make_rng_is_pcg64_and_reproducible():
    a, b = make_rng(42), make_rng(42)
    assert type(a.bit_generator).__name__ == "PCG64"
    np.testing.assert_array_equal(a.random(10), b.random(10))
    with pytest.raises(ConfigError):
        make_rng(-1)


def test_central_difference_helper_is_exact_on_quadratic():
    x = Tensor([2.0], requires_grad=True)
    d = central_difference(lambda: tsum(mul(x, x)), x, (0,))
    assert rel_error(d, 4.0) < 1e-9
