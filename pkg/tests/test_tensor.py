"""Autodiff engine: op values, gradients against central differences, tape rules."""

import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tightcascade import tensor as T
from tightcascade.tensor import Tensor, finite_difference_check


def _weights(shape, seed=7):
    # random projection so that every gradient entry is generically O(1)
    return np.random.default_rng(seed).uniform(0.5, 1.5, size=shape) * np.random.default_rng(seed + 1).choice([-1, 1], size=shape)


def _scalarize(out: Tensor, seed=7) -> Tensor:
    return T.tsum(T.mul(out, Tensor(_weights(out.shape, seed))))


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_hand_oracle(self):
        out = T.softmax(Tensor([math.log(2.0), 0.0]))
        np.testing.assert_allclose(out.data, [2 / 3, 1 / 3], atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        with np.errstate(over="raise"):
            out = T.softmax(Tensor([1000.0, 0.0]))
        assert out.data[0] == pytest.approx(1.0)
        assert out.data[1] == pytest.approx(0.0, abs=1e-300)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite logits"):
            T.softmax(Tensor([np.nan, 0.0]))
        with pytest.raises(ValueError, match="non-finite logits"):
            T.log_softmax(Tensor([np.inf, 0.0]))

    def test_axis_argument(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_allclose(T.softmax(Tensor(x), axis=0).data.sum(axis=0), 1.0, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=8), elements=st.floats(-50, 50)))
    def test_rows_are_stochastic(self, x):
        out = T.softmax(Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all((out >= 0) & (out <= 1))

    def test_log_softmax_matches_log_of_softmax(self):
        x = np.random.default_rng(1).normal(size=(4, 6))
        np.testing.assert_allclose(T.log_softmax(Tensor(x)).data, np.log(T.softmax(Tensor(x)).data), atol=1e-12)


class TestElementwisePow:
    def test_identity_exponent(self):
        np.testing.assert_array_equal(T.elementwise_pow(Tensor([0.5, 0.5]), 1.0).data, [0.5, 0.5])

    def test_square(self):
        np.testing.assert_allclose(T.elementwise_pow(Tensor([0.8, 0.2]), 2.0).data, [0.64, 0.04], atol=1e-15)

    def test_zeroth_power(self):
        np.testing.assert_array_equal(T.elementwise_pow(Tensor([0.3]), 0.0).data, [1.0])

    def test_negative_base_fractional_exponent(self):
        with pytest.raises(ValueError):
            T.elementwise_pow(Tensor([-0.5, 0.2]), 0.5)

    def test_zero_base_gradient_convention(self):
        x = Tensor([0.0, 0.5], requires_grad=True)
        T.tsum(T.elementwise_pow(x, 3.0)).backward()
        np.testing.assert_allclose(x.grad, [0.0, 3 * 0.25])

    def test_gradient(self):
        x = Tensor(np.random.default_rng(2).uniform(0.1, 2.0, size=5))
        assert finite_difference_check(lambda t: _scalarize(T.elementwise_pow(t, 2.0)), x) < 1e-5
        assert finite_difference_check(lambda t: _scalarize(T.elementwise_pow(t, 0.7)), x) < 1e-5


class TestBackward:
    def test_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        T.tsum(x).backward()
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_dot(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.tsum(T.mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_detached_has_no_grad(self):
        x = Tensor([1.0, 2.0])
        y = Tensor([3.0, 4.0], requires_grad=True)
        T.tsum(T.mul(x, y)).backward()
        assert x.grad is None
        np.testing.assert_array_equal(y.grad, [1.0, 2.0])

    def test_non_scalar_root(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            T.mul(x, x).backward()

    def test_repeated_calls_accumulate(self):
        x = Tensor([1.0, -1.0], requires_grad=True)
        loss = T.tsum(T.mul(x, Tensor([3.0, 5.0])))
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(x.grad, [6.0, 10.0])
        x.zero_grad()
        loss.backward()
        np.testing.assert_array_equal(x.grad, [3.0, 5.0])

    def test_two_consumers_sum(self):
        x = Tensor([2.0], requires_grad=True)
        y = T.add(T.mul(x, Tensor([3.0])), T.exp(x))
        T.tsum(y).backward()
        np.testing.assert_allclose(x.grad, [3.0 + math.exp(2.0)])

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad
        assert y._parents == ()

    def test_no_grad_is_thread_local(self):
        seen = {}

        def worker():
            seen["enabled"] = T.is_grad_enabled()

        with T.no_grad():
            th = threading.Thread(target=worker)
            th.start()
            th.join()
        assert seen["enabled"] is True

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))

    def test_scalar_broadcast_allowed(self):
        out = T.add(Tensor(np.ones((2, 2))), Tensor(2.0))
        np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))


class TestGraph:
    def test_topological_order(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = T.tanh(T.mul(x, x))
        z = T.tsum(T.add(y, T.exp(x)))
        g = T.Graph.trace(z)
        position = {id(n): i for i, n in enumerate(g.nodes)}
        for node in g.nodes:
            for parent in node._parents:
                assert position[id(parent)] < position[id(node)]

    def test_records_name_ops(self):
        x = Tensor([1.0], requires_grad=True)
        z = T.tsum(T.exp(x))
        ops = [r[0] for r in T.Graph.trace(z).records()]
        assert ops[0] == "leaf" and "exp" in ops and ops[-1] == "sum"


class TestFiniteDifference:
    def test_sum_of_squares(self):
        x = Tensor(np.random.default_rng(3).uniform(-2, 2, size=6))
        assert finite_difference_check(lambda t: T.tsum(T.mul(t, t)), x, eps=1e-5) < 1e-6

    def test_constant_function(self):
        x = Tensor(np.ones(3))
        assert finite_difference_check(lambda t: T.tsum(Tensor(np.ones(2))), x) == 0.0

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            finite_difference_check(lambda t: T.tsum(t), Tensor([1.0]), eps=0.0)

    def test_rejects_bad_stencil(self):
        with pytest.raises(ValueError):
            finite_difference_check(lambda t: T.tsum(t), Tensor([1.0]), stencil=3)

    def test_four_point_stencil_exact_on_quartic(self):
        # The 4-point stencil has no truncation error on polynomials up to
        # degree 4, so even a coarse step matches to roundoff; the 2-point
        # one is off by eps^2 * f''' / 6 on the cubic term.
        x = Tensor(np.array([0.5, -1.2, 2.0]))
        quartic = lambda t: T.tsum(T.elementwise_pow(t, 4.0))
        assert finite_difference_check(quartic, x, eps=0.1, stencil=4) < 1e-12
        assert finite_difference_check(quartic, x, eps=0.1, stencil=2) > 1e-3

    def test_rel_floor_scales_small_entries(self):
        # f = x0^2 + 1e-9 * x1^2 on a large-valued point: the second gradient
        # entry is far below the first, so FD roundoff swamps it.
        x = Tensor(np.array([1e3, 1.0]))
        w = Tensor(np.array([1.0, 1e-9]))
        f = lambda t: T.tsum(T.mul(w, T.mul(t, t)))
        strict = finite_difference_check(f, x, eps=1e-3, stencil=4)
        floored = finite_difference_check(f, x, eps=1e-3, stencil=4, rel_floor=1e-3)
        assert floored <= strict
        assert floored < 1e-8


RNG = np.random.default_rng(11)
A = RNG.uniform(-2, 2, size=(3, 4))
W = RNG.uniform(-2, 2, size=(4, 5))
B3 = RNG.uniform(-2, 2, size=(2, 4, 3))


# each case: (name, input array, function of the input tensor)
OP_CASES = [
    ("add", A, lambda t: T.add(t, T.mul(t, t))),
    ("sub", A, lambda t: T.sub(Tensor(A[::-1].copy()), T.mul(t, t))),
    ("mul", A, lambda t: T.mul(t, Tensor(A + 1.0))),
    ("div", A, lambda t: T.div(Tensor(np.full(A.shape, 3.0)), T.add(T.mul(t, t), Tensor(1.0)))),
    ("neg", A, lambda t: T.neg(T.mul(t, t))),
    ("matmul", A, lambda t: T.matmul(t, Tensor(W))),
    ("matmul_w", W, lambda t: T.matmul(Tensor(A), t)),
    ("linear", A, lambda t: T.linear(t, Tensor(W), Tensor(np.arange(5.0)))),
    ("bmm", B3, lambda t: T.bmm(t, Tensor(B3.transpose(0, 2, 1).copy()))),
    ("transpose", B3, lambda t: T.mul(T.transpose(t, (2, 0, 1)), T.transpose(t, (2, 0, 1)))),
    ("reshape", A, lambda t: T.mul(T.reshape(t, (4, 3)), T.reshape(t, (4, 3)))),
    ("index_basic", A, lambda t: T.mul(T.index(t, (slice(0, 2), slice(1, 3))), T.index(t, (slice(1, 3), slice(0, 2))))),
    ("index_fancy", A, lambda t: T.index(t, (np.array([0, 0, 2]), np.array([1, 1, 3])))),
    ("take_rows", W, lambda t: T.take_rows(t, np.array([[0, 3], [3, 1]]))),
    ("concat", A, lambda t: T.concat([t, T.mul(t, t)], axis=-1)),
    ("stack", A, lambda t: T.stack([t, T.exp(t)], axis=1)),
    ("tsum_axis", B3, lambda t: T.tsum(T.mul(t, t), axis=1)),
    ("tsum_keepdims", B3, lambda t: T.mul(T.tsum(t, axis=-1, keepdims=True), T.tsum(t, axis=-1, keepdims=True))),
    ("mean", A, lambda t: T.mul(T.mean(T.mul(t, t)), Tensor(1.0))),
    ("exp", A, T.exp),
    ("log", np.abs(A) + 0.5, T.log),
    ("tanh", A, T.tanh),
    ("sigmoid", A, T.sigmoid),
    ("softmax", A, lambda t: T.softmax(t, axis=-1)),
    ("softmax_axis0", A, lambda t: T.softmax(t, axis=0)),
    ("log_softmax", A, lambda t: T.log_softmax(t, axis=-1)),
    ("logsumexp", A, lambda t: T.logsumexp(t, axis=-1)),
]


class TestOpGradients:
    @pytest.mark.parametrize("name,x,fn", OP_CASES, ids=[c[0] for c in OP_CASES])
    def test_matches_central_differences(self, name, x, fn):
        err = finite_difference_check(lambda t: _scalarize(fn(t)), Tensor(x), eps=1e-6)
        assert err < 1e-4, name

    def test_float32_mode_roundtrip(self):
        T.set_default_dtype(np.float32)
        try:
            assert Tensor([1.0]).data.dtype == np.float32
        finally:
            T.set_default_dtype(np.float64)
        assert Tensor([1.0]).data.dtype == np.float64

    def test_unsupported_dtype(self):
        with pytest.raises(ValueError):
            T.set_default_dtype(np.int32)
