import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lensdistill import autodiff as ad
from lensdistill.autodiff import NumericError, Tensor


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def check_grad(f, x, tol=1e-4):
    fd = ad.finite_difference_grad(f, x)
    an = ad.autodiff_grad(f, x)
    assert an.shape == np.shape(x)
    assert rel_err(an, fd) <= tol


finite = st.floats(-3, 3, allow_nan=False)


class TestTensor:
    def test_zero_extent_rejected(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((0, 3)))

    def test_item_and_float(self):
        assert float(Tensor(2.5)) == 2.5
        with pytest.raises(ValueError):
            Tensor([1.0, 2.0]).item()

    def test_grad_shape_matches_data(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        ad.backward(ad.tsum(x * x))
        assert x.grad.shape == x.shape


class TestMatmul:
    def test_identity(self, rng):
        x = rng.normal(size=3)
        assert np.array_equal(ad.matmul(np.eye(3), x).data, x)

    def test_hand_product(self):
        out = ad.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
        assert out.data.tolist() == [[3.0], [7.0]]

    def test_zero_matrix(self, rng):
        assert not ad.matmul(np.zeros((2, 3)), rng.normal(size=3)).data.any()

    def test_inner_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_batched_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(np.ones((2, 2, 3)), np.ones((3, 3, 2)))

    @pytest.mark.parametrize("sa,sb", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)),
                                       ((2, 3, 4), (2, 4, 2)), ((4,), (4, 3)), ((3, 4), (4,))])
    def test_gradients(self, rng, sa, sb):
        a = rng.normal(size=sa)
        b = rng.normal(size=sb)
        check_grad(lambda t: ad.tsum(ad.square(ad.matmul(t, b))), a)
        check_grad(lambda t: ad.tsum(ad.square(ad.matmul(a, t))), b)


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(ad.softmax(np.zeros(3)).data, 1 / 3, atol=1e-15)

    def test_closed_form(self):
        out = ad.softmax(np.array([math.log(2.0), 0.0])).data
        assert abs(out[0] - 2 / 3) < 1e-15 and abs(out[1] - 1 / 3) < 1e-15

    @given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_shift_invariance_and_normalization(self, x, c):
        s = ad.softmax(x).data
        assert np.allclose(s.sum(-1), 1.0, atol=1e-12, rtol=0)
        assert np.max(np.abs(ad.softmax(x + c).data - s)) <= 1e-12

    def test_mask_exact_zero(self, rng):
        mask = np.tril(np.ones((4, 4), dtype=bool))
        s = ad.softmax(rng.normal(size=(4, 4)), mask=mask).data
        assert np.all(s[~mask] == 0.0)
        assert np.allclose(s.sum(-1), 1.0)

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            ad.softmax(np.array([0.0, np.nan]))

    def test_gradient(self, rng):
        w = rng.normal(size=(3, 5))
        check_grad(lambda t: ad.tsum(ad.softmax(t) * w), rng.normal(size=(3, 5)))
        check_grad(lambda t: ad.tsum(ad.log_softmax(t) * w), rng.normal(size=(3, 5)))

    def test_fd_of_softmax_sum_is_zero(self, rng):
        g = ad.finite_difference_grad(lambda t: ad.tsum(ad.softmax(t)), rng.normal(size=5))
        assert np.max(np.abs(g)) < 1e-9


class TestElementwise:
    @given(arrays(np.float64, 10, elements=st.floats(-10, 10)))
    def test_log_exp_roundtrip(self, x):
        assert np.max(np.abs(ad.log(ad.exp(x)).data - x)) <= 1e-12

    def test_log_nonpositive_raises(self):
        with pytest.raises(NumericError):
            ad.log(np.array([1.0, 0.0]))
        with pytest.raises(NumericError):
            ad.log(np.array([-1.0]))

    def test_clamp_then_log_is_finite(self):
        out = ad.log(ad.clamp_min(np.array([0.0, 0.5]), 1e-12)).data
        assert np.all(np.isfinite(out))

    def test_div_by_zero_raises(self):
        with pytest.raises(NumericError):
            ad.div(np.ones(2), np.array([1.0, 0.0]))

    def test_exp_overflow_raises(self):
        with pytest.raises(NumericError):
            ad.exp(np.array([1000.0]))

    def test_broadcast_rules(self):
        ad.add(np.ones((2, 3)), np.ones(3))
        ad.add(np.ones((2, 3)), 1.0)
        with pytest.raises(ValueError):
            ad.add(np.ones((2, 3)), np.ones(2))

    @pytest.mark.parametrize("name", ["add", "sub", "mul", "div"])
    def test_binary_gradients(self, rng, name):
        op = getattr(ad, name)
        a = rng.uniform(-3, 3, size=(4, 3))
        b = rng.uniform(0.5, 3, size=3)
        check_grad(lambda t: ad.tsum(ad.square(op(t, b))), a)
        check_grad(lambda t: ad.tsum(ad.square(op(a, t))), b)

    @pytest.mark.parametrize("fn", [
        lambda t: ad.exp(t),
        lambda t: ad.log(ad.clamp_min(ad.square(t), 1e-12)),
        lambda t: ad.gelu(t),
        lambda t: ad.square(t),
        lambda t: ad.clamp_min(t, 0.1),
        lambda t: ad.mean(t, axis=0),
        lambda t: ad.tsum(t, axis=-1, keepdims=True),
        lambda t: ad.reshape(t, (2, 6)),
        lambda t: ad.transpose(t, (1, 0)),
    ])
    def test_unary_gradients_random(self, fn):
        rng = np.random.default_rng(7)
        w = None
        for _ in range(100 // 10):
            x = rng.uniform(-3, 3, size=(3, 4))
            if w is None:
                w = rng.normal(size=fn(Tensor(x)).shape)
            check_grad(lambda t: ad.tsum(fn(t) * w), x)

    def test_product_rule_example(self):
        x = Tensor(2.0, requires_grad=True)
        y = Tensor(3.0, requires_grad=True)
        ad.backward(x * y)
        assert float(x.grad) == 3.0 and float(y.grad) == 2.0

    def test_fd_square(self):
        assert abs(ad.finite_difference_grad(lambda t: ad.square(t), np.array(3.0)) - 6.0) < 1e-8


class TestFused:
    def test_layernorm_moments(self, rng):
        x = rng.normal(3.0, 5.0, size=(6, 32))
        y = ad.layernorm(x, np.ones(32), np.zeros(32), eps=1e-12).data
        assert np.max(np.abs(y.mean(-1))) <= 1e-10
        assert np.max(np.abs(y.var(-1) - 1.0)) <= 1e-10

    def test_layernorm_gradient(self, rng):
        x = rng.normal(size=(2, 3, 5))
        g = rng.normal(size=5)
        b = rng.normal(size=5)
        w = rng.normal(size=(2, 3, 5))
        check_grad(lambda t: ad.tsum(ad.layernorm(t, g, b) * w), x)
        check_grad(lambda t: ad.tsum(ad.layernorm(x, t, b) * w), g)
        check_grad(lambda t: ad.tsum(ad.layernorm(x, g, t) * w), b)

    def test_embedding_gradient_accumulates_repeats(self, rng):
        table = rng.normal(size=(5, 3))
        ids = np.array([[0, 2, 2], [4, 0, 1]])
        w = rng.normal(size=(2, 3, 3))
        check_grad(lambda t: ad.tsum(ad.embedding(t, ids) * w), table)

    def test_cross_entropy_matches_softmax_minus_onehot(self, rng):
        logits = rng.normal(size=(4, 6))
        targets = np.array([0, 5, 2, 2])
        g = ad.autodiff_grad(lambda t: ad.cross_entropy(t, targets), logits)
        s = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
        expected = (s - np.eye(6)[targets]) / 4
        assert np.max(np.abs(g - expected)) < 1e-14

    def test_cross_entropy_masked_gradient(self, rng):
        logits = rng.normal(size=(2, 3, 4))
        targets = np.array([[1, 2, 3], [0, 0, 1]])
        mask = np.array([[1, 1, 0], [1, 0, 0]], dtype=float)
        check_grad(lambda t: ad.cross_entropy(t, targets, mask), logits)

    def test_cross_entropy_vanishes_for_confident_logits(self):
        targets = np.array([1])
        losses = [float(ad.cross_entropy(np.array([[0.0, gap, 0.0]]), targets)) for gap in (1, 5, 20, 40)]
        assert all(a > b for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 1e-16


class TestBackward:
    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            ad.backward(x * 2.0)

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = ad.tsum(x * 2.0)
        assert not y.requires_grad
        assert ad.is_grad_enabled()

    def test_deep_chain_is_iterative(self):
        x = Tensor(1.0, requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 1.0
        ad.backward(y)
        assert float(x.grad) == 1.0

    def test_shared_subexpression_visited_once(self):
        x = Tensor(3.0, requires_grad=True)
        y = x * x
        z = y + y
        order = ad.topological_order(z)
        assert len(order) == len({id(n) for n in order})
        ad.backward(z)
        assert float(x.grad) == 12.0

    @given(st.floats(-5, 5), st.floats(-5, 5))
    def test_linearity(self, a, b):
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=4)
        f = lambda t: ad.tsum(ad.square(t))
        g = lambda t: ad.tsum(ad.exp(t * 0.5))
        combo = ad.autodiff_grad(lambda t: f(t) * a + g(t) * b, x0)
        separate = a * ad.autodiff_grad(f, x0) + b * ad.autodiff_grad(g, x0)
        assert np.max(np.abs(combo - separate)) <= 1e-10 * max(1.0, np.max(np.abs(separate)))

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(5)
            x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            w = rng.normal(size=(4, 2))
            out = ad.tsum(ad.gelu(ad.matmul(x, w)))
            ad.backward(out)
            return out.data.tobytes(), x.grad.tobytes()

        assert run() == run()
