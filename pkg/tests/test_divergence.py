import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lensdistill import autodiff as ad
from lensdistill import divergence as dv

LN2 = math.log(2.0)


def simplex(rng, n, v, floor=0.0):
    x = rng.random((n, v)) + floor
    return x / x.sum(-1, keepdims=True)


def kl_oracle(p, q):
    mpmath.mp.dps = 40
    return float(mpmath.fsum(mpmath.mpf(a) * mpmath.log(mpmath.mpf(a) / mpmath.mpf(b))
                             for a, b in zip(p, q) if a > 0))


def jsd_oracle(p, q):
    m = [(a + b) / 2 for a, b in zip(p, q)]
    return 0.5 * (kl_oracle(p, m) + kl_oracle(q, m))


prob_rows = arrays(np.float64, (3, 5), elements=st.floats(1e-3, 1.0)).map(
    lambda x: x / x.sum(-1, keepdims=True))


class TestKL:
    def test_fkl_example(self):
        v = float(dv.forward_kl([0.5, 0.5], [0.25, 0.75]))
        assert abs(v - (0.5 * LN2 + 0.5 * math.log(2 / 3))) < 1e-15
        assert abs(v - 0.143841) < 1e-6

    def test_rkl_mirror(self):
        assert abs(float(dv.reverse_kl([0.25, 0.75], [0.5, 0.5])) - 0.143841036) < 1e-8

    def test_rkl_is_swapped_fkl(self, rng):
        p, q = simplex(rng, 2, 6)
        assert float(dv.reverse_kl(p, q)) == float(dv.forward_kl(q, p))

    def test_gibbs(self, rng):
        p, q = simplex(rng, 1000, 10), simplex(rng, 1000, 10)
        assert np.all(dv.kl_rows(p, q).data >= -1e-12)

    def test_asymmetry_witness(self):
        p, q = [0.9, 0.1], [0.5, 0.5]
        assert abs(float(dv.forward_kl(p, q)) - float(dv.reverse_kl(p, q))) > 0.01

    def test_matches_high_precision_oracle(self, rng):
        p, q = simplex(rng, 2, 7)
        assert abs(float(dv.forward_kl(p, q)) - kl_oracle(p, q)) < 1e-14

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dv.forward_kl([0.5, 0.5], [1 / 3] * 3)


class TestJSD:
    def test_example_against_oracle(self):
        p, q = [0.7, 0.3], [0.3, 0.7]
        assert abs(float(dv.jsd(p, q)) - jsd_oracle(p, q)) < 1e-15

    def test_disjoint_deltas(self):
        assert abs(float(dv.jsd([1.0, 0, 0], [0, 0, 1.0])) - LN2) <= 1e-12

    def test_mixture(self, rng):
        p, q = simplex(rng, 2, 5)
        assert np.array_equal(dv.mixture(p, p).data, p)
        assert np.allclose(dv.mixture(p, q).data.sum(-1), 1.0)
        assert dv.mixture([1.0, 0, 0], [0, 1.0, 0]).data.tolist() == [0.5, 0.5, 0.0]

    @given(prob_rows, prob_rows)
    def test_symmetric_and_bounded(self, p, q):
        a, b = dv.jsd_rows(p, q).data, dv.jsd_rows(q, p).data
        assert np.max(np.abs(a - b)) <= 1e-12
        assert np.all(a >= -1e-15) and np.all(a <= LN2 + 1e-12)


class TestJeffreys:
    def test_example_is_sum_of_kls(self):
        p, q = [0.5, 0.5], [0.25, 0.75]
        expected = float(dv.forward_kl(p, q)) + float(dv.reverse_kl(p, q))
        assert float(dv.jeffreys(p, q)) == expected

    @given(prob_rows, prob_rows)
    def test_symmetric_nonnegative(self, p, q):
        a, b = dv.jeffreys_rows(p, q).data, dv.jeffreys_rows(q, p).data
        assert np.max(np.abs(a - b)) <= 1e-12
        assert np.all(a >= -1e-12)


class TestZeroAtEquality:
    @pytest.mark.parametrize("kind", list(dv.DivergenceKind))
    def test_equal_inputs(self, kind, rng):
        p = simplex(rng, 5, 8)
        assert abs(float(dv.divergence(kind, p, p))) <= 1e-12

    def test_kinds_are_exhaustive(self):
        assert {k.value for k in dv.DivergenceKind} == {"fkl", "rkl", "jsd", "jeffreys"}


class TestLandscapes:
    def test_jsd_g_values(self):
        assert dv.jsd_perclass_g(1.0) == 0.0
        assert abs(dv.jsd_perclass_g(1e-8) - LN2) <= 1e-6
        assert abs(dv.jsd_perclass_g(1e6) / 1e6 - LN2) / LN2 <= 1e-3
        assert dv.jsd_perclass_g(0.0) == pytest.approx(LN2, abs=1e-15)

    def test_jd_g_values(self):
        assert dv.jd_perclass_g(1.0) == 0.0
        assert abs(dv.jd_perclass_g(math.e) - (math.e - 1)) < 1e-15
        assert dv.jd_perclass_g(1e-8) == pytest.approx((1e-8 - 1) * math.log(1e-8), rel=1e-15)
        assert dv.jd_perclass_g(1e-8) > 18.4

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            dv.jsd_perclass_g(-0.1)
        with pytest.raises(ValueError):
            dv.jd_perclass_g(0.0)

    @pytest.mark.parametrize("c", [0.01, 0.1, 0.5, 2, 10, 100])
    def test_unique_minimum(self, c):
        assert dv.jsd_perclass_g(c) > 0 and dv.jd_perclass_g(c) > 0

    def test_midpoint_convexity(self):
        c = np.logspace(-6, 6, 400)
        for g in (dv.jsd_perclass_g, dv.jd_perclass_g):
            a, b = c[:-1], c[1:]
            assert np.all(g((a + b) / 2) <= (g(a) + g(b)) / 2 + 1e-12)

    def test_curve(self):
        curve = dv.landscape_curve(1e-3, 1e3, 11)
        assert curve.shape == (11, 3)
        row = curve[np.argmin(np.abs(curve[:, 0] - 1.0))]
        assert row.tolist() == [1.0, 0.0, 0.0]
        with pytest.raises(ValueError):
            dv.landscape_curve(1.0, 0.5, 10)


class TestConfidence:
    def test_equal_is_ones(self, rng):
        p = simplex(rng, 1, 6)
        assert np.array_equal(dv.confidence(p, p), np.ones_like(p))

    def test_doubling(self):
        c = dv.confidence([0.25, 0.75], [0.5, 0.5])
        assert c[0] == 2.0

    def test_floor_keeps_finite(self):
        c = dv.confidence([1.0, 0.0], [0.5, 0.5])
        assert np.all(np.isfinite(c)) and c[1] == 0.5 / 1e-12

    def test_decompositions(self, rng):
        p, q = simplex(rng, 50, 100, 1e-4), simplex(rng, 50, 100, 1e-4)
        c = dv.confidence(p, q)
        assert np.max(np.abs(dv.jsd_rows(p, q).data - 0.5 * (p * dv.jsd_perclass_g(c)).sum(-1))) <= 1e-9
        assert np.max(np.abs(dv.jeffreys_rows(p, q).data - (p * dv.jd_perclass_g(c)).sum(-1))) <= 1e-9


class TestMSE:
    def test_zero_when_projected(self, rng):
        W = rng.normal(size=(3, 5))
        hp = rng.normal(size=(4, 5))
        assert float(dv.mse_feature_loss(hp, hp @ W.T, W)) < 1e-28

    def test_example(self):
        assert float(dv.mse_feature_loss([1.0, 2.0], [0.0, 0.0], np.eye(2))) == 5.0

    def test_batch_permutation_invariant(self, rng):
        W = rng.normal(size=(3, 5))
        hp, hq = rng.normal(size=(6, 5)), rng.normal(size=(6, 3))
        perm = rng.permutation(6)
        a = float(dv.mse_feature_loss(hp, hq, W))
        assert a == pytest.approx(float(dv.mse_feature_loss(hp[perm], hq[perm], W)), rel=1e-14)

    def test_shape_errors(self, rng):
        with pytest.raises(ValueError):
            dv.mse_feature_loss(np.ones((2, 5)), np.ones((2, 3)), np.ones((5, 3)))


class TestGradients:
    @pytest.mark.parametrize("kind", list(dv.DivergenceKind))
    def test_logit_gradients(self, kind, rng):
        for _ in range(5):
            p = simplex(rng, 3, 6, 0.05)
            x = rng.uniform(-3, 3, size=(3, 6))
            f = lambda t: dv.divergence(kind, p, ad.softmax(t))
            fd, an = ad.finite_difference_grad(f, x), ad.autodiff_grad(f, x)
            assert np.max(np.abs(fd - an) / np.maximum(1e-3, np.abs(fd) + np.abs(an))) <= 1e-4
