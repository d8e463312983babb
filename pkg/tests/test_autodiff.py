"""Tensor engine tests: loop oracles, length formulas, finite differences."""

import itertools

import numpy as np
import pytest

from gaitgl import autodiff as ad
from gaitgl.autodiff import Param, Tensor
from gaitgl.conv import conv3d, out_extent, pool
from gaitgl.errors import DimensionError, DomainError, GradientError


# ---------------------------------------------------------------------------
# Independent oracles (nested loops, no shared code with the engine)
# ---------------------------------------------------------------------------

def conv3d_oracle(x, w, bias=None, stride=(1, 1, 1), pad=(0, 0, 0)):
    n, cin, t, h, wd = x.shape
    cout, _, kt, kh, kw = w.shape
    st, sh, sw = stride
    pt, ph, pw = pad
    xp = np.zeros((n, cin, t + 2 * pt, h + 2 * ph, wd + 2 * pw))
    xp[:, :, pt:pt + t, ph:ph + h, pw:pw + wd] = x
    to = (t + 2 * pt - kt) // st + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, cout, to, ho, wo))
    for b in range(n):
        for co in range(cout):
            for ot in range(to):
                for oh in range(ho):
                    for ow in range(wo):
                        acc = 0.0
                        for ci in range(cin):
                            for it in range(kt):
                                for ih in range(kh):
                                    for iw in range(kw):
                                        acc += xp[b, ci, ot * st + it, oh * sh + ih, ow * sw + iw] \
                                            * w[co, ci, it, ih, iw]
                        out[b, co, ot, oh, ow] = acc
            if bias is not None:
                out[b, co] += bias[co]
    return out


def pool_oracle(x, kind, kernel, stride):
    n, c, t, h, wd = x.shape
    kt, kh, kw = kernel
    st, sh, sw = stride
    to = (t - kt) // st + 1
    ho = (h - kh) // sh + 1
    wo = (wd - kw) // sw + 1
    out = np.zeros((n, c, to, ho, wo))
    for b in range(n):
        for ci in range(c):
            for ot in range(to):
                for oh in range(ho):
                    for ow in range(wo):
                        win = x[b, ci, ot * st:ot * st + kt,
                                oh * sh:oh * sh + kh, ow * sw:ow * sw + kw]
                        out[b, ci, ot, oh, ow] = win.max() if kind == "max" else win.mean()
    return out


def matmul_oracle(x, w):
    a, b = x.shape
    _, c = w.shape
    out = np.zeros((a, c))
    for i in range(a):
        for j in range(c):
            for k in range(b):
                out[i, j] += x[i, k] * w[k, j]
    return out


# ---------------------------------------------------------------------------
# conv3d
# ---------------------------------------------------------------------------

class TestConv3d:
    def test_all_ones_full_kernel(self):
        x = Tensor(np.ones((1, 1, 3, 3, 3)))
        w = Param(np.ones((1, 1, 3, 3, 3)))
        y = conv3d(x, w)
        assert y.shape == (1, 1, 1, 1, 1)
        assert y.item() == 27.0

    def test_delta_kernel_is_identity(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 1, 4, 5, 5)))
        w = np.zeros((1, 1, 3, 3, 3))
        w[0, 0, 1, 1, 1] = 1.0
        y = conv3d(x, Param(w), pad=(1, 1, 1))
        np.testing.assert_array_equal(y.data, x.data)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 2, 4, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        y = conv3d(Tensor(x), Param(w), Param(b), pad=(1, 1, 1))
        np.testing.assert_allclose(y.data, conv3d_oracle(x, w, b, pad=(1, 1, 1)), atol=1e-12)

    def test_many_random_instances_against_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            n = int(rng.integers(1, 3))
            cin = int(rng.integers(1, 3))
            cout = int(rng.integers(1, 3))
            t, h, wd = (int(rng.integers(2, 5)) for _ in range(3))
            kt = int(rng.integers(1, t + 1))
            kh = int(rng.integers(1, h + 1))
            kw = int(rng.integers(1, wd + 1))
            stride = tuple(int(rng.integers(1, 3)) for _ in range(3))
            pad = tuple(int(rng.integers(0, 2)) for _ in range(3))
            x = rng.uniform(-1, 1, (n, cin, t, h, wd))
            w = rng.uniform(-1, 1, (cout, cin, kt, kh, kw))
            y = conv3d(Tensor(x), Param(w), stride=stride, pad=pad)
            np.testing.assert_allclose(
                y.data, conv3d_oracle(x, w, stride=stride, pad=pad), atol=1e-10)

    def test_channel_mismatch_reports_both_shapes(self):
        x = Tensor(np.zeros((1, 3, 4, 4, 4)))
        w = Param(np.zeros((2, 2, 3, 3, 3)))
        with pytest.raises(DimensionError) as exc:
            conv3d(x, w)
        assert "(1, 3, 4, 4, 4)" in str(exc.value) and "(2, 2, 3, 3, 3)" in str(exc.value)

    def test_output_extents_exhaustive_grid(self):
        for n, k, s, p in itertools.product(range(1, 9), range(1, 5), range(1, 4), range(0, 3)):
            if k > n + 2 * p:
                continue
            x = Tensor(np.ones((1, 1, n, n, n)))
            w = Param(np.ones((1, 1, k, k, k)))
            y = conv3d(x, w, stride=(s, s, s), pad=(p, p, p))
            e = out_extent(n, k, s, p)
            assert y.shape == (1, 1, e, e, e)


# ---------------------------------------------------------------------------
# pool
# ---------------------------------------------------------------------------

class TestPool:
    def test_avg_full_width(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 1, 4))
        y = pool(x, "avg", (1, 1, 4), (1, 1, 1))
        assert y.item() == 2.5

    def test_max_full_width(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 1, 4))
        y = pool(x, "max", (1, 1, 4), (1, 1, 1))
        assert y.item() == 4.0

    def test_max_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 6, 4, 4))
        y = pool(Tensor(x), "max", (1, 2, 2), (1, 2, 2))
        np.testing.assert_array_equal(y.data, pool_oracle(x, "max", (1, 2, 2), (1, 2, 2)))

    def test_many_random_instances_against_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            kind = "max" if rng.integers(2) else "avg"
            t, h, wd = (int(rng.integers(2, 6)) for _ in range(3))
            kernel = tuple(int(rng.integers(1, e + 1)) for e in (t, h, wd))
            stride = tuple(int(rng.integers(1, 3)) for _ in range(3))
            x = rng.uniform(-1, 1, (2, 2, t, h, wd))
            y = pool(Tensor(x), kind, kernel, stride)
            np.testing.assert_allclose(y.data, pool_oracle(x, kind, kernel, stride), atol=1e-10)

    def test_kernel_too_large(self):
        x = Tensor(np.zeros((1, 1, 2, 2, 2)))
        with pytest.raises(DimensionError):
            pool(x, "max", (3, 1, 1), (1, 1, 1))

    def test_output_extents_exhaustive_grid(self):
        for n, k, s in itertools.product(range(1, 9), range(1, 5), range(1, 4)):
            if k > n:
                continue
            x = Tensor(np.ones((1, 1, n, 1, 1)))
            y = pool(x, "avg", (k, 1, 1), (s, 1, 1))
            assert y.shape[2] == out_extent(n, k, s, 0)


# ---------------------------------------------------------------------------
# elementwise and matmul
# ---------------------------------------------------------------------------

class TestElementwise:
    def test_add_zero(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 4))
        y = ad.elementwise("add", Tensor(x), Tensor(np.zeros_like(x)))
        np.testing.assert_array_equal(y.data, x)

    def test_pow(self):
        y = ad.elementwise("pow", Tensor(np.array([4.0])), 0.5)
        np.testing.assert_allclose(y.data, [2.0])

    def test_mask_broadcast_matches_loop(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 2, 3, 4, 4))
        m = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
        y = ad.elementwise("mul", Tensor(x), m)
        ref = np.empty_like(x)
        for c in range(2):
            for t in range(3):
                ref[0, c, t] = x[0, c, t] * m
        np.testing.assert_array_equal(y.data, ref)

    def test_leaky_relu_zero_maps_to_zero(self):
        y = ad.leaky_relu(Tensor(np.array([-1.0, 0.0, 2.0])), slope=0.01)
        np.testing.assert_allclose(y.data, [-0.01, 0.0, 2.0])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((3, 4))
        y = ad.matmul(Tensor(x), Param(np.eye(4)))
        np.testing.assert_allclose(y.data, x)

    def test_small_case(self):
        y = ad.matmul(Tensor(np.array([[1.0, 2.0]])), Param(np.array([[1.0], [1.0]])))
        np.testing.assert_allclose(y.data, [[3.0]])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((4, 5))
        w = rng.standard_normal((5, 3))
        y = ad.matmul(Tensor(x), Param(w))
        np.testing.assert_allclose(y.data, matmul_oracle(x, w), atol=1e-12)

    def test_inner_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(Tensor(np.zeros((2, 3))), Param(np.zeros((4, 2))))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

class TestBackward:
    def test_sum_gives_ones(self):
        x = Param(np.arange(6.0).reshape(2, 3))
        ad.backward(ad.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gives_2x(self):
        x = Param(np.arange(6.0).reshape(2, 3))
        ad.backward(ad.tsum(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_non_scalar_rejected(self):
        with pytest.raises(GradientError):
            ad.backward(Tensor(np.zeros(3)))

    def test_shared_subexpression_accumulates(self):
        rng = np.random.default_rng(4)
        x = Param(rng.standard_normal((3, 3)))

        def f(t):
            return ad.leaky_relu(t, 0.2)

        y = ad.add(f(x), f(x))
        ad.backward(ad.tsum(y))
        g2 = x.grad.copy()
        x.zero_grad()
        ad.backward(ad.tsum(f(x)))
        np.testing.assert_allclose(g2, 2 * x.grad)


# ---------------------------------------------------------------------------
# grad_check
# ---------------------------------------------------------------------------

class TestGradCheck:
    def test_identity_zero_error(self):
        # Integer data and a dyadic step keep the central difference exact.
        x = Tensor(np.arange(12.0).reshape(3, 4))
        assert ad.grad_check(lambda t: t, x, eps=2.0 ** -10) == 0.0

    def test_conv3d_fixed_weight(self):
        rng = np.random.default_rng(9)
        w = Param(rng.uniform(-1, 1, (2, 2, 3, 3, 3)))
        b = Param(rng.uniform(-1, 1, 2))
        x = Tensor(rng.uniform(-1, 1, (1, 2, 3, 4, 4)))
        err = ad.grad_check(lambda t: conv3d(t, w, b, pad=(1, 1, 1)), x)
        assert err <= 1e-6

    def test_conv3d_weight_gradient(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.uniform(-1, 1, (1, 2, 3, 4, 4)))
        w0 = Tensor(rng.uniform(-1, 1, (2, 2, 3, 3, 3)))
        err = ad.grad_check(lambda w: conv3d(x, w, pad=(1, 1, 1)), w0)
        assert err <= 1e-6

    def test_gem_including_p(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.uniform(0.2, 2.0, (2, 3, 5)))
        p0 = Tensor(np.array(3.0))
        err_x = ad.grad_check(lambda t: ad.gem_lastaxis(t, Param(np.array(2.5))), x)
        err_p = ad.grad_check(lambda p: ad.gem_lastaxis(x, p), p0)
        assert err_x <= 1e-5
        assert err_p <= 1e-5

    def test_pool_max(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4, 4)))
        err = ad.grad_check(lambda t: pool(t, "max", (2, 2, 2), (2, 2, 2)), x)
        assert err <= 1e-4

    def test_pool_avg(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4, 4)))
        err = ad.grad_check(lambda t: pool(t, "avg", (2, 2, 2), (1, 1, 1)), x)
        assert err <= 1e-6

    def test_elementwise_ops(self):
        rng = np.random.default_rng(15)
        x = Tensor(rng.uniform(0.3, 1.5, (3, 4)))
        other = Tensor(rng.uniform(-1, 1, (3, 4)))
        assert ad.grad_check(lambda t: ad.mul(t, other), x) <= 1e-6
        assert ad.grad_check(lambda t: ad.powc(t, 1.7), x) <= 1e-5
        assert ad.grad_check(lambda t: ad.leaky_relu(t, 0.01), x) <= 1e-6

    def test_matmul(self):
        rng = np.random.default_rng(16)
        w = Param(rng.uniform(-1, 1, (4, 3)))
        x = Tensor(rng.uniform(-1, 1, (2, 4)))
        assert ad.grad_check(lambda t: ad.matmul(t, w), x) <= 1e-6
        assert ad.grad_check(lambda ww: ad.matmul(x, ww), Tensor(w.data)) <= 1e-6

    def test_strip_fc(self):
        rng = np.random.default_rng(17)
        x = Tensor(rng.uniform(-1, 1, (2, 3, 4)))
        w = Tensor(rng.uniform(-1, 1, (4, 3, 5)))
        assert ad.grad_check(lambda t: ad.strip_fc(t, Param(w.data)), x) <= 1e-6
        assert ad.grad_check(lambda ww: ad.strip_fc(x, ww), w) <= 1e-6


class TestGem:
    def test_p1_equals_average(self):
        rng = np.random.default_rng(18)
        x = Tensor(rng.uniform(0.0, 2.0, (3, 4, 6)))
        y = ad.gem_lastaxis(x, Param(np.array(1.0)))
        np.testing.assert_allclose(y.data, x.data.mean(axis=-1), atol=1e-12)

    def test_large_p_approaches_max(self):
        # Frozen value from a 60-digit evaluation of (mean(x**p))**(1/p):
        # p=64 on [0.5, 1, 2] gives 1.9659613524069003 (gap to max 3.40e-2);
        # the gap falls below 1e-2 once p >= 256.
        x = Tensor(np.array([[0.5, 1.0, 2.0]]))
        y64 = ad.gem_lastaxis(x, Param(np.array(64.0)))
        np.testing.assert_allclose(y64.item(), 1.9659613524069003, atol=1e-12)
        y256 = ad.gem_lastaxis(x, Param(np.array(256.0)))
        assert abs(y256.item() - 2.0) <= 1e-2

    def test_negative_input_rejected(self):
        with pytest.raises(DomainError):
            ad.gem_lastaxis(Tensor(np.array([[-0.1, 1.0]])), Param(np.array(2.0)))

    def test_output_within_strip_range(self):
        rng = np.random.default_rng(19)
        x = rng.uniform(0.1, 3.0, (4, 8))
        for p in (1.0, 2.0, 4.5, 16.0):
            y = ad.gem_lastaxis(Tensor(x), Param(np.array(p)))
            assert (y.data >= x.min(axis=-1) - 1e-12).all()
            assert (y.data <= x.max(axis=-1) + 1e-12).all()


class TestStructuralOps:
    def test_concat_slice_roundtrip(self):
        rng = np.random.default_rng(20)
        x = Tensor(rng.standard_normal((2, 3, 4, 6, 5)), requires_grad=True)
        top = ad.slice_axis(x, 3, 0, 3)
        bot = ad.slice_axis(x, 3, 3, 6)
        y = ad.concat([top, bot], 3)
        np.testing.assert_array_equal(y.data, x.data)
        ad.backward(ad.tsum(y))
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_reshape_gradient(self):
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        y = ad.reshape(x, (2, 6))
        ad.backward(ad.tsum(ad.mul(y, y)))
        np.testing.assert_allclose(x.grad, 2 * x.data)
