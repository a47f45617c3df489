import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmseg.errors import ShapeError, TapeError
from nmseg.tensor_ops import (
    BatchNormParams,
    ConvParams,
    Tape,
    Tensor,
    backward,
    batchnorm,
    concat,
    conv2d,
    gradcheck,
    gradcheck_report,
    log,
    maxpool2d,
    relu,
    sigmoid,
    upsample_nearest,
)


def direct_conv(x, w, b, stride, pad):
    """Loop-level cross-correlation used as the oracle for conv2d."""
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    if b is not None:
        out += b[None, :, None, None]
    return out


def numeric_grad(fn, arr, h=1e-6):
    g = np.zeros_like(arr)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def conv_params(rng, co, ci, k, bias=True, stride=1, pad=0):
    w = Tensor(rng.normal(size=(co, ci, k, k)), requires_grad=True)
    b = Tensor(rng.normal(size=co), requires_grad=True) if bias else None
    return ConvParams(w, b, stride, pad)


class TestConv:
    def test_ones_kernel_counts_neighbours(self):
        p = ConvParams(Tensor(np.ones((1, 1, 3, 3))), None, 1, 1)
        out = conv2d(Tensor(np.ones((1, 1, 2, 2))), p)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    def test_pointwise_identity(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
        p = ConvParams(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(conv2d(Tensor(x), p).data, x)

    def test_centre_kernel_identity(self):
        x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1
        np.testing.assert_array_equal(conv2d(Tensor(x), ConvParams(Tensor(w), None, 1, 1)).data, x)

    @pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0), (3, 1, 0)])
    def test_matches_direct_oracle(self, k, stride, pad):
        rng = np.random.default_rng(k * 10 + stride)
        size = 6 if (k, pad) == (2, 0) else 5
        x = rng.normal(size=(2, 3, size, size))
        p = conv_params(rng, 4, 3, k, stride=stride, pad=pad)
        got = conv2d(Tensor(x), p).data
        want = direct_conv(x, p.weight.data, p.bias.data, stride, pad)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-12)

    def test_identity_1x1_any_channels(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 4, 3, 3))
        w = np.eye(4).reshape(4, 4, 1, 1)
        np.testing.assert_allclose(conv2d(Tensor(x), ConvParams(Tensor(w))).data, x)

    def test_errors(self):
        p = ConvParams(Tensor(np.ones((1, 2, 3, 3))), None, 2, 0)
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 3, 5, 5))), p)
        with pytest.raises(ShapeError, match="non-integral"):
            conv2d(Tensor(np.ones((1, 2, 6, 6))), p)

    def test_param_count(self):
        rng = np.random.default_rng(0)
        assert conv_params(rng, 16, 3, 3).num_params() == 448
        assert conv_params(rng, 16, 3, 3, bias=False).num_params() == 432

    @pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)])
    def test_gradients(self, k, stride, pad):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        p = conv_params(rng, 3, 2, k, stride=stride, pad=pad)
        probe = rng.normal(size=conv2d(x, p).shape)

        def loss():
            return float((conv2d(x, p).data * probe).sum())

        with Tape() as tape:
            out = (conv2d(x, p) * probe).sum()
        grads = backward(tape, out)
        for t in (x, p.weight, p.bias):
            np.testing.assert_allclose(grads[t], numeric_grad(loss, t.data), rtol=1e-5, atol=1e-7)


class TestPoolUpsample:
    def test_maxpool_examples(self):
        assert maxpool2d(Tensor(np.array([[[[1.0, 3], [5, 7]]]])), 2).data.item() == 7
        const = Tensor(np.full((1, 2, 4, 4), 2.5))
        np.testing.assert_array_equal(maxpool2d(const, 2).data, np.full((1, 2, 2, 2), 2.5))
        x = np.arange(1.0, 17.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(maxpool2d(Tensor(x), 2).data[0, 0], [[6, 8], [14, 16]])

    def test_maxpool_indivisible(self):
        with pytest.raises(ShapeError):
            maxpool2d(Tensor(np.ones((1, 1, 5, 4))), 2)

    def test_upsample_examples(self):
        x = Tensor(np.array([[[[1.0, 3], [5, 7]]]]))
        np.testing.assert_array_equal(
            upsample_nearest(x, 2).data[0, 0], [[1, 1, 3, 3], [1, 1, 3, 3], [5, 5, 7, 7], [5, 5, 7, 7]]
        )
        assert upsample_nearest(x, 1).data is x.data
        np.testing.assert_array_equal(upsample_nearest(Tensor(np.full((1, 1, 1, 1), 9.0)), 4).data, np.full((1, 1, 4, 4), 9.0))

    @given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 2, 4]), st.integers(1, 3))
    def test_round_trip_shape(self, n, c, k, m):
        x = Tensor(np.zeros((n, c, k * m, k * 2 * m)))
        assert upsample_nearest(maxpool2d(x, k), k).shape == x.shape

    def test_gradients(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(2, 2, 4, 6)), requires_grad=True)
        probe_p = rng.normal(size=(2, 2, 2, 3))
        probe_u = rng.normal(size=(2, 2, 12, 18))
        for fn, probe in ((lambda t: maxpool2d(t, 2), probe_p), (lambda t: upsample_nearest(t, 3), probe_u)):
            with Tape() as tape:
                out = (fn(x) * probe).sum()
            g = backward(tape, out)[x]
            np.testing.assert_allclose(g, numeric_grad(lambda: float((fn(x).data * probe).sum()), x.data), atol=1e-7)


class TestActivations:
    def test_values(self):
        np.testing.assert_array_equal(relu(Tensor([-2.0, 3.0])).data, [0.0, 3.0])
        assert sigmoid(Tensor(0.0)).data == 0.5
        assert sigmoid(Tensor(math.log(3))).data == pytest.approx(0.75)

    def test_sigmoid_extremes_finite(self):
        out = sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
        assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0

    def test_elementwise_gradients(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.uniform(0.2, 2.0, size=(3, 4)), requires_grad=True)
        y = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)

        def build():
            return (sigmoid(x) * y - relu(x - 1.0) / y + log(x) * 2.0 + (1.0 - x)).sum()

        with Tape() as tape:
            out = build()
        grads = backward(tape, out)
        for t in (x, y):
            np.testing.assert_allclose(grads[t], numeric_grad(lambda: float(build().data), t.data), rtol=1e-6, atol=1e-8)

    def test_concat_gradient(self):
        a = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
        b = Tensor(np.ones((1, 3, 2, 2)), requires_grad=True)
        w = np.arange(20.0).reshape(1, 5, 2, 2)
        with Tape() as tape:
            out = (concat([a, b]) * w).sum()
        g = backward(tape, out)
        np.testing.assert_array_equal(g[a], w[:, :2])
        np.testing.assert_array_equal(g[b], w[:, 2:])


class TestBatchNorm:
    def test_unit_batch(self):
        p = BatchNormParams(1, affine=False, dtype=np.float64)
        x = Tensor(np.array([-1.0, 1.0]).reshape(2, 1, 1, 1))
        out = batchnorm(x, p, training=True).data.ravel()
        np.testing.assert_allclose(out, np.array([-1.0, 1.0]) / math.sqrt(1 + p.eps))
        assert p.num_params() == 0 and p.parameters() == []

    def test_constant_channel(self):
        p = BatchNormParams(2, affine=False, dtype=np.float64)
        out = batchnorm(Tensor(np.full((3, 2, 2, 2), 4.2)), p, training=True).data
        np.testing.assert_array_equal(out, 0.0)

    def test_inference_identity(self):
        p = BatchNormParams(2, affine=False, dtype=np.float64)
        x = np.random.default_rng(0).normal(size=(2, 2, 3, 3))
        np.testing.assert_allclose(batchnorm(Tensor(x), p, training=False).data, x / math.sqrt(1 + p.eps))

    def test_running_stats_update(self):
        p = BatchNormParams(1, affine=True, momentum=0.5, dtype=np.float64)
        x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
        batchnorm(Tensor(x), p, training=True)
        assert p.running_mean[0] == pytest.approx(1.0)
        assert p.running_var[0] == pytest.approx(0.5 * 1 + 0.5 * 2.0)  # unbiased var = 2

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_normalized_moments(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(rng.uniform(-3, 3), rng.uniform(0.5, 3), size=(4, 3, 5, 5))
        p = BatchNormParams(3, affine=False, dtype=np.float64)
        out = batchnorm(Tensor(x), p, training=True).data
        assert np.all(np.abs(out.mean(axis=(0, 2, 3))) <= 1e-6)
        var = out.var(axis=(0, 2, 3))
        np.testing.assert_allclose(var, 1.0 / (1.0 + p.eps), atol=1e-4)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            batchnorm(Tensor(np.ones((1, 2, 2, 2))), BatchNormParams(3), True)

    @pytest.mark.parametrize("training", [True, False])
    @pytest.mark.parametrize("affine", [True, False])
    def test_gradients(self, training, affine):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        probe = rng.normal(size=x.shape)

        def make():
            p = BatchNormParams(2, affine=affine, dtype=np.float64,
                                running_mean=np.array([0.3, -0.2]), running_var=np.array([1.5, 0.7]))
            if affine:
                p.weight.data[:] = [1.3, 0.6]
                p.bias.data[:] = [0.1, -0.4]
            return p

        p = make()
        with Tape() as tape:
            out = (batchnorm(x, p, training) * probe).sum()
        grads = backward(tape, out)

        def loss():
            return float((batchnorm(x, make(), training).data * probe).sum())

        np.testing.assert_allclose(grads[x], numeric_grad(loss, x.data), rtol=1e-5, atol=1e-7)


class TestTape:
    def test_linear_gradient(self):
        x = np.array([1.5, -2.0, 0.25])
        w = Tensor(np.zeros(3), requires_grad=True)
        with Tape() as tape:
            loss = (w * x).sum()
        np.testing.assert_array_equal(backward(tape, loss)[w], x)

    def test_unused_parameter_zero(self):
        w = Tensor(np.ones(2), requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = (w * 3.0).sum()
        grads = backward(tape, loss, params=[w, unused])
        np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))

    def test_reverse_order_and_reuse(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            a = w * 2.0
            b = a + w
            loss = (b * a).sum()
        assert [r.out for r in tape.records][-1] is loss
        grads = backward(tape, loss)
        # loss = sum(2w * 3w) = 6 w^2  ->  12 w
        np.testing.assert_allclose(grads[w], [12.0, 12.0])
        with pytest.raises(TapeError):
            backward(tape, loss)
        with pytest.raises(TapeError):
            with tape:
                pass

    def test_no_tape_no_record(self):
        w = Tensor(np.ones(2), requires_grad=True)
        out = w * 2.0
        assert not out.requires_grad


class _Linear:
    def __init__(self, rng):
        self.w = Tensor(rng.normal(size=(4,)), requires_grad=True)

    def parameters(self):
        return [self.w]

    def __call__(self, x):
        return (self.w * x).sum()


class _SmallNet:
    """conv -> bn -> relu -> pool -> conv, ~50 parameters."""

    def __init__(self, rng):
        self.c1 = conv_params(rng, 2, 1, 3, pad=1)
        self.bn = BatchNormParams(2, affine=True, dtype=np.float64)
        self.c2 = conv_params(rng, 1, 2, 3, pad=1)

    def parameters(self):
        return self.c1.parameters() + self.bn.parameters() + self.c2.parameters()

    def buffers(self):
        return [self.bn.running_mean, self.bn.running_var]

    def __call__(self, x):
        h = maxpool2d(relu(batchnorm(conv2d(x, self.c1), self.bn, True)), 2)
        return (sigmoid(conv2d(h, self.c2)) * 1.7).sum()


class TestGradcheck:
    def test_linear_at_noise_floor(self):
        rng = np.random.default_rng(0)
        assert gradcheck(_Linear(rng), Tensor(rng.normal(size=4))) < 1e-8

    def test_no_parameters(self):
        class Empty:
            def parameters(self):
                return []

        assert gradcheck(Empty(), None) == 0.0

    def test_small_network(self):
        rng = np.random.default_rng(11)
        net = _SmallNet(rng)
        assert 40 <= sum(p.size for p in net.parameters()) <= 60
        assert gradcheck(net, Tensor(rng.normal(size=(2, 1, 4, 4)))) < 1e-4

    def test_buffers_restored(self):
        rng = np.random.default_rng(3)
        net = _SmallNet(rng)
        before = [b.copy() for b in net.buffers()]
        gradcheck(net, Tensor(rng.normal(size=(2, 1, 4, 4))))
        for b, saved in zip(net.buffers(), before):
            np.testing.assert_array_equal(b, saved)

    def test_relu_kink_is_skipped_not_scored(self):
        class Kinked:
            def __init__(self):
                self.w = Tensor(np.array([0.0, 1.0]), requires_grad=True)

            def parameters(self):
                return [self.w]

            def __call__(self, x):
                return relu(self.w * x).sum()

        # w[0] * 1 sits exactly on the kink; a central difference reads 0.5
        report = gradcheck_report(Kinked(), Tensor(np.ones(2)))
        assert (report.checked, report.skipped) == (1, 1)
        assert report.max_error < 1e-8
        unguarded = gradcheck_report(Kinked(), Tensor(np.ones(2)), skip_kinks=False)
        assert unguarded.max_error == pytest.approx(1.0)

    def test_smooth_model_skips_nothing(self):
        rng = np.random.default_rng(0)
        report = gradcheck_report(_Linear(rng), Tensor(rng.normal(size=4)))
        assert report.skipped == 0 and report.checked == 4
