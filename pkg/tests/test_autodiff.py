"""Tensor-core primitives: forward golden values, adjointness, gradients."""

import numpy as np
import pytest

from bichange.autodiff import Graph, NonFiniteError, ShapeError, as_tensor
from bichange.gradcheck import grad_check


def bilinear_oracle(x, out_h, out_w):
    """Independent per-pixel interpolation using the coordinate rule directly."""
    c, h, w = x.shape
    out = np.zeros((c, out_h, out_w))
    for oy in range(out_h):
        for ox in range(out_w):
            sy = min(max((oy + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
            sx = min(max((ox + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            wy, wx = sy - y0, sx - x0
            out[:, oy, ox] = ((1 - wy) * (1 - wx) * x[:, y0, x0]
                              + (1 - wy) * wx * x[:, y0, x1]
                              + wy * (1 - wx) * x[:, y1, x0]
                              + wy * wx * x[:, y1, x1])
    return out


class TestConv2d:
    def test_identity_kernel(self):
        g = Graph()
        x = g.constant(np.ones((1, 3, 3)))
        k = g.constant(np.ones((1, 1, 1, 1)))
        y = g.conv2d(x, k)
        np.testing.assert_array_equal(y.value, np.ones((1, 3, 3)))

    def test_hand_evaluated_sum(self):
        # 3x3 ones kernel over [[1..9]] gathers every element: 45
        g = Graph()
        x = g.constant(np.arange(1.0, 10.0).reshape(1, 3, 3))
        k = g.constant(np.ones((1, 1, 3, 3)))
        y = g.conv2d(x, k)
        assert y.value.shape == (1, 1, 1)
        assert y.value[0, 0, 0] == 45.0

    def test_strided_output_shape(self):
        g = Graph()
        y = g.conv2d(g.constant(np.random.default_rng(0).normal(size=(1, 4, 4))),
                     g.constant(np.zeros((1, 1, 3, 3))), stride=2, padding=1)
        assert y.value.shape == (1, 2, 2)

    def test_channel_mismatch_rejected(self):
        g = Graph()
        with pytest.raises(ShapeError):
            g.conv2d(g.constant(np.zeros((2, 4, 4))), g.constant(np.zeros((1, 3, 2, 2))))

    def test_bias_added_per_output_channel(self):
        g = Graph()
        y = g.conv2d(g.constant(np.zeros((1, 2, 2))),
                     g.constant(np.zeros((3, 1, 1, 1))),
                     b=g.constant([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(y.value[:, 0, 0], [1.0, 2.0, 3.0])

    def test_input_gradient_is_adjoint(self):
        # <conv2d(x,K), y> == <x, conv2d-input-gradient(y,K)>, conv being linear in x
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        y = rng.normal(size=(3, 3, 3))
        g = Graph()
        xn = g.parameter("x", x)
        out = g.conv2d(xn, g.constant(k))
        loss = g.reduce_sum(g.mul(out, g.constant(y)))
        gx = g.backward(loss)["x"]
        assert abs(float(np.sum(out.value * y)) - float(np.sum(x * gx))) < 1e-9


class TestDeconv2d:
    def test_scatter_of_single_input(self):
        g = Graph()
        y = g.deconv2d(g.constant(np.full((1, 1, 1), 2.0)),
                       g.constant(np.ones((1, 1, 2, 2))), stride=2)
        np.testing.assert_array_equal(y.value, np.full((1, 2, 2), 2.0))

    def test_one_hot_kernel_is_upsample(self):
        # k == stride with a single tap places each input on a sparse grid
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 3, 3))
        k = np.zeros((1, 1, 2, 2))
        k[0, 0, 0, 0] = 1.0
        g = Graph()
        y = g.deconv2d(g.constant(x), g.constant(k), stride=2).value
        assert y.shape == (1, 6, 6)
        np.testing.assert_array_equal(y[0, ::2, ::2], x[0])
        assert np.all(y[0, 1::2, :] == 0) and np.all(y[0, :, 1::2] == 0)

    def test_adjoint_of_conv2d(self):
        # <conv2d(x,K), y> == <x, deconv2d(y,K)> with the shared kernel array
        rng = np.random.default_rng(3)
        for stride, k in [(1, 3), (1, 2), (2, 2)]:
            x = rng.normal(size=(1, 4, 4))
            kern = rng.normal(size=(2, 1, k, k))
            g = Graph()
            conv = g.conv2d(g.constant(x), g.constant(kern), stride=stride)
            y = rng.normal(size=conv.value.shape)
            back = g.deconv2d(g.constant(y), g.constant(kern), stride=stride)
            assert abs(np.sum(conv.value * y) - np.sum(x * back.value)) < 1e-9

    def test_bad_stride_rejected(self):
        g = Graph()
        with pytest.raises(ShapeError):
            g.deconv2d(g.constant(np.zeros((1, 2, 2))),
                       g.constant(np.zeros((1, 1, 2, 2))), stride=0)


class TestLinear:
    def test_identity(self):
        g = Graph()
        x = np.random.default_rng(4).normal(size=(5, 3))
        y = g.linear(g.constant(x), g.constant(np.eye(3)), g.constant(np.zeros(3)))
        np.testing.assert_array_equal(y.value, x)

    def test_hand_evaluated(self):
        g = Graph()
        y = g.linear(g.constant([1.0, 2.0]), g.constant([[1.0, 1.0]]), g.constant([3.0]))
        np.testing.assert_array_equal(y.value, [6.0])

    def test_batch_shape_preserved(self):
        g = Graph()
        y = g.linear(g.constant(np.zeros((7, 2, 5, 3))), g.constant(np.zeros((4, 3))))
        assert y.value.shape == (7, 2, 5, 4)

    def test_dim_mismatch_rejected(self):
        g = Graph()
        with pytest.raises(ShapeError):
            g.linear(g.constant(np.zeros((2, 3))), g.constant(np.zeros((4, 5))))


class TestPointwise:
    def test_sigmoid_at_zero(self):
        g = Graph()
        assert g.sigmoid(g.constant(0.0)).value == 0.5

    def test_relu(self):
        g = Graph()
        y = g.relu(g.constant([-3.0, 3.0]))
        np.testing.assert_array_equal(y.value, [0.0, 3.0])

    def test_abs_of_equal_difference(self):
        g = Graph()
        a = g.constant(np.random.default_rng(5).normal(size=(2, 3)))
        zero = g.absval(g.sub(a, a))
        np.testing.assert_array_equal(zero.value, np.zeros((2, 3)))

    def test_gelu_exact_gaussian_cdf(self):
        from scipy.stats import norm
        g = Graph()
        x = np.linspace(-4, 4, 33)
        y = g.gelu(g.constant(x)).value
        np.testing.assert_allclose(y, x * norm.cdf(x), atol=1e-14)

    def test_binary_shape_mismatch_rejected(self):
        g = Graph()
        with pytest.raises(ShapeError):
            g.add(g.constant(np.zeros(3)), g.constant(np.zeros(4)))

    def test_scalar_operand_allowed(self):
        g = Graph()
        y = g.mul(g.constant(np.ones((2, 2))), g.constant(3.0))
        np.testing.assert_array_equal(y.value, np.full((2, 2), 3.0))

    def test_nonfinite_rejected(self):
        g = Graph()
        with pytest.raises(NonFiniteError):
            g.constant([np.inf, 1.0])
        with pytest.raises(NonFiniteError):
            as_tensor([np.nan])


class TestSoftmax:
    def test_symmetry(self):
        g = Graph()
        np.testing.assert_allclose(g.softmax(g.constant([0.0, 0.0])).value, [0.5, 0.5])

    def test_hand_evaluated(self):
        g = Graph()
        y = g.softmax(g.constant([np.log(2.0), 0.0])).value
        np.testing.assert_allclose(y, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(4, 7))
        g = Graph()
        a = g.softmax(g.constant(x)).value
        b = g.softmax(g.constant(x + 13.7)).value
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rows_sum_to_one(self):
        # strict openness of (0,1) is checked at logit gaps below the
        # float64 saturation threshold (~36)
        rng = np.random.default_rng(7)
        for _ in range(20):
            x = rng.normal(size=(3, 5, 6)) * rng.uniform(0.1, 4.0)
            g = Graph()
            s = g.softmax(g.constant(x)).value
            np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
            assert np.all(s > 0) and np.all(s < 1)


class TestBilinearResize:
    def test_constant_preserved(self):
        g = Graph()
        y = g.bilinear_resize(g.constant(np.full((2, 3, 5), 4.2)), 7, 11)
        np.testing.assert_allclose(y.value, 4.2, atol=1e-12)

    def test_identity_when_same_size(self):
        x = np.random.default_rng(8).normal(size=(3, 6, 5))
        g = Graph()
        y = g.bilinear_resize(g.constant(x), 6, 5)
        np.testing.assert_array_equal(y.value, x)

    def test_against_per_pixel_oracle(self):
        x = np.array([[[1.0, 3.0], [5.0, 7.0]]])
        g = Graph()
        y = g.bilinear_resize(g.constant(x), 4, 4).value
        np.testing.assert_allclose(y, bilinear_oracle(x, 4, 4), atol=1e-12)

    def test_oracle_on_random_sizes(self):
        rng = np.random.default_rng(9)
        for h, w, ho, wo in [(3, 5, 7, 2), (4, 4, 4, 9), (6, 2, 3, 3)]:
            x = rng.normal(size=(2, h, w))
            g = Graph()
            y = g.bilinear_resize(g.constant(x), ho, wo).value
            np.testing.assert_allclose(y, bilinear_oracle(x, ho, wo), atol=1e-12)


class TestConcatChannels:
    def test_neutral_zero_channel(self):
        x = np.random.default_rng(10).normal(size=(3, 4, 4))
        g = Graph()
        y = g.concat_channels(g.constant(x), g.constant(np.zeros((0, 4, 4))))
        np.testing.assert_array_equal(y.value, x)

    def test_shape_arithmetic(self):
        g = Graph()
        y = g.concat_channels(g.constant(np.zeros((3, 4, 4))), g.constant(np.zeros((5, 4, 4))))
        assert y.value.shape == (8, 4, 4)

    def test_placement(self):
        rng = np.random.default_rng(11)
        a, b = rng.normal(size=(2, 3, 3)), rng.normal(size=(4, 3, 3))
        g = Graph()
        y = g.concat_channels(g.constant(a), g.constant(b)).value
        np.testing.assert_array_equal(y[0], a[0])
        np.testing.assert_array_equal(y[2], b[0])

    def test_spatial_mismatch_rejected(self):
        g = Graph()
        with pytest.raises(ShapeError):
            g.concat_channels(g.constant(np.zeros((1, 4, 4))), g.constant(np.zeros((1, 5, 4))))


class TestCosineMap:
    def test_identical_vectors(self):
        a = np.random.default_rng(12).normal(size=(4, 3, 3)) + 0.1
        g = Graph()
        c = g.cosine_map(g.constant(a), g.constant(a)).value
        np.testing.assert_allclose(c, 1.0, atol=1e-9)

    def test_antipodal(self):
        a = np.random.default_rng(13).normal(size=(4, 2, 2)) + 0.2
        g = Graph()
        c = g.cosine_map(g.constant(a), g.constant(-a)).value
        np.testing.assert_allclose(c, -1.0, atol=1e-9)

    def test_orthogonal(self):
        a = np.zeros((2, 1, 1)); a[0] = 1.0
        b = np.zeros((2, 1, 1)); b[1] = 1.0
        g = Graph()
        assert abs(g.cosine_map(g.constant(a), g.constant(b)).value[0, 0]) < 1e-12

    def test_range(self):
        rng = np.random.default_rng(14)
        g = Graph()
        c = g.cosine_map(g.constant(rng.normal(size=(8, 5, 5))),
                         g.constant(rng.normal(size=(8, 5, 5)))).value
        assert np.all(c >= -1.0) and np.all(c <= 1.0)


class TestBackward:
    def test_sum_gives_ones(self):
        g = Graph()
        x = g.parameter("x", np.random.default_rng(15).normal(size=(3, 4)))
        grads = g.backward(g.reduce_sum(x))
        np.testing.assert_array_equal(grads["x"], np.ones((3, 4)))

    def test_sigmoid_closed_form(self):
        xv = np.random.default_rng(16).normal(size=7)
        g = Graph()
        x = g.parameter("x", xv)
        grads = g.backward(g.reduce_sum(g.sigmoid(x)))
        s = 1.0 / (1.0 + np.exp(-xv))
        np.testing.assert_allclose(grads["x"], s * (1 - s), atol=1e-12)

    def test_conv_relu_sum_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        params = {"x": rng.normal(size=(1, 4, 4)), "k": rng.normal(size=(2, 1, 3, 3))}

        def build(p):
            g = Graph()
            x = g.parameter("x", p["x"])
            k = g.parameter("k", p["k"])
            return g, g.reduce_sum(g.relu(g.conv2d(x, k, padding=1)))

        report = grad_check(build, params, step=1e-5, tol=1e-6)
        assert report.passed, str(report)

    def test_unreachable_parameter_gets_zero_gradient(self):
        g = Graph()
        x = g.parameter("x", np.ones(3))
        unused = g.parameter("unused", np.ones((2, 2)))
        grads = g.backward(g.reduce_sum(x))
        np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))

    def test_non_scalar_loss_rejected(self):
        g = Graph()
        x = g.parameter("x", np.ones(3))
        with pytest.raises(ShapeError):
            g.backward(x)

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(18)
            g = Graph()
            x = g.parameter("x", rng.normal(size=(2, 6, 6)))
            k = g.constant(rng.normal(size=(3, 2, 3, 3)))
            y = g.softmax(g.reshape(g.conv2d(x, k, padding=1), (3, 36)))
            loss = g.reduce_sum(g.mul(y, y))
            return y.value.copy(), g.backward(loss)["x"].copy()

        y1, g1 = run()
        y2, g2 = run()
        assert np.array_equal(y1, y2) and np.array_equal(g1, g2)


class TestGradCheck:
    def test_quadratic_exact(self):
        def build(p):
            g = Graph()
            x = g.parameter("x", p["x"])
            return g, g.reduce_sum(g.mul(x, x))

        report = grad_check(build, {"x": np.random.default_rng(19).normal(size=5)},
                            step=1e-5, tol=1e-9)
        assert report.passed, str(report)

    def test_bad_step_rejected(self):
        with pytest.raises(ValueError):
            grad_check(lambda p: None, {}, step=0.1)

    def test_nondeterministic_build_rejected(self):
        import itertools
        counter = itertools.count()

        def build(p):
            g = Graph()
            x = g.parameter("x", p["x"])
            return g, g.scale(g.reduce_sum(x), 1.0 + next(counter))

        with pytest.raises(ValueError, match="deterministic"):
            grad_check(build, {"x": np.ones(2)})


PRIMITIVE_CASES = [
    ("add", lambda g, a, b: g.add(a, b), 2),
    ("sub", lambda g, a, b: g.sub(a, b), 2),
    ("mul", lambda g, a, b: g.mul(a, b), 2),
    ("div", lambda g, a, b: g.div(a, g.shift(g.mul(b, b), 0.5)), 2),
    ("sigmoid", lambda g, a: g.sigmoid(a), 1),
    ("gelu", lambda g, a: g.gelu(a), 1),
    ("abs", lambda g, a: g.absval(g.shift(a, 3.0)), 1),
    ("sqrt", lambda g, a: g.sqrt(g.shift(g.mul(a, a), 1.0)), 1),
    ("softmax", lambda g, a: g.softmax(a), 1),
    ("log_softmax", lambda g, a: g.log_softmax(a), 1),
    ("transpose", lambda g, a: g.mul(g.transpose(a, (1, 0)), g.transpose(a, (1, 0))), 1),
    ("reshape", lambda g, a: g.mul(g.reshape(a, (12,)), g.reshape(a, (12,))), 1),
    ("expand", lambda g, a: g.expand(g.reshape(a, (3, 4, 1)), (3, 4, 5)), 1),
    ("bilinear", lambda g, a: g.bilinear_resize(g.reshape(a, (1, 3, 4)), 5, 7), 1),
]


@pytest.mark.parametrize("name,fn,arity", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_every_primitive_gradient(name, fn, arity):
    rng = np.random.default_rng(hash(name) % 2**31)
    params = {f"p{i}": rng.normal(size=(3, 4)) for i in range(arity)}

    def build(p):
        g = Graph()
        nodes = [g.parameter(k, p[k]) for k in sorted(p)]
        out = fn(g, *nodes)
        return g, g.reduce_sum(g.mul(out, out))

    report = grad_check(build, params, step=1e-5, tol=1e-4)
    assert report.passed, str(report)


def test_matmul_linear_take_rows_gradients():
    rng = np.random.default_rng(20)
    params = {
        "a": rng.normal(size=(2, 3, 4)),
        "b": rng.normal(size=(2, 4, 5)),
        "w": rng.normal(size=(6, 5)),
        "bias": rng.normal(size=6),
        "table": rng.normal(size=(7, 2)),
    }
    idx = rng.integers(0, 7, size=(3, 3))

    def build(p):
        g = Graph()
        a = g.parameter("a", p["a"])
        b = g.parameter("b", p["b"])
        w = g.parameter("w", p["w"])
        bias = g.parameter("bias", p["bias"])
        table = g.parameter("table", p["table"])
        y = g.linear(g.matmul(a, b), w, bias)
        t = g.take_rows(table, idx)
        return g, g.add(g.reduce_sum(g.mul(y, y)), g.reduce_sum(g.mul(t, t)))

    report = grad_check(build, params, step=1e-5, tol=1e-4)
    assert report.passed, str(report)


def test_conv_deconv_gradients():
    rng = np.random.default_rng(21)
    params = {
        "x": rng.normal(size=(2, 6, 6)),
        "k": rng.normal(size=(3, 2, 3, 3)),
        "b": rng.normal(size=3),
        "dk": rng.normal(size=(2, 3, 2, 2)),
    }

    def build(p):
        g = Graph()
        x = g.parameter("x", p["x"])
        k = g.parameter("k", p["k"])
        b = g.parameter("b", p["b"])
        dk = g.parameter("dk", p["dk"])
        y = g.conv2d(x, k, b, stride=2, padding=1)
        z = g.deconv2d(x, dk, stride=2)
        return g, g.add(g.reduce_sum(g.mul(y, y)), g.reduce_sum(g.mul(z, z)))

    report = grad_check(build, params, step=1e-5, tol=1e-4)
    assert report.passed, str(report)
