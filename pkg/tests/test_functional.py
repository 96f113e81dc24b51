"""Neural-net ops against independent references.

conv3d is compared with a plain triple-loop cross-correlation, the
resampling ops with np.interp / hand-built arrays, and every backward
pass with central differences or an adjoint identity.
"""

import numpy as np
import pytest
from conftest import fd_grad, interp_axis

from shapeprior.functional import (
    MlpWeights,
    conv3d,
    downsample_avg,
    gelu,
    layer_norm,
    log_softmax,
    mlp,
    one_hot,
    relu,
    replicate_pad,
    softmax,
    upsample_trilinear,
)
from shapeprior.tensor import Tensor


def conv3d_loops(x, k, bias=None, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Reference cross-correlation written as explicit loops (float64)."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    O, C, kd, kh, kw = k.shape
    sd, sh, sw = stride
    pd, ph, pw = padding
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    D, H, W = xp.shape[1:]
    od = (D - kd) // sd + 1
    oh = (H - kh) // sh + 1
    ow = (W - kw) // sw + 1
    y = np.zeros((O, od, oh, ow))
    for o in range(O):
        for z in range(od):
            for r in range(oh):
                for c in range(ow):
                    acc = 0.0
                    for ch in range(C):
                        for a in range(kd):
                            for b in range(kh):
                                for e in range(kw):
                                    acc += (xp[ch, z * sd + a, r * sh + b,
                                               c * sw + e]
                                            * k[o, ch, a, b, e])
                    y[o, z, r, c] = acc
        if bias is not None:
            y[o] += bias[o]
    return y


class TestSoftmax:
    def test_hand_case(self):
        x = Tensor(np.array([[0.0, np.log(2.0)]]))
        assert np.allclose(softmax(x).data, [[1 / 3, 2 / 3]], rtol=1e-12)

    def test_rows_sum_to_one_and_shift_invariance(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(3, 5))
        s = softmax(Tensor(v), axis=-1).data
        assert np.allclose(s.sum(axis=-1), 1.0, rtol=1e-12)
        shifted = softmax(Tensor(v + 100.0), axis=-1).data
        assert np.allclose(s, shifted, rtol=1e-10)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        x0 = rng.normal(size=(2, 4))
        w = rng.normal(size=(2, 4))
        x = Tensor(x0, requires_grad=True)
        (softmax(x, axis=-1) * Tensor(w)).sum().backward()
        ref = fd_grad(
            lambda v: float((np.exp(v) / np.exp(v).sum(-1, keepdims=True)
                             * w).sum()), x0)
        assert np.allclose(x.grad, ref, atol=1e-8)

    def test_axis_argument(self):
        v = np.random.default_rng(2).normal(size=(3, 4))
        s = softmax(Tensor(v), axis=0).data
        assert np.allclose(s.sum(axis=0), 1.0, rtol=1e-12)


class TestLogSoftmax:
    def test_equals_log_of_softmax(self):
        v = np.random.default_rng(3).normal(size=(4, 6))
        a = log_softmax(Tensor(v)).data
        b = np.log(softmax(Tensor(v)).data)
        assert np.allclose(a, b, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x0 = rng.normal(size=(2, 3))
        w = rng.normal(size=(2, 3))
        x = Tensor(x0, requires_grad=True)
        (log_softmax(x) * Tensor(w)).sum().backward()

        def f(v):
            z = v - v.max(-1, keepdims=True)
            return float(((z - np.log(np.exp(z).sum(-1, keepdims=True)))
                          * w).sum())

        assert np.allclose(x.grad, fd_grad(f, x0), atol=1e-8)


class TestLayerNorm:
    def test_hand_case_unit_affine(self):
        x = Tensor(np.array([[1.0, 2.0, 3.0]]))
        ones = Tensor(np.ones(3))
        zeros = Tensor(np.zeros(3))
        y = layer_norm(x, ones, zeros, eps=0.0).data
        r = np.sqrt(1.5)  # (x - 2)/sqrt(2/3)
        assert np.allclose(y, [[-r, 0.0, r]], rtol=1e-12)

    def test_affine_parameters_apply_after_normalisation(self):
        x = Tensor(np.array([[1.0, 2.0, 3.0]]))
        g = Tensor(np.array([2.0, 2.0, 2.0]))
        b = Tensor(np.array([1.0, 1.0, 1.0]))
        y = layer_norm(x, g, b, eps=0.0).data
        r = np.sqrt(1.5)
        assert np.allclose(y, [[1 - 2 * r, 1.0, 1 + 2 * r]], rtol=1e-12)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        x0 = rng.normal(size=(2, 5))
        g0 = rng.normal(size=5)
        b0 = rng.normal(size=5)
        w = rng.normal(size=(2, 5))
        eps = 1e-5

        def f(xv, gv, bv):
            mu = xv.mean(-1, keepdims=True)
            var = ((xv - mu) ** 2).mean(-1, keepdims=True)
            return float(((xv - mu) / np.sqrt(var + eps) * gv + bv)
                         .dot(w.T).trace())

        x = Tensor(x0, requires_grad=True)
        g = Tensor(g0, requires_grad=True)
        b = Tensor(b0, requires_grad=True)
        (layer_norm(x, g, b, eps=eps) * Tensor(w)).sum().backward()
        assert np.allclose(x.grad, fd_grad(lambda v: f(v, g0, b0), x0),
                           atol=1e-7)
        assert np.allclose(g.grad, fd_grad(lambda v: f(x0, v, b0), g0),
                           atol=1e-7)
        assert np.allclose(b.grad, fd_grad(lambda v: f(x0, g0, v), b0),
                           atol=1e-7)

    def test_rejects_wrong_affine_shape(self):
        with pytest.raises(ValueError):
            layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.zeros(3)),
                       Tensor(np.zeros(4)))


def test_relu_values_and_gate():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    y = relu(x)
    assert np.array_equal(y.data, [0.0, 0.0, 2.0])
    (y * Tensor(np.array([5.0, 7.0, 11.0]))).sum().backward()
    # the gate is strict: zero input contributes no gradient
    assert np.array_equal(x.grad, [0.0, 0.0, 11.0])


class TestGelu:
    def test_fixed_points(self):
        x = Tensor(np.array([0.0, 6.0, -6.0]))
        y = gelu(x).data
        assert y[0] == 0.0
        assert np.allclose(y[1], 6.0, atol=1e-5)
        assert np.allclose(y[2], 0.0, atol=1e-5)

    def test_gradient_matches_finite_differences(self):
        x0 = np.linspace(-2.5, 2.5, 11)
        x = Tensor(x0, requires_grad=True)
        gelu(x).sum().backward()

        def f(v):
            inner = np.sqrt(2 / np.pi) * (v + 0.044715 * v ** 3)
            return float((0.5 * v * (1 + np.tanh(inner))).sum())

        assert np.allclose(x.grad, fd_grad(f, x0), atol=1e-7)


class TestMlp:
    def _weights(self, rng, f, hidden):
        return MlpWeights(
            w1=Tensor(rng.normal(size=(f, hidden)) * 0.3, requires_grad=True),
            b1=Tensor(np.zeros(hidden), requires_grad=True),
            w2=Tensor(rng.normal(size=(hidden, f)) * 0.3, requires_grad=True),
            b2=Tensor(np.zeros(f), requires_grad=True),
        )

    def test_leading_axes_are_preserved(self):
        rng = np.random.default_rng(6)
        w = self._weights(rng, 4, 7)
        y = mlp(Tensor(rng.normal(size=(2, 3, 4))), w)
        assert y.shape == (2, 3, 4)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        f, hidden = 3, 5
        weights = self._weights(rng, f, hidden)
        x0 = rng.normal(size=(2, f))

        def run(xv, w1, b1, w2, b2):
            inner = np.sqrt(2 / np.pi)
            h = xv @ w1 + b1
            h = 0.5 * h * (1 + np.tanh(inner * (h + 0.044715 * h ** 3)))
            return float((h @ w2 + b2).sum())

        x = Tensor(x0, requires_grad=True)
        mlp(x, weights).sum().backward()
        vals = [t.data for t in weights.tensors()]
        assert np.allclose(x.grad, fd_grad(
            lambda v: run(v, *vals), x0), atol=1e-7)
        assert np.allclose(weights.w1.grad, fd_grad(
            lambda v: run(x0, v, *vals[1:]), vals[0]), atol=1e-7)
        assert np.allclose(weights.b2.grad, fd_grad(
            lambda v: run(x0, *vals[:3], v), vals[3]), atol=1e-7)

    def test_width_mismatch_is_rejected(self):
        rng = np.random.default_rng(8)
        w = self._weights(rng, 4, 6)
        with pytest.raises(ValueError):
            mlp(Tensor(np.zeros((2, 5))), w)

    def test_inconsistent_weight_shapes_are_rejected(self):
        rng = np.random.default_rng(9)
        w = self._weights(rng, 4, 6)
        w.w2 = Tensor(np.zeros((5, 4)))
        with pytest.raises(ValueError):
            mlp(Tensor(np.zeros((2, 4))), w)


class TestConv3d:
    @pytest.mark.parametrize("stride,padding", [
        ((1, 1, 1), (1, 1, 1)),
        ((1, 2, 2), (1, 1, 1)),
        ((2, 2, 2), (0, 0, 0)),
    ])
    def test_matches_loop_reference(self, stride, padding):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(2, 5, 6, 7))
        k = rng.normal(size=(3, 2, 3, 3, 3))
        b = rng.normal(size=3)
        got = conv3d(Tensor(x), Tensor(k), Tensor(b), stride=stride,
                     padding=padding).data
        want = conv3d_loops(x, k, b, stride, padding)
        assert got.shape == want.shape
        assert np.allclose(got, want, atol=1e-12)

    def test_same_padding_preserves_extents(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(1, 4, 6, 8)).astype(np.float32)
        k = rng.normal(size=(2, 1, 3, 3, 3)).astype(np.float32)
        y = conv3d(Tensor(x), Tensor(k))
        assert y.shape == (2, 4, 6, 8)

    def test_pointwise_fast_path_matches_reference(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(3, 2, 4, 4))
        k = rng.normal(size=(2, 3, 1, 1, 1))
        b = rng.normal(size=2)
        got = conv3d(Tensor(x), Tensor(k), Tensor(b)).data
        want = conv3d_loops(x, k, b, (1, 1, 1), (0, 0, 0))
        assert np.allclose(got, want, atol=1e-12)

    @pytest.mark.parametrize("kshape,stride", [
        ((2, 1, 1, 1, 1), (1, 1, 1)),       # pointwise fast path
        ((2, 1, 3, 3, 3), (1, 1, 1)),
        ((2, 1, 1, 3, 3), (1, 2, 2)),       # in-plane anisotropic
        ((1, 2, 3, 3, 3), (2, 2, 2)),
    ])
    def test_gradients_match_finite_differences(self, kshape, stride):
        rng = np.random.default_rng(13)
        C = kshape[1]
        x0 = rng.normal(size=(C, 4, 4, 4))
        k0 = rng.normal(size=kshape)
        b0 = rng.normal(size=kshape[0])
        w = None

        def run(xv, kv, bv):
            y = conv3d_loops(xv, kv, bv, stride,
                             tuple((e - 1) // 2 for e in kshape[2:]))
            return float((y * w).sum())

        x = Tensor(x0, requires_grad=True)
        k = Tensor(k0, requires_grad=True)
        b = Tensor(b0, requires_grad=True)
        out = conv3d(x, k, b, stride=stride, padding="same")
        w = np.random.default_rng(14).normal(size=out.shape)
        (out * Tensor(w)).sum().backward()

        assert np.allclose(x.grad, fd_grad(
            lambda v: run(v, k0, b0), x0), atol=1e-7)
        assert np.allclose(k.grad, fd_grad(
            lambda v: run(x0, v, b0), k0), atol=1e-7)
        assert np.allclose(b.grad, fd_grad(
            lambda v: run(x0, k0, v), b0), atol=1e-7)

    def test_input_gradient_skipped_for_constant_input(self):
        rng = np.random.default_rng(15)
        x = Tensor(rng.normal(size=(1, 4, 4, 4)))
        k = Tensor(rng.normal(size=(1, 1, 3, 3, 3)), requires_grad=True)
        conv3d(x, k).sum().backward()
        assert x.grad is None
        assert k.grad is not None

    def test_shape_validation(self):
        x = Tensor(np.zeros((1, 4, 4, 4)))
        with pytest.raises(ValueError):
            conv3d(Tensor(np.zeros((4, 4, 4))), Tensor(np.zeros((1, 1, 3, 3, 3))))
        with pytest.raises(ValueError):
            conv3d(x, Tensor(np.zeros((1, 2, 3, 3, 3))))  # channel mismatch
        with pytest.raises(ValueError):
            conv3d(x, Tensor(np.zeros((1, 1, 2, 3, 3))))  # even extent
        with pytest.raises(ValueError):
            conv3d(x, Tensor(np.zeros((1, 1, 3, 3, 3))),
                   bias=Tensor(np.zeros(2)))
        with pytest.raises(ValueError):
            conv3d(x, Tensor(np.zeros((1, 1, 3, 3, 3)),
                             dtype=np.float32))  # dtype mismatch
        with pytest.raises(ValueError):
            conv3d(Tensor(np.zeros((1, 1, 1, 1))),
                   Tensor(np.zeros((1, 1, 3, 3, 3))), padding=0)


class TestUpsampleTrilinear:
    def test_matches_interp_reference(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(2, 3, 4, 5))
        got = upsample_trilinear(Tensor(x), (2, 2, 2)).data
        want = interp_axis(interp_axis(interp_axis(x, 1, 2), 2, 2), 3, 2)
        assert got.shape == (2, 6, 8, 10)
        assert np.allclose(got, want, atol=1e-12)

    def test_anisotropic_factors(self):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(1, 2, 3, 4))
        got = upsample_trilinear(Tensor(x), (1, 2, 4)).data
        want = interp_axis(interp_axis(x, 2, 2), 3, 4)
        assert got.shape == (1, 2, 6, 16)
        assert np.allclose(got, want, atol=1e-12)

    def test_constant_field_is_bitwise_preserved(self):
        c = np.float32(0.1)  # not exactly representable sum-wise
        x = np.full((1, 2, 4, 4), c, dtype=np.float32)
        y = upsample_trilinear(Tensor(x), (2, 2, 2)).data
        assert y.dtype == np.float32
        assert np.array_equal(y, np.full((1, 4, 8, 8), c, dtype=np.float32))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(18)
        x0 = rng.normal(size=(1, 2, 3, 3))
        w = rng.normal(size=(1, 4, 6, 6))
        x = Tensor(x0, requires_grad=True)
        (upsample_trilinear(x, 2) * Tensor(w)).sum().backward()
        ref = fd_grad(lambda v: float(
            (interp_axis(interp_axis(interp_axis(v, 1, 2), 2, 2), 3, 2)
             * w).sum()), x0)
        assert np.allclose(x.grad, ref, atol=1e-7)

    def test_adjoint_identity(self):
        # <up(x), y> must equal <x, up^T(y)> exactly in float64
        rng = np.random.default_rng(19)
        x = Tensor(rng.normal(size=(2, 4, 4, 4)), requires_grad=True)
        y = rng.normal(size=(2, 8, 8, 8))
        out = upsample_trilinear(x, 2)
        (out * Tensor(y)).sum().backward()
        lhs = float((out.data * y).sum())
        rhs = float((x.data * x.grad).sum())
        assert np.allclose(lhs, rhs, rtol=1e-12)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            upsample_trilinear(Tensor(np.zeros((2, 2, 2))), 2)
        with pytest.raises(ValueError):
            upsample_trilinear(Tensor(np.zeros((1, 2, 2, 2))), (0, 1, 1))


class TestDownsampleAvg:
    def test_hand_case(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        y = downsample_avg(Tensor(x), (1, 2, 2)).data
        assert np.array_equal(y, [[[[2.5, 4.5], [10.5, 12.5]]]])

    def test_gradient_spreads_uniformly(self):
        x = Tensor(np.zeros((1, 2, 2, 2)), requires_grad=True)
        downsample_avg(x, 2).sum().backward()
        assert np.allclose(x.grad, np.full((1, 2, 2, 2), 1 / 8), rtol=1e-12)

    def test_divisibility_is_enforced(self):
        with pytest.raises(ValueError):
            downsample_avg(Tensor(np.zeros((1, 3, 4, 4))), 2)

    def test_inverts_constant_upsample(self):
        x = np.random.default_rng(20).normal(size=(2, 2, 2, 2))
        up = upsample_trilinear(Tensor(x), 2)
        back = downsample_avg(up, 2).data
        # not an exact inverse in general, but exact for constants
        const = np.full((1, 2, 2, 2), 3.25)
        u2 = upsample_trilinear(Tensor(const), 2)
        assert np.allclose(downsample_avg(u2, 2).data, const, rtol=1e-12)
        assert back.shape == x.shape


class TestReplicatePad:
    def test_hand_case_single_axis(self):
        x = np.array([[[[1.0, 2.0, 3.0]]]])  # (1,1,1,3)
        y = replicate_pad(Tensor(x), ((0, 0), (0, 0), (2, 1))).data
        assert np.array_equal(y, [[[[1.0, 1.0, 1.0, 2.0, 3.0, 3.0]]]])

    def test_int_shorthand_pads_after_only(self):
        x = np.array([[[[1.0, 2.0]]]])
        y = replicate_pad(Tensor(x), (0, 0, 3)).data
        assert np.array_equal(y, [[[[1.0, 2.0, 2.0, 2.0, 2.0]]]])

    def test_gradient_folds_replicas_onto_edges(self):
        x = Tensor(np.zeros((1, 1, 1, 3)), requires_grad=True)
        out = replicate_pad(x, ((0, 0), (0, 0), (2, 1)))
        w = np.array([[[[1.0, 2.0, 4.0, 8.0, 16.0, 32.0]]]])
        (out * Tensor(w)).sum().backward()
        # columns 0..2 all read x[0]; column 5 also reads x[2]
        assert np.array_equal(x.grad, [[[[7.0, 8.0, 48.0]]]])

    def test_gradient_matches_finite_differences_3d(self):
        rng = np.random.default_rng(21)
        x0 = rng.normal(size=(2, 2, 3, 2))
        pads = ((1, 1), (0, 2), (2, 0))
        x = Tensor(x0, requires_grad=True)
        out = replicate_pad(x, pads)
        w = rng.normal(size=out.shape)
        (out * Tensor(w)).sum().backward()
        ref = fd_grad(lambda v: float(
            (np.pad(v, ((0, 0),) + pads, mode="edge") * w).sum()), x0)
        assert np.allclose(x.grad, ref, atol=1e-7)

    def test_bad_pads_rejected(self):
        with pytest.raises(ValueError):
            replicate_pad(Tensor(np.zeros((1, 2, 2, 2))), ((0, -1), (0, 0),
                                                           (0, 0)))


class TestOneHot:
    def test_hand_case(self):
        labels = np.array([[[0, 2]]])
        got = one_hot(labels, 3)
        assert got.shape == (3, 1, 1, 2)
        assert np.array_equal(got[:, 0, 0, 0], [1, 0, 0])
        assert np.array_equal(got[:, 0, 0, 1], [0, 0, 1])
        assert got.dtype == np.float32

    def test_every_voxel_has_exactly_one_class(self):
        rng = np.random.default_rng(22)
        labels = rng.integers(0, 4, size=(3, 4, 5))
        oh = one_hot(labels, 4)
        assert np.array_equal(oh.sum(axis=0), np.ones((3, 4, 5)))
        assert np.array_equal(oh.argmax(axis=0), labels)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            one_hot(np.array([0, 4]), 4)
        with pytest.raises(ValueError):
            one_hot(np.array([-1, 0]), 4)
