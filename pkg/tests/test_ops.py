import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clinix.errors import ConfigurationError, ShapeError, StateError
from clinix.ops import (Conv3dSpec, NormSpec, RunningStats, activation, batch_norm, conv3d,
                        downsample, dwconv1d_seq, layer_norm, linear, normalize, seq_to_vol,
                        sigmoid, silu, softmax, upsample, vol_to_seq)
from clinix.tensor import Tape, Tensor, backward, finite_difference_grad, mul, tsum


def grads(f, *arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = f(*leaves)
    g = backward(loss, tape)
    return [g[t].data for t in leaves]


def projected(fn, shape, seed=0):
    """Scalarize a tensor-valued op with a fixed random projection."""
    proj = np.random.default_rng(seed).normal(size=shape)
    return lambda *a: tsum(mul(fn(*a), proj))


def reference_conv(x, w, stride, pad):
    """Direct loop cross-correlation used as an oracle."""
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))
    N, _, D, H, W = xp.shape
    Co, Ci, kd, kh, kw = w.shape
    out_ext = [(e - k) // s + 1 for e, k, s in zip((D, H, W), (kd, kh, kw), stride)]
    out = np.zeros((N, Co, *out_ext))
    for d in range(out_ext[0]):
        for h in range(out_ext[1]):
            for q in range(out_ext[2]):
                patch = xp[:, :, d * stride[0]:d * stride[0] + kd,
                           h * stride[1]:h * stride[1] + kh, q * stride[2]:q * stride[2] + kw]
                out[:, :, d, h, q] = np.einsum("ncijk,ocijk->no", patch, w)
    return out


class TestConv3d:
    def test_identity_pointwise(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 4, 4))
        w = np.eye(3)[:, :, None, None, None]
        out = conv3d(Tensor(x), Conv3dSpec(3, 3, 1), Tensor(w)).data
        np.testing.assert_allclose(out, x, atol=1e-15)

    def test_hand_cross_correlation(self):
        x = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 1, 3)
        w = np.array([1.0, 0.0, -1.0]).reshape(1, 1, 1, 1, 3)
        out = conv3d(Tensor(x), Conv3dSpec(1, 1, (1, 1, 3), padding=(0, 0, 1)), Tensor(w))
        np.testing.assert_allclose(out.data.reshape(-1), [-2, -2, 2])

    def test_flipped_kernel_gives_true_convolution(self):
        # true convolution with [1,0,-1] is x[i+1] - x[i-1]
        x = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 1, 3)
        w = np.array([-1.0, 0.0, 1.0]).reshape(1, 1, 1, 1, 3)
        out = conv3d(Tensor(x), Conv3dSpec(1, 1, (1, 1, 3), padding=(0, 0, 1)), Tensor(w))
        np.testing.assert_allclose(out.data.reshape(-1), [2, 2, -2])

    def test_strided_shape(self):
        rng = np.random.default_rng(1)
        spec = Conv3dSpec(4, 8, 3, stride=2, padding=1)
        out = conv3d(Tensor(rng.normal(size=(1, 4, 8, 8, 8))), spec,
                     Tensor(rng.normal(size=spec.weight_shape)))
        assert out.shape == (1, 8, 4, 4, 4)

    @pytest.mark.parametrize("stride,pad,groups,cin,cout", [
        ((1, 1, 1), (1, 1, 1), 1, 2, 3),
        ((2, 1, 2), (0, 1, 1), 1, 3, 2),
        ((1, 1, 1), (1, 1, 1), 4, 4, 4),
        ((1, 2, 1), (1, 0, 1), 2, 4, 6),
    ])
    def test_matches_loop_reference(self, stride, pad, groups, cin, cout):
        rng = np.random.default_rng(2)
        spec = Conv3dSpec(cin, cout, 3, stride, pad, groups)
        x = rng.normal(size=(2, cin, 5, 6, 5))
        w = rng.normal(size=spec.weight_shape)
        out = conv3d(Tensor(x), spec, Tensor(w)).data
        gi, go = cin // groups, cout // groups
        ref = np.concatenate([reference_conv(x[:, g * gi:(g + 1) * gi], w[g * go:(g + 1) * go],
                                             stride, pad) for g in range(groups)], axis=1)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_grouped_equals_per_channel(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 3, 4, 4, 4))
        w = rng.normal(size=(3, 1, 3, 3, 3))
        out = conv3d(Tensor(x), Conv3dSpec(3, 3, 3, padding=1, groups=3), Tensor(w)).data
        for c in range(3):
            single = conv3d(Tensor(x[:, c:c + 1]), Conv3dSpec(1, 1, 3, padding=1),
                            Tensor(w[c:c + 1])).data
            np.testing.assert_allclose(out[:, c:c + 1], single, atol=1e-12)

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(4)
        spec = Conv3dSpec(2, 3, 3, stride=(1, 2, 1), padding=1)
        x = rng.normal(size=(1, 2, 4, 4, 3))
        w = rng.normal(size=spec.weight_shape)
        b = rng.normal(size=3)
        f = projected(lambda a, c, d: conv3d(a, spec, c, d), (1, 3, 4, 2, 3))
        gx, gw, gb = grads(f, x, w, b)
        np.testing.assert_allclose(gx, finite_difference_grad(
            lambda t: f(t, Tensor(w), Tensor(b)), Tensor(x)).data, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(gw, finite_difference_grad(
            lambda t: f(Tensor(x), t, Tensor(b)), Tensor(w)).data, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(gb, finite_difference_grad(
            lambda t: f(Tensor(x), Tensor(w), t), Tensor(b)).data, rtol=1e-6, atol=1e-8)

    def test_errors(self):
        with pytest.raises(ConfigurationError):
            Conv3dSpec(3, 4, 3, groups=2)
        with pytest.raises(ConfigurationError):
            conv3d(Tensor(np.ones((1, 1, 2, 2, 2))), Conv3dSpec(1, 1, 3),
                   Tensor(np.ones((1, 1, 3, 3, 3))))
        with pytest.raises(ShapeError):
            conv3d(Tensor(np.ones((1, 2, 4, 4, 4))), Conv3dSpec(1, 1, 3),
                   Tensor(np.ones((1, 1, 3, 3, 3))))
        with pytest.raises(ShapeError):
            conv3d(Tensor(np.ones((1, 1, 4, 4, 4))), Conv3dSpec(1, 1, 3),
                   Tensor(np.ones((1, 1, 1, 3, 3))))


@settings(max_examples=40, deadline=None)
@given(st.tuples(*[st.integers(3, 9)] * 3), st.integers(1, 3), st.integers(1, 3),
       st.integers(0, 2))
def test_conv_shape_formula(extents, k, s, p):
    spec = Conv3dSpec(1, 2, k, s, p)
    x = Tensor(np.zeros((1, 1) + extents))
    out = conv3d(x, spec, Tensor(np.zeros(spec.weight_shape)))
    assert out.shape[2:] == tuple((e + 2 * p - k) // s + 1 for e in extents)


class TestDwConv1d:
    def test_width_one_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 5, 2))
        np.testing.assert_array_equal(dwconv1d_seq(Tensor(x), Tensor(np.ones((2, 1)))).data, x)

    def test_delta_kernel_identity(self):
        x = np.random.default_rng(1).normal(size=(2, 6, 3))
        w = np.tile([0.0, 1.0], (3, 1))
        np.testing.assert_array_equal(dwconv1d_seq(Tensor(x), Tensor(w)).data, x)

    def test_hand_causal(self):
        x = np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1)
        out = dwconv1d_seq(Tensor(x), Tensor([[1.0, 1.0]])).data
        np.testing.assert_array_equal(out.reshape(-1), [1, 3, 5])

    def test_causality(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 8, 2))
        w = rng.normal(size=(2, 4))
        y0 = dwconv1d_seq(Tensor(x), Tensor(w)).data
        x[:, 5:] += 10.0
        y1 = dwconv1d_seq(Tensor(x), Tensor(w)).data
        np.testing.assert_array_equal(y0[:, :5], y1[:, :5])

    def test_bad_width(self):
        with pytest.raises(ConfigurationError):
            dwconv1d_seq(Tensor(np.ones((1, 3, 2))), Tensor(np.ones((2, 0))))

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.normal(size=(2, 5, 3)), rng.normal(size=(3, 4)), rng.normal(size=3)
        f = projected(dwconv1d_seq, (2, 5, 3))
        gx, gw, gb = grads(f, x, w, b)
        np.testing.assert_allclose(gx, finite_difference_grad(
            lambda t: f(t, Tensor(w), Tensor(b)), Tensor(x)).data, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(gw, finite_difference_grad(
            lambda t: f(Tensor(x), t, Tensor(b)), Tensor(w)).data, rtol=1e-6, atol=1e-8)


class TestNorms:
    def test_layer_norm_constant(self):
        out = layer_norm(Tensor(np.full((3, 4), 2.5)), np.ones(4), np.zeros(4)).data
        np.testing.assert_array_equal(out, np.zeros((3, 4)))

    def test_layer_norm_pair(self):
        out = layer_norm(Tensor([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=1e-14).data
        np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-12)

    def test_batch_norm_fixed_point(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 2, 3, 3, 3))
        x = (x - x.mean(axis=(0, 2, 3, 4), keepdims=True)) / x.std(axis=(0, 2, 3, 4),
                                                                 keepdims=True)
        out = batch_norm(Tensor(x), np.ones(2), np.zeros(2), RunningStats(2)).data
        np.testing.assert_allclose(out, x, rtol=1e-5)  # ε shrinks by 1/sqrt(1+ε)

    def test_eval_before_stats(self):
        with pytest.raises(StateError):
            normalize(Tensor(np.ones((2, 2, 2, 2, 2))), NormSpec("batch"), np.ones(2),
                      np.zeros(2), mode="eval", stats=RunningStats(2))

    def test_eval_uses_running_stats(self):
        rng = np.random.default_rng(1)
        stats = RunningStats(2)
        x = rng.normal(2.0, 3.0, size=(8, 2, 2, 2, 2))
        batch_norm(Tensor(x), np.ones(2), np.zeros(2), stats)
        out = batch_norm(Tensor(x), np.ones(2), np.zeros(2), stats, mode="eval").data
        expected = (x - stats.mean[None, :, None, None, None]) / np.sqrt(
            stats.var[None, :, None, None, None] + 1e-5)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    @pytest.mark.parametrize("kind", ["layer", "batch"])
    def test_gradient(self, kind):
        rng = np.random.default_rng(2)
        x, s, b = rng.normal(size=(2, 3, 2, 2, 2)), rng.normal(size=3), rng.normal(size=3)
        spec = NormSpec(kind)
        f = projected(lambda a, c, d: normalize(a, spec, c, d, stats=RunningStats(3)),
                      x.shape)
        gx, gs, gb = grads(f, x, s, b)
        np.testing.assert_allclose(gx, finite_difference_grad(
            lambda t: f(t, Tensor(s), Tensor(b)), Tensor(x)).data, rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(gs, finite_difference_grad(
            lambda t: f(Tensor(x), t, Tensor(b)), Tensor(s)).data, rtol=1e-5, atol=1e-8)


class TestActivations:
    def test_values(self):
        assert silu(Tensor(0.0)).item() == 0.0
        assert sigmoid(Tensor(0.0)).item() == 0.5
        np.testing.assert_array_equal(softmax(Tensor([0.0, 0.0]), 0).data, [0.5, 0.5])

    def test_softmax_sums_to_one(self):
        x = np.random.default_rng(0).normal(size=(3, 5, 4)) * 10
        np.testing.assert_allclose(softmax(Tensor(x), 1).data.sum(axis=1), 1.0, atol=1e-14)

    def test_unknown(self):
        with pytest.raises(ConfigurationError):
            activation("tanhh", Tensor(1.0))
        with pytest.raises(ConfigurationError):
            activation("softmax", Tensor([1.0]))

    @pytest.mark.parametrize("kind", ["silu", "gelu", "leaky-relu", "sigmoid", "softplus",
                                      "softmax"])
    def test_gradient(self, kind):
        x = np.random.default_rng(1).normal(size=(2, 3)) + 0.05
        f = projected(lambda t: activation(kind, t, axis=1), x.shape)
        (g,) = grads(f, x)
        np.testing.assert_allclose(g, finite_difference_grad(f, Tensor(x)).data,
                                   rtol=1e-6, atol=1e-9)


class TestLinear:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(2, 3))
        np.testing.assert_array_equal(linear(Tensor(x), np.eye(3), np.zeros(3)).data, x)

    def test_sum(self):
        assert linear(Tensor([3.0, 4.0]), np.array([[1.0], [1.0]])).data.tolist() == [7.0]

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            linear(Tensor(np.ones((2, 3))), np.ones((2, 2)))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
        f = projected(linear, (2, 3, 5))
        gx, gw, gb = grads(f, x, w, b)
        np.testing.assert_allclose(gx, finite_difference_grad(
            lambda t: f(t, Tensor(w), Tensor(b)), Tensor(x)).data, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(gw, finite_difference_grad(
            lambda t: f(Tensor(x), t, Tensor(b)), Tensor(w)).data, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(gb, finite_difference_grad(
            lambda t: f(Tensor(x), Tensor(w), t), Tensor(b)).data, rtol=1e-6, atol=1e-9)


class TestResampling:
    def test_unit_stride_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 2, 3, 3, 3))
        w = np.eye(2)[:, :, None, None, None]
        np.testing.assert_array_equal(downsample(Tensor(x), 1, w).data, x)
        np.testing.assert_array_equal(upsample(Tensor(x), 1, w).data, x)

    def test_round_trip_extents(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(1, 2, 8, 8, 8)))
        d = downsample(x, 2, rng.normal(size=(3, 2, 2, 2, 2)))
        assert d.shape == (1, 3, 4, 4, 4)
        u = upsample(d, 2, rng.normal(size=(3, 2, 2, 2, 2)))
        assert u.shape == (1, 2, 8, 8, 8)

    def test_axis_asymmetric(self):
        x = Tensor(np.zeros((1, 1, 40, 224, 192)))
        assert downsample(x, (1, 2, 2), np.zeros((1, 1, 1, 2, 2))).shape[2:] == (40, 112, 96)

    def test_odd_extent_upsample(self):
        rng = np.random.default_rng(2)
        d = downsample(Tensor(rng.normal(size=(1, 1, 9, 9, 9))), 2, np.ones((1, 1, 2, 2, 2)))
        assert d.shape[2:] == (4, 4, 4)
        u = upsample(d, 2, np.ones((1, 1, 2, 2, 2)), output_size=(9, 9, 9))
        assert u.shape[2:] == (9, 9, 9)
        with pytest.raises(ShapeError):
            upsample(d, 2, np.ones((1, 1, 2, 2, 2)), output_size=(10, 9, 9))

    def test_extent_below_stride(self):
        with pytest.raises(ConfigurationError):
            downsample(Tensor(np.zeros((1, 1, 1, 4, 4))), 2, np.zeros((1, 1, 2, 2, 2)))

    def test_upsample_gradient(self):
        rng = np.random.default_rng(3)
        x, w = rng.normal(size=(1, 2, 2, 3, 2)), rng.normal(size=(2, 3, 2, 1, 2))
        f = projected(lambda a, b: upsample(a, (2, 1, 2), b, output_size=(5, 3, 4)),
                      (1, 3, 5, 3, 4))
        gx, gw = grads(f, x, w)
        np.testing.assert_allclose(gx, finite_difference_grad(
            lambda t: f(t, Tensor(w)), Tensor(x)).data, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(gw, finite_difference_grad(
            lambda t: f(Tensor(x), t), Tensor(w)).data, rtol=1e-6, atol=1e-9)


class TestVolSeq:
    def test_raster_order(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 1, 2, 2)
        np.testing.assert_array_equal(vol_to_seq(Tensor(x)).data.reshape(-1), [1, 2, 3, 4])

    def test_round_trip(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 2, 3, 4))
        seq = vol_to_seq(Tensor(x))
        assert seq.shape == (2, 24, 3)
        np.testing.assert_array_equal(seq_to_vol(seq, (2, 3, 4)).data, x)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            seq_to_vol(Tensor(np.zeros((1, 5, 2))), (2, 2, 2))
