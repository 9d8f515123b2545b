import numpy as np
import pytest
from hypothesis import given, strategies as st

from clinix.blocks import (HGCNBlock, HgConv, HgConvSpec, ResidualBlock, ResidualMambaBlock,
                           channel_partition, flop_estimate_hgconv, round_working_channels)
from clinix.errors import ConfigurationError, ShapeError
from clinix.tensor import Tensor
from clinix.verify import check_case, module_case


def conv_np(x, w, b, groups=1, pad=0):
    """Dense/grouped 3D cross-correlation via explicit offsets (reference)."""
    N, Ci, D, H, W = x.shape
    Co, gi, k = w.shape[0], w.shape[1], w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0)) + ((pad, pad),) * 3)
    out = np.zeros((N, Co, D, H, W))
    go = Co // groups
    for o in range(Co):
        g = o // go
        for c in range(gi):
            for i in range(k):
                for j in range(k):
                    for q in range(k):
                        out[:, o] += w[o, c, i, j, q] * xp[:, g * gi + c, i:i + D, j:j + H, q:q + W]
    return out + b[None, :, None, None, None]


class TestChannelPartition:
    def test_examples(self):
        assert channel_partition(16, 3) == [4, 4, 8, 16]
        assert channel_partition(8, 2) == [4, 4, 8]
        assert channel_partition(8, 4) == [1, 1, 2, 4, 8]

    def test_indivisible(self):
        with pytest.raises(ConfigurationError):
            channel_partition(6, 3)

    def test_order_bounds(self):
        for n in (1, 7):
            with pytest.raises(ConfigurationError):
                channel_partition(64, n)

    def test_round_working_channels(self):
        assert round_working_channels(10, 3) == 12
        assert round_working_channels(8, 4) == 8


@given(st.integers(2, 6), st.integers(1, 20))
def test_partition_identity(n, mult):
    c = mult * 2 ** (n - 1)
    widths = channel_partition(c, n)
    assert sum(widths) == 2 * c
    assert widths[-1] == c and widths[0] == widths[1]


class TestHgConv:
    @pytest.mark.parametrize("gating", ["additive", "multiplicative"])
    def test_order_two_reference(self, gating):
        rng = np.random.default_rng(0)
        C = 4
        hg = HgConv(HgConvSpec(C, 2, gate_scale=0.7, gating=gating), rng)
        for name, t in hg.named_parameters():
            if name.endswith("bias"):
                hg.set_parameters({name: rng.normal(size=t.shape)})
        p = {k: t.data for k, t in hg.named_parameters()}
        x = rng.normal(size=(2, C, 3, 4, 3))
        z = conv_np(x, p["proj_in.weight"], p["proj_in.bias"])
        z = conv_np(z, p["dw.weight"], p["dw.bias"], groups=2 * C, pad=1)
        u0, v0, v1 = z[:, :2], z[:, 2:4], z[:, 4:]
        phi = conv_np(v0 + u0, p["phi1.weight"], p["phi1.bias"]) * 0.7
        ref = v1 + phi if gating == "additive" else v1 * phi
        np.testing.assert_allclose(hg(Tensor(x)).data, ref, atol=1e-12)

    def test_zero_input_zero_biases(self):
        hg = HgConv(HgConvSpec(8, 3), np.random.default_rng(1))
        out = hg(Tensor(np.zeros((1, 8, 3, 3, 3))))
        np.testing.assert_array_equal(out.data, 0.0)

    @pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
    def test_shape_all_orders(self, n):
        C = 2 ** (n - 1) * 2
        hg = HgConv(HgConvSpec(C, n), np.random.default_rng(n))
        assert hg(Tensor(np.ones((1, C, 3, 3, 3)))).shape == (1, C, 3, 3, 3)

    def test_default_gate_scale(self):
        assert HgConvSpec(8, 4).scale == 0.25
        assert HgConvSpec(8, 4, gate_scale=2.0).scale == 2.0

    def test_errors(self):
        with pytest.raises(ConfigurationError):
            HgConvSpec(8, 2, gating="mixed")
        hg = HgConv(HgConvSpec(8, 2), np.random.default_rng(2))
        with pytest.raises(ShapeError):
            hg(Tensor(np.ones((1, 4, 3, 3, 3))))

    def test_flop_estimate_grows_with_order(self):
        flops = [flop_estimate_hgconv(32, n, 1000) for n in range(2, 7)]
        assert flops == sorted(flops)


class TestResidualBlock:
    def test_shape(self):
        blk = ResidualBlock(4, 6, np.random.default_rng(0))
        assert blk(Tensor(np.ones((2, 4, 3, 3, 3)))).shape == (2, 6, 3, 3, 3)

    def test_zero_second_conv_gives_shortcut(self):
        rng = np.random.default_rng(1)
        blk = ResidualBlock(4, 4, rng)
        blk.set_parameters({"conv2.weight": np.zeros((4, 4, 3, 3, 3))})
        x = rng.normal(size=(2, 4, 3, 3, 3))
        np.testing.assert_allclose(blk(Tensor(x)).data, x, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        case = module_case("res", ResidualBlock(2, 3, rng), lambda m, x: m(x),
                           rng.normal(size=(2, 2, 3, 3, 3)))
        results = check_case(case, rng, max_probes=20)
        assert all(r.passed for r in results), results


class TestHGCNBlock:
    def test_shape(self):
        blk = HGCNBlock(8, 2, np.random.default_rng(0), working_channels=8)
        assert blk(Tensor(np.ones((1, 8, 8, 8, 8)))).shape == (1, 8, 8, 8, 8)

    def test_res_evaluated_once(self):
        blk = HGCNBlock(4, 3, np.random.default_rng(1))
        calls = []
        inner = blk.res.__call__

        class Counting:
            def __call__(self, x):
                calls.append(1)
                return inner(x)

        object.__setattr__(blk, "res", Counting())
        blk(Tensor(np.random.default_rng(2).normal(size=(2, 4, 3, 3, 3))))
        assert len(calls) == 1

    def test_working_channels_rounded(self):
        blk = HGCNBlock(6, 3, np.random.default_rng(3))
        assert blk.hgconv.spec.channels == 8
        assert blk(Tensor(np.ones((2, 6, 2, 2, 2)))).shape == (2, 6, 2, 2, 2)

    def test_channel_mismatch(self):
        blk = HGCNBlock(4, 2, np.random.default_rng(4))
        with pytest.raises(ShapeError):
            blk(Tensor(np.ones((1, 3, 2, 2, 2))))

    @pytest.mark.parametrize("gating", ["additive", "multiplicative"])
    def test_gradient(self, gating):
        rng = np.random.default_rng(5)
        blk = HGCNBlock(4, 2, rng, gating=gating)
        case = module_case("hgcn", blk, lambda m, x: m(x), rng.normal(size=(2, 4, 4, 4, 4)))
        results = check_case(case, rng, max_probes=12)
        assert all(r.passed for r in results), [r for r in results if not r.passed]


class TestResidualMambaBlock:
    def test_shape(self):
        blk = ResidualMambaBlock(4, np.random.default_rng(0))
        assert blk(Tensor(np.ones((1, 4, 4, 4, 4)))).shape == (1, 4, 4, 4, 4)

    def test_scan_mode_invariance(self):
        rng = np.random.default_rng(1)
        blk = ResidualMambaBlock(4, rng, state_size=8)
        x = Tensor(rng.normal(size=(2, 4, 4, 4, 5)))
        diff = blk(x, "sequential").data - blk(x, "parallel").data
        assert np.abs(diff).max() <= 1e-10

    def test_channel_mismatch(self):
        blk = ResidualMambaBlock(4, np.random.default_rng(2))
        with pytest.raises(ShapeError):
            blk(Tensor(np.ones((1, 2, 2, 2, 2))))

    def test_gradient(self):
        rng = np.random.default_rng(3)
        blk = ResidualMambaBlock(2, rng, state_size=2)
        case = module_case("mamba", blk, lambda m, x: m(x), rng.normal(size=(2, 2, 2, 2, 2)))
        results = check_case(case, rng, max_probes=16)
        assert all(r.passed for r in results), [r for r in results if not r.passed]
