import math

import numpy as np
import pytest

from panlin.errors import ConfigError, DimensionError, NumericError
from panlin.rng import SplitMix64
from panlin.tensor import (
    ConvKernel,
    EinsumSpec,
    Tensor,
    bilinear_upsample2x,
    contract,
    conv2d,
    layer_norm,
    softmax_lastdim,
    tensor,
)
from panlin.verification import (
    loop_contract,
    loop_conv2d,
    loop_layer_norm,
    loop_upsample2x,
)


def rand(stream, shape):
    return stream.fill(shape, -1.0, 1.0)


class TestTensor:
    def test_shape_metadata(self):
        t = tensor([[1.0, 2.0]], "nc")
        assert t.shape == (("n", 1), ("c", 2))
        assert t.extent("c") == 2
        assert t.numel == 2

    def test_duplicate_axis_rejected(self):
        with pytest.raises(DimensionError):
            tensor([[1.0]], ("a", "a"))

    def test_rank_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            tensor([1.0, 2.0], "nc")

    def test_rename_is_metadata_only(self):
        t = tensor([[1.0, 2.0]], "nc").rename({"c": "d"})
        assert t.axes == ("n", "d")


class TestContract:
    def test_identity_projection(self):
        x = tensor(SplitMix64(1).fill((1, 2, 2, 3), -1, 1), "nhwc")
        w = tensor(np.eye(3), "cd")
        out = contract(EinsumSpec.parse("nhwc,cd->nhwd"), x, w)
        assert np.array_equal(out.data, x.data)
        assert out.axes == ("n", "h", "w", "d")

    def test_tiny_arithmetic(self):
        x = tensor([[[[1.0, 2.0]]]], "nhwc")
        w = tensor([[3.0], [4.0]], "cd")
        out = contract(EinsumSpec.parse("nhwc,cd->nhwd"), x, w)
        assert out.data.reshape(-1).tolist() == [11.0]

    def test_matches_quadruple_loop_oracle(self):
        spec = EinsumSpec.parse("nhwp,nhwc->npc")
        stream = SplitMix64(5)
        a = tensor(rand(stream, (2, 2, 2, 2)), "nhwp")
        b = tensor(rand(stream, (2, 2, 2, 2)), "nhwc")
        expected = np.array(loop_contract(spec, a.data.tolist(), b.data.tolist()))
        assert np.abs(contract(spec, a, b).data - expected).max() < 1e-12

    @pytest.mark.parametrize("seed", range(8))
    def test_all_module_specs_vs_oracle_small_extents(self, seed):
        stream = SplitMix64(seed)
        dims = {name: 1 + stream.next_u64() % 4 for name in "nhwcpd"}
        specs = ["nhwc,cd->nhwd", "nhwc,cp->nhwp", "nhwp,nhwc->npc",
                 "npc,cd->npd", "npc,nhwc->nhwp", "nhwp,npc->nhwc"]
        for text in specs:
            spec = EinsumSpec.parse(text)
            a = tensor(rand(stream, tuple(dims[x] for x in spec.lhs)), spec.lhs)
            b = tensor(rand(stream, tuple(dims[x] for x in spec.rhs)), spec.rhs)
            got = contract(spec, a, b).data
            want = np.array(loop_contract(spec, a.data.tolist(), b.data.tolist()))
            assert np.abs(got - want).max() < 1e-12, text

    def test_bilinear_in_first_argument(self):
        spec = EinsumSpec.parse("nhwc,cd->nhwd")
        stream = SplitMix64(9)
        a = tensor(rand(stream, (1, 2, 2, 3)), "nhwc")
        b = tensor(rand(stream, (3, 2)), "cd")
        lhs = contract(spec, tensor(2.5 * a.data, "nhwc"), b).data
        rhs = 2.5 * contract(spec, a, b).data
        assert np.abs(lhs - rhs).max() < 1e-12

    def test_extent_mismatch_names_axis(self):
        spec = EinsumSpec.parse("nhwc,cd->nhwd")
        a = tensor(np.zeros((1, 1, 1, 3)), "nhwc")
        b = tensor(np.zeros((2, 2)), "cd")
        with pytest.raises(DimensionError, match="'c'"):
            contract(spec, a, b)

    def test_wrong_operand_axes_rejected(self):
        spec = EinsumSpec.parse("nhwc,cd->nhwd")
        a = tensor(np.zeros((1, 1, 1, 3)), "nhwp")
        with pytest.raises(DimensionError):
            contract(spec, a, tensor(np.zeros((3, 3)), "cd"))


class TestSoftmax:
    def test_constant_vector_uniform(self):
        for p in (1, 2, 5):
            out = softmax_lastdim(tensor([[3.7] * p], "np"))
            assert np.abs(out.data - 1.0 / p).max() < 1e-12

    def test_closed_form_thirds(self):
        out = softmax_lastdim(tensor([0.0, math.log(2.0)], "p"))
        assert np.abs(out.data - [1 / 3, 2 / 3]).max() < 1e-12

    def test_large_logits_stable(self):
        out = softmax_lastdim(tensor([1000.0, 0.0], "p"))
        assert np.isfinite(out.data).all()
        assert out.data[0] > 1 - 1e-12 and out.data[1] < 1e-12

    def test_rows_sum_to_one_and_shift_invariance(self):
        stream = SplitMix64(11)
        for _ in range(10):
            x = rand(stream, (3, 4))
            s = softmax_lastdim(tensor(x, "np")).data
            assert np.abs(s.sum(axis=-1) - 1.0).max() < 1e-12
            shifted = softmax_lastdim(tensor(x + 13.25, "np")).data
            assert np.abs(s - shifted).max() < 1e-12

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            softmax_lastdim(tensor([np.inf, 0.0], "p"))


class TestLayerNorm:
    def test_constant_slice_zeroed(self):
        out = layer_norm(tensor([[5.0, 5.0, 5.0]], "nc"), np.ones(3), np.zeros(3), 1e-5)
        assert np.abs(out.data).max() == 0.0

    def test_two_point_closed_form(self):
        out = layer_norm(tensor([[1.0, 3.0]], "nc"), np.ones(2), np.zeros(2), 1e-20)
        assert np.abs(out.data - [-1.0, 1.0]).max() < 1e-9

    def test_matches_loop_oracle(self):
        stream = SplitMix64(3)
        x = rand(stream, (2, 4))
        g, b = rand(stream, (4,)), rand(stream, (4,))
        got = layer_norm(tensor(x, "nc"), g, b, 1e-5).data
        want = np.array(loop_layer_norm(x.tolist(), g.tolist(), b.tolist(), 1e-5))
        assert np.abs(got - want).max() < 1e-12

    def test_pre_affine_mean_zero(self):
        stream = SplitMix64(4)
        x = rand(stream, (5, 6))
        out = layer_norm(tensor(x, "nc"), np.ones(6), np.zeros(6), 1e-10).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-10

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            layer_norm(tensor([[1.0, 2.0]], "nc"), np.ones(3), np.zeros(3), 1e-5)

    def test_eps_must_be_positive(self):
        with pytest.raises(ConfigError):
            layer_norm(tensor([[1.0, 2.0]], "nc"), np.ones(2), np.zeros(2), 0.0)


class TestBilinearUpsample:
    def test_constant_field(self):
        x = tensor(np.full((1, 2, 3, 2), 4.25), "nhwc")
        out = bilinear_upsample2x(x)
        assert out.data.shape == (1, 4, 6, 2)
        assert np.abs(out.data - 4.25).max() == 0.0

    def test_single_pixel_clamped(self):
        out = bilinear_upsample2x(tensor([[[[7.0]]]], "nhwc"))
        assert np.abs(out.data - 7.0).max() == 0.0
        assert out.data.shape == (1, 2, 2, 1)

    def test_half_pixel_row(self):
        x = tensor(np.array([0.0, 1.0]).reshape(1, 1, 2, 1), "nhwc")
        out = bilinear_upsample2x(x)
        assert np.abs(out.data.reshape(2, 4) - [0.0, 0.25, 0.75, 1.0]).max() < 1e-15

    def test_bounds_preserved(self):
        stream = SplitMix64(6)
        for _ in range(5):
            x = rand(stream, (1, 3, 4, 2))
            out = bilinear_upsample2x(tensor(x, "nhwc")).data
            assert out.min() >= x.min() - 1e-15
            assert out.max() <= x.max() + 1e-15

    def test_matches_direct_four_tap_oracle(self):
        stream = SplitMix64(8)
        x = rand(stream, (1, 3, 3, 2))
        got = bilinear_upsample2x(tensor(x, "nhwc")).data
        want = np.array(loop_upsample2x(x.tolist()))
        assert np.abs(got - want).max() < 1e-12


def identity_1x1_kernel(c):
    w = np.zeros((c, c, 1, 1))
    for i in range(c):
        w[i, i, 0, 0] = 1.0
    return ConvKernel(weights=tensor(w, ("o", "i", "kh", "kw")))


class TestConv2d:
    def test_1x1_identity(self):
        x = tensor(SplitMix64(2).fill((1, 3, 3, 2), -1, 1), "nhwc")
        out = conv2d(x, identity_1x1_kernel(2))
        assert np.array_equal(out.data, x.data)

    def test_3x3_center_delta_identity(self):
        c = 2
        w = np.zeros((c, c, 3, 3))
        for i in range(c):
            w[i, i, 1, 1] = 1.0
        x = tensor(SplitMix64(3).fill((1, 4, 4, c), -1, 1), "nhwc")
        out = conv2d(x, ConvKernel(weights=tensor(w, ("o", "i", "kh", "kw"))))
        assert np.abs(out.data - x.data).max() < 1e-15

    def test_all_ones_border_arithmetic(self):
        w = np.ones((1, 1, 3, 3))
        x = tensor(np.ones((1, 4, 4, 1)), "nhwc")
        out = conv2d(x, ConvKernel(weights=tensor(w, ("o", "i", "kh", "kw")))).data[0, :, :, 0]
        assert out[1, 1] == 9.0 and out[2, 2] == 9.0
        assert out[0, 0] == 4.0 and out[3, 3] == 4.0
        assert out[0, 1] == 6.0

    def test_grouped_matches_loop_oracle(self):
        stream = SplitMix64(4)
        x = rand(stream, (1, 4, 4, 4))
        w = rand(stream, (4, 2, 3, 3))
        bias = rand(stream, (4,))
        k = ConvKernel(weights=tensor(w, ("o", "i", "kh", "kw")), groups=2, bias=bias)
        got = conv2d(tensor(x, "nhwc"), k).data
        want = np.array(loop_conv2d(x.tolist(), w.tolist(), groups=2, bias=bias.tolist()))
        assert np.abs(got - want).max() < 1e-12

    def test_channel_divisibility_error(self):
        k = ConvKernel(weights=tensor(np.zeros((2, 2, 3, 3)), ("o", "i", "kh", "kw")))
        with pytest.raises(ConfigError):
            conv2d(tensor(np.zeros((1, 2, 2, 3)), "nhwc"), k)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            ConvKernel(weights=tensor(np.zeros((1, 1, 2, 2)), ("o", "i", "kh", "kw")))

    def test_groups_must_divide_out_channels(self):
        with pytest.raises(ConfigError):
            ConvKernel(weights=tensor(np.zeros((3, 1, 3, 3)), ("o", "i", "kh", "kw")), groups=2)
