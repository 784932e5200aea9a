import numpy as np
import pytest

from panlin.branches import (
    BranchConfig,
    FpnFeatures,
    PyConvConfig,
    PyConvWeights,
    SeParams,
    branch_forward,
    build_branch,
    build_plan,
    features_from_image,
    group_norm,
    pyconv_forward,
    se_gate,
    synthetic_features,
    verconv_forward,
)
from panlin.errors import ConfigError, DimensionError
from panlin.rng import SplitMix64
from panlin.tensor import ConvKernel, Tensor, conv2d, tensor
from panlin.verification import (
    branch_forward_loop,
    loop_group_norm,
    loop_pyconv,
    loop_se_gate,
)


def rand(seed, shape):
    return SplitMix64(seed).fill(shape, -1.0, 1.0)


def make_kernel(seed, out_ch, in_ch, k, groups=1):
    w = SplitMix64(seed).fill((out_ch, in_ch // groups, k, k), -0.3, 0.3)
    return ConvKernel(weights=tensor(w, ("o", "i", "kh", "kw")), groups=groups)


def make_se(seed, c, r):
    s = SplitMix64(seed)
    mid = c // r
    return SeParams(
        w_reduce=s.fill((c, mid), -0.5, 0.5),
        b_reduce=s.fill((mid,), -0.1, 0.1),
        w_expand=s.fill((mid, c), -0.5, 0.5),
        b_expand=s.fill((c,), -0.1, 0.1),
    )


class TestPyConv:
    def test_single_level_equals_plain_conv(self):
        x = tensor(rand(1, (1, 4, 4, 4)), "nhwc")
        k = make_kernel(2, 4, 4, 3)
        w = PyConvWeights(kernels=(k,))
        assert np.array_equal(pyconv_forward(x, w).data, conv2d(x, k).data)

    def test_zero_weights_zero_output(self):
        k = ConvKernel(weights=tensor(np.zeros((4, 4, 3, 3)), ("o", "i", "kh", "kw")))
        x = tensor(rand(3, (1, 4, 4, 4)), "nhwc")
        out = pyconv_forward(x, PyConvWeights(kernels=(k, k)))
        assert out.data.shape[-1] == 8
        assert np.abs(out.data).max() == 0.0

    def test_two_level_matches_loop_oracle(self):
        x = rand(4, (1, 4, 4, 4))
        k1 = make_kernel(5, 2, 4, 3)
        k2 = make_kernel(6, 2, 4, 5, groups=2)
        got = pyconv_forward(tensor(x, "nhwc"), PyConvWeights(kernels=(k1, k2))).data
        want = np.array(
            loop_pyconv(
                x.tolist(),
                [(k1.weights.data.tolist(), 1), (k2.weights.data.tolist(), 2)],
            )
        )
        assert np.abs(got - want).max() < 1e-12

    def test_default_config_for_128(self):
        cfg = PyConvConfig.default_for(128)
        assert [lv[0] for lv in cfg.levels] == [3, 5, 7, 9]
        assert [lv[1] for lv in cfg.levels] == [1, 4, 8, 16]
        assert sum(lv[2] for lv in cfg.levels) == 128

    def test_share_sum_validation(self):
        with pytest.raises(ConfigError):
            PyConvConfig(((3, 1, 2), (5, 1, 3))).validate(4)


class TestSeGate:
    def test_zero_expand_weights_halve_input(self):
        c = 4
        se = SeParams(
            w_reduce=rand(7, (c, 2)),
            b_reduce=rand(8, (2,)),
            w_expand=np.zeros((2, c)),
            b_expand=np.zeros(c),
        )
        x = tensor(rand(9, (1, 3, 3, c)), "nhwc")
        assert np.abs(se_gate(x, se).data - x.data / 2.0).max() < 1e-15

    def test_zero_input_zero_output(self):
        se = make_se(10, 4, 2)
        x = tensor(np.zeros((1, 2, 2, 4)), "nhwc")
        assert np.abs(se_gate(x, se).data).max() == 0.0

    def test_matches_scalar_oracle(self):
        se = make_se(11, 2, 1)
        x = rand(12, (1, 2, 2, 2))
        got = se_gate(tensor(x, "nhwc"), se).data
        want = np.array(
            loop_se_gate(
                x.tolist(),
                se.w_reduce.tolist(),
                se.b_reduce.tolist(),
                se.w_expand.tolist(),
                se.b_expand.tolist(),
            )
        )
        assert np.abs(got - want).max() < 1e-12

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            se_gate(tensor(np.zeros((1, 2, 2, 3)), "nhwc"), make_se(13, 4, 2))


class TestVerConv:
    def test_modes_coincide_on_single_level(self):
        x = tensor(rand(14, (1, 4, 4, 4)), "nhwc")
        k = make_kernel(15, 4, 4, 3)
        se = make_se(16, 4, 2)
        collective = verconv_forward(x, PyConvWeights(kernels=(k,)), se, "collective")
        separate = verconv_forward(x, PyConvWeights(kernels=(k,), se=(se,)), None, "separate")
        assert np.abs(collective.data - separate.data).max() < 1e-12

    def test_zero_se_expand_halves_pyconv(self):
        x = tensor(rand(17, (1, 4, 4, 4)), "nhwc")
        k = make_kernel(18, 4, 4, 3)
        se = SeParams(
            w_reduce=rand(19, (4, 2)),
            b_reduce=rand(20, (2,)),
            w_expand=np.zeros((2, 4)),
            b_expand=np.zeros(4),
        )
        out = verconv_forward(x, PyConvWeights(kernels=(k,)), se, "collective")
        plain = pyconv_forward(x, PyConvWeights(kernels=(k,)))
        assert np.abs(out.data - plain.data / 2.0).max() < 1e-15

    def test_separate_mode_matches_per_level_oracle(self):
        x = rand(21, (1, 4, 4, 4))
        k1, k2 = make_kernel(22, 2, 4, 3), make_kernel(23, 2, 4, 5)
        se1, se2 = make_se(24, 2, 1), make_se(25, 2, 1)
        got = verconv_forward(
            tensor(x, "nhwc"), PyConvWeights(kernels=(k1, k2), se=(se1, se2)), None, "separate"
        ).data
        want = np.array(
            loop_pyconv(
                x.tolist(),
                [(k1.weights.data.tolist(), 1), (k2.weights.data.tolist(), 1)],
                [
                    (se1.w_reduce.tolist(), se1.b_reduce.tolist(), se1.w_expand.tolist(), se1.b_expand.tolist()),
                    (se2.w_reduce.tolist(), se2.b_reduce.tolist(), se2.w_expand.tolist(), se2.b_expand.tolist()),
                ],
            )
        )
        assert np.abs(got - want).max() < 1e-12

    def test_bad_mode_rejected(self):
        with pytest.raises(ConfigError):
            verconv_forward(
                tensor(np.zeros((1, 2, 2, 4)), "nhwc"),
                PyConvWeights(kernels=(make_kernel(26, 4, 4, 3),)),
                make_se(27, 4, 2),
                "sideways",
            )


class TestGroupNorm:
    def test_matches_loop_oracle(self):
        from panlin.branches import GroupNormParams

        x = rand(28, (2, 3, 3, 4))
        p = GroupNormParams(gamma=rand(29, (4,)), beta=rand(30, (4,)), groups=2)
        got = group_norm(tensor(x, "nhwc"), p).data
        want = np.array(loop_group_norm(x.tolist(), p.gamma.tolist(), p.beta.tolist(), 2, p.eps))
        assert np.abs(got - want).max() < 1e-12


class TestBranchConfig:
    def test_image_must_divide_32(self):
        with pytest.raises(ConfigError):
            BranchConfig("baseline", 100, 100)

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            BranchConfig("resnet", 64, 64)

    def test_gn_group_divisibility(self):
        with pytest.raises(ConfigError):
            BranchConfig("baseline", 64, 64, stage_channels=100)

    def test_default_pyconv_derived(self):
        cfg = BranchConfig("pyconv", 64, 64)
        assert cfg.pyconv is not None and len(cfg.pyconv.levels) == 4

    def test_verconvsep_share_reduction_check(self):
        with pytest.raises(ConfigError):
            BranchConfig("verconvsep", 64, 64, se_reduction=64)


class TestPlanAndWeights:
    def test_stage_counts_per_level(self):
        plan = build_plan(BranchConfig("baseline", 960, 1280))
        convs = [s.name for s in plan if s.kind == "conv" and s.level != "merge"]
        assert convs == [
            "p2.conv1",
            "p3.conv1",
            "p4.conv1",
            "p4.conv2",
            "p5.conv1",
            "p5.conv2",
            "p5.conv3",
        ]
        ups = [s for s in plan if s.kind == "upsample2x"]
        assert len(ups) == 6 + 2  # level paths + final 4x as two 2x stages

    def test_lintention_plan_has_three_attention_layers(self):
        plan = build_plan(BranchConfig("lintention", 960, 1280))
        attn = [s for s in plan if s.kind == "attention"]
        assert [s.name for s in attn] == ["p5.attn1", "p5.attn2", "p5.attn3"]
        assert [s.in_hw for s in attn] == [(30, 40), (60, 80), (120, 160)]

    def test_lintention_core_parameter_count(self):
        w = build_branch(BranchConfig("lintention", 64, 64))
        layers = [p for n, p in w.params.items() if "attn" in n]
        assert len(layers) == 3
        assert all(lp.core.param_count() == 2 * 128 * 128 + 128 * 16 for lp in layers)

    def test_same_seed_bit_identical(self):
        a = build_branch(BranchConfig("verconvsep", 64, 64, seed=9))
        b = build_branch(BranchConfig("verconvsep", 64, 64, seed=9))
        for name in a.params:
            pa, pb = a.params[name], b.params[name]
            if hasattr(pa, "weights"):
                assert np.array_equal(pa.weights.data, pb.weights.data)
            if hasattr(pa, "kernels"):
                for ka, kb in zip(pa.kernels, pb.kernels):
                    assert np.array_equal(ka.weights.data, kb.weights.data)

    def test_different_seed_differs(self):
        a = build_branch(BranchConfig("baseline", 64, 64, seed=1))
        b = build_branch(BranchConfig("baseline", 64, 64, seed=2))
        assert not np.array_equal(
            a.params["p2.conv1"].weights.data, b.params["p2.conv1"].weights.data
        )


class TestBranchForward:
    @pytest.mark.parametrize("variant", ["baseline", "pyconv", "verconv", "verconvsep", "lintention"])
    def test_output_shape_contract(self, variant):
        cfg = BranchConfig(variant, 64, 64, num_classes=5, seed=3)
        out = branch_forward(synthetic_features(64, 64, seed=1), build_branch(cfg))
        assert out.axes == ("c", "h", "w")
        assert out.data.shape == (5, 64, 64)
        assert np.isfinite(out.data).all()

    def test_zero_features_zero_weights_give_classifier_bias(self):
        cfg = BranchConfig("baseline", 64, 64, num_classes=3, seed=0)
        w = build_branch(cfg)
        for name, p in w.params.items():
            if hasattr(p, "weights"):
                p.weights.data[:] = 0.0
            if hasattr(p, "gamma"):
                p.gamma[:] = 0.0
                p.beta[:] = 0.0
        bias = np.array([0.5, -1.25, 2.0])
        w.params["merge.classifier"].bias[:] = bias
        zero = FpnFeatures(
            p2=Tensor(("n", "h", "w", "c"), np.zeros((1, 16, 16, 256))),
            p3=Tensor(("n", "h", "w", "c"), np.zeros((1, 8, 8, 256))),
            p4=Tensor(("n", "h", "w", "c"), np.zeros((1, 4, 4, 256))),
            p5=Tensor(("n", "h", "w", "c"), np.zeros((1, 2, 2, 256))),
        )
        out = branch_forward(zero, w)
        for k in range(3):
            assert np.abs(out.data[k] - bias[k]).max() < 1e-15

    def test_degenerate_pyramid_equals_baseline(self):
        # One pyramid level, kernel 3, groups 1: pyconv topology == baseline.
        py = PyConvConfig(((3, 1, 8),))
        base_cfg = BranchConfig("baseline", 32, 32, num_classes=2, stage_channels=8, gn_groups=2, seed=4)
        py_cfg = BranchConfig("pyconv", 32, 32, num_classes=2, stage_channels=8, gn_groups=2, pyconv=py, seed=4)
        base_w = build_branch(base_cfg)
        py_w = build_branch(py_cfg)
        for name, p in base_w.params.items():
            q = py_w.params.get(name.replace("conv", "pyconv") if ".conv" in name else name)
            if hasattr(p, "weights") and hasattr(q, "kernels"):
                q.kernels[0].weights.data[:] = p.weights.data
            elif hasattr(p, "weights"):
                q.weights.data[:] = p.weights.data
                if p.bias is not None:
                    q.bias[:] = p.bias
        f = synthetic_features(32, 32, seed=5)
        assert np.abs(branch_forward(f, base_w).data - branch_forward(f, py_w).data).max() < 1e-12

    def test_geometry_mismatch_rejected(self):
        cfg = BranchConfig("baseline", 64, 64, num_classes=2)
        w = build_branch(cfg)
        with pytest.raises(DimensionError):
            branch_forward(synthetic_features(32, 32, seed=1), w)

    def test_composed_loop_oracle_small_config(self):
        cfg = BranchConfig(
            "lintention", 32, 32, num_classes=2, stage_channels=4,
            attn_groups=2, gn_groups=2, seed=6,
        )
        w = build_branch(cfg)
        f = synthetic_features(32, 32, seed=7)
        fast = branch_forward(f, w).data
        slow = np.array(branch_forward_loop(f, w))
        assert np.abs(fast - slow).max() < 1e-9


class TestFeatures:
    def test_fpn_invariants(self):
        with pytest.raises(DimensionError):
            FpnFeatures(
                p2=Tensor(("n", "h", "w", "c"), np.zeros((1, 16, 16, 256))),
                p3=Tensor(("n", "h", "w", "c"), np.zeros((1, 8, 8, 256))),
                p4=Tensor(("n", "h", "w", "c"), np.zeros((1, 5, 5, 256))),
                p5=Tensor(("n", "h", "w", "c"), np.zeros((1, 2, 2, 256))),
            )
        with pytest.raises(DimensionError):
            FpnFeatures(
                p2=Tensor(("n", "h", "w", "c"), np.zeros((1, 16, 16, 128))),
                p3=Tensor(("n", "h", "w", "c"), np.zeros((1, 8, 8, 128))),
                p4=Tensor(("n", "h", "w", "c"), np.zeros((1, 4, 4, 128))),
                p5=Tensor(("n", "h", "w", "c"), np.zeros((1, 2, 2, 128))),
            )

    def test_synthetic_features_deterministic(self):
        a = synthetic_features(64, 64, seed=3)
        b = synthetic_features(64, 64, seed=3)
        assert np.array_equal(a.p5.data, b.p5.data)
        assert a.p2.data.shape == (1, 16, 16, 256)

    def test_features_from_image_geometry(self):
        img = Tensor(("n", "h", "w", "c"), rand(31, (1, 64, 64, 3)))
        f = features_from_image(img, seed=2)
        assert f.p2.data.shape == (1, 16, 16, 256)
        assert f.p5.data.shape == (1, 2, 2, 256)

    def test_features_from_image_requires_divisibility(self):
        img = Tensor(("n", "h", "w", "c"), np.zeros((1, 48, 64, 3)))
        with pytest.raises(ConfigError):
            features_from_image(img, seed=0)
