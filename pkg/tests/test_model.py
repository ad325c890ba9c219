import numpy as np
import pytest

from waveformer import autograd as ad
from waveformer.attention import AttentionConfig, BlockParams, wavelet_attention_block
from waveformer.autograd import gradcheck
from waveformer.model import (ModelConfig, ParamStore, Variant, count_params, count_params_by_module,
                              expected_shapes, forward, hf_refine, idwt_upsample_stage, init_params, param_specs,
                              predict, toy_config)
from waveformer.tensor import Prng

TOY_PARAMS = 463_819


@pytest.fixture(scope="module")
def toy():
    cfg = toy_config()
    return cfg, init_params(cfg, 0)


class TestConfig:
    def test_full_derived_dims(self):
        cfg = ModelConfig().validate()
        assert cfg.dims == (48, 96, 192, 384)
        assert cfg.grids == (48, 24, 12, 6)
        assert cfg.attn_window == 6
        assert cfg.stage_heads == (3, 6, 12, 24)

    @pytest.mark.parametrize("kw,msg", [
        ({"input_extent": 100}, "divisible by 32"),
        ({"num_classes": 1}, "num_classes"),
        ({"wavelet": "coif9"}, "unknown wavelet"),
        ({"stage_dwt_levels": (3, 2, 0, 0)}, "m >= 1"),
        ({"window": 4}, "window 4 does not divide"),
        ({"heads": (5, 6, 12, 24)}, "heads"),
        ({"upsample": "cubic"}, "upsample"),
    ])
    def test_validation_names_constraint(self, kw, msg):
        with pytest.raises(ValueError, match=msg):
            ModelConfig(**kw).validate()

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            ModelConfig(variant="bigger-up")


class TestParamCounts:
    def test_patch_embed_and_se_arithmetic(self):
        groups = count_params_by_module(ModelConfig())
        assert groups["embed"] == 4 * 48 * 8 + 48 == 1584
        assert groups["se"] == (384 * 96 + 96) + (96 * 384 + 384) == 74_208

    def test_toy_frozen(self):
        assert count_params(toy_config()) == TOY_PARAMS

    def test_variant_structure(self):
        n = {v: count_params(ModelConfig(variant=v)) for v in Variant}
        assert n[Variant.RESIDUAL_UP] == n[Variant.RESIDUAL_UP_MLA]
        assert n[Variant.SIMPLE_UP] > n[Variant.HF_REF] > n[Variant.RESIDUAL_UP]

    def test_count_independent_of_extent(self):
        assert count_params(ModelConfig(input_extent=64)) == count_params(ModelConfig())

    def test_store_matches_specs(self, toy):
        cfg, params = toy
        specs = param_specs(cfg)
        assert params.total() == TOY_PARAMS
        assert params.names() == sorted(specs)
        assert all(params[k].shape == s.shape for k, s in specs.items())


class TestInit:
    def test_deterministic(self):
        a, b = init_params(toy_config(), 3), init_params(toy_config(), 3)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        c = init_params(toy_config(), 4)
        assert not np.array_equal(a["embed_w"], c["embed_w"])

    def test_residual_branches_start_at_zero(self, toy):
        _, p = toy
        for name in p:
            encoder_branch = name.startswith("enc") and name.endswith((".proj_w", ".fc2_w"))
            if encoder_branch or name.endswith((".conv2_w", ".pw2_w")):
                assert not p[name].any(), name
        assert p["embed_w"].std() > 0 and p["embed_w"].dtype == np.float32


class TestForward:
    def test_shapes_follow_contract(self, toy):
        cfg, p = toy
        trace = []
        x = np.random.default_rng(0).standard_normal((2, 32, 32, 32)).astype(np.float32)
        with ad.no_grad():
            logits = forward(p, x, cfg, trace)
        assert logits.shape == (3, 32, 32, 32) and logits.dtype == np.float32
        assert trace == expected_shapes(cfg)

    @pytest.mark.parametrize("variant", list(Variant))
    def test_every_variant_runs(self, variant):
        cfg = toy_config(variant=variant)
        x = np.random.default_rng(1).standard_normal((2, 32, 32, 32)).astype(np.float32)
        labels = predict(init_params(cfg, 0), x, cfg)
        assert labels.shape == (32, 32, 32) and labels.min() >= 0 and labels.max() < 3

    def test_zero_params_give_zero_logits(self, toy):
        cfg, p = toy
        zeros = ParamStore({k: np.zeros_like(v) for k, v in p.items()})
        x = np.random.default_rng(2).standard_normal((2, 32, 32, 32)).astype(np.float32)
        with ad.no_grad():
            assert not forward(zeros, x, cfg).data.any()

    def test_deterministic(self, toy):
        cfg, p = toy
        x = np.random.default_rng(3).standard_normal((2, 32, 32, 32)).astype(np.float32)
        with ad.no_grad():
            assert np.array_equal(forward(p, x, cfg).data, forward(p, x, cfg).data)

    def test_input_shape_checked(self, toy):
        cfg, p = toy
        with pytest.raises(ValueError, match="does not match config"):
            forward(p, np.zeros((2, 16, 16, 16), np.float32), cfg)


class TestDecoderPieces:
    def test_hf_refine_zero_init_is_identity(self):
        cfg = toy_config(variant="hf-ref")
        p = init_params(cfg, 0)
        hf = np.random.default_rng(4).standard_normal((7, 32, 4, 4, 4)).astype(np.float32)
        with ad.no_grad():
            assert np.array_equal(hf_refine(ad.Var(hf), p, "dec3").data, hf)

    def test_idwt_stage_rejects_mismatched_bands(self):
        cfg = toy_config()
        p = init_params(cfg, 0)
        with pytest.raises(ValueError, match="detail bands"):
            idwt_upsample_stage(ad.Var(np.zeros((64, 2, 2, 2))), ad.Var(np.zeros((7, 32, 4, 4, 4))),
                                ad.Var(np.zeros((32, 4, 4, 4))), p, "dec3")


def _small_stage_params(rng, c_in, c_out):
    names = {"proj_w": (c_out, c_in, 1, 1, 1), "proj_b": (c_out,),
             "res.conv1_w": (c_out, c_out, 3, 3, 3), "res.conv1_b": (c_out,),
             "res.conv2_w": (c_out, c_out, 3, 3, 3), "res.conv2_b": (c_out,)}
    for k in range(1, 8):
        names.update({f"hf{k}.dw_w": (c_out, 1, 3, 3, 3), f"hf{k}.dw_b": (c_out,),
                      f"hf{k}.gate_w": (c_out,), f"hf{k}.gate_b": (c_out,)})
    return {f"d.{k}": 0.3 * rng.standard_normal(s) for k, s in names.items()}


class TestGradients:
    def test_gradcheck_wavelet_attention_block_m1(self):
        dim = 4
        rng = np.random.default_rng(5)
        init = BlockParams.init(Prng(0), dim, dtype=np.float64)
        names = sorted(init)
        arrays = [rng.standard_normal((dim, 4, 4, 4))] + [v + 0.3 * rng.standard_normal(v.shape)
                                                          for v in (init[n] for n in names)]
        w = rng.standard_normal((dim, 4, 4, 4))

        def fn(x, *ps):
            out, hf = wavelet_attention_block(x, 1, dict(zip(names, ps)), AttentionConfig(2, dim, 2))
            return (out * w).sum() + (hf * hf).sum()

        assert gradcheck(fn, arrays, eps=1e-5, rtol=1e-3) <= 1e-3

    @pytest.mark.parametrize("refine", [False, True])
    def test_gradcheck_idwt_upsample_stage(self, refine):
        rng = np.random.default_rng(6)
        c_in, c_out = 4, 2
        params = _small_stage_params(rng, c_in, c_out)
        names = sorted(params)
        arrays = [rng.standard_normal((c_in, 2, 2, 2)), rng.standard_normal((7, c_out, 2, 2, 2)),
                  rng.standard_normal((c_out, 4, 4, 4))] + [params[n] for n in names]
        w = rng.standard_normal((c_out, 4, 4, 4))

        def fn(z, hf, skip, *ps):
            return (idwt_upsample_stage(z, hf, skip, dict(zip(names, ps)), "d", refine) * w).sum()

        assert gradcheck(fn, arrays, eps=1e-5, rtol=1e-3) <= 1e-3
