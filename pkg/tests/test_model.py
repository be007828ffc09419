"""Model assembly, forward shapes, parameter partition, GRL behavior."""

import warnings

import numpy as np
import pytest

from accdat import autodiff as ad
from accdat.autodiff import Tape
from accdat.ctc import ctc_loss_grad
from accdat.errors import ConfigError, InvalidArgument
from accdat.model import (BlockConfig, ModelConfig, build_model,
                          decoder_forward, discriminator_forward,
                          discriminator_head_forward, encoder_forward,
                          grl_apply, mini_config, model_config_from_dict,
                          model_config_to_dict, quartznet15x5_config)


def build(cfg=None, seed=0, dtype=np.float64, disc=True):
    cfg = cfg or mini_config()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_model(cfg, np.random.default_rng(seed), dtype,
                           include_discriminator=disc)


class TestConfigs:
    def test_full_config_matches_block_table(self):
        cfg = quartznet15x5_config(n_labels=8)
        table = {b.name: (b.K, b.c_out) for b in cfg.encoder_blocks}
        assert table == {"C1": (33, 256), "B1": (33, 256), "B2": (39, 256),
                         "B3": (51, 512), "B4": (63, 512), "B5": (75, 512),
                         "C2": (87, 512), "C3": (1, 1024)}
        for b in cfg.encoder_blocks:
            if b.kind == "block":
                assert (b.repeats_within, b.block_repeats) == (5, 3)
        assert cfg.decoder_block.c_out == 9
        assert cfg.decoder_block.dilation == 2

    def test_full_config_builds(self):
        cfg = quartznet15x5_config(n_labels=8)
        params = build(cfg)
        names = set(params.all_params())
        assert "encoder.B5.rep2.g4.pointwise" in names
        assert "encoder.B3.rep0.shortcut" in names  # 256 -> 512 projection
        assert "encoder.B3.rep1.shortcut" not in names  # same-width repeat

    def test_mini_config_builds_and_runs(self):
        params = build()
        tape = Tape()
        x = tape.tensor(np.random.default_rng(0).normal(size=(16, 32)))
        f = encoder_forward(params, x, "train")
        assert f.shape == (64, 16)
        lp = decoder_forward(params, f)
        assert lp.shape == (16, 9)

    def test_same_seed_bit_identical(self):
        a, b = build(seed=7), build(seed=7)
        for name, p in a.all_params().items():
            assert p.data.tobytes() == b.all_params()[name].data.tobytes()

    def test_dilation_warning_on_k1(self):
        cfg = mini_config()
        with pytest.warns(UserWarning, match="dilation"):
            cfg.validate()

    def test_stride_only_on_first_block(self):
        cfg = mini_config()
        cfg.encoder_blocks[2].stride = 2
        with pytest.raises(ConfigError, match="stride"):
            cfg.validate()

    def test_config_round_trip(self):
        cfg = quartznet15x5_config()
        back = model_config_from_dict(model_config_to_dict(cfg))
        assert model_config_to_dict(back) == model_config_to_dict(cfg)


class TestPartition:
    def test_partition_exhaustive_and_disjoint(self):
        params = build()
        names = set()
        for coll in (params.encoder, params.decoder, params.discriminator):
            for name in coll:
                assert name not in names
                names.add(name)
        assert names == set(params.all_params())
        assert all(n.startswith("encoder.") for n in params.encoder)
        assert all(n.startswith("decoder.") for n in params.decoder)
        assert all(n.startswith("disc.") for n in params.discriminator)

    def test_ctc_loss_never_reaches_discriminator(self):
        params = build()
        tape = Tape()
        for p in params.discriminator.values():
            tape.watch(p)  # watched but unreachable -> zero gradients
        x = tape.tensor(np.random.default_rng(1).normal(size=(16, 24)))
        f = encoder_forward(params, x, "train")
        lp = decoder_forward(params, f)
        loss_val, grad = ctc_loss_grad(lp.data, [1, 2])
        grads = tape.backward(ad.precomputed_loss(lp, loss_val, grad))
        for name in params.discriminator:
            assert not grads[name].any()

    def test_disc_loss_never_reaches_decoder(self):
        params = build()
        tape = Tape()
        x = tape.tensor(np.random.default_rng(2).normal(size=(16, 24)))
        f = encoder_forward(params, x, "train")
        scores = discriminator_forward(params, f, 0.5, "eval")
        grads = tape.backward(ad.nll(scores, 3))
        assert not any(g.any() for n, g in grads.items() if n.startswith("decoder."))
        assert any(g.any() for n, g in grads.items() if n.startswith("encoder."))


class TestEncoder:
    def test_time_halves_once(self):
        params = build()
        for T in (7, 16, 31, 32, 57):
            tape = Tape()
            x = tape.tensor(np.random.default_rng(T).normal(size=(16, T)))
            f = encoder_forward(params, x, "train")
            assert f.shape[1] == -(-T // 2)

    def test_eval_mode_deterministic_and_dropout_free(self):
        params = build()
        x0 = np.random.default_rng(3).normal(size=(16, 20))
        # prime running stats
        tape = Tape()
        encoder_forward(params, tape.tensor(x0), "train")
        outs = []
        for _ in range(2):
            tape = Tape()
            outs.append(encoder_forward(params, tape.tensor(x0), "eval").data.tobytes())
        assert outs[0] == outs[1]

    def test_zero_input_zero_output(self):
        params = build()
        tape = Tape()
        f = encoder_forward(params, tape.tensor(np.zeros((16, 12))), "train")
        assert np.abs(f.data).max() == 0.0

    def test_wrong_channel_count_rejected(self):
        params = build()
        tape = Tape()
        with pytest.raises(InvalidArgument):
            encoder_forward(params, tape.tensor(np.zeros((8, 12))), "train")


class TestDecoder:
    def test_rows_normalize(self):
        params = build()
        tape = Tape()
        f = encoder_forward(
            params, tape.tensor(np.random.default_rng(4).normal(size=(16, 20))),
            "train")
        lp = decoder_forward(params, f)
        np.testing.assert_allclose(np.exp(lp.data).sum(axis=1), 1.0, atol=1e-12)

    def test_zero_features_uniform_rows(self):
        params = build()
        tape = Tape()
        f = tape.tensor(np.zeros((64, 10)))
        lp = decoder_forward(params, f)
        np.testing.assert_allclose(lp.data, np.log(1 / 9), atol=1e-12)


class TestDiscriminator:
    def test_forward_independent_of_lambda(self):
        params = build()
        x0 = np.random.default_rng(5).normal(size=(16, 20))
        outs = []
        for lam in (0.0, 0.5, 2.0):
            tape = Tape()
            f = encoder_forward(params, tape.tensor(x0), "train")
            outs.append(discriminator_forward(params, f, lam, "eval").data.tobytes())
        assert outs[0] == outs[1] == outs[2]

    def test_scores_normalize(self):
        params = build()
        tape = Tape()
        f = tape.tensor(np.random.default_rng(6).normal(size=(64, 10)))
        scores = discriminator_head_forward(params, ad.mean_over_time(f), "eval")
        assert np.exp(scores.data).sum() == pytest.approx(1.0, abs=1e-12)

    def test_grl_scales_encoder_gradient(self):
        """Gradient into the feature map equals -lambda times the no-GRL one."""
        params = build()
        x0 = np.random.default_rng(7).normal(size=(64, 10))
        lam = 0.7

        def disc_grad(with_grl):
            tape = Tape()
            f = tape.tensor(x0)
            if with_grl:
                scores = discriminator_forward(params, f, lam, "eval")
            else:
                scores = discriminator_head_forward(params, ad.mean_over_time(f),
                                                    "eval")
            tape.backward(ad.nll(scores, 2))
            return tape.grad(f)

        g_grl = disc_grad(True)
        g_plain = disc_grad(False)
        np.testing.assert_allclose(g_grl, -lam * g_plain, atol=1e-12)

    def test_pool_then_grl_equals_grl_then_pool(self):
        """Mean pooling and the reversal commute (both linear)."""
        params = build()
        x0 = np.random.default_rng(8).normal(size=(64, 10))
        lam = 1.3

        def grad_with(order):
            tape = Tape()
            f = tape.tensor(x0)
            if order == "pool_first":
                h = grl_apply(ad.mean_over_time(f), lam)
            else:
                h = ad.mean_over_time(grl_apply(f, lam))
            scores = discriminator_head_forward(params, h, "eval")
            tape.backward(ad.nll(scores, 1))
            return tape.grad(f)

        # mathematically identical; association order differs by one ulp
        np.testing.assert_allclose(grad_with("pool_first"),
                                   grad_with("grl_first"), rtol=0, atol=1e-18)


class TestGrl:
    def test_forward_bitwise_identity(self):
        tape = Tape()
        x = tape.tensor(np.random.default_rng(0).normal(size=(5, 7)))
        for lam in (0.0, 0.5, 2.0, 1e9):
            assert grl_apply(x, lam).data.tobytes() == x.data.tobytes()

    def test_lambda_zero_blocks_gradient(self):
        tape = Tape()
        x = tape.tensor(np.ones(4))
        tape.backward(ad.sum_all(grl_apply(x, 0.0)))
        np.testing.assert_array_equal(tape.grad(x), np.zeros(4))

    def test_lambda_two_gives_minus_two(self):
        tape = Tape()
        x = tape.tensor(np.ones((2, 3)))
        tape.backward(ad.sum_all(grl_apply(x, 2.0)))
        np.testing.assert_array_equal(tape.grad(x), np.full((2, 3), -2.0))


def test_end_to_end_composite_gradient():
    """Mini-config CTC + CE loss vs finite differences at 64-bit."""
    params = build()
    x0 = np.random.default_rng(10).normal(size=(16, 18))
    target = [1, 2, 3]
    tape = Tape()
    encoder_forward(params, tape.tensor(x0), "train")  # prime bn stats

    def loss_fn(x):
        f = encoder_forward(params, x, "eval")
        lp = decoder_forward(params, f)
        loss_val, grad = ctc_loss_grad(lp.data, target)
        ly = ad.precomputed_loss(lp, loss_val, grad)
        scores = discriminator_head_forward(params, ad.mean_over_time(f), "eval")
        return ad.add_scalars([ly, ad.scale(ad.nll(scores, 2), 0.5)])

    assert ad.finite_diff_check(loss_fn, x0, eps=3e-5) < 1e-4
