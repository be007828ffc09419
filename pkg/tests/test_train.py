"""Adversarial step semantics, Acc-PT freezing, checkpoints, evaluation."""

import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from accdat import autodiff as ad
from accdat.autodiff import Tape
from accdat.ctc import ctc_loss_grad
from accdat.data import Utterance
from accdat.errors import (ConfigError, DataError, InternalInvariantError,
                           InvalidArgument)
from accdat.model import (build_model, discriminator_head_forward,
                          encoder_forward, mini_config)
from accdat.optim import OptimizerState
from accdat.train import (BatchSample, Checkpoint, DiscPretrainConfig,
                          checkpoint_arrays, ctc_step, dat_step, evaluate_pairs,
                          load_checkpoint, opt_state_from_checkpoint,
                          params_from_checkpoint, pretrain_discriminator,
                          save_checkpoint, transcribe)
from accdat.verify import (_clone, _prime_bn, _rand_batch, _tiny_model,
                           manual_saddle_update, two_pass_reference_grads)


def rand_batch(seed, n, n_annotated, n_accents=4):
    return _rand_batch(np.random.default_rng(seed), n, n_annotated, n_accents)


class TestDatStep:
    def test_lambda_zero_equals_pure_ctc_step(self):
        """lambda = 0 ignores unannotated samples: annotated-only CTC update."""
        params = _tiny_model(0)
        batch = rand_batch(1, 4, 2)
        _prime_bn(params, batch)
        by_dat = _clone(params)
        dat_step(by_dat, batch, 0.0, OptimizerState(kind="sgd", lr=0.05),
                 mode="eval")
        by_ctc = _clone(params)
        annotated = [s for s in batch if s.annotated]
        # scale matches E's 1/N over the full batch, not the annotated count
        g_ctc, _ = two_pass_reference_grads(by_ctc, batch)
        for name, g in g_ctc.items():
            p = by_ctc.all_params()[name]
            p.tensor.data = p.data - 0.05 * g
        for name, p in by_ctc.all_params().items():
            np.testing.assert_allclose(by_dat.all_params()[name].data, p.data,
                                       atol=1e-14)
        # theta_d untouched at lambda = 0
        for name in params.discriminator:
            np.testing.assert_array_equal(by_dat.all_params()[name].data,
                                          params.all_params()[name].data)

    def test_two_pass_oracle_equivalence(self):
        """dat_step == manual evaluation of the three update equations."""
        worst = 0.0
        for k, n_annot in [(0, 4), (1, 0), (2, 2)]:
            params = _tiny_model(k)
            batch = rand_batch(10 + k, 4, n_annot)
            _prime_bn(params, batch)
            expected = manual_saddle_update(params, batch, 0.5, 0.01)
            actual = _clone(params)
            dat_step(actual, batch, 0.5, OptimizerState(kind="sgd", lr=0.01),
                     mode="eval")
            for name, p in expected.all_params().items():
                if p.trainable and p.data.size:
                    worst = max(worst, float(np.abs(
                        p.data - actual.all_params()[name].data).max()))
        assert worst < 1e-10

    def test_all_unannotated_leaves_decoder_exactly(self):
        params = _tiny_model(3)
        batch = rand_batch(7, 4, 0)
        _prime_bn(params, batch)
        before = {n: p.data.copy() for n, p in params.decoder.items()}
        losses = dat_step(params, batch, 0.8,
                          OptimizerState(kind="novograd", lr=0.01),
                          mode="eval")
        for name, p in params.decoder.items():
            assert p.data.tobytes() == before[name].tobytes()
        assert losses["L_y"] is None
        # encoder and discriminator did move
        assert any(params.encoder[n].data.any() for n in params.encoder)

    def test_unscaled_variant_drops_lambda_from_disc_update(self):
        lam = 0.6
        params = _tiny_model(4)
        batch = rand_batch(9, 4, 2)
        _prime_bn(params, batch)
        _, g_ce = two_pass_reference_grads(params, batch)
        scaled = _clone(params)
        dat_step(scaled, batch, lam, OptimizerState(kind="sgd", lr=0.1),
                 mode="eval")
        unscaled = _clone(params)
        dat_step(unscaled, batch, lam, OptimizerState(kind="sgd", lr=0.1),
                 mode="eval", discriminator_unscaled=True)
        for name in params.discriminator:
            base = params.all_params()[name].data
            d_scaled = scaled.all_params()[name].data - base
            d_unscaled = unscaled.all_params()[name].data - base
            np.testing.assert_allclose(d_scaled, lam * d_unscaled, atol=1e-12)

    def test_warns_when_nothing_flows(self):
        params = _tiny_model(5)
        batch = rand_batch(11, 3, 0)
        _prime_bn(params, batch)
        before = {n: p.data.copy() for n, p in params.all_params().items()}
        with pytest.warns(UserWarning, match="no gradient"):
            dat_step(params, batch, 0.0, OptimizerState(kind="sgd", lr=0.1),
                     mode="eval")
        for name, p in params.all_params().items():
            assert p.data.tobytes() == before[name].tobytes()

    def test_objective_value_matches_definition(self):
        params = _tiny_model(6)
        batch = rand_batch(13, 4, 2)
        _prime_bn(params, batch)
        lam = 0.7
        losses = dat_step(_clone(params), batch, lam,
                          OptimizerState(kind="sgd", lr=0.0), mode="eval")
        n_annot = sum(1 for s in batch if s.annotated)
        expected_E = (losses["L_y"] * n_annot - lam * losses["L_d"] * 4) / 4
        assert losses["E"] == pytest.approx(expected_E, rel=1e-12)

    def test_min_max_directions(self):
        """theta_d descends L_d; the adversarial theta_f component ascends it."""
        params = _tiny_model(7)
        batch = rand_batch(15, 4, 2)
        _prime_bn(params, batch)
        _, g_ce = two_pass_reference_grads(params, batch)
        mu, lam = 1e-4, 0.9
        adv = _clone(params)
        dat_step(adv, batch, lam, OptimizerState(kind="sgd", lr=mu), mode="eval")
        plain = _clone(params)
        dat_step(plain, batch, 0.0, OptimizerState(kind="sgd", lr=mu), mode="eval")
        d_dir = sum(float(np.sum((adv.all_params()[n].data
                                  - params.all_params()[n].data) * g_ce[n]))
                    for n in params.discriminator if n in g_ce)
        f_dir = sum(float(np.sum((adv.all_params()[n].data
                                  - plain.all_params()[n].data) * g_ce[n]))
                    for n in params.encoder if n in g_ce)
        assert d_dir < 0
        assert f_dir > 0


class TestCtcStep:
    def test_requires_labels(self):
        params = _tiny_model(0)
        batch = rand_batch(1, 2, 1)
        with pytest.raises(InvalidArgument):
            ctc_step(params, batch, OptimizerState(kind="sgd", lr=0.1))

    def test_reduces_loss_on_fixed_batch(self):
        params = _tiny_model(1)
        batch = rand_batch(3, 3, 3)
        _prime_bn(params, batch)
        opt = OptimizerState(kind="novograd", lr=0.02)
        first = ctc_step(params, batch, opt)["L_y"]
        for _ in range(30):
            last = ctc_step(params, batch, opt)["L_y"]
        assert last < first


class TestPretrainDiscriminator:
    def setup_samples(self, params, n=40, n_accents=4, seed=0):
        # accents differ by a time-varying channel pattern: constant biases
        # would be erased by the encoder's per-utterance batchnorm, but a
        # rectified oscillation survives mean pooling
        rng = np.random.default_rng(seed)
        waves = [np.sin(0.9 * (a + 1) * np.arange(20)) for a in range(n_accents)]
        directions = rng.normal(size=(n_accents, 6))
        samples = []
        for i in range(n):
            accent = i % n_accents
            feats = (0.3 * rng.normal(size=(6, 20))
                     + np.outer(directions[accent], waves[accent]))
            samples.append(BatchSample(f"s{i}", feats, None, accent))
        _prime_bn(params, samples)
        return samples

    def test_encoder_decoder_bitwise_frozen(self):
        params = _tiny_model(0)
        samples = self.setup_samples(params)
        enc_before = params.digest("encoder")
        dec_before = params.digest("decoder")
        trace = pretrain_discriminator(params, samples[:30], samples[30:],
                                       DiscPretrainConfig(max_epochs=5), seed=1)
        assert params.digest("encoder") == enc_before
        assert params.digest("decoder") == dec_before
        assert len(trace) >= 1
        assert all(p.trainable for p in params.encoder.values()
                   if not p.name.endswith(("running_mean", "running_var", "count")))

    def test_learns_separable_accents(self):
        params = _tiny_model(1)
        samples = self.setup_samples(params, n=144, seed=2)
        trace = pretrain_discriminator(
            params, samples[:96], samples[96:],
            DiscPretrainConfig(max_epochs=60, patience=8, lr=0.05), seed=3)
        # a linear probe tops out near 0.94 on these encoder features; the
        # tiny head should land in the same range
        assert max(trace) >= 0.85

    def test_single_accent_terminates_immediately(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cfg = mini_config(n_labels=4, n_accents=1, input_channels=6)
            cfg.encoder_blocks = _tiny_model(0).config.encoder_blocks
            cfg.disc_hidden = [8, 8, 8]
            params = build_model(cfg, np.random.default_rng(0), np.float64)
        samples = self.setup_samples(params, n=10, n_accents=1)
        trace = pretrain_discriminator(params, samples[:8], samples[8:],
                                       DiscPretrainConfig(), seed=4)
        assert trace == [1.0]

    def test_stop_rule_patience(self):
        params = _tiny_model(2)
        samples = self.setup_samples(params, n=40, seed=5)
        cfg = DiscPretrainConfig(patience=2, min_delta=1.0, max_epochs=50)
        trace = pretrain_discriminator(params, samples[:30], samples[30:],
                                       cfg, seed=6)
        # first epoch sets the baseline, then an unreachable min_delta stalls
        # for exactly `patience` epochs
        assert len(trace) == 1 + cfg.patience


class TestEvaluation:
    def make_utts(self):
        return [Utterance("u0", "x", 10, 0, "ab cd"),
                Utterance("u1", "x", 10, 1, "ab"),
                Utterance("u2", "x", 10, 1, "cd ab")]

    def test_oracle_decoder_scores_zero(self):
        refs = {u.id: u.text for u in self.make_utts()}
        rep = evaluate_pairs(lambda u: refs[u.id].split(), self.make_utts(),
                             {"seen": [0], "unseen": [1], "all": [0, 1]})
        assert all(v == 0.0 for v in rep.averages.values())

    def test_empty_hypotheses_are_deletions(self):
        utts = self.make_utts()
        rep = evaluate_pairs(
            lambda u: u.text.split() if u.accent_id == 0 else [],
            utts, {"seen": [0], "unseen": [1]})
        by_id = {s.accent_id: s for s in rep.per_accent}
        assert by_id[0].wer == 0.0
        assert by_id[1].wer == 1.0

    def test_missing_ground_truth_rejected(self):
        utts = [Utterance("u0", "x", 10, 0, None)]
        with pytest.raises(DataError):
            evaluate_pairs(lambda u: [], utts, {"all": [0]})

    def test_transcribe_decodes_words(self):
        # decoder bias forced to a one-hot-ish pattern is impractical; instead
        # check the plumbing: transcribe returns a word list over the alphabet
        params = _tiny_model(3)
        sample = rand_batch(17, 1, 1)[0]
        _prime_bn(params, [sample])
        words = transcribe(params, sample.features, "abcd_")
        assert isinstance(words, list)
        assert all(set(w) <= set("abcd") for w in words)


class TestCheckpointIO:
    def fill(self, tmp_path):
        params = _tiny_model(0)
        opt = OptimizerState(kind="novograd", lr=0.01)
        batch = rand_batch(19, 3, 3)
        _prime_bn(params, batch)
        ctc_step(params, batch, opt)
        from accdat.model import model_config_to_dict
        meta = {
            "config_digest": "d" * 64, "regime": "pretrain_base",
            "status": "final", "epoch": 1, "step": 1, "total_steps": 1,
            "dtype": "f64", "alphabet": "abcd_",
            "model_config": model_config_to_dict(params.config),
            "has_discriminator": True, "disc_pretrained": False,
            "rng": {"train_seed": 7, "next_epoch": 1},
            "optimizer": {
                "kind": opt.kind, "lr": opt.lr, "beta1": opt.beta1,
                "beta2": opt.beta2, "eps": opt.eps,
                "weight_decay": opt.weight_decay,
                "second_moment": dict(sorted(opt.second_moment.items())),
            },
        }
        path = tmp_path / "ckpt"
        save_checkpoint(path, meta, checkpoint_arrays(params, opt))
        return params, opt, path

    def test_round_trip_bit_identical(self, tmp_path):
        params, opt, path = self.fill(tmp_path)
        ckpt = load_checkpoint(path)
        restored = params_from_checkpoint(ckpt)
        for name, p in params.all_params().items():
            assert restored.all_params()[name].data.tobytes() == p.data.tobytes()
        opt2 = opt_state_from_checkpoint(ckpt)
        assert opt2.second_moment == opt.second_moment
        for name, m in opt.first_moment.items():
            assert opt2.first_moment[name].tobytes() == m.tobytes()

    def test_save_load_save_byte_identical(self, tmp_path):
        _, _, path = self.fill(tmp_path)
        ckpt = load_checkpoint(path)
        save_checkpoint(tmp_path / "again", ckpt.meta, ckpt.arrays)
        for fname in ("meta.json", "index.json", "params.bin"):
            assert (tmp_path / "again" / fname).read_bytes() == \
                   (path / fname).read_bytes()

    def test_truncated_payload_rejected(self, tmp_path):
        _, _, path = self.fill(tmp_path)
        raw = (path / "params.bin").read_bytes()
        (path / "params.bin").write_bytes(raw[:-8])
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_version_mismatch_rejected(self, tmp_path):
        _, _, path = self.fill(tmp_path)
        meta = json.loads((path / "meta.json").read_text())
        meta["format_version"] = 99
        (path / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(DataError, match="version"):
            load_checkpoint(path)

    def test_digest_mismatch_rejected(self, tmp_path):
        _, _, path = self.fill(tmp_path)
        raw = bytearray((path / "params.bin").read_bytes())
        raw[7] ^= 0xFF
        (path / "params.bin").write_bytes(bytes(raw))
        with pytest.raises(DataError, match="digest"):
            load_checkpoint(path)

    def test_index_is_name_sorted_with_offsets(self, tmp_path):
        _, _, path = self.fill(tmp_path)
        index = json.loads((path / "index.json").read_text())
        names = [e["name"] for e in index]
        assert names == sorted(names)
        assert index[0]["byte_offset"] == 0
        for a, b in zip(index, index[1:]):
            assert b["byte_offset"] > a["byte_offset"]
