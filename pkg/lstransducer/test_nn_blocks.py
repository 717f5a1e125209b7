#!/usr/bin/env python3
"""Tests for nn_blocks.py: shapes, causality, determinism and checkpoints."""
import math

import numpy as np
import pytest

from lstransducer.autodiff import Value
from lstransducer.conftest import tiny_model_config
from lstransducer.constants import BLANK_ID, EOS_ID, SOS_ID
from lstransducer.errors import ContractError, DimensionError, VocabularyMismatchError
from lstransducer.nn_blocks import LSTransducerModel, TokenLM, Vocabulary, init_params, stack_context
from lstransducer.training import perplexity


def _frames(T, F=4, seed=0):
    return np.random.default_rng(seed).normal(size=(T, F))


class TestVocabulary:
    """Test reserved ids and input checks."""

    def test_reserved_ids(self):
        v = Vocabulary(8)
        assert (v.blank, v.unk, v.sos, v.eos) == (0, 1, 2, 2)
        assert v.normal_tokens == [3, 4, 5, 6, 7]

    def test_blank_rejected_as_prediction_input(self):
        with pytest.raises(ContractError, match="blank"):
            Vocabulary(8).check_prediction_input([SOS_ID, BLANK_ID])

    def test_out_of_range(self):
        with pytest.raises(ContractError, match="outside vocabulary"):
            Vocabulary(8).check_ids([8])


class TestEncoder:
    """Test the causal encoder."""

    def test_shapes_and_channels(self, tiny_model):
        enc = tiny_model.encoder_forward(_frames(5))
        assert enc.E.shape == (5, 8)
        assert enc.content().shape == (5, 6)
        np.testing.assert_array_equal(enc.weight_channel().data[:, 0], enc.E.data[:, -1])
        np.testing.assert_array_equal(enc.phone_channel().data[:, 0], enc.E.data[:, -2])

    def test_same_seed_same_output(self, tiny_cfg):
        frames = _frames(5)
        a = LSTransducerModel.initialise(tiny_cfg, seed=7).encoder_forward(frames).E.data
        b = LSTransducerModel.initialise(tiny_cfg, seed=7).encoder_forward(frames).E.data
        c = LSTransducerModel.initialise(tiny_cfg, seed=8).encoder_forward(frames).E.data
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, c)

    def test_causal(self, tiny_model):
        """Changing frame t leaves rows before t unchanged."""
        frames = _frames(7)
        changed = frames.copy()
        changed[4:] += 5.0
        a = tiny_model.encoder_forward(frames).E.data
        b = tiny_model.encoder_forward(changed).E.data
        np.testing.assert_allclose(a[:4], b[:4], atol=1e-12)
        assert not np.allclose(a[4:], b[4:])

    def test_wrong_feature_dim(self, tiny_model):
        with pytest.raises(DimensionError, match="feature dim"):
            tiny_model.encoder_forward(np.zeros((3, 5)))

    def test_empty_input(self, tiny_model):
        with pytest.raises(ContractError, match="non-empty"):
            tiny_model.encoder_forward(np.zeros((0, 4)))

    def test_stack_context(self):
        frames = np.arange(6.0).reshape(3, 2)
        out = stack_context(frames, 2)
        np.testing.assert_array_equal(out, [[0, 1, 0, 0], [2, 3, 0, 1], [4, 5, 2, 3]])


class TestPredictionNetwork:
    """Test the prediction network and joint network."""

    def test_rows_depend_on_prefix_only(self, tiny_model):
        a = tiny_model.prediction_network_forward([SOS_ID, 3, 4, 5])
        b = tiny_model.prediction_network_forward([SOS_ID, 3, 4, 7])
        np.testing.assert_allclose(a.H_pre.data[:3], b.H_pre.data[:3], atol=1e-12)
        np.testing.assert_allclose(a.D_inter.data[:3], b.D_inter.data[:3], atol=1e-12)

    def test_output_shapes(self, tiny_model):
        out = tiny_model.prediction_network_forward([SOS_ID, 3, 4])
        assert out.D_inter.shape == (3, 8)
        assert out.H_pre.shape == (3, 8)
        assert out.lm_logits.shape == (3, 8)

    def test_joint_is_additive(self, tiny_model):
        """joint(C, H) = joint(C, 0) + joint(0, H) - b."""
        rng = np.random.default_rng(0)
        C = rng.normal(size=(2, 8))
        H = rng.normal(size=(2, 8))
        zero = np.zeros((2, 8))
        both = tiny_model.joint_logits(Value(C), Value(H)).data
        c_only = tiny_model.joint_logits(Value(C), Value(zero)).data
        h_only = tiny_model.joint_logits(Value(zero), Value(H)).data
        b = tiny_model.params["joint.b"].data
        np.testing.assert_allclose(both, c_only + h_only - b, atol=1e-12)

    def test_tied_joint_uses_lm_classifier(self):
        model = LSTransducerModel.initialise(tiny_model_config(tie_joint_lm=True), seed=0)
        assert "joint.wb" not in model.params
        H = np.random.default_rng(1).normal(size=(1, 8))
        logits = model.joint_logits(Value(np.zeros((1, 8))), Value(H)).data
        expected = H @ model.params["pred.lm.w"].data + model.params["joint.b"].data
        np.testing.assert_allclose(logits, expected, atol=1e-12)

    def test_untrained_lm_near_uniform(self):
        """An untrained network on uniform-random text sits near perplexity V."""
        cfg = tiny_model_config(vocab_size=20, classifier_init_std=0.02)
        lm = TokenLM.initialise(cfg, seed=0)
        rng = np.random.default_rng(0)
        corpus = [list(rng.integers(3, 20, size=6)) for _ in range(20)]
        assert perplexity(lm, corpus) == pytest.approx(20.0, rel=0.05)

    def test_next_token_logprobs_normalised(self, tiny_cfg):
        lm = TokenLM.initialise(tiny_cfg, seed=0)
        lp = lm.next_token_logprobs([SOS_ID, 3])
        assert lp.shape == (8,)
        assert math.fsum(np.exp(lp)) == pytest.approx(1.0, abs=1e-12)


class TestCheckpoints:
    """Test model and LM checkpoints."""

    def test_model_round_trip(self, tiny_model, tmp_path):
        tiny_model.save(str(tmp_path))
        loaded = LSTransducerModel.load(str(tmp_path))
        assert loaded.cfg == tiny_model.cfg
        for p in tiny_model.params:
            assert loaded.params[p].data.tobytes() == tiny_model.params[p].data.tobytes()

    def test_lm_loads_into_model_path_for_path(self, tiny_cfg, tmp_path):
        lm = TokenLM.initialise(tiny_cfg, seed=5)
        lm.save(str(tmp_path))
        model = LSTransducerModel.initialise(tiny_cfg, seed=0)
        encoder_before = model.params["enc.in.w"].data.copy()
        model.load_prediction_network(TokenLM.load(str(tmp_path)).params)
        for p in lm.params:
            assert model.params[p].data.tobytes() == lm.params[p].data.tobytes()
        assert model.params["enc.in.w"].data.tobytes() == encoder_before.tobytes()

    def test_lm_vocabulary_mismatch(self, tiny_cfg):
        lm = TokenLM.initialise(tiny_model_config(vocab_size=10), seed=0)
        model = LSTransducerModel.initialise(tiny_cfg, seed=0)
        with pytest.raises(VocabularyMismatchError):
            model.load_prediction_network(lm.params)

    def test_lm_checkpoint_is_not_a_model(self, tiny_cfg, tmp_path):
        TokenLM.initialise(tiny_cfg, seed=0).save(str(tmp_path))
        with pytest.raises(ContractError, match="not a transducer checkpoint"):
            LSTransducerModel.load(str(tmp_path))

    def test_init_params_paths(self, tiny_cfg):
        paths = init_params(tiny_cfg, 0).paths()
        assert "enc.layer0.attn.wq" in paths
        assert "pred.layer1.ff.w2" in paths
        assert "aif.proj.w" in paths
        assert "ctc.w" in paths
        assert paths.count("pred.embed") == 1
        assert EOS_ID == SOS_ID
