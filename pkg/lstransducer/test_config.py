#!/usr/bin/env python3
"""Tests for config.py and seeding.py."""
import numpy as np
import pytest

from lstransducer.config import (
    BeamConfig,
    ModelConfig,
    Settings,
    TrainConfig,
    load_settings,
    parse_pairs,
    save_model_config,
)
from lstransducer.constants import CTC_WEIGHT, DECODE_CTC_WEIGHT, QUANTITY_WEIGHT
from lstransducer.errors import ConfigError, DataError
from lstransducer.seeding import named_rng, stream_id


class TestValidation:
    """Test range checks in the config dataclasses."""

    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.gamma == CTC_WEIGHT == 0.5
        assert cfg.mu == QUANTITY_WEIGHT == 0.05
        assert BeamConfig().beta == DECODE_CTC_WEIGHT == 0.3

    def test_gamma_out_of_range(self):
        with pytest.raises(ConfigError, match="gamma must be between 0 and 1, got 1.5"):
            TrainConfig(gamma=1.5)

    def test_negative_mu(self):
        with pytest.raises(ConfigError, match="mu must be non-negative"):
            TrainConfig(mu=-0.1)

    def test_config_errors_are_value_errors(self):
        with pytest.raises(ValueError):
            BeamConfig(beam=0)

    def test_query_dim_must_match_model_dim(self):
        with pytest.raises(ConfigError, match="query_dim"):
            ModelConfig(model_dim=16, query_dim=8)

    def test_tap_layer_range(self):
        with pytest.raises(ConfigError, match="pred_tap_layer"):
            ModelConfig(pred_layers=2, pred_tap_layer=3)

    def test_alignment_mode(self):
        with pytest.raises(ConfigError, match="alignment"):
            ModelConfig(alignment="ctc")


class TestParsing:
    """Test the key=value format and override routing."""

    def test_comments_and_blank_lines(self):
        pairs = parse_pairs(["# header", "", "gamma = 0.25  # weight", "beam=4"])
        assert pairs == {"gamma": "0.25", "beam": "4"}

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="expected key=value"):
            parse_pairs(["gamma 0.3"], "cfg.txt")

    def test_overrides_are_coerced(self):
        s = Settings().with_overrides({"gamma": "0.25", "beam": "4", "eos_rule": "off", "freeze_below": "none"})
        assert s.train.gamma == 0.25
        assert s.beam.beam == 4
        assert s.beam.eos_rule is False
        assert s.train.freeze_below is None

    def test_shared_key_reaches_every_owner(self):
        s = Settings().with_overrides({"vocab_size": "12"})
        assert s.model.vocab_size == 12
        assert s.synth.vocab_size == 12

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="unknown config key: lerning_rate"):
            Settings().with_overrides({"lerning_rate": "0.1"})

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="bad value for beam"):
            Settings().with_overrides({"beam": "ten"})

    def test_override_still_validated(self):
        with pytest.raises(ConfigError, match="gamma"):
            Settings().with_overrides({"gamma": "2"})

    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("gamma = 0.1\nbeta = 0.5\n", encoding="utf-8")
        s = load_settings(str(path), {"beta": "0.0"})
        assert s.train.gamma == 0.1
        assert s.beam.beta == 0.0

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_settings(str(tmp_path / "absent.cfg"))

    def test_model_config_round_trip(self, tmp_path):
        cfg = ModelConfig(vocab_size=11, tie_joint_lm=True, alignment="cif")
        path = tmp_path / "model.cfg"
        save_model_config(cfg, str(path))
        assert load_settings(str(path)).model == cfg


class TestSeeding:
    """Test named random streams."""

    def test_same_name_same_numbers(self):
        assert named_rng(3, "init").normal() == named_rng(3, "init").normal()

    def test_streams_independent(self):
        """Drawing from one stream does not shift another."""
        a = named_rng(0, "shuffle")
        a.normal(size=100)
        assert named_rng(0, "init").normal() == named_rng(0, "init").normal()
        assert named_rng(0, "init").normal() != named_rng(0, "shuffle").normal()

    def test_stream_id_is_stable(self):
        assert stream_id("init") == stream_id("init")
        assert stream_id("init") != stream_id("data.source.train")

    def test_negative_seed(self):
        with pytest.raises(ValueError, match="non-negative"):
            named_rng(-1, "init")

    def test_generator_type(self):
        assert isinstance(named_rng(0, "vocab"), np.random.Generator)
