"""Shared fixtures: a model and a synthetic task small enough for finite differences."""
import pytest

from lstransducer.config import ModelConfig, SynthSpec, TrainConfig
from lstransducer.dataset import synth_dataset
from lstransducer.nn_blocks import LSTransducerModel


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        vocab_size=8,
        feat_dim=4,
        encoder_dim=8,
        model_dim=8,
        ff_dim=16,
        encoder_layers=1,
        encoder_context=2,
        pred_layers=2,
        pred_tap_layer=1,
        query_dim=8,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_synth_spec(**overrides) -> SynthSpec:
    base = dict(
        vocab_size=8,
        feat_dim=4,
        num_phones=6,
        min_tokens=2,
        max_tokens=4,
        min_duration=2,
        max_duration=3,
        noise=0.1,
        preferred_successors=1,
    )
    base.update(overrides)
    return SynthSpec(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    return LSTransducerModel.initialise(tiny_cfg, seed=0)


@pytest.fixture
def tiny_spec():
    return tiny_synth_spec()


@pytest.fixture
def tiny_data(tiny_spec):
    return synth_dataset(tiny_spec, seed=0, count=4)


@pytest.fixture
def train_cfg():
    return TrainConfig(warmup_steps=0, batch_size=4, epochs=1, lm_epochs=1, adapt_epochs=1, learning_rate=1e-3)
