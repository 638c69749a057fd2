import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tmloss.config import BackboneConfig, EncoderConfig, ExperimentConfig, HeadConfig, TrainConfig
from tmloss.data import synth_generate

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def small_config(**train_overrides) -> ExperimentConfig:
    """16x16 input, two stages -> 4x4x16 final map; fast enough for unit tests."""
    train = dict(epochs=1, batch_size=16, eval_pairs=40, holdout_fraction=0.25)
    train.update(train_overrides)
    return ExperimentConfig(
        backbone=BackboneConfig(input_size=(3, 16, 16), stage_channels=[8, 16], blocks_per_stage=[1, 1],
                                embedding_dim=12),
        encoder=EncoderConfig(num_layers=1, num_heads=2),
        head=HeadConfig(kind="arcface"),
        train=TrainConfig(**train),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    return synth_generate(4, 12, 16, seed=3)
