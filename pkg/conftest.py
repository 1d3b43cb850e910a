"""Shared fixtures: seeded generators, a reduced-geometry model config and a tiny synthetic sequence."""

import numpy as np
import pytest

from config import SynthSpec, TrainConfig
from services.gradient_suite import tiny_model_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_tiny_config(**overrides):
    """87/127 patches give a 6x6 correlation grid with the standard layer stack."""
    config = tiny_model_config()
    config.template_size, config.search_size = 87, 127
    for key, value in overrides.items():
        setattr(config, key, value)
    return config


@pytest.fixture
def tiny_config():
    return make_tiny_config()


@pytest.fixture
def tiny_train_config():
    return TrainConfig(model_preset='desk', epochs=2, steps_per_epoch=2, batch_size=2, warmup_epochs=1.0,
                       log_every=1, seed=3)


@pytest.fixture
def small_spec():
    return SynthSpec(name='small', seed=5, frame_width=160, frame_height=120, frame_count=6, texture_seed=9,
                     object_width=24.0, object_height=18.0, velocity_x=1.5, velocity_y=0.5)
