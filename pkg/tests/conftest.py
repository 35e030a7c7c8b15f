import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from titanet_lid.corpus import split_train_val, synth_corpus
from titanet_lid.model import ModelConfig, build_model

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def tiny_config(**overrides):
    base = dict(num_blocks=3, repeats=1, channels=8, num_classes=3, epilogue_channels=16,
                hidden_dim=8, n_mels=6)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return build_model(tiny_config(), seed=3)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """3 toy languages x 12 items of 2 s; returns (dataset, train, val)."""
    root = tmp_path_factory.mktemp("small_corpus")
    ds = synth_corpus(root, 3, 12, duration_s=2.0, seed=5)
    train, val = split_train_val(ds, 0.25, seed=0)
    return ds, train, val
