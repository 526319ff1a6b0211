"""Pytest configuration and fixtures for camcal tests."""

import os

import numpy as np
import pytest


@pytest.fixture(autouse=True)
def camcal_env(tmp_path):
    """Point CAMCAL_DIR at a temp directory and pin CAMCAL_THREADS for each test."""
    test_dir = tmp_path / "camcal_test"
    test_dir.mkdir()
    saved = {name: os.environ.get(name) for name in ("CAMCAL_DIR", "CAMCAL_THREADS")}
    os.environ["CAMCAL_DIR"] = str(test_dir)
    os.environ["CAMCAL_THREADS"] = "1"
    yield test_dir
    for name, value in saved.items():
        if value is not None:
            os.environ[name] = value
        else:
            del os.environ[name]


@pytest.fixture
def rng():
    """A fixed random generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset():
    """Four-class long-tailed synthetic set, 16x16 images, counts 24/12/6/3."""
    from camcal.core.data import synth_shapes

    return synth_shapes(4, [24, 12, 6, 3], 16, seed=7).with_thresholds(10, 5)


@pytest.fixture
def tiny_backbone():
    """Two-stage 4/8-channel backbone."""
    from camcal.core.network import Backbone

    return Backbone.create([4, 8], in_channels=3, rng=np.random.default_rng(3))


@pytest.fixture
def tiny_config():
    """Fast representation-stage settings for the tiny dataset."""
    from camcal.core.models import TrainConfig

    return TrainConfig(channels=[4, 8], batch_size=8, epochs=2, lr_max=0.05)
