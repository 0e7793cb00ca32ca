"""
Shared fixtures; scripts/ is a flat module directory, so put it on sys.path
"""
import os
import sys

_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(_ROOT, "scripts"))

import numpy as np
import pytest

from dataio import SynthSpec, synth_generate
from forecaster import ModelConfig
from train import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def lagged_small():
    """Four lagged copies of an AR(1)+sinusoid base, short enough for quick training"""
    return synth_generate(SynthSpec(channels=4, length=400, coupling="lagged_copy",
                                    lag=3, noise=0.1, seed=7))


@pytest.fixture
def tiny_model_config():
    return ModelConfig(lookback=16, horizon=8, d_model=8, n_heads=2, n_layers=1, seed=3)


@pytest.fixture
def quick_train_config():
    return TrainConfig(epochs=2, batch_size=16, lr=1e-3, seed=0)
