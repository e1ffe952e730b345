"""Shared fixtures: a small body model, a 16 px scheme and a tiny network."""
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / 'src'))

from rsc_engine.body_model import default_camera, generate_toy_model
from rsc_engine.network import ResolutionScheme, RscNet
from rsc_engine.synth import generate_sample


TINY_NETWORK = {
    'stem_channels': 4,
    'feature_dim': 8,
    'num_blocks': 2,
    'downsample_after': 1,
    'hidden_dim': 16,
    'iterations': 2,
}


@pytest.fixture(scope='session')
def model():
    return generate_toy_model(0, num_vertices=50, num_joints=6, num_betas=4)


@pytest.fixture(scope='session')
def scheme():
    # ranges: 16 | 11-15 | 7-10 | 3-6
    return ResolutionScheme(16, (16, 10, 6, 3))


@pytest.fixture(scope='session')
def camera(scheme):
    return default_camera(scheme.canonical_size)


@pytest.fixture
def tiny_net(scheme, model):
    return RscNet(scheme, model.num_betas, model.num_joints, seed=0, **TINY_NETWORK)


@pytest.fixture(scope='session')
def samples(model, scheme, camera):
    return [generate_sample(i, 0, model, scheme, camera) for i in range(8)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
