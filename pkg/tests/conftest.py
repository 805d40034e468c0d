import numpy as np
import pytest
from hypothesis import settings

from biofuse.preprocessing import FeatureStore
from biofuse.synth import SynthConfig, generate_sessions

settings.register_profile("biofuse", deadline=None, max_examples=60)
settings.load_profile("biofuse")


@pytest.fixture(scope="session")
def small_sessions():
    return generate_sessions(SynthConfig(n_subjects=6, seed=11))


@pytest.fixture(scope="session")
def small_store(small_sessions):
    return FeatureStore.from_sessions(small_sessions)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
