import numpy as np
import pytest
from hypothesis import settings

from anyshot.synthworld import WorldConfig, generate_dataset

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_world():
    """Tiny but complete world used by the fast unit tests."""
    return generate_dataset(WorldConfig(images_train=24, images_test=12, seed=3))


@pytest.fixture(scope="session")
def default_world():
    return generate_dataset(WorldConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
