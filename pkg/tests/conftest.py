import numpy as np
import pytest

from latentshield.encoder import init_encoder
from latentshield.synthdata import make_subject_images, make_test_image


@pytest.fixture(scope="session")
def tiny_encoder():
    return init_encoder(7, "tiny-8x")


@pytest.fixture(scope="session")
def micro_encoder():
    return init_encoder(7, "micro-4x")


@pytest.fixture(scope="session")
def image16():
    return make_test_image(0, 16)


@pytest.fixture(scope="session")
def image32():
    return make_test_image(0, 32)


@pytest.fixture(scope="session")
def subject16():
    return make_subject_images(5, 4, 16)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
