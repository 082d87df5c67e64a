import numpy as np
import pytest

from warpu.density import GaussianMixture
from warpu.targets import bimodal_gauss, trimodal_1d


@pytest.fixture
def trimodal():
    return trimodal_1d()


@pytest.fixture
def trimodal_mix(trimodal):
    return trimodal.matched_mixture


@pytest.fixture
def bimodal2d():
    return bimodal_gauss(dim=2, sep=3.0)


@pytest.fixture
def mismatched_mix():
    """Deliberately poor two-component approximation to the trimodal target."""
    return GaussianMixture(
        [0.5, 0.5],
        np.array([[-5.0], [5.0]]),
        np.array([2.0, 2.0]).reshape(2, 1, 1),
    )


@pytest.fixture
def pair_mix_1d():
    return GaussianMixture(
        [0.5, 0.5], np.array([[-1.0], [1.0]]),
        np.array([1.0, 1.0]).reshape(2, 1, 1),
    )
