import numpy as np
import pytest

from tripose.kinematics import default_skeleton


@pytest.fixture(scope="session")
def skel():
    return default_skeleton()


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
