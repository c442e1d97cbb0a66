import numpy as np
import pytest

from semislam.config import Config
from semislam.geometry import CameraModel


@pytest.fixture(scope="session")
def cam():
    return CameraModel(fx=460.0, fy=460.0, cx=320.0, cy=240.0, k1=-0.08, k2=0.01,
                       width=640, height=480)


@pytest.fixture(scope="session")
def cam_distorted():
    return CameraModel(fx=458.0, fy=457.0, cx=367.0, cy=248.0, k1=-0.28, k2=0.07,
                       p1=1e-4, p2=-2e-4, width=752, height=480)


@pytest.fixture()
def cfg():
    return Config()


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
