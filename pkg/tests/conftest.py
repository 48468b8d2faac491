import numpy as np
import pytest

from oplanes.camera import CameraIntrinsics
from oplanes.synth import icosphere


@pytest.fixture(scope="session")
def cam256():
    return CameraIntrinsics(fx=240.0, fy=240.0, cx=127.5, cy=127.5, width=256, height=256)


@pytest.fixture(scope="session")
def cam128():
    return CameraIntrinsics(fx=120.0, fy=120.0, cx=63.5, cy=63.5, width=128, height=128)


@pytest.fixture(scope="session")
def sphere2562():
    # 4 subdivisions -> 2562 vertices, 5120 faces
    return icosphere(4, radius=0.3, center=(0.0, 0.0, 2.0))


@pytest.fixture(scope="session")
def sphere_small():
    return icosphere(3, radius=0.3, center=(0.0, 0.0, 2.0))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
