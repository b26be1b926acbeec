import numpy as np
import pytest

from scansim.phantom import carotid_phantom, gradient_volume, phantom_ground_truth, phantom_waypoints


@pytest.fixture(scope="session")
def phantom():
    return carotid_phantom()


@pytest.fixture(scope="session")
def phantom_gt():
    return phantom_ground_truth()


@pytest.fixture(scope="session")
def waypoints():
    return phantom_waypoints()


@pytest.fixture(scope="session")
def ramp32():
    return gradient_volume(32)


def random_rotation(rng):
    """Uniform random rotation matrix."""
    from scipy.spatial.transform import Rotation
    q = rng.normal(size=4)
    return Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()
