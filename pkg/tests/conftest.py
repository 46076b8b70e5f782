import numpy as np
import pytest

from splatgrasp.splat_binding import GaussianSet, bind_gaussians
from splatgrasp.synthetic import box_object_gaussians, build_toy_rig, grasp_pose, sample_hand_gaussians


@pytest.fixture(scope="session")
def rig():
    return build_toy_rig()


@pytest.fixture(scope="session")
def hand_gaussians(rig):
    return sample_hand_gaussians(rig, seed=0)


@pytest.fixture(scope="session")
def binding(rig, hand_gaussians):
    return bind_gaussians(hand_gaussians, rig)


@pytest.fixture(scope="session")
def box_object():
    return box_object_gaussians()


@pytest.fixture(scope="session")
def gt_pose():
    return grasp_pose()


def random_gaussians(rng, k, center=(0.0, 0.0, 1.0), spread=0.25, scale=(0.02, 0.08)):
    pos = np.asarray(center) + rng.uniform(-spread, spread, size=(k, 3))
    q = rng.normal(size=(k, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(pos, q, rng.uniform(*scale, size=(k, 3)), rng.uniform(0.2, 0.9, size=k),
                       rng.uniform(0, 1, size=(k, 3)))


def central_difference(f, x, h):
    """Gradient of scalar f at array x by central differences."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
