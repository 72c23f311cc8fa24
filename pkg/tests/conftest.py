import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from ego_omni.kinematics import MotionSequence, Skeleton, axis_angle_to_rotmat, random_rotations

settings.register_profile("ci", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("ci")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def skeleton():
    return Skeleton()


def random_sequence(rng, T=16, skeleton=None, angle=0.6, fps=30.0) -> MotionSequence:
    """Smooth-ish random motion: small local rotations plus a wandering root."""
    skeleton = skeleton or Skeleton()
    J = skeleton.n_joints
    base = rng.normal(scale=angle, size=(J, 3))
    drift = rng.normal(scale=angle * 0.1, size=(T, J, 3)).cumsum(0)
    rots = axis_angle_to_rotmat(base + drift)
    rots[:, 0] = random_rotations(rng) @ rots[:, 0] if rng.random() < 0.5 else rots[:, 0]
    root = np.array([0.0, 0.9, 0.0]) + rng.normal(scale=0.02, size=(T, 3)).cumsum(0)
    return MotionSequence.from_local(skeleton, root, rots, fps)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary so it
# survives output capture
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
