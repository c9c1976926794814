import numpy as np
import pytest

from egokin.fixtures import load_arm_chain, load_hand_chain, load_robot_binding

HAND_TIPS = ("th_tip", "ix_tip", "mi_tip", "ri_tip", "li_tip")


@pytest.fixture(scope="session")
def arm():
    return load_arm_chain()


@pytest.fixture(scope="session")
def hand():
    return load_hand_chain()


@pytest.fixture(scope="session")
def binding():
    return load_robot_binding()


def random_pose(rng, max_angle=3.0, max_trans=2.0):
    from egokin.geom import Se3Pose

    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    trans = rng.uniform(-max_trans, max_trans, 3)
    return Se3Pose.from_axis_angle(axis, angle, trans)
