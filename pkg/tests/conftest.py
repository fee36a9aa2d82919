import numpy as np
import pytest
from hypothesis import settings

from whirl import harness
from whirl.action import Prior
from whirl.sim import Camera, GoalSpec, JointSpec, Scene

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def experiments():
    return {t: harness.load_experiment(t) for t in ("drawer", "door", "dishwasher", "shelf_pick_place")}


@pytest.fixture(scope="session")
def drawer_scene(experiments):
    return experiments["drawer"].scenes["drawer_a"][0]


@pytest.fixture(scope="session")
def door_scene(experiments):
    return experiments["door"].scenes["door_a"][0]


@pytest.fixture(scope="session")
def shelf_scene(experiments):
    exp = experiments["shelf_pick_place"]
    return exp.scenes[exp.train_demos[0]][0]


def simple_camera():
    return Camera.look_at((-0.3, -0.9, 1.5), (0.6, 0.0, 0.7))


def slide_scene(axis=(1.0, 0.0, 0.0), limits=(0.0, 0.5), target=0.25, initial=0.0):
    """Single prismatic joint whose handle sits at the origin when closed."""
    joint = JointSpec("prismatic", axis, limits, initial_value=initial, origin=(0.5, 0.0, 0.8))
    return Scene("slide", (joint,), (), simple_camera(), GoalSpec("joint_target", 0, 0.05, target))


def pull_action(scene, distance):
    """Grasp the first joint's handle and drag it ``distance`` along its axis."""
    j = scene.joints[0]
    start = np.array(j.handle_position(j.initial_value))
    end = start + distance * np.array(j.axis)
    return Prior(start, ((start + end) / 2,), end, (0.0, 0.0, 0.0), 0.0, 0.3, 0.8)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
