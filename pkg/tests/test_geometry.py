import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occgrasp import sim
from occgrasp.geometry import (
    GeometryError,
    GripperParams,
    ObjectShape,
    PlanarPose,
    WallConfig,
    compute_goal,
    goal_exposure,
    pivot_complete,
    push_complete,
    rotation_distance,
    trace_rotation_distance,
    wrap_angle,
)

angles = st.floats(-20.0, 20.0, allow_nan=False)


@pytest.mark.parametrize("theta, perp, want", [
    (math.pi / 2, math.pi / 2, 0.0),
    (0.0, math.pi / 2, math.pi / 2),
    (80 * math.pi / 180, math.pi / 2, 10 * math.pi / 180),
])
def test_rotation_distance_examples(theta, perp, want):
    assert rotation_distance(theta, perp) == pytest.approx(want, abs=1e-12)


@given(angles, angles)
def test_trace_formula_matches_wrapped_difference(a, b):
    assert abs(trace_rotation_distance(a, b) - abs(wrap_angle(b - a))) < 1e-7


@given(angles)
def test_wrap_angle_range(t):
    w = wrap_angle(t)
    assert -math.pi <= w <= math.pi
    assert math.isclose(math.cos(w), math.cos(t), abs_tol=1e-9)
    assert PlanarPose(0, 0, 0, t).normalized().theta == w


def test_pivot_threshold_inclusive():
    assert pivot_complete(0.0)
    assert pivot_complete(10 * math.pi / 180)
    assert not pivot_complete(0.2)


def test_push_threshold_strict():
    g = np.array([0.1, -0.2, 0.05])
    assert push_complete(g, g)
    assert push_complete(g + [0, 0.029, 0], g)
    assert not push_complete(g + [0, 0.031, 0], g)
    assert not push_complete(g + [0, 0.03, 0], g)


def test_goal_nominal():
    wall, shape, grip = WallConfig(0.2), ObjectShape(), GripperParams()
    goal = compute_goal(wall, shape, grip)
    # the object's free (-y) edge overhangs the wall end by the exposure
    assert goal[1] - shape.size_y / 2 == pytest.approx(wall.end_y - goal_exposure(grip))
    assert goal_exposure(grip) == pytest.approx(0.01 + 0.01 + 0.03)
    assert goal[0] == pytest.approx(wall.face_x - shape.size_z / 2)
    assert goal[2] == pytest.approx(shape.size_x / 2)


def test_goal_rejects_object_narrower_than_exposure():
    with pytest.raises(GeometryError):
        compute_goal(WallConfig(0.2), ObjectShape("box", 0.1, 0.04, 0.03), GripperParams())


def test_goal_rejects_leaving_workspace():
    with pytest.raises(GeometryError):
        compute_goal(WallConfig(0.2), ObjectShape("box", 0.1, 0.1, 0.03), GripperParams(finger_width=0.2))


@settings(max_examples=60)
@given(st.floats(0.08, 0.12), st.floats(0.08, 0.12), st.floats(0.025, 0.04), st.floats(0.1, 0.4))
def test_goal_pose_is_graspable(sx, sy, sz, l):
    sc = sim.Scenario(shape=ObjectShape("box", sx, sy, sz), wall=WallConfig(l))
    goal = compute_goal(sc.wall, sc.shape, sc.gripper)
    state = sim.reset(sc, 0)
    up = sim.object_pose_from(sc, math.pi / 2, goal[1])
    assert np.allclose(up.position, goal)
    from dataclasses import replace
    assert sim.graspable(sc, replace(state, object_pose=up))


def test_shape_validation():
    with pytest.raises(GeometryError):
        ObjectShape("box", -0.1, 0.1, 0.03)
    with pytest.raises(GeometryError):
        WallConfig(0.0)
    with pytest.raises(GeometryError):
        GripperParams(max_opening=0.001)
