"""Shared geometry: poses, object/wall/gripper descriptions and task criteria.

Coordinate frame: x points from the free table toward the wall (the wall face
sits at ``x = face_x`` and the wall occupies ``x >= face_x``), y runs along the
wall, z is up. The wall spans ``y in [end_y, end_y + l]``; ``end_y`` is its
free lateral end. Objects are pushed toward ``-y`` until they overhang that
free end enough for a finger to slip behind them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PIVOT_THRESHOLD = 10.0 * math.pi / 180.0
PUSH_THRESHOLD = 0.03
UPRIGHT_THETA = math.pi / 2
# clearance beyond the finger width; a margin equal to the push tolerance is
# added on top so that every push-complete pose is also graspable
EXPOSURE_MARGIN = 0.01
# table extent along y, measured from the wall's free end
TABLE_Y_MIN = -0.15


class GeometryError(ValueError):
    pass


def wrap_angle(theta: float) -> float:
    """Wrap into [-pi, pi]; an exact tie at +-pi resolves to +pi."""
    w = math.fmod(theta + math.pi, 2 * math.pi)
    if w < 0:
        w += 2 * math.pi
    w -= math.pi
    if w == -math.pi:
        w = math.pi
    return w


@dataclass(frozen=True)
class PlanarPose:
    x: float
    y: float
    z: float
    theta: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def normalized(self) -> "PlanarPose":
        return PlanarPose(self.x, self.y, self.z, wrap_angle(self.theta))


@dataclass(frozen=True)
class ObjectShape:
    kind: str = "box"  # "box" | "cylinder"
    size_x: float = 0.1
    size_y: float = 0.1
    size_z: float = 0.03
    mass: float = 0.5

    def __post_init__(self):
        if self.kind not in ("box", "cylinder"):
            raise GeometryError(f"unknown object kind {self.kind!r}")
        if min(self.size_x, self.size_y, self.size_z) <= 0 or self.mass <= 0:
            raise GeometryError("object extents and mass must be positive")
        if self.kind == "cylinder" and not math.isclose(self.size_x, self.size_y):
            raise GeometryError("cylinder needs size_x == size_y (diameter)")

    @classmethod
    def cylinder(cls, diameter: float, thickness: float, mass: float = 0.5) -> "ObjectShape":
        return cls("cylinder", diameter, diameter, thickness, mass)

    @property
    def max_extent(self) -> float:
        return max(self.size_x, self.size_y, self.size_z)


@dataclass(frozen=True)
class WallConfig:
    lateral_length_l: float = 0.2
    height: float = 0.25
    face_x: float = 0.0
    end_y: float = 0.0

    def __post_init__(self):
        if self.lateral_length_l <= 0:
            raise GeometryError("wall length must be positive")
        if self.height <= 0:
            raise GeometryError("wall height must be positive")

    def covers_y(self, y_lo: float, y_hi: float) -> bool:
        """True if [y_lo, y_hi] overlaps the wall's lateral span."""
        return y_hi > self.end_y and y_lo < self.end_y + self.lateral_length_l


@dataclass(frozen=True)
class GripperParams:
    max_opening: float = 0.08
    finger_width: float = 0.01
    finger_clearance: float = 0.005

    def __post_init__(self):
        if not (self.max_opening > self.finger_clearance > 0):
            raise GeometryError("need max_opening > finger_clearance > 0")
        if self.finger_width < 0:
            raise GeometryError("finger width must be non-negative")


def _rot_y(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def trace_rotation_distance(theta: float, theta_perp: float = UPRIGHT_THETA) -> float:
    """``acos((tr(R_perp R^T) - 1) / 2)`` on explicit rotation matrices."""
    r = _rot_y(theta)
    r_perp = _rot_y(theta_perp)
    c = 0.5 * (np.trace(r_perp @ r.T) - 1.0)
    return math.acos(min(1.0, max(-1.0, c)))


def rotation_distance(theta: float, theta_perp: float = UPRIGHT_THETA) -> float:
    """Geodesic angle between two rotations about the lateral axis.

    Checked against the trace formula; the returned value is the coaxial
    closed form ``|wrap(theta_perp - theta)|``, which keeps full precision
    near 0 and pi where acos does not.
    """
    d = trace_rotation_distance(theta, theta_perp)
    alt = abs(wrap_angle(theta_perp - theta))
    if abs(d - alt) > 1e-6:
        raise AssertionError(f"trace formula {d} disagrees with |dtheta| {alt}")
    return alt


def pivot_complete(d: float) -> bool:
    return d <= PIVOT_THRESHOLD


def push_complete(x_obj, x_goal) -> bool:
    diff = np.asarray(x_obj, dtype=float) - np.asarray(x_goal, dtype=float)
    return float(np.linalg.norm(diff)) < PUSH_THRESHOLD


def goal_exposure(gripper: GripperParams) -> float:
    return gripper.finger_width + EXPOSURE_MARGIN + PUSH_THRESHOLD


def upright_position(wall: WallConfig, shape: ObjectShape, y: float) -> np.ndarray:
    """Centre of the object standing on its edge, flush against the wall."""
    return np.array([wall.face_x - shape.size_z / 2, y, shape.size_x / 2])


def compute_goal(wall: WallConfig, shape: ObjectShape, gripper: GripperParams) -> np.ndarray:
    """Goal centre: upright against the wall, overhanging its free end.

    The object's -y edge ends ``goal_exposure`` beyond ``end_y``.
    """
    exposure = goal_exposure(gripper)
    if exposure >= shape.size_y:
        raise GeometryError(
            f"exposure {exposure:.3f} m leaves no part of a {shape.size_y:.3f} m object on the wall")
    y_min = wall.end_y - exposure
    if y_min < wall.end_y + TABLE_Y_MIN:
        raise GeometryError("goal pose leaves the table workspace")
    return upright_position(wall, shape, y_min + shape.size_y / 2)
