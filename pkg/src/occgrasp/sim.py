"""Quasi-static planar contact simulator.

The object is a rigid box (or a gear lying on its circular face) whose motion
is restricted to two degrees of freedom: a rotation ``theta`` about a fixed
pivot edge on the table, and a lateral translation ``y`` along the wall.

Body frame: the origin is the pivot edge, the object's near-bottom edge, which
rests one object thickness in front of the wall face. With ``a`` along the
object's length (``a in [-size_x, 0]``) and ``b`` along its thickness
(``b in [0, size_z]``), a body point maps to

    x = pivot_x + a cos(theta) + b sin(theta)
    z =         - a sin(theta) + b cos(theta)

so ``theta = 0`` is lying flat and ``theta = pi/2`` is standing on the near
edge, flush against the wall. Increasing ``theta`` raises the far end.

The end-effector is a point fingertip. Contact rules, evaluated each substep:

* pivot (far or top face, object braced by the wall, below the tipping
  angle): ``theta_dot = (v . t_c) / rho_c`` with ``t_c`` the tangent of the
  contact point's arc about the pivot edge and ``rho_c`` its radius. Pulling
  off the face detaches. If the commanded velocity leaves the friction cone
  around ``t_c`` the fingertip slips along the face while the object turns.
  Past the tipping angle gravity carries the object upright.
* push (+y face of the upright object): the object slides with ``v_y``
  unless the fingertip is above 0.6 of its height, in which case it topples
  flat. A lying object is not braced and is treated like any other face.
* any other face: motion into the face is blocked, tangential motion slides.

Released objects settle to the nearest stable rest (flat or upright).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import (
    GeometryError,
    GripperParams,
    ObjectShape,
    PlanarPose,
    UPRIGHT_THETA,
    WallConfig,
    pivot_complete,
    rotation_distance,
)

V_MAX = 0.05
TOPPLE_RATIO = 0.6
STANDOFF_BACK = 0.25
STANDOFF_HEIGHT = 0.2
_EPS = 1e-12

PIVOT_FACES = ("far", "top")


@dataclass(frozen=True)
class Scenario:
    shape: ObjectShape = field(default_factory=ObjectShape)
    wall: WallConfig = field(default_factory=WallConfig)
    gripper: GripperParams = field(default_factory=GripperParams)
    friction_mu: float = 0.5
    gravity: float = 9.81
    dt: float = 0.01
    initial_object_pose: Optional[PlanarPose] = None

    def __post_init__(self):
        if not (0 < self.friction_mu <= 2):
            raise GeometryError("friction_mu must lie in (0, 2]")
        if not (0 < self.dt <= 0.05):
            raise GeometryError("dt must lie in (0, 0.05]")
        if self.gravity <= 0:
            raise GeometryError("gravity must be positive")
        if self.wall.height <= self.shape.max_extent:
            raise GeometryError("wall must be taller than the object (grasp constraining)")

    @property
    def pivot_x(self) -> float:
        return self.wall.face_x - self.shape.size_z

    @property
    def start_y(self) -> float:
        if self.initial_object_pose is not None:
            return self.initial_object_pose.y
        # far edge flush with the wall's closed end, so longer walls need more pushing
        l = self.wall.lateral_length_l
        return self.wall.end_y + max(l / 2, l - self.shape.size_y / 2)

    @property
    def tip_angle(self) -> float:
        """Angle past which gravity carries the object upright."""
        return UPRIGHT_THETA - math.atan2(self.shape.size_z, self.shape.size_x)


@dataclass(frozen=True)
class Wrench:
    force: tuple = (0.0, 0.0, 0.0)
    torque: tuple = (0.0, 0.0, 0.0)

    def as_vector(self) -> np.ndarray:
        return np.array(self.force + self.torque, dtype=float)


ZERO_WRENCH = Wrench()


@dataclass(frozen=True)
class Contact:
    face: str
    a: float
    b: float
    dy: float


@dataclass(frozen=True)
class SimState:
    object_pose: PlanarPose
    eef_pose: PlanarPose
    contact_mode: str = "free"  # free | on_face | pivoting | sliding
    in_contact_with_wall: bool = True
    time: float = 0.0
    contact: Optional[Contact] = None
    wrench: Wrench = ZERO_WRENCH
    toppled: bool = False

    @property
    def theta(self) -> float:
        return self.object_pose.theta


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    @property
    def n_points(self) -> int:
        return int(self.points.shape[0])

    def flat(self) -> np.ndarray:
        return self.points.reshape(-1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "z"])
            for p in self.points:
                w.writerow([repr(float(c)) for c in p])

    @classmethod
    def from_csv(cls, path) -> "PointCloud":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        return cls(np.array([[float(c) for c in r] for r in rows]))


# ---------------------------------------------------------------- kinematics

def body_to_world(sc: Scenario, theta: float, a: float, b: float) -> tuple[float, float]:
    c, s = math.cos(theta), math.sin(theta)
    return sc.pivot_x + a * c + b * s, -a * s + b * c


def world_to_body(sc: Scenario, theta: float, x: float, z: float) -> tuple[float, float]:
    c, s = math.cos(theta), math.sin(theta)
    dx = x - sc.pivot_x
    return dx * c - z * s, dx * s + z * c


def arc_jacobian(theta: float, a: float, b: float) -> tuple[float, float]:
    """d(world x, z)/d theta of a body point."""
    c, s = math.cos(theta), math.sin(theta)
    return -a * s + b * c, -a * c - b * s


_FACE_NORMAL_IN = {"far": (1.0, 0.0), "near": (-1.0, 0.0), "top": (0.0, -1.0), "bottom": (0.0, 1.0)}
_FACE_TANGENT = {"far": (0.0, 1.0), "near": (0.0, 1.0), "top": (1.0, 0.0), "bottom": (1.0, 0.0)}


def _rotate(theta: float, va: float, vb: float) -> tuple[float, float]:
    c, s = math.cos(theta), math.sin(theta)
    return va * c + vb * s, -va * s + vb * c


def face_normal_in(theta: float, face: str) -> np.ndarray:
    """Inward unit normal of a face in world coordinates (3-vector)."""
    if face == "+y":
        return np.array([0.0, -1.0, 0.0])
    if face == "-y":
        return np.array([0.0, 1.0, 0.0])
    nx, nz = _rotate(theta, *_FACE_NORMAL_IN[face])
    return np.array([nx, 0.0, nz])


def object_pose_from(sc: Scenario, theta: float, y: float) -> PlanarPose:
    x, z = body_to_world(sc, theta, -sc.shape.size_x / 2, sc.shape.size_z / 2)
    return PlanarPose(x, y, z, theta)


def object_height(sc: Scenario, theta: float) -> float:
    sx, sz = sc.shape.size_x, sc.shape.size_z
    return sx * math.sin(theta) + sz * math.cos(theta)


def gravity_moment(sc: Scenario, theta: float) -> float:
    """Moment of gravity about the pivot edge, positive when resisting a raise."""
    sx, sz = sc.shape.size_x, sc.shape.size_z
    r = math.hypot(sx / 2, sz / 2)
    phi = math.atan2(sz, sx)
    return sc.shape.mass * sc.gravity * r * math.cos(theta + phi)


def potential_energy(sc: Scenario, theta: float) -> float:
    sx, sz = sc.shape.size_x, sc.shape.size_z
    r = math.hypot(sx / 2, sz / 2)
    phi = math.atan2(sz, sx)
    return sc.shape.mass * sc.gravity * r * math.sin(theta + phi)


def braced(sc: Scenario, y: float) -> bool:
    half = sc.shape.size_y / 2
    return sc.wall.covers_y(y - half, y + half)


def rest_angle(sc: Scenario, theta: float) -> float:
    return UPRIGHT_THETA if theta >= sc.tip_angle else 0.0


def contact_point(sc: Scenario, theta: float, y: float, c: Contact) -> tuple[float, float, float]:
    x, z = body_to_world(sc, theta, c.a, c.b)
    return x, y + c.dy, z


# ---------------------------------------------------------------- collision

def _inside_body(sc: Scenario, a: float, b: float, dy: float, tol: float = 1e-12) -> bool:
    sh = sc.shape
    return (-sh.size_x + tol < a < -tol) and (tol < b < sh.size_z - tol) and (abs(dy) < sh.size_y / 2 - tol)


def segment_entry(sc: Scenario, theta: float, y_obj: float, p0, p1):
    """First intersection of segment p0->p1 with the object solid.

    Returns ``(t, Contact)`` or None. Points already inside at p0 are ignored.
    """
    sh = sc.shape
    a0, b0 = world_to_body(sc, theta, p0[0], p0[2])
    a1, b1 = world_to_body(sc, theta, p1[0], p1[2])
    y0, y1 = p0[1] - y_obj, p1[1] - y_obj
    lo = (-sh.size_x, 0.0, -sh.size_y / 2)
    hi = (0.0, sh.size_z, sh.size_y / 2)
    start = (a0, b0, y0)
    delta = (a1 - a0, b1 - b0, y1 - y0)
    names_lo = ("far", "bottom", "-y")
    names_hi = ("near", "top", "+y")
    t_enter, t_exit, face = 0.0, 1.0, None
    for k in range(3):
        if abs(delta[k]) < _EPS:
            if start[k] < lo[k] or start[k] > hi[k]:
                return None
            continue
        t_lo = (lo[k] - start[k]) / delta[k]
        t_hi = (hi[k] - start[k]) / delta[k]
        if t_lo < t_hi:
            t_near, f_near, t_far = t_lo, names_lo[k], t_hi
        else:
            t_near, f_near, t_far = t_hi, names_hi[k], t_lo
        if t_near > t_enter:
            t_enter, face = t_near, f_near
        t_exit = min(t_exit, t_far)
        if t_enter > t_exit:
            return None
    if face is None:
        return None
    a = a0 + t_enter * delta[0]
    b = b0 + t_enter * delta[1]
    dy = y0 + t_enter * delta[2]
    return t_enter, Contact(face, a, b, dy)


def _clamp_eef(sc: Scenario, x: float, y: float, z: float) -> tuple[float, float, float]:
    z = max(z, 0.0)
    w = sc.wall
    if x > w.face_x and w.end_y <= y <= w.end_y + w.lateral_length_l and z <= w.height:
        x = w.face_x
    return x, y, z


def _push_out(sc: Scenario, theta: float, y_obj: float, p):
    """Move a point that ended up inside the object to the nearest face."""
    sh = sc.shape
    a, b = world_to_body(sc, theta, p[0], p[2])
    dy = p[1] - y_obj
    if not _inside_body(sc, a, b, dy):
        return p
    gaps = {
        "far": a + sh.size_x, "near": -a, "bottom": b, "top": sh.size_z - b,
        "-y": dy + sh.size_y / 2, "+y": sh.size_y / 2 - dy,
    }
    face = min(gaps, key=gaps.get)
    if face == "far":
        a = -sh.size_x
    elif face == "near":
        a = 0.0
    elif face == "bottom":
        b = 0.0
    elif face == "top":
        b = sh.size_z
    elif face == "-y":
        dy = -sh.size_y / 2
    else:
        dy = sh.size_y / 2
    x, z = body_to_world(sc, theta, a, b)
    return _clamp_eef(sc, x, y_obj + dy, z)


# ---------------------------------------------------------------- operations

def validate_scenario(sc: Scenario) -> None:
    if not isinstance(sc, Scenario):
        raise GeometryError("not a Scenario")
    # dataclass __post_init__ does the range checks
    Scenario.__post_init__(sc)


def standoff_position(sc: Scenario, y_obj: float) -> tuple[float, float, float]:
    return sc.wall.face_x - STANDOFF_BACK, y_obj, STANDOFF_HEIGHT


def reset(sc: Scenario, seed: int = 0) -> SimState:
    """Object flat by the wall, fingertip at the camera standoff.

    The seed jitters the object's lateral placement by up to 5 mm unless the
    scenario pins an initial pose.
    """
    validate_scenario(sc)
    rng = np.random.default_rng(seed)
    y = sc.start_y
    if sc.initial_object_pose is None:
        y += float(rng.uniform(-0.005, 0.005))
    obj = object_pose_from(sc, 0.0, y)
    ex, ey, ez = standoff_position(sc, y)
    return SimState(
        object_pose=obj,
        eef_pose=PlanarPose(ex, ey, ez, 0.0),
        contact_mode="free",
        in_contact_with_wall=braced(sc, y),
        time=0.0,
    )


def _settle(sc: Scenario, state: SimState, theta: float, y: float, eef, t: float) -> SimState:
    theta = rest_angle(sc, theta)
    eef = _push_out(sc, theta, y, eef)
    return SimState(
        object_pose=object_pose_from(sc, theta, y),
        eef_pose=PlanarPose(eef[0], eef[1], eef[2], 0.0),
        contact_mode="free",
        in_contact_with_wall=braced(sc, y),
        time=t,
        contact=None,
        wrench=ZERO_WRENCH,
        toppled=False,
    )


def step_eef(sc: Scenario, state: SimState, v_ee, dt: Optional[float] = None) -> tuple[SimState, Wrench]:
    """Advance the fingertip by ``v_ee * dt`` with contact resolution.

    ``v_ee`` must be finite with every component bounded by ``V_MAX``.
    """
    dt = sc.dt if dt is None else dt
    if not dt > 0:
        raise ValueError("dt must be positive")
    vx, vy, vz = (float(c) for c in v_ee)
    if not all(math.isfinite(c) for c in (vx, vy, vz)):
        raise ValueError("non-finite end-effector velocity")
    if max(abs(vx), abs(vy), abs(vz)) > V_MAX + 1e-12:
        raise ValueError(f"end-effector velocity exceeds v_max={V_MAX}")

    theta = state.object_pose.theta
    y = state.object_pose.y
    e = (state.eef_pose.x, state.eef_pose.y, state.eef_pose.z)
    t = state.time + dt
    c = state.contact

    if c is None:
        target = _clamp_eef(sc, e[0] + vx * dt, e[1] + vy * dt, e[2] + vz * dt)
        hit = segment_entry(sc, theta, y, e, target)
        if hit is None:
            new = replace(state, eef_pose=PlanarPose(*target, 0.0), time=t,
                          wrench=ZERO_WRENCH, toppled=False, contact_mode="free")
            return new, ZERO_WRENCH
        _, contact = hit
        pos = contact_point(sc, theta, y, contact)
        new = replace(state, eef_pose=PlanarPose(*pos, 0.0), time=t, contact=contact,
                      contact_mode="on_face", wrench=ZERO_WRENCH, toppled=False)
        return new, ZERO_WRENCH

    upright = theta >= sc.tip_angle
    if c.face in PIVOT_FACES and not upright and braced(sc, y):
        return _pivot_step(sc, state, c, (vx, vy, vz), dt, t)
    if c.face == "+y" and upright:
        return _push_step(sc, state, c, (vx, vy, vz), dt, t)
    return _face_step(sc, state, c, (vx, vy, vz), dt, t)


def _pivot_step(sc, state, c: Contact, v, dt, t):
    vx, vy, vz = v
    sh = sc.shape
    theta, y = state.object_pose.theta, state.object_pose.y
    e = (state.eef_pose.x, state.eef_pose.y, state.eef_pose.z)
    nx, nz = _rotate(theta, *_FACE_NORMAL_IN[c.face])
    if vx * nx + vz * nz < -_EPS:
        free = _clamp_eef(sc, e[0] + vx * dt, e[1] + vy * dt, e[2] + vz * dt)
        new = _settle(sc, state, theta, y, free, t)
        return new, ZERO_WRENCH
    dy = c.dy + vy * dt
    if abs(dy) > sh.size_y / 2:
        free = _clamp_eef(sc, e[0] + vx * dt, e[1] + vy * dt, e[2] + vz * dt)
        new = _settle(sc, state, theta, y, free, t)
        return new, ZERO_WRENCH

    jx, jz = arc_jacobian(theta, c.a, c.b)
    rho = math.hypot(jx, jz)
    if rho < 1e-9:
        return _face_step(sc, state, c, v, dt, t)
    tx, tz = jx / rho, jz / rho
    u = vx * tx + vz * tz
    rx, rz = vx - u * tx, vz - u * tz
    a, b = c.a, c.b
    if math.hypot(rx, rz) > sc.friction_mu * abs(u) + _EPS:
        # outside the friction cone: fingertip slides along the face
        fx, fz = _rotate(theta, *_FACE_TANGENT[c.face])
        ds = (rx * fx + rz * fz) * dt
        if c.face == "far":
            b = min(max(b + ds, 0.0), sh.size_z)
        else:
            a = min(max(a + ds, -sh.size_x), 0.0)
    new_theta = max(theta + u / rho * dt, 0.0)

    if new_theta >= sc.tip_angle:
        pos = contact_point(sc, new_theta, y, Contact(c.face, a, b, dy))
        return _settle(sc, state, new_theta, y, pos, t), ZERO_WRENCH

    contact = Contact(c.face, a, b, dy)
    pos = contact_point(sc, new_theta, y, contact)
    # quasi-static reaction at the new configuration: balances gravity about the edge
    m_g = gravity_moment(sc, new_theta)
    jx, jz = arc_jacobian(new_theta, a, b)
    rho = max(math.hypot(jx, jz), 1e-9)
    fmag = m_g / rho
    wrench = Wrench((fmag * jx / rho, 0.0, fmag * jz / rho), (0.0, m_g, 0.0))
    new = SimState(
        object_pose=object_pose_from(sc, new_theta, y),
        eef_pose=PlanarPose(*pos, 0.0),
        contact_mode="pivoting" if new_theta > 0 else "on_face",
        in_contact_with_wall=True,
        time=t,
        contact=contact,
        wrench=wrench,
        toppled=False,
    )
    return new, wrench


def _push_step(sc, state, c: Contact, v, dt, t):
    vx, vy, vz = v
    sh = sc.shape
    theta, y = state.object_pose.theta, state.object_pose.y
    e = (state.eef_pose.x, state.eef_pose.y, state.eef_pose.z)
    if vy > _EPS:
        free = _clamp_eef(sc, e[0] + vx * dt, e[1] + vy * dt, e[2] + vz * dt)
        return _settle(sc, state, theta, y, free, t), ZERO_WRENCH
    upright = theta >= sc.tip_angle
    if upright and e[2] > TOPPLE_RATIO * object_height(sc, theta):
        new = _settle(sc, state, 0.0, y, e, t)
        return replace(new, toppled=True), ZERO_WRENCH
    new_y = y + vy * dt
    ex, ey, ez = e[0] + vx * dt, e[1] + vy * dt, e[2] + vz * dt
    a, b = world_to_body(sc, theta, ex, ez)
    if not (-sh.size_x <= a <= 0.0 and 0.0 <= b <= sh.size_z):
        free = _clamp_eef(sc, ex, ey, ez)
        return _settle(sc, state, theta, new_y, free, t), ZERO_WRENCH
    contact = Contact("+y", a, b, sh.size_y / 2)
    pos = contact_point(sc, theta, new_y, contact)
    new = SimState(
        object_pose=object_pose_from(sc, theta, new_y),
        eef_pose=PlanarPose(*pos, 0.0),
        contact_mode="sliding" if vy < -_EPS else "on_face",
        in_contact_with_wall=braced(sc, new_y),
        time=t,
        contact=contact,
        wrench=ZERO_WRENCH,
        toppled=False,
    )
    return new, ZERO_WRENCH


def _face_step(sc, state, c: Contact, v, dt, t):
    sh = sc.shape
    theta, y = state.object_pose.theta, state.object_pose.y
    e = np.array([state.eef_pose.x, state.eef_pose.y, state.eef_pose.z])
    v = np.asarray(v, dtype=float)
    n = face_normal_in(theta, c.face)
    vn = float(v @ n)
    if vn < -_EPS:
        free = _clamp_eef(sc, *(e + v * dt))
        return _settle(sc, state, theta, y, free, t), ZERO_WRENCH
    vt = v - vn * n
    p = _clamp_eef(sc, *(e + vt * dt))
    a, b = world_to_body(sc, theta, p[0], p[2])
    dy = p[1] - y
    tol = 1e-9
    on = (-sh.size_x - tol <= a <= tol and -tol <= b <= sh.size_z + tol
          and abs(dy) <= sh.size_y / 2 + tol)
    if not on:
        return _settle(sc, state, theta, y, p, t), ZERO_WRENCH
    contact = Contact(c.face, a, b, dy)
    new = replace(state, eef_pose=PlanarPose(*p, 0.0), time=t, contact=contact,
                  contact_mode="on_face", wrench=ZERO_WRENCH, toppled=False)
    return new, ZERO_WRENCH


def external_wrench(state: SimState) -> Wrench:
    return ZERO_WRENCH if state.contact_mode == "free" else state.wrench


def exposure(sc: Scenario, state: SimState) -> float:
    """Length of the object overhanging the wall's free end."""
    return sc.wall.end_y - (state.object_pose.y - sc.shape.size_y / 2)


def graspable(sc: Scenario, state: SimState, gripper: Optional[GripperParams] = None) -> bool:
    g = sc.gripper if gripper is None else gripper
    d = rotation_distance(state.object_pose.theta)
    if not pivot_complete(d):
        return False
    if exposure(sc, state) < g.finger_width - 1e-12:
        return False
    return sc.shape.size_z <= g.max_opening


def move_eef_to(sc: Scenario, state: SimState, target) -> SimState:
    """Kinematic straight move; stops at the first contact with the object."""
    e = (state.eef_pose.x, state.eef_pose.y, state.eef_pose.z)
    if state.contact is not None:
        state = _settle(sc, state, state.object_pose.theta, state.object_pose.y, e, state.time)
    tgt = _clamp_eef(sc, *map(float, target))
    hit = segment_entry(sc, state.object_pose.theta, state.object_pose.y, e, tgt)
    if hit is None:
        return replace(state, eef_pose=PlanarPose(*tgt, 0.0), contact=None,
                       contact_mode="free", wrench=ZERO_WRENCH)
    _, contact = hit
    pos = contact_point(sc, state.object_pose.theta, state.object_pose.y, contact)
    return replace(state, eef_pose=PlanarPose(*pos, 0.0), contact=contact,
                   contact_mode="on_face", wrench=ZERO_WRENCH)


def place_contact(sc: Scenario, state: SimState, contact: Contact) -> SimState:
    """Put the fingertip directly on a surface point (used to seed training)."""
    pos = contact_point(sc, state.object_pose.theta, state.object_pose.y, contact)
    return replace(state, eef_pose=PlanarPose(*pos, 0.0), contact=contact,
                   contact_mode="on_face", wrench=ZERO_WRENCH)


# ---------------------------------------------------------------- point clouds

def _box_faces(sh: ObjectShape):
    """(name, origin(a,b,dy), edge1, edge2) for the six faces in body frame."""
    sx, sy, sz = sh.size_x, sh.size_y, sh.size_z
    return [
        ("far", (-sx, 0, -sy / 2), (0, sz, 0), (0, 0, sy)),
        ("near", (0, 0, -sy / 2), (0, sz, 0), (0, 0, sy)),
        ("top", (-sx, sz, -sy / 2), (sx, 0, 0), (0, 0, sy)),
        ("bottom", (-sx, 0, -sy / 2), (sx, 0, 0), (0, 0, sy)),
        ("+y", (-sx, 0, sy / 2), (sx, 0, 0), (0, sz, 0)),
        ("-y", (-sx, 0, -sy / 2), (sx, 0, 0), (0, sz, 0)),
    ]


def _face_occluded(sc: Scenario, theta: float, origin, e1, e2) -> bool:
    """A face lying on the table plane or the wall plane is not visible."""
    corners = [origin,
               tuple(o + d for o, d in zip(origin, e1)),
               tuple(o + d for o, d in zip(origin, e2))]
    xs, zs = [], []
    for a, b, _ in corners:
        x, z = body_to_world(sc, theta, a, b)
        xs.append(x)
        zs.append(z)
    if max(abs(z) for z in zs) < 1e-9:
        return True
    return max(abs(x - sc.wall.face_x) for x in xs) < 1e-9


def _sample_body_points(sc: Scenario, theta: float, n: int, rng) -> np.ndarray:
    sh = sc.shape
    if sh.kind == "cylinder":
        return _sample_cylinder(sc, theta, n, rng)
    faces = [f for f in _box_faces(sh) if not _face_occluded(sc, theta, *f[1:])]
    areas = np.array([np.linalg.norm(np.cross(f[2], f[3])) for f in faces])
    idx = rng.choice(len(faces), size=n, p=areas / areas.sum())
    uv = rng.random((n, 2))
    out = np.empty((n, 3))
    for i, (k, (s, tt)) in enumerate(zip(idx, uv)):
        _, o, e1, e2 = faces[k]
        out[i] = np.add(o, np.add(np.multiply(s, e1), np.multiply(tt, e2)))
    return out


def _sample_cylinder(sc: Scenario, theta: float, n: int, rng) -> np.ndarray:
    sh = sc.shape
    r = sh.size_x / 2
    # two caps (b = 0, b = size_z) and the rim; caps flat on a plane are hidden
    parts = []
    for name, b in (("cap0", 0.0), ("cap1", sh.size_z)):
        o = (-2 * r, b, -r)
        if not _face_occluded(sc, theta, o, (2 * r, 0, 0), (0, 0, 2 * r)):
            parts.append((name, math.pi * r * r, b))
    parts.append(("rim", 2 * math.pi * r * sh.size_z, None))
    areas = np.array([p[1] for p in parts])
    idx = rng.choice(len(parts), size=n, p=areas / areas.sum())
    out = np.empty((n, 3))
    for i, k in enumerate(idx):
        name, _, b = parts[k]
        phi = rng.uniform(0, 2 * math.pi)
        if name == "rim":
            out[i] = (-r + r * math.cos(phi), rng.uniform(0, sh.size_z), r * math.sin(phi))
        else:
            rad = r * math.sqrt(rng.random())
            out[i] = (-r + rad * math.cos(phi), b, rad * math.sin(phi))
    return out


def _body_to_world_points(sc: Scenario, theta: float, y_obj: float, body: np.ndarray) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    a, b, dy = body[:, 0], body[:, 1], body[:, 2]
    return np.stack([sc.pivot_x + a * c + b * s, y_obj + dy, -a * s + b * c], axis=1)


def render_point_cloud(sc: Scenario, state: SimState, n_points: int = 64,
                       sigma: float = 0.0, seed: int = 0) -> PointCloud:
    """Uniform samples over the visible object surface plus Gaussian noise."""
    if n_points < 8:
        raise ValueError("n_points must be at least 8")
    rng = np.random.default_rng(seed)
    theta, y = state.object_pose.theta, state.object_pose.y
    body = _sample_body_points(sc, theta, n_points, rng)
    pts = _body_to_world_points(sc, theta, y, body)
    if sigma > 0:
        pts = pts + rng.normal(0.0, sigma, size=pts.shape)
    return PointCloud(pts)


def surface_distance(sc: Scenario, state: SimState, points: np.ndarray) -> np.ndarray:
    """Unsigned distance of world points to the object's boundary."""
    sh = sc.shape
    theta, y = state.object_pose.theta, state.object_pose.y
    c, s = math.cos(theta), math.sin(theta)
    dx = points[:, 0] - sc.pivot_x
    z = points[:, 2]
    a = dx * c - z * s
    b = dx * s + z * c
    dy = points[:, 1] - y
    if sh.kind == "cylinder":
        r = sh.size_x / 2
        radial = np.hypot(a + r, dy) - r
        axial = np.abs(b - sh.size_z / 2) - sh.size_z / 2
        q = np.stack([radial, axial], axis=1)
    else:
        q = np.stack([np.abs(a + sh.size_x / 2) - sh.size_x / 2,
                      np.abs(b - sh.size_z / 2) - sh.size_z / 2,
                      np.abs(dy) - sh.size_y / 2], axis=1)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return np.abs(outside + inside)


# ---------------------------------------------------------------- penetration

def object_corners(sc: Scenario, state: SimState) -> np.ndarray:
    sh = sc.shape
    theta, y = state.object_pose.theta, state.object_pose.y
    body = np.array([[a, b, dy] for a in (-sh.size_x, 0.0) for b in (0.0, sh.size_z)
                     for dy in (-sh.size_y / 2, sh.size_y / 2)])
    return _body_to_world_points(sc, theta, y, body)


def penetration_depth(sc: Scenario, state: SimState) -> float:
    """Largest depth of the object into the table (z<0) or the wall face."""
    pts = object_corners(sc, state)
    below = float(max(0.0, -pts[:, 2].min()))
    w = sc.wall
    in_span = (pts[:, 1] >= w.end_y) & (pts[:, 1] <= w.end_y + w.lateral_length_l)
    into = float(max(0.0, (pts[in_span, 0] - w.face_x).max())) if in_span.any() else 0.0
    return max(below, into)
