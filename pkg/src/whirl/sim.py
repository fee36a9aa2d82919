"""Deterministic kinematic simulation of drawers, doors, dishwashers and shelves.

There are no forces. The end effector moves toward a commanded pose with a
bounded per-step displacement. Closing the gripper near a handle or object
snaps an attachment; while attached to a joint the end-effector motion is
projected onto the joint's motion manifold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .action import Prior, Vec3, wrap_angle

PRISMATIC = "prismatic"
REVOLUTE = "revolute"
JOINT_TARGET = "joint_target"
OBJECT_IN_REGION = "object_in_region"


class ConfigurationError(ValueError):
    """Raised for scenes or goals that violate their invariants."""


# -- small tuple vector helpers; the inner loop avoids numpy for speed ---------

def _add(a, b):
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


def _sub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _scale(a, s):
    return (a[0] * s, a[1] * s, a[2] * s)


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def _norm(a):
    return math.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])


def _rotate(v, axis, angle):
    """Rodrigues rotation of ``v`` about unit ``axis``."""
    c, s = math.cos(angle), math.sin(angle)
    kxv = _cross(axis, v)
    kdv = _dot(axis, v)
    return (
        v[0] * c + kxv[0] * s + axis[0] * kdv * (1.0 - c),
        v[1] * c + kxv[1] * s + axis[1] * kdv * (1.0 - c),
        v[2] * c + kxv[2] * s + axis[2] * kdv * (1.0 - c),
    )


def _tuple3(v) -> Vec3:
    x, y, z = (float(c) for c in v)
    return (x, y, z)


# -- scene description ---------------------------------------------------------

@dataclass(frozen=True)
class JointSpec:
    kind: str
    axis: Vec3
    limits: tuple[float, float]
    handle_offset: Vec3 = (0.0, 0.0, 0.0)
    initial_value: float = 0.0
    origin: Vec3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "axis", _tuple3(self.axis))
        object.__setattr__(self, "handle_offset", _tuple3(self.handle_offset))
        object.__setattr__(self, "origin", _tuple3(self.origin))
        object.__setattr__(self, "limits", (float(self.limits[0]), float(self.limits[1])))
        object.__setattr__(self, "initial_value", float(self.initial_value))

    def validate(self) -> None:
        if self.kind not in (PRISMATIC, REVOLUTE):
            raise ConfigurationError(f"unknown joint kind {self.kind!r}")
        if abs(_norm(self.axis) - 1.0) > 1e-9:
            raise ConfigurationError(f"joint axis {self.axis} is not unit length")
        lo, hi = self.limits
        if lo > hi:
            raise ConfigurationError(f"joint limits {self.limits} are reversed")
        if not lo <= self.initial_value <= hi:
            raise ConfigurationError(
                f"initial value {self.initial_value} outside limits {self.limits}")

    def handle_position(self, q: float) -> Vec3:
        if self.kind == PRISMATIC:
            return _add(_add(self.origin, self.handle_offset), _scale(self.axis, q))
        return _add(self.origin, _rotate(self.handle_offset, self.axis, q))

    def handle_radius(self) -> float:
        """Distance of the handle from a revolute axis."""
        h = self.handle_offset
        along = _dot(h, self.axis)
        return _norm(_sub(h, _scale(self.axis, along)))


@dataclass(frozen=True)
class FreeObject:
    position: Vec3
    ypr: Vec3 = (0.0, 0.0, 0.0)
    grasp_radius: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "position", _tuple3(self.position))
        object.__setattr__(self, "ypr", _tuple3(self.ypr))

    @property
    def pose(self) -> tuple[float, ...]:
        return self.position + self.ypr


@dataclass(frozen=True)
class Box:
    lo: Vec3
    hi: Vec3

    def __post_init__(self):
        object.__setattr__(self, "lo", _tuple3(self.lo))
        object.__setattr__(self, "hi", _tuple3(self.hi))

    def contains(self, p, margin: float = 0.0) -> bool:
        return all(self.lo[i] - margin <= p[i] <= self.hi[i] + margin for i in range(3))


def ypr_matrix(ypr) -> np.ndarray:
    """Rotation matrix for intrinsic yaw (z), pitch (y), roll (x)."""
    y, p, r = ypr
    cy, sy, cp, sp, cr, sr = math.cos(y), math.sin(y), math.cos(p), math.sin(p), math.cos(r), math.sin(r)
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return rz @ ry @ rx


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``rotation``/``translation`` map camera-frame points to the robot frame."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float = 600.0
    fy: float = 600.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def look_at(cls, position, target, up=(0.0, 0.0, 1.0), **intrinsics) -> "Camera":
        position = np.asarray(position, dtype=float)
        forward = np.asarray(target, dtype=float) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=float))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        # camera axes: x right, y down, z forward
        rot = np.stack([right, down, forward], axis=1)
        return cls(rot, position, **intrinsics)

    def validate(self) -> None:
        r = self.rotation
        if abs(np.linalg.det(r) - 1.0) > 1e-9 or not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ConfigurationError("camera extrinsic rotation is not a proper rotation")

    def perturbed(self, offset) -> "Camera":
        """Camera displaced by ``(dx, dy, dz, yaw, pitch, roll)`` in the robot frame."""
        offset = np.asarray(offset, dtype=float)
        rot = ypr_matrix(offset[3:6]) @ self.rotation
        return replace(self, rotation=rot, translation=self.translation + offset[:3])

    def to_robot(self, p_cam) -> np.ndarray:
        return self.rotation @ np.asarray(p_cam, dtype=float) + self.translation

    def to_camera(self, p_robot) -> np.ndarray:
        return self.rotation.T @ (np.asarray(p_robot, dtype=float) - self.translation)

    def project(self, p_cam) -> tuple[float, float]:
        x, y, z = p_cam
        return self.fx * x / z + self.cx, self.fy * y / z + self.cy

    def deproject(self, u: float, v: float, depth: float) -> np.ndarray:
        return np.array([(u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth])

    def in_image(self, u: float, v: float) -> bool:
        return 0.0 <= u < self.width and 0.0 <= v < self.height


@dataclass(frozen=True)
class GoalSpec:
    kind: str
    index: int
    success_tolerance: float = 0.05
    target_value: Optional[float] = None
    region: Optional[Box] = None

    def validate(self, n_joints: int, n_objects: int) -> None:
        if self.success_tolerance <= 0:
            raise ConfigurationError("success_tolerance must be positive")
        if self.kind == JOINT_TARGET:
            if not 0 <= self.index < n_joints:
                raise ConfigurationError(f"goal joint index {self.index} out of range")
            if self.target_value is None:
                raise ConfigurationError("joint goal needs a target_value")
        elif self.kind == OBJECT_IN_REGION:
            if not 0 <= self.index < n_objects:
                raise ConfigurationError(f"goal object index {self.index} out of range")
            if self.region is None:
                raise ConfigurationError("object goal needs a region")
        else:
            raise ConfigurationError(f"unknown goal kind {self.kind!r}")


@dataclass(frozen=True)
class EndEffectorState:
    position: Vec3
    orientation: Vec3 = (0.0, 0.0, 0.0)
    aperture: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "position", _tuple3(self.position))
        object.__setattr__(self, "orientation", _tuple3(self.orientation))
        object.__setattr__(self, "aperture", min(max(float(self.aperture), 0.0), 1.0))


DEFAULT_HOME = EndEffectorState((0.2, 0.0, 0.9), (0.0, 0.0, 0.0), 1.0)


@dataclass(frozen=True)
class Scene:
    name: str
    joints: tuple[JointSpec, ...]
    free_objects: tuple[FreeObject, ...]
    camera: Camera
    goal: GoalSpec
    obstacles: tuple[Box, ...] = ()
    home: EndEffectorState = DEFAULT_HOME

    def validate(self) -> None:
        for j in self.joints:
            j.validate()
        self.camera.validate()
        self.goal.validate(len(self.joints), len(self.free_objects))

    @property
    def env_feature_dim(self) -> int:
        return len(self.joints) + 6 * len(self.free_objects)


# -- state and stepping --------------------------------------------------------

@dataclass(frozen=True)
class StepConfig:
    max_step: float = 0.02
    max_rot_step: float = 0.05
    aperture_rate: float = 0.25
    close_threshold: float = 0.3
    open_threshold: float = 0.7
    grasp_radius: float = 0.05
    horizon: int = 300
    reach_tol: float = 0.005
    stall_tol: float = 1e-6
    collision_margin: float = 0.03


@dataclass(frozen=True)
class EnvState:
    joint_values: tuple[float, ...]
    object_poses: tuple[tuple[float, ...], ...]
    ee: EndEffectorState
    attachment: Optional[tuple[str, int]] = None
    attach_offset: Vec3 = (0.0, 0.0, 0.0)
    time_index: int = 0
    stuck: bool = False


def reset(scene: Scene, seed: int = 0) -> EnvState:
    """Initial state of ``scene``. The simulation has no stochastic parts, so ``seed`` only
    participates for interface symmetry with the rest of the pipeline."""
    del seed
    scene.validate()
    return EnvState(
        joint_values=tuple(j.initial_value for j in scene.joints),
        object_poses=tuple(o.pose for o in scene.free_objects),
        ee=scene.home,
    )


def _toward(current: float, target: float, rate: float) -> float:
    diff = target - current
    if abs(diff) <= rate:
        return target
    return current + math.copysign(rate, diff)


def _find_grasp(scene: Scene, state: EnvState, p: Vec3, cfg: StepConfig):
    best = None
    best_d = math.inf
    for i, j in enumerate(scene.joints):
        d = _norm(_sub(p, j.handle_position(state.joint_values[i])))
        if d < cfg.grasp_radius and d < best_d:
            best, best_d = ("joint", i), d
    for i, o in enumerate(scene.free_objects):
        pos = state.object_poses[i][:3]
        d = _norm(_sub(p, pos))
        if d < o.grasp_radius and d < best_d:
            best, best_d = ("object", i), d
    if best is None:
        return None, (0.0, 0.0, 0.0)
    if best[0] == "object":
        return best, _sub(state.object_poses[best[1]][:3], p)
    return best, (0.0, 0.0, 0.0)


def _collides(scene: Scene, p: Vec3, margin: float) -> bool:
    return any(b.contains(p, margin) for b in scene.obstacles)


def step(scene: Scene, state: EnvState, ee_target: EndEffectorState, cfg: StepConfig = StepConfig()) -> EnvState:
    """Advance one control step toward ``ee_target``."""
    ee = state.ee
    aperture = _toward(ee.aperture, min(max(ee_target.aperture, 0.0), 1.0), cfg.aperture_rate)

    attachment, offset = state.attachment, state.attach_offset
    if attachment is not None and aperture > cfg.open_threshold:
        attachment, offset = None, (0.0, 0.0, 0.0)
    if attachment is None and aperture < cfg.close_threshold:
        attachment, offset = _find_grasp(scene, state, ee.position, cfg)

    d = _sub(ee_target.position, ee.position)
    dist = _norm(d)
    if dist > cfg.max_step:
        d = _scale(d, cfg.max_step / dist)
    orientation = tuple(
        wrap_angle(o + max(-cfg.max_rot_step, min(cfg.max_rot_step, wrap_angle(t - o))))
        for o, t in zip(ee.orientation, ee_target.orientation)
    )

    joints = state.joint_values
    objects = state.object_poses
    stuck = state.stuck
    pos = ee.position

    if stuck:
        pass
    elif attachment is not None and attachment[0] == "joint":
        i = attachment[1]
        spec = scene.joints[i]
        q = joints[i]
        lo, hi = spec.limits
        if spec.kind == PRISMATIC:
            q_new = min(max(q + _dot(d, spec.axis), lo), hi)
            pos = _add(pos, _scale(spec.axis, q_new - q))
        else:
            rel = _sub(pos, spec.origin)
            tangent = _cross(spec.axis, rel)
            r_ee = _norm(tangent)
            radius = spec.handle_radius()
            if r_ee > 1e-12 and radius > 1e-12:
                tangent = _scale(tangent, 1.0 / r_ee)
                q_new = min(max(q + _dot(d, tangent) / radius, lo), hi)
                pos = _add(spec.origin, _rotate(rel, spec.axis, q_new - q))
            else:
                q_new = q
        joints = joints[:i] + (q_new,) + joints[i + 1:]
    else:
        new_pos = _add(pos, d)
        carried = None
        if attachment is not None:
            carried = _add(new_pos, offset)
        blocked = _collides(scene, new_pos, 0.0) or (
            carried is not None and _collides(scene, carried, cfg.collision_margin))
        if blocked:
            stuck = True
        else:
            pos = new_pos
            if carried is not None:
                i = attachment[1]
                old = objects[i]
                rot = tuple(wrap_angle(old[3 + k] + wrap_angle(orientation[k] - ee.orientation[k])) for k in range(3))
                objects = objects[:i] + (carried + rot,) + objects[i + 1:]

    return EnvState(
        joint_values=joints,
        object_poses=objects,
        ee=EndEffectorState(pos, orientation, aperture),
        attachment=attachment,
        attach_offset=offset,
        time_index=state.time_index + 1,
        stuck=stuck,
    )


# -- rollouts ------------------------------------------------------------------

@dataclass(frozen=True)
class Rollout:
    """Recorded trajectory, one row per frame."""

    scene_name: str
    joint_values: np.ndarray  # (T, J)
    object_poses: np.ndarray  # (T, O, 6)
    ee_position: np.ndarray  # (T, 3)
    ee_orientation: np.ndarray  # (T, 3)
    aperture: np.ndarray  # (T,)
    attached: np.ndarray  # (T,) -1 none, joint i -> i, object i -> n_joints + i

    @property
    def n_frames(self) -> int:
        return len(self.aperture)

    def env_features(self) -> np.ndarray:
        T = self.n_frames
        return np.concatenate([self.joint_values.reshape(T, -1), self.object_poses.reshape(T, -1)], axis=1)

    def agent_features(self) -> np.ndarray:
        """Gripper position, orientation and closure (1 = closed), one row per frame."""
        return np.concatenate([self.ee_position, self.ee_orientation, (1.0 - self.aperture)[:, None]], axis=1)

    def with_agent(self, ee_position=None, ee_orientation=None, aperture=None) -> "Rollout":
        """Copy with the agent channels replaced; the environment channels are untouched."""
        return replace(
            self,
            ee_position=self.ee_position if ee_position is None else np.asarray(ee_position, dtype=float),
            ee_orientation=self.ee_orientation if ee_orientation is None else np.asarray(ee_orientation, dtype=float),
            aperture=self.aperture if aperture is None else np.asarray(aperture, dtype=float),
        )


def record(scene: Scene, states: Sequence[EnvState]) -> Rollout:
    n_j = len(scene.joints)
    T = len(states)
    attached = np.full(T, -1, dtype=int)
    for t, s in enumerate(states):
        if s.attachment is not None:
            kind, i = s.attachment
            attached[t] = i if kind == "joint" else n_j + i
    return Rollout(
        scene_name=scene.name,
        joint_values=np.array([s.joint_values for s in states], dtype=float).reshape(T, n_j),
        object_poses=np.array([s.object_poses for s in states], dtype=float).reshape(T, len(scene.free_objects), 6),
        ee_position=np.array([s.ee.position for s in states], dtype=float),
        ee_orientation=np.array([s.ee.orientation for s in states], dtype=float),
        aperture=np.array([s.ee.aperture for s in states], dtype=float),
        attached=attached,
    )


def execute(scene: Scene, action: Prior, cfg: StepConfig = StepConfig(), seed: int = 0) -> list[EnvState]:
    """Run the three-phase waypoint controller and return every visited state.

    Approach ``w_interaction`` with the gripper open until the close fraction of the
    horizon, close to ``g``, traverse ``w_mid`` then ``w_end``, and open at the open fraction.
    """
    state = reset(scene, seed)
    H = cfg.horizon
    t_close = int(round(action.t_close_frac * (H - 1)))
    t_open = int(round(action.t_open_frac * (H - 1)))
    settle = int(math.ceil(1.0 / cfg.aperture_rate))
    path = list(action.w_mid) + [action.w_end]
    ypr = action.theta_ypr
    wp = 0
    phase = 0
    states = [state]
    for t in range(1, H):
        if t < t_close:
            target = EndEffectorState(action.w_interaction, ypr, 1.0)
        elif t < t_open:
            if phase != 1:
                phase = 1
                state = replace(state, stuck=False)
            moving = t - t_close >= settle
            goal = path[wp] if moving else state.ee.position
            target = EndEffectorState(goal, ypr, action.g)
        else:
            if phase != 2:
                phase = 2
                state = replace(state, stuck=False)
            target = EndEffectorState(state.ee.position, ypr, 1.0)
        prev = state.ee.position
        state = step(scene, state, target, cfg)
        states.append(state)
        if phase == 1 and t - t_close >= settle and wp < len(path) - 1:
            reached = _norm(_sub(state.ee.position, path[wp])) < cfg.reach_tol
            stalled = _norm(_sub(state.ee.position, prev)) < cfg.stall_tol
            if reached or stalled:
                wp += 1
    return states


def rollout(scene: Scene, action: Prior, seed: int = 0, cfg: StepConfig = StepConfig()) -> Rollout:
    return record(scene, execute(scene, action, cfg, seed))


def success(scene: Scene, ro: Rollout) -> bool:
    goal = scene.goal
    goal.validate(len(scene.joints), len(scene.free_objects))
    if goal.kind == JOINT_TARGET:
        return bool(abs(ro.joint_values[-1, goal.index] - goal.target_value) <= goal.success_tolerance)
    return goal.region.contains(tuple(ro.object_poses[-1, goal.index, :3]))
