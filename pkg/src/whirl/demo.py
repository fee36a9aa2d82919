"""Synthetic human demonstrations.

A scripted expert drives the simulator along the ground-truth interaction path.
Its end-effector trace, offset by a human-hand morphology term and viewed by a
slightly miscalibrated camera, becomes the per-frame hand track of a
``DemoVideo``. ``corrupt`` then adds detector-style noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Optional

import numpy as np

from . import sim
from .sim import EndEffectorState, Scene, StepConfig


class ContactClass(IntEnum):
    NONE = 0
    PORTABLE = 1
    FIXED = 2
    SELF_CONTACT = 3

    @property
    def label(self) -> str:
        return "self_contact" if self is ContactClass.SELF_CONTACT else self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "ContactClass":
        return {c.label: c for c in cls}[text]


N_CONTACT_CLASSES = len(ContactClass)


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class HandFrame:
    h: np.ndarray
    bbox: np.ndarray
    theta_hand: np.ndarray
    contact: ContactClass
    depth: float


@dataclass(frozen=True)
class DemoVideo:
    """Per-frame hand detections plus simulator truth for the alignment module.

    ``env_truth`` and ``agent_truth`` are what an inpainted (respectively raw) video
    would show; prior extraction never reads them.
    """

    scene_ref: str
    h: np.ndarray  # (T, 3) camera frame, meters
    bbox: np.ndarray  # (T, 4) pixels: u0, v0, u1, v1
    theta_hand: np.ndarray  # (T, 3) radians
    contact: np.ndarray  # (T,) ContactClass values
    depth: np.ndarray  # (T,) meters
    env_truth: np.ndarray  # (T, F)
    agent_truth: Optional[np.ndarray] = None  # (T, 7) hand position, wrist ypr (robot frame), grip
    intrinsics: tuple[float, float, float, float] = (600.0, 600.0, 320.0, 240.0)

    def __post_init__(self):
        T = len(self.h)
        if T < 10:
            raise ValueError(f"a demonstration needs at least 10 frames, got {T}")
        if len(self.env_truth) != T:
            raise ValueError("env_truth length must match the number of frames")

    @property
    def T(self) -> int:
        return len(self.h)

    @property
    def frames(self) -> list[HandFrame]:
        return [
            HandFrame(self.h[t], self.bbox[t], self.theta_hand[t], ContactClass(int(self.contact[t])), float(self.depth[t]))
            for t in range(self.T)
        ]


@dataclass(frozen=True)
class NoiseConfig:
    pos_sigma: float = 0.0
    contact_flip_prob: float = 0.0
    wrist_sigma: float = 0.0
    time_warp_range: tuple[float, float] = (1.0, 1.0)
    dropout_prob: float = 0.0

    def __post_init__(self):
        for name in ("contact_flip_prob", "dropout_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.pos_sigma < 0 or self.wrist_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        lo, hi = self.time_warp_range
        if not 0 < lo <= hi:
            raise ValueError("time_warp_range must be a positive interval")


DEFAULT_NOISE = NoiseConfig(
    pos_sigma=0.02, contact_flip_prob=0.05, wrist_sigma=0.1, time_warp_range=(0.8, 1.25), dropout_prob=0.02)


@dataclass(frozen=True)
class DemoSettings:
    """How the scripted demonstrator behaves in one scene."""

    length: int = 90
    close_frac: float = 0.33
    open_frac: float = 0.78
    dwell: int = 3
    # human hand centre relative to the robot grasp point, robot frame
    hand_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hand_offset_jitter: float = 0.005
    # visual centroid of the demonstrator's hand and forearm relative to the hand
    # detection point; only the unmasked (agent-visible) view of the demo sees it
    agent_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    timing_jitter: float = 0.03
    # true camera = nominal camera displaced by (dx, dy, dz, yaw, pitch, roll)
    calibration_error: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    grasp_ypr: tuple[float, float, float] = (0.0, 0.0, 0.0)
    retreat_x: float = 0.3
    arc_points: int = 12
    bbox_size: float = 0.08


_EXPERT_STEP = StepConfig(max_step=10.0, max_rot_step=10.0, aperture_rate=1.0)


def expert_path(scene: Scene, settings: DemoSettings) -> list[tuple[float, float, float]]:
    """Ground-truth grasp point followed by the points the grasped handle/object must visit."""
    goal = scene.goal
    if goal.kind == sim.JOINT_TARGET:
        j = scene.joints[goal.index]
        lo, hi = j.limits
        if not lo <= goal.target_value <= hi:
            raise GenerationError(f"target {goal.target_value} outside joint limits {j.limits}")
        n = 2 if j.kind == sim.PRISMATIC else settings.arc_points
        qs = np.linspace(j.initial_value, goal.target_value, n)
        return [j.handle_position(float(q)) for q in qs]
    obj = scene.free_objects[goal.index]
    p = obj.position
    lo, hi = goal.region.lo, goal.region.hi
    end = tuple(0.5 * (a + b) for a, b in zip(lo, hi))
    out = (settings.retreat_x, p[1], p[2])
    down = (settings.retreat_x, end[1], end[2])
    return [p, out, down, end]


def _polyline_at(points: np.ndarray, s: float) -> np.ndarray:
    """Point at arc-length fraction ``s`` in [0, 1] along ``points``."""
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    total = seg.sum()
    if total == 0.0:
        return points[0].copy()
    target = s * total
    acc = 0.0
    for i, L in enumerate(seg):
        if acc + L >= target or i == len(seg) - 1:
            a = 0.0 if L == 0 else min(max((target - acc) / L, 0.0), 1.0)
            return points[i] + a * (points[i + 1] - points[i])
        acc += L
    return points[-1].copy()


def scripted_expert(scene: Scene, seed: int = 0, settings: DemoSettings = DemoSettings()) -> tuple[DemoVideo, bool]:
    """Noiseless demonstration of ``scene``'s goal and whether it succeeded."""
    rng = np.random.default_rng(seed)
    T = settings.length
    jitter = rng.uniform(-settings.timing_jitter, settings.timing_jitter, size=2)
    t_close = int(round((settings.close_frac + jitter[0]) * (T - 1)))
    t_open = int(round((settings.open_frac + jitter[1]) * (T - 1)))
    t_arrive = t_close - settings.dwell
    if not 1 <= t_arrive < t_close < t_open < T - 1:
        raise GenerationError("demonstration timing does not fit the demo length")

    path = np.array(expert_path(scene, settings))
    home = np.array(scene.home.position)
    grasp = path[0]
    hand_offset = np.asarray(settings.hand_offset) + rng.normal(0.0, settings.hand_offset_jitter, 3)

    def ee_target(t: int) -> np.ndarray:
        if t <= t_arrive:
            return home + (grasp - home) * (t / t_arrive)
        if t <= t_close:
            return grasp
        if t < t_open:
            return _polyline_at(path, (t - t_close) / (t_open - 1 - t_close))
        # retreat a little toward home after release
        end = path[-1]
        a = min((t - t_open) / max(T - 1 - t_open, 1), 1.0) * 0.3
        return end + a * (home - end)

    state = sim.reset(scene, seed)
    states = [state]
    ypr = settings.grasp_ypr
    for t in range(1, T):
        aperture = 0.0 if t_close <= t < t_open else 1.0
        state = sim.step(scene, state, EndEffectorState(tuple(ee_target(t)), ypr, aperture), _EXPERT_STEP)
        states.append(state)
    ro = sim.record(scene, states)
    ok = sim.success(scene, ro)
    if not ok:
        raise GenerationError(f"scripted expert failed on scene {scene.name!r}")

    true_cam = scene.camera.perturbed(settings.calibration_error)
    hand_robot = ro.ee_position + hand_offset
    h = np.array([true_cam.to_camera(p) for p in hand_robot])
    if np.any(h[:, 2] <= 0):
        raise GenerationError("hand track passes behind the camera")
    goal_is_joint = scene.goal.kind == sim.JOINT_TARGET
    grasp_class = ContactClass.FIXED if goal_is_joint else ContactClass.PORTABLE
    contact = np.where(ro.attached >= 0, int(grasp_class), int(ContactClass.NONE))
    theta = np.array(ro.ee_orientation)
    depth = h[:, 2].copy()
    intr = (scene.camera.fx, scene.camera.fy, scene.camera.cx, scene.camera.cy)
    grip = (ro.attached >= 0).astype(float)
    demo = DemoVideo(
        scene_ref=scene.name,
        h=h,
        bbox=_bboxes(h, intr, settings.bbox_size),
        theta_hand=theta,
        contact=contact,
        depth=depth,
        env_truth=ro.env_features(),
        agent_truth=np.concatenate([hand_robot + np.asarray(settings.agent_offset), theta, grip[:, None]], axis=1),
        intrinsics=intr,
    )
    return demo, ok


def _bboxes(h: np.ndarray, intr, size: float) -> np.ndarray:
    fx, fy, cx, cy = intr
    u = fx * h[:, 0] / h[:, 2] + cx
    v = fy * h[:, 1] / h[:, 2] + cy
    hw = 0.5 * size * fx / h[:, 2]
    hh = 0.5 * size * fy / h[:, 2]
    return np.stack([u - hw, v - hh, u + hw, v + hh], axis=1)


def _resample(a: np.ndarray, times: np.ndarray) -> np.ndarray:
    src = np.arange(len(a))
    if a.ndim == 1:
        return np.interp(times, src, a)
    return np.stack([np.interp(times, src, a[:, i]) for i in range(a.shape[1])], axis=1)


def corrupt(demo: DemoVideo, noise: NoiseConfig, seed: int = 0) -> DemoVideo:
    """Apply detector-style noise, time warping and frame dropout."""
    rng = np.random.default_rng(seed)
    T = demo.T
    factor = rng.uniform(*noise.time_warp_range)
    T_new = max(10, int(round(T * factor)))
    times = np.arange(T_new) * ((T - 1) / (T_new - 1))

    h = _resample(demo.h, times)
    theta = _resample(demo.theta_hand, times)
    env = _resample(demo.env_truth, times)
    agent = None if demo.agent_truth is None else _resample(demo.agent_truth, times)
    nearest = np.minimum(np.rint(times).astype(int), T - 1)
    contact = demo.contact[nearest].copy()

    keep = rng.random(T_new) >= noise.dropout_prob
    if keep.sum() < 10:
        keep[:] = True

    h = h + rng.normal(0.0, noise.pos_sigma, h.shape)
    theta = theta + rng.normal(0.0, noise.wrist_sigma, theta.shape)
    flip = rng.random(T_new) < noise.contact_flip_prob
    shift = rng.integers(1, N_CONTACT_CLASSES, T_new)
    contact = np.where(flip, (contact + shift) % N_CONTACT_CLASSES, contact)

    if noise.pos_sigma == 0.0:
        depth = _resample(demo.depth, times)
        bbox = _resample(demo.bbox, times)
    else:
        depth = h[:, 2].copy()
        size = demo.bbox[0, 2] - demo.bbox[0, 0]
        size_m = size * demo.depth[0] / demo.intrinsics[0]
        bbox = _bboxes(h, demo.intrinsics, size_m)

    return replace(
        demo,
        h=h[keep],
        bbox=bbox[keep],
        theta_hand=theta[keep],
        contact=contact[keep],
        depth=depth[keep],
        env_truth=env[keep],
        agent_truth=None if agent is None else agent[keep],
    )


# -- text record format ----------------------------------------------------------

FORMAT_VERSION = 1


def _fmt(x: float) -> str:
    return repr(float(x))


def save_demo(demo: DemoVideo, path) -> None:
    """Write ``path`` (hand track) and ``path + '.env'`` (simulator truth sidecar)."""
    path = Path(path)
    fx, fy, cx, cy = demo.intrinsics
    lines = [f"# whirl-demo v{FORMAT_VERSION} scene={demo.scene_ref} T={demo.T} "
             f"fx={_fmt(fx)} fy={_fmt(fy)} cx={_fmt(cx)} cy={_fmt(cy)}",
             "# t hx hy hz u0 v0 u1 v1 yaw pitch roll contact depth"]
    for t in range(demo.T):
        vals = [*demo.h[t], *demo.bbox[t], *demo.theta_hand[t]]
        label = ContactClass(int(demo.contact[t])).label
        lines.append(" ".join([str(t), *map(_fmt, vals), label, _fmt(demo.depth[t])]))
    path.write_text("\n".join(lines) + "\n")

    n_env = demo.env_truth.shape[1]
    n_agent = 0 if demo.agent_truth is None else demo.agent_truth.shape[1]
    side = [f"# whirl-env v{FORMAT_VERSION} T={demo.T} env={n_env} agent={n_agent}"]
    for t in range(demo.T):
        vals = list(demo.env_truth[t]) + ([] if demo.agent_truth is None else list(demo.agent_truth[t]))
        side.append(" ".join([str(t), *map(_fmt, vals)]))
    Path(str(path) + ".env").write_text("\n".join(side) + "\n")


def _header(line: str) -> dict[str, str]:
    return dict(tok.split("=", 1) for tok in line[1:].split() if "=" in tok)


def load_demo(path) -> DemoVideo:
    path = Path(path)
    lines = path.read_text().splitlines()
    head = _header(lines[0])
    rows = [ln.split() for ln in lines if ln and not ln.startswith("#")]
    h = np.array([[float(v) for v in r[1:4]] for r in rows])
    bbox = np.array([[float(v) for v in r[4:8]] for r in rows])
    theta = np.array([[float(v) for v in r[8:11]] for r in rows])
    contact = np.array([int(ContactClass.parse(r[11])) for r in rows])
    depth = np.array([float(r[12]) for r in rows])

    side = Path(str(path) + ".env").read_text().splitlines()
    shead = _header(side[0])
    n_env, n_agent = int(shead["env"]), int(shead["agent"])
    srows = np.array([[float(v) for v in ln.split()[1:]] for ln in side if ln and not ln.startswith("#")])
    srows = srows.reshape(len(h), n_env + n_agent)
    return DemoVideo(
        scene_ref=head["scene"],
        h=h, bbox=bbox, theta_hand=theta, contact=contact, depth=depth,
        env_truth=srows[:, :n_env],
        agent_truth=srows[:, n_env:] if n_agent else None,
        intrinsics=(float(head["fx"]), float(head["fy"]), float(head["cx"]), float(head["cy"])),
    )
