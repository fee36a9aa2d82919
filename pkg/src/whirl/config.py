"""YAML experiment/scene configuration.

A task config holds the experiment settings and the scenes it uses::

    task: drawer
    scenes:
      drawer_a:
        camera: {position: [...], look_at: [...]}
        joints: [{kind: prismatic, origin: [...], axis: [...], limits: [0, 0.35]}]
        goal: {kind: joint_target, index: 0, target_value: 0.25, success_tolerance: 0.05}
        demo: {hand_offset: [...], calibration_error: [...]}

The four benchmark configs ship in ``whirl/configs`` and can be referred to by
name (``drawer`` or ``drawer.cfg``) as well as by path.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .demo import DemoSettings, NoiseConfig
from .sim import (Box, Camera, ConfigurationError, EndEffectorState, FreeObject, GoalSpec, JointSpec, Scene,
                  StepConfig)

BUILTIN_TASKS = ("drawer", "door", "dishwasher", "shelf_pick_place")


def _only_known(cls, raw: Mapping[str, Any], where: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    return dict(raw)


def _tuple(v):
    return tuple(_tuple(x) for x in v) if isinstance(v, (list, tuple)) else v


def parse_camera(raw: Mapping[str, Any]) -> Camera:
    raw = dict(raw)
    intr = {k: raw.pop(k) for k in ("fx", "fy", "cx", "cy", "width", "height") if k in raw}
    if "look_at" in raw:
        cam = Camera.look_at(raw.pop("position"), raw.pop("look_at"), raw.pop("up", (0.0, 0.0, 1.0)), **intr)
    else:
        cam = Camera(raw.pop("rotation"), raw.pop("translation"), **intr)
    if raw:
        raise ConfigurationError(f"unknown camera keys: {sorted(raw)}")
    return cam


def parse_scene(name: str, raw: Mapping[str, Any]) -> tuple[Scene, DemoSettings]:
    raw = dict(raw)
    try:
        joints = tuple(JointSpec(**_only_known(JointSpec, j, f"{name}.joints")) for j in raw.pop("joints", []))
        objects = tuple(FreeObject(**_only_known(FreeObject, o, f"{name}.free_objects"))
                        for o in raw.pop("free_objects", []))
        g = dict(raw.pop("goal"))
        if "region" in g:
            g["region"] = Box(*g["region"])
        goal = GoalSpec(**_only_known(GoalSpec, g, f"{name}.goal"))
        obstacles = tuple(Box(*b) for b in raw.pop("obstacles", []))
        home = EndEffectorState(**raw.pop("home")) if "home" in raw else None
        camera = parse_camera(raw.pop("camera"))
        demo_raw = {k: _tuple(v) for k, v in raw.pop("demo", {}).items()}
        settings = DemoSettings(**_only_known(DemoSettings, demo_raw, f"{name}.demo"))
    except KeyError as exc:
        raise ConfigurationError(f"scene {name!r} is missing {exc}") from None
    except TypeError as exc:
        raise ConfigurationError(f"scene {name!r}: {exc}") from None
    if raw:
        raise ConfigurationError(f"unknown keys in scene {name!r}: {sorted(raw)}")
    kwargs = dict(name=name, joints=joints, free_objects=objects, camera=camera, goal=goal, obstacles=obstacles)
    if home is not None:
        kwargs["home"] = home
    scene = Scene(**kwargs)
    scene.validate()
    return scene, settings


def builtin_config_path(name: str) -> Path:
    stem = name[:-4] if name.endswith(".cfg") else name
    return Path(str(resources.files("whirl") / "configs" / f"{stem}.cfg"))


def resolve_config_path(path_or_name) -> Path:
    p = Path(path_or_name)
    if p.exists():
        return p
    builtin = builtin_config_path(p.name)
    if builtin.exists():
        return builtin
    raise ConfigurationError(f"no config file {path_or_name!r} and no builtin task of that name")


def load_yaml(path_or_name) -> dict:
    path = resolve_config_path(path_or_name)
    data = yaml.safe_load(path.read_text())
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping at the top level")
    return data


def parse_noise(raw: Mapping[str, Any]) -> NoiseConfig:
    raw = dict(raw)
    if "time_warp" in raw:
        raw["time_warp_range"] = raw.pop("time_warp")
    raw = {k: _tuple(v) for k, v in raw.items()}
    try:
        return NoiseConfig(**_only_known(NoiseConfig, raw, "noise"))
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"noise: {exc}") from None


def parse_step(raw: Mapping[str, Any]) -> StepConfig:
    return StepConfig(**_only_known(StepConfig, raw, "step"))
