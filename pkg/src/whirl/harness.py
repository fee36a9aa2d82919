"""Experiment driver: config loading, variants, result files and comparison tables.

Output layout of one ``run`` (``DIR`` defaults to ``$WHIRL_OUTPUT_ROOT/<task>_<variant>``)::

    DIR/manifest.json          config echo, per-seed curves and iteration summaries, timings, checksums
    DIR/curve_seed{N}.csv      iteration,train_success,test_success,mean_cost,mean_change_score
    DIR/samples_seed{N}.csv    one row per training rollout
    DIR/checkpoints/seed{N}/   policy parameters after each iteration (for --resume)

Every file except ``manifest.json`` (which records wall-clock times) is
byte-identical across reruns with the same config and seed.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import load_yaml, parse_noise, parse_scene, parse_step, resolve_config_path, BUILTIN_TASKS
from .demo import DemoSettings, DemoVideo, GenerationError, NoiseConfig, corrupt, scripted_expert
from .loop import LearningCurve, LoopConfig, TaskInstance, train
from .prior import ExtractionConfig, ExtractionError, detect
from .sim import ConfigurationError, Scene, StepConfig

VARIANTS = ("whirl", "bc", "no_exploration", "no_agent_agnostic")
CURVE_COLUMNS = ("iteration", "train_success", "test_success", "mean_cost", "mean_change_score")
SAMPLE_COLUMNS = ("iteration", "demo", "sample", "cost", "change_score", "success", "explore")
OUTPUT_ROOT_ENV = "WHIRL_OUTPUT_ROOT"
MAX_DEMO_ATTEMPTS = 20


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    variant: str
    loop: LoopConfig
    noise: NoiseConfig
    seeds: tuple[int, ...]
    output_dir: Optional[str]
    train_demos: tuple[str, ...]
    test_demos: tuple[str, ...]
    scenes: dict = field(repr=False)  # name -> (Scene, DemoSettings)
    extraction: ExtractionConfig = ExtractionConfig()
    step: StepConfig = StepConfig()
    source: str = ""  # config file text, echoed into the manifest

    def __post_init__(self):
        if self.task not in BUILTIN_TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}; expected one of {BUILTIN_TASKS}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if not self.train_demos:
            raise ConfigurationError("train_demos must name at least one scene")
        missing = [n for n in (*self.train_demos, *self.test_demos) if n not in self.scenes]
        if missing:
            raise ConfigurationError(f"demo scenes not defined under 'scenes': {missing}")
        if set(self.train_demos) & set(self.test_demos):
            raise ConfigurationError("a scene cannot be used for both training and held-out testing")
        dims = {self.scenes[n][0].env_feature_dim for n in (*self.train_demos, *self.test_demos)}
        if len(dims) != 1:
            raise ConfigurationError("all scenes of one experiment must share the environment feature size")

    def effective_loop(self) -> LoopConfig:
        """Loop settings after the variant's overrides."""
        return apply_variant(self.loop, self.variant)


def apply_variant(loop: LoopConfig, variant: str) -> LoopConfig:
    if variant == "whirl":
        return loop
    if variant == "bc":
        return replace(loop, policy="mlp", iterations=1, p_explore=0.0, fit_exploration=False)
    if variant == "no_exploration":
        return replace(loop, p_explore=0.0, fit_exploration=False)
    if variant == "no_agent_agnostic":
        return replace(loop, agent_agnostic=False)
    raise ConfigurationError(f"unknown variant {variant!r}")


_TOP_LEVEL = {"task", "variant", "seeds", "output_dir", "loop", "noise", "train_demos", "test_demos", "scenes",
              "extraction", "step", "defaults"}


def load_experiment(path_or_name, variant: Optional[str] = None, seeds: Optional[Sequence[int]] = None,
                    output_dir: Optional[str] = None) -> ExperimentConfig:
    """Parse a task config; keyword arguments override the file's values.

    The top-level ``defaults`` key only holds YAML anchors and is otherwise ignored.
    """
    path = resolve_config_path(path_or_name)
    raw = load_yaml(path)
    unknown = set(raw) - _TOP_LEVEL
    if unknown:
        raise ConfigurationError(f"{path}: unknown top-level keys {sorted(unknown)}")
    try:
        loop_raw = dict(raw.get("loop") or {})
        known = {f.name for f in fields(LoopConfig)}
        bad = set(loop_raw) - known
        if bad:
            raise ConfigurationError(f"unknown keys in loop: {sorted(bad)}")
        loop = LoopConfig(**loop_raw)
        ex_raw = dict(raw.get("extraction") or {})
        if "mid_fracs" in ex_raw:
            ex_raw["mid_fracs"] = tuple(ex_raw["mid_fracs"])
        extraction = ExtractionConfig(**ex_raw)
        if "sigma_wp" in ex_raw:
            loop = replace(loop, sigma_wp=extraction.sigma_wp)
        scenes = {name: parse_scene(name, s) for name, s in (raw.get("scenes") or {}).items()}
        return ExperimentConfig(
            task=raw["task"],
            variant=variant or raw.get("variant", "whirl"),
            loop=loop,
            noise=parse_noise(raw.get("noise") or {}),
            seeds=tuple(int(s) for s in (seeds if seeds is not None else raw.get("seeds", [0]))),
            output_dir=output_dir or raw.get("output_dir"),
            train_demos=tuple(raw.get("train_demos") or ()),
            test_demos=tuple(raw.get("test_demos") or ()),
            scenes=scenes,
            extraction=extraction,
            step=parse_step(raw.get("step") or {}),
            source=path.read_text(),
        )
    except KeyError as exc:
        raise ConfigurationError(f"{path}: missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"{path}: {exc}") from None


# -- demonstrations ------------------------------------------------------------------

def generate_demo(scene: Scene, settings: DemoSettings, noise: NoiseConfig, seed: int,
                  extraction: ExtractionConfig = ExtractionConfig()) -> DemoVideo:
    """Scripted demonstration corrupted by detector noise.

    A corrupted demo whose contact labels no longer contain an interaction window
    is redrawn with the next noise seed, as a person would re-record a failed take.
    """
    clean, _ = scripted_expert(scene, seed, settings)
    for attempt in range(MAX_DEMO_ATTEMPTS):
        demo = corrupt(clean, noise, int(np.random.default_rng([seed, attempt]).integers(2 ** 31)))
        try:
            detect(demo, extraction)
        except ExtractionError:
            continue
        return demo
    raise GenerationError(f"no usable demonstration of {scene.name!r} after {MAX_DEMO_ATTEMPTS} attempts")


def make_instances(exp: ExperimentConfig, seed: int) -> tuple[list[TaskInstance], list[TaskInstance]]:
    def build(names, offset):
        out = []
        for i, name in enumerate(names):
            scene, settings = exp.scenes[name]
            demo_seed = int(np.random.default_rng([seed, offset + i]).integers(2 ** 31))
            demo = generate_demo(scene, settings, exp.noise, demo_seed, exp.extraction)
            out.append(TaskInstance(name, scene, demo, scene.camera))
        return out

    return build(exp.train_demos, 0), build(exp.test_demos, 1000)


# -- result files --------------------------------------------------------------------

def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".10g")


def curve_csv(curve: LearningCurve) -> str:
    rows = [",".join(CURVE_COLUMNS)]
    for i in range(len(curve)):
        rows.append(",".join(_num(v) for v in (i, curve.train_success[i], curve.test_success[i],
                                                  curve.mean_cost[i], curve.mean_change_score[i])))
    return "\n".join(rows) + "\n"


def samples_csv(curve: LearningCurve) -> str:
    rows = [",".join(SAMPLE_COLUMNS)]
    for r in curve.reports:
        for s in r.samples:
            rows.append(",".join(_num(v) for v in (r.iteration, s.demo, s.index, s.cost, s.change, s.success,
                                                      s.explore)))
    return "\n".join(rows) + "\n"


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def emit_curves(curve: LearningCurve, out_dir, seed: int) -> dict[str, str]:
    """Write the per-run result files; returns file name -> sha256."""
    files = {f"curve_seed{seed}.csv": curve_csv(curve), f"samples_seed{seed}.csv": samples_csv(curve)}
    sums = {}
    for name, text in files.items():
        atomic_write(Path(out_dir) / name, text)
        sums[name] = hashlib.sha256(text.encode()).hexdigest()
    return sums


def read_curve_csv(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    out = []
    for line in lines[1:]:
        vals = line.split(",")
        row = {}
        for k, v in zip(header, vals):
            row[k] = None if v == "" else (int(v) if k == "iteration" else float(v))
        out.append(row)
    return out


def default_output_dir(exp: ExperimentConfig) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    base = Path(root) if root else Path(exp.output_dir or "runs")
    return base / f"{exp.task}_{exp.variant}"


def _iteration_summary(r) -> dict:
    return {
        "iteration": r.iteration,
        "train_success": r.train_success,
        "test_success": r.test_success,
        "demo_success": {str(k): v for k, v in r.demo_success.items()},
        "elites": {str(k): v for k, v in r.elites.items()},
        "exploration_elites": {str(k): v for k, v in r.exploration_elites.items()},
        "n_explore": sum(s.explore for s in r.samples),
        "mean_cost": r.mean_cost,
        "mean_change_score": r.mean_change_score,
        "task_fit_loss": r.task_fit_loss,
        "exp_fit_loss": r.exp_fit_loss,
    }


def run_seed(exp: ExperimentConfig, seed: int, out_dir, resume: bool = False) -> tuple[LearningCurve, dict]:
    out_dir = Path(out_dir)
    t0 = time.perf_counter()
    train_set, test_set = make_instances(exp, seed)
    curve = train(train_set, test_set, exp.effective_loop(), seed, checkpoint_dir=out_dir / "checkpoints" /
                  f"seed{seed}", resume=resume, step_cfg=exp.step, extraction=exp.extraction)
    sums = emit_curves(curve, out_dir, seed)
    entry = {
        "seed": seed,
        "curve": {c: [getattr(curve, c)[i] for i in range(len(curve))] for c in CURVE_COLUMNS[1:]},
        "final_train_success": curve.train_success[-1],
        "final_test_success": curve.test_success[-1],
        "iterations": [_iteration_summary(r) for r in curve.reports],
        "seconds": round(time.perf_counter() - t0, 3),
        "checksums": sums,
    }
    return curve, entry


def run_experiment(exp: ExperimentConfig, out_dir=None, resume: bool = False, log=None) -> dict:
    """Train every seed and write the result files and ``manifest.json``."""
    out_dir = Path(out_dir) if out_dir is not None else default_output_dir(exp)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    for seed in exp.seeds:
        _, entry = run_seed(exp, seed, out_dir, resume)
        runs.append(entry)
        if log is not None:
            log(f"seed {seed}: train {_fmt_curve(entry['curve']['train_success'])} "
                f"test {_fmt_curve(entry['curve']['test_success'])} ({entry['seconds']:.1f}s)")
    manifest = {
        "whirl_version": __version__,
        "task": exp.task,
        "variant": exp.variant,
        "seeds": list(exp.seeds),
        "loop": asdict(exp.effective_loop()),
        "noise": asdict(exp.noise),
        "train_demos": list(exp.train_demos),
        "test_demos": list(exp.test_demos),
        "config_text": exp.source,
        "runs": runs,
    }
    atomic_write(out_dir / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    manifest["path"] = str(out_dir / "manifest.json")
    return manifest


def _fmt_curve(vals) -> str:
    return "[" + " ".join("-" if v is None else f"{v:.2f}" for v in vals) + "]"


# -- comparison ----------------------------------------------------------------------

def _mean_stderr(vals: Sequence[Optional[float]]) -> tuple[Optional[float], Optional[float], int]:
    v = np.array([x for x in vals if x is not None], dtype=float)
    if len(v) == 0:
        return None, None, 0
    se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se, len(v)


def load_manifest(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    return json.loads(p.read_text())


def compare(manifests: Sequence[dict]) -> list[dict]:
    """Per-variant mean and standard error of final train/test success over all seeds."""
    if not manifests:
        raise UsageError("nothing to compare")
    tasks = sorted({m["task"] for m in manifests})
    if len(tasks) != 1:
        raise UsageError(f"cannot compare runs of different tasks: {tasks}")
    order, by_variant = [], {}
    for m in manifests:
        if m["variant"] not in by_variant:
            order.append(m["variant"])
            by_variant[m["variant"]] = []
        by_variant[m["variant"]].extend(m["runs"])
    rows = []
    for v in order:
        runs = by_variant[v]
        tr = _mean_stderr([r["final_train_success"] for r in runs])
        te = _mean_stderr([r["final_test_success"] for r in runs])
        rows.append({"task": tasks[0], "variant": v, "n_runs": len(runs),
                     "train_mean": tr[0], "train_stderr": tr[1], "test_mean": te[0], "test_stderr": te[1]})
    return rows


def render_table(rows: Sequence[dict]) -> str:
    def cell(m, s):
        return "n/a" if m is None else f"{m:.3f} ± {s:.3f}"

    header = ("variant", "runs", "final train success", "final test success")
    body = [(r["variant"], str(r["n_runs"]), cell(r["train_mean"], r["train_stderr"]),
             cell(r["test_mean"], r["test_stderr"])) for r in rows]
    widths = [max(len(x[i]) for x in (header, *body)) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
    return "\n".join(lines) + "\n"


def comparison_csv(rows: Sequence[dict]) -> str:
    cols = ("task", "variant", "n_runs", "train_mean", "train_stderr", "test_mean", "test_stderr")
    return "\n".join([",".join(cols)] + [",".join(_num(r[c]) if c not in ("task", "variant") else r[c]
                                                  for c in cols) for r in rows]) + "\n"
