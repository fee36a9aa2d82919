"""Iterated residual search: sample around each demo's prior, rank rollouts by the
alignment cost, and refit the task and exploration CVAEs on the elites.

Every random draw comes from ``default_rng([seed, purpose, iteration, demo, sample])``
so results do not depend on execution order and a run can resume from any
checkpointed iteration with bit-identical output.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .action import Prior
from .align import DEFAULT_AUGMENTATIONS, Embedder, change_score, demo_condition_vector, embedding_distance, \
    mask_agent, unmasked
from .demo import DemoVideo
from .prior import ExtractionConfig, detect, extract_prior
from .sim import Camera, Scene, StepConfig, rollout, success

# purposes for seeded sub-streams
_RESIDUAL, _PRIOR_NOISE, _FIT_TASK, _FIT_EXP, _INIT, _EVAL, _EVAL_PRIOR = range(7)


@dataclass(frozen=True)
class LoopConfig:
    M: int = 30
    n_elite: int = 10
    iterations: int = 3
    p_explore: float = 0.2
    sigma_translation: float = 0.03
    sigma_rotation: float = 0.1
    sigma_gripper: float = 0.1
    sigma_schedule: float = 0.1
    floor_frac: float = 0.25  # floor noise on policy samples, as a fraction of sigma
    sigma_wp: float = 0.01  # waypoint sampling noise during prior extraction
    n_eval: int = 30
    epochs: int = 200
    lr: float = 1e-3
    d_z: int = 4
    beta: float = 5e-4
    hidden: tuple[int, ...] = (64, 64, 64)
    embed_seed: int = 0
    agent_agnostic: bool = True
    fit_exploration: bool = True
    policy: str = "cvae"  # "cvae" or "mlp" (behavior cloning)
    normalize_residuals: bool = False  # model residuals in units of sigma instead of action units

    def __post_init__(self):
        if self.M < 1 or self.n_elite < 1:
            raise ValueError("M and n_elite must be positive")
        if self.n_elite > self.M:
            raise ValueError(f"n_elite ({self.n_elite}) cannot exceed M ({self.M})")
        if not 0.0 <= self.p_explore <= 1.0:
            raise ValueError("p_explore must lie in [0, 1]")
        if min(self.sigma_translation, self.sigma_rotation, self.sigma_gripper, self.sigma_schedule) <= 0:
            raise ValueError("every sigma must be positive")
        if self.iterations < 0 or self.n_eval < 0 or self.epochs < 0:
            raise ValueError("iterations, n_eval and epochs must be non-negative")
        if self.policy not in ("cvae", "mlp"):
            raise ValueError(f"unknown policy kind {self.policy!r}")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    def sigma_vector(self, n_mid: int = 1) -> np.ndarray:
        n_wp = 3 * (n_mid + 2)
        return np.concatenate([np.full(n_wp, self.sigma_translation), np.full(3, self.sigma_rotation),
                               [self.sigma_gripper], np.full(2, self.sigma_schedule)])


@dataclass(frozen=True)
class TaskInstance:
    """A demonstration together with the scene the robot practices in."""

    name: str
    scene: Scene
    demo: DemoVideo
    camera: Camera  # nominal camera used to map hand detections into the robot frame


# -- policies ----------------------------------------------------------------------

class CvaePolicy:
    """Residual distribution ``p(residual | c)``; residuals are modelled in units of sigma."""

    kind = "cvae"

    def __init__(self, params: nn.CvaeParams, sigma: np.ndarray):
        self.params = params
        self.sigma = np.asarray(sigma, dtype=float)
        self.fitted = False

    @classmethod
    def create(cls, x_dim: int, c_dim: int, cfg: LoopConfig, rng: np.random.Generator, sigma: np.ndarray):
        scale = np.asarray(sigma, dtype=float) if cfg.normalize_residuals else np.ones(x_dim)
        return cls(nn.init_cvae(x_dim, c_dim, rng, cfg.d_z, cfg.hidden, cfg.beta), scale)

    def sample(self, c: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return nn.cvae_sample(self.params, c, rng) * self.sigma

    def loss(self, X: np.ndarray, C: np.ndarray, rng: np.random.Generator) -> float:
        eps = rng.standard_normal((len(X), self.params.d_z))
        return nn.cvae_loss(self.params, X / self.sigma, C, eps)

    def fit(self, X: np.ndarray, C: np.ndarray, cfg: LoopConfig, rng: np.random.Generator) -> tuple[float, float]:
        Xn = X / self.sigma
        eps = np.random.default_rng(rng.integers(2 ** 63)).standard_normal((len(X), self.params.d_z))
        before = nn.cvae_loss(self.params, Xn, C, eps)
        self.params = nn.cvae_fit(self.params, (Xn, C), cfg.epochs, rng, lr=cfg.lr)
        self.fitted = True
        return before, nn.cvae_loss(self.params, Xn, C, eps)


class MlpPolicy:
    """Deterministic regression ``c -> residual`` trained with an L2 loss."""

    kind = "mlp"

    def __init__(self, params: nn.MlpParams, sigma: np.ndarray):
        self.params = params
        self.sigma = np.asarray(sigma, dtype=float)
        self.fitted = False

    @classmethod
    def create(cls, x_dim: int, c_dim: int, cfg: LoopConfig, rng: np.random.Generator, sigma: np.ndarray):
        return cls(nn.init_mlp([c_dim, *cfg.hidden, x_dim], rng), sigma)

    def sample(self, c: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return nn.mlp_forward(self.params, c) * self.sigma

    def _mse(self, Xn, C) -> float:
        return float(np.mean(np.sum((nn.mlp_forward(self.params, C) - Xn) ** 2, axis=1)))

    def fit(self, X: np.ndarray, C: np.ndarray, cfg: LoopConfig, rng: np.random.Generator) -> tuple[float, float]:
        Xn = X / self.sigma
        before = self._mse(Xn, C)
        fitted = nn.mlp_fit_l2(self.params, C, Xn, cfg.epochs, rng, lr=cfg.lr)
        old, self.params = self.params, fitted
        if self._mse(Xn, C) > before:
            self.params = old
        self.fitted = True
        return before, self._mse(Xn, C)


def _policy_class(kind: str):
    return CvaePolicy if kind == "cvae" else MlpPolicy


def sample_residual(iteration: int, pi_task, pi_exp, c_vec: np.ndarray, cfg: LoopConfig,
                    rng: np.random.Generator, sigma: np.ndarray) -> tuple[np.ndarray, bool]:
    """One residual and whether it came from the exploration policy.

    Iteration 0 draws ``N(0, sigma^2)``; later iterations draw from the exploration
    policy with probability ``p_explore`` and otherwise from the task policy, and
    every policy sample gets extra ``N(0, (floor_frac * sigma)^2)`` noise.
    """
    if iteration == 0 or pi_task is None or not pi_task.fitted:
        return rng.normal(0.0, 1.0, len(sigma)) * sigma, False
    explore = bool(rng.random() < cfg.p_explore) and pi_exp is not None and pi_exp.fitted
    policy = pi_exp if explore else pi_task
    delta = policy.sample(c_vec, rng)
    return delta + rng.normal(0.0, 1.0, len(sigma)) * sigma * cfg.floor_frac, explore


# -- reports -------------------------------------------------------------------------

@dataclass
class SampleRecord:
    demo: int
    index: int
    residual: list[float]  # relative to the noiseless prior
    cost: float
    change: float
    success: bool
    explore: bool


@dataclass
class IterationReport:
    iteration: int
    samples: list[SampleRecord]
    elites: dict[int, list[int]]  # demo -> sample indices
    exploration_elites: dict[int, list[int]]
    demo_success: dict[int, float]
    train_success: float
    test_success: Optional[float]
    mean_cost: float
    mean_change_score: float
    task_fit_loss: Optional[tuple[float, float]] = None  # (before, after)
    exp_fit_loss: Optional[tuple[float, float]] = None

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "IterationReport":
        d = dict(d)
        d["samples"] = [SampleRecord(**s) for s in d["samples"]]
        for key in ("elites", "exploration_elites", "demo_success"):
            d[key] = {int(k): v for k, v in d[key].items()}
        for key in ("task_fit_loss", "exp_fit_loss"):
            if d[key] is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class LearningCurve:
    train_success: list[float] = field(default_factory=list)
    test_success: list[Optional[float]] = field(default_factory=list)
    mean_cost: list[float] = field(default_factory=list)
    mean_change_score: list[float] = field(default_factory=list)
    reports: list[IterationReport] = field(default_factory=list)

    def append(self, report: IterationReport) -> None:
        self.train_success.append(report.train_success)
        self.test_success.append(report.test_success)
        self.mean_cost.append(report.mean_cost)
        self.mean_change_score.append(report.mean_change_score)
        self.reports.append(report)

    def __len__(self) -> int:
        return len(self.train_success)


def select_elites(costs: Sequence[float], n_elite: int) -> list[int]:
    """Indices of the ``n_elite`` lowest costs; ties keep sample order."""
    order = np.argsort(np.asarray(costs, dtype=float), kind="stable")
    return sorted(int(i) for i in order[:min(n_elite, len(order))])


def select_exploration_elites(scores: Sequence[float], n_elite: int) -> list[int]:
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    return sorted(int(i) for i in order[:min(n_elite, len(order))])


def check_elite_dominance(costs: Sequence[float], elites: Sequence[int]) -> None:
    costs = np.asarray(costs, dtype=float)
    inside = np.zeros(len(costs), dtype=bool)
    inside[list(elites)] = True
    if inside.all() or not inside.any():
        return
    if costs[inside].max() > costs[~inside].min():
        raise AssertionError("an elite sample costs more than a non-elite one")


# -- the loop ------------------------------------------------------------------------

class Learner:
    """Holds priors, conditioning vectors and policies for one training run."""

    def __init__(self, train: Sequence[TaskInstance], test: Sequence[TaskInstance], cfg: LoopConfig,
                 seed: int = 0, step_cfg: StepConfig = StepConfig(),
                 extraction: ExtractionConfig = ExtractionConfig()):
        if not train:
            raise ValueError("at least one training demonstration is required")
        self.train_set = list(train)
        self.test_set = list(test)
        self.cfg = cfg
        self.seed = seed
        self.step_cfg = step_cfg
        self.extraction = extraction

        env_dim = mask_agent(self.train_set[0].demo).shape[1]
        self.cond_embedder = Embedder(env_dim, cfg.embed_seed)
        if cfg.agent_agnostic:
            self.cost_embedder = self.cond_embedder
        else:
            agent_dim = unmasked(self.train_set[0].demo).shape[1] - env_dim
            self.cost_embedder = Embedder(env_dim + agent_dim, cfg.embed_seed)
        self._view = mask_agent if cfg.agent_agnostic else unmasked

        self.windows, self.base_priors, self.conditions, self.demo_embeddings = [], [], [], []
        for inst in self.train_set + self.test_set:
            window = detect(inst.demo, extraction)
            base = extract_prior(inst.demo, inst.camera, extraction, sigma_wp=0.0, window=window)
            self.windows.append(window)
            self.base_priors.append(base)
            self.conditions.append(demo_condition_vector(self.cond_embedder, inst.demo, base))
            self.demo_embeddings.append(self.cost_embedder.video_embed(self._view(inst.demo), DEFAULT_AUGMENTATIONS))
        n_mid = self.base_priors[0].n_mid
        self.sigma = cfg.sigma_vector(n_mid)
        x_dim, c_dim = len(self.sigma), len(self.conditions[0])
        cls = _policy_class(cfg.policy)
        self.pi_task = cls.create(x_dim, c_dim, cfg, self._rng(_INIT, 0), self.sigma)
        self.pi_exp = CvaePolicy.create(x_dim, c_dim, cfg, self._rng(_INIT, 1), self.sigma) \
            if cfg.fit_exploration and cfg.policy == "cvae" else None

    def _rng(self, *key) -> np.random.Generator:
        return np.random.default_rng([self.seed, *key])

    def noisy_prior(self, k: int, iteration: int, purpose: int = _PRIOR_NOISE, m: int = 0) -> Prior:
        inst = self.all_instances[k]
        seed = [self.seed, purpose, iteration, k, m]
        return extract_prior(inst.demo, inst.camera, self.extraction, seed=seed, sigma_wp=self.cfg.sigma_wp,
                             window=self.windows[k])

    @property
    def all_instances(self) -> list[TaskInstance]:
        return self.train_set + self.test_set

    def execute_sample(self, k: int, prior: Prior, delta: np.ndarray, seed_key) -> tuple[np.ndarray, float, float,
                                                                                         bool]:
        inst = self.all_instances[k]
        action = prior.apply_residual(delta)
        ro = rollout(inst.scene, action, seed=int(np.random.default_rng(seed_key).integers(2 ** 31)),
                     cfg=self.step_cfg)
        emb = self.cost_embedder.video_embed(self._view(ro), DEFAULT_AUGMENTATIONS)
        cost = embedding_distance(self.demo_embeddings[k], emb)
        change = change_score(self.cond_embedder, ro)
        effective = action.to_vector() - self.base_priors[k].to_vector()
        return effective, cost, change, success(inst.scene, ro)

    def run_iteration(self, iteration: int, fit: bool = True) -> IterationReport:
        cfg = self.cfg
        samples: list[SampleRecord] = []
        elites, exp_elites, demo_success = {}, {}, {}
        for k in range(len(self.train_set)):
            recs = []
            for m in range(cfg.M):
                prior = self.noisy_prior(k, iteration, _PRIOR_NOISE, m)
                rng = self._rng(_RESIDUAL, iteration, k, m)
                delta, explore = sample_residual(iteration, self.pi_task, self.pi_exp, self.conditions[k], cfg,
                                                 rng, self.sigma)
                eff, cost, change, ok = self.execute_sample(k, prior, delta, [self.seed, _RESIDUAL, iteration, k, m,
                                                                              1])
                recs.append(SampleRecord(k, m, [float(v) for v in eff], cost, change, ok, explore))
            costs = [r.cost for r in recs]
            elites[k] = select_elites(costs, cfg.n_elite)
            check_elite_dominance(costs, elites[k])
            exp_elites[k] = select_exploration_elites([r.change for r in recs], cfg.n_elite)
            demo_success[k] = float(np.mean([r.success for r in recs]))
            samples.extend(recs)

        report = IterationReport(
            iteration=iteration,
            samples=samples,
            elites=elites,
            exploration_elites=exp_elites,
            demo_success=demo_success,
            train_success=float(np.mean([s.success for s in samples])),
            test_success=self.evaluate_all(iteration),
            mean_cost=float(np.mean([s.cost for s in samples])),
            mean_change_score=float(np.mean([s.change for s in samples])),
        )
        if fit:
            self.fit(report)
        return report

    def _dataset(self, report: IterationReport, chosen: dict[int, list[int]]) -> tuple[np.ndarray, np.ndarray]:
        n_train = len(self.train_set)
        by_key = {(s.demo, s.index): s for s in report.samples}
        X, C = [], []
        for k, idx in sorted(chosen.items()):
            if not 0 <= k < n_train:
                raise AssertionError(f"held-out demonstration {k} leaked into a fitting dataset")
            for i in idx:
                X.append(by_key[(k, i)].residual)
                C.append(self.conditions[k])
        return np.asarray(X, dtype=float), np.asarray(C, dtype=float)

    def fit(self, report: IterationReport) -> None:
        it = report.iteration
        X, C = self._dataset(report, report.elites)
        report.task_fit_loss = self.pi_task.fit(X, C, self.cfg, self._rng(_FIT_TASK, it))
        if self.pi_exp is not None:
            Xe, Ce = self._dataset(report, report.exploration_elites)
            report.exp_fit_loss = self.pi_exp.fit(Xe, Ce, self.cfg, self._rng(_FIT_EXP, it))

    def evaluate_instance(self, k: int, iteration: int, n_eval: int) -> Optional[float]:
        if n_eval == 0:
            return None
        wins = []
        for m in range(n_eval):
            prior = self.noisy_prior(k, iteration, _EVAL_PRIOR, m)
            rng = self._rng(_EVAL, iteration, k, m)
            delta, _ = sample_residual(iteration, self.pi_task, None, self.conditions[k], self.cfg, rng, self.sigma)
            wins.append(self.execute_sample(k, prior, delta, [self.seed, _EVAL, iteration, k, m, 1])[3])
        return float(np.mean(wins))

    def evaluate_all(self, iteration: int) -> Optional[float]:
        if not self.test_set or self.cfg.n_eval == 0:
            return None
        n_train = len(self.train_set)
        rates = [self.evaluate_instance(n_train + j, iteration, self.cfg.n_eval) for j in range(len(self.test_set))]
        return float(np.mean(rates))

    # -- checkpoints --

    def save_checkpoint(self, directory, curve: LearningCurve) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        nn.save_params(self.pi_task.params, d / "pi_task.tmp")
        (d / "pi_task.tmp").replace(d / "pi_task.bin")
        if self.pi_exp is not None:
            nn.save_params(self.pi_exp.params, d / "pi_exp.tmp")
            (d / "pi_exp.tmp").replace(d / "pi_exp.bin")
        state = {"completed": len(curve), "task_fitted": self.pi_task.fitted,
                 "exp_fitted": bool(self.pi_exp is not None and self.pi_exp.fitted),
                 "reports": [r.to_json() for r in curve.reports]}
        tmp = d / "state.json.tmp"
        tmp.write_text(json.dumps(state))
        tmp.replace(d / "state.json")

    def load_checkpoint(self, directory) -> Optional[LearningCurve]:
        d = Path(directory)
        if not (d / "state.json").exists():
            return None
        state = json.loads((d / "state.json").read_text())
        self.pi_task.params = nn.read_params(d / "pi_task.bin")
        self.pi_task.fitted = state["task_fitted"]
        if self.pi_exp is not None and (d / "pi_exp.bin").exists():
            self.pi_exp.params = nn.read_params(d / "pi_exp.bin")
            self.pi_exp.fitted = state["exp_fitted"]
        curve = LearningCurve()
        for r in state["reports"]:
            curve.append(IterationReport.from_json(r))
        return curve


def train(train_set: Sequence[TaskInstance], test_set: Sequence[TaskInstance], cfg: LoopConfig, seed: int = 0,
          checkpoint_dir=None, resume: bool = False, step_cfg: StepConfig = StepConfig(),
          extraction: ExtractionConfig = ExtractionConfig()) -> LearningCurve:
    """Run ``cfg.iterations`` fitting rounds; the curve has ``iterations + 1`` points.

    Point 0 is the prior with Gaussian residuals; point i is sampled from the policies
    fitted on the elites of point i - 1.
    """
    learner = Learner(train_set, test_set, cfg, seed, step_cfg, extraction)
    curve = None
    if resume and checkpoint_dir is not None:
        curve = learner.load_checkpoint(checkpoint_dir)
    curve = curve or LearningCurve()
    if 0 < len(curve) <= cfg.iterations and curve.reports[-1].task_fit_loss is None:
        # the checkpointed run ended at its final, unfitted point; extend it
        learner.fit(curve.reports[-1])
    for it in range(len(curve), cfg.iterations + 1):
        report = learner.run_iteration(it, fit=it < cfg.iterations)
        curve.append(report)
        if checkpoint_dir is not None:
            learner.save_checkpoint(checkpoint_dir, curve)
    return curve


def evaluate(policy, prior: Prior, c_vec: np.ndarray, scene: Scene, n_eval: int,
             rng_seed, cfg: LoopConfig, step_cfg: StepConfig = StepConfig()) -> Optional[float]:
    """Success rate of ``n_eval`` task-policy rollouts; ``None`` when ``n_eval`` is 0.

    An unfitted (or missing) policy samples the iteration-0 Gaussian around the prior.
    """
    if n_eval == 0:
        return None
    sigma = cfg.sigma_vector(prior.n_mid)
    wins = []
    for m in range(n_eval):
        rng = np.random.default_rng([*np.atleast_1d(rng_seed), m])
        it = 1 if policy is not None and policy.fitted else 0
        delta, _ = sample_residual(it, policy, None, c_vec, cfg, rng, sigma)
        ro = rollout(scene, prior.apply_residual(delta), seed=m, cfg=step_cfg)
        wins.append(success(scene, ro))
    return float(np.mean(wins))
