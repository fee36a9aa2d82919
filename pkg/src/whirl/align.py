"""Agent-agnostic trajectory embeddings and the two objectives built on them.

The robot and the human look nothing alike, so both trajectories are compared
only through what happened to the environment: joint values and object poses.
Frames go through a frozen random projection with a tanh, and a video is the
projection of (mean, last - first, max) pooled frame embeddings, averaged over
a few resampling/noise augmentations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .action import Prior
from .demo import DemoVideo
from .sim import Rollout


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Augmentation:
    time_factor: float = 1.0  # resampled length = round(T * time_factor)
    start_crop: float = 0.0  # fraction of leading frames dropped
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.5 <= self.time_factor <= 2.0:
            raise ValueError(f"time_factor must lie in [0.5, 2.0], got {self.time_factor}")
        if not 0.0 <= self.start_crop <= 0.5:
            raise ValueError(f"start_crop must keep at least half the frames, got {self.start_crop}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


IDENTITY = Augmentation()
DEFAULT_AUGMENTATIONS = (
    Augmentation(0.8), Augmentation(1.0), Augmentation(1.25), Augmentation(1.0, noise_sigma=0.01, seed=1))

MIN_FRAMES = 4


def resample(traj: np.ndarray, length: int) -> np.ndarray:
    """Linear interpolation of the rows of ``traj`` onto ``length`` evenly spaced times."""
    T = len(traj)
    src = np.linspace(0.0, 1.0, T)
    dst = np.linspace(0.0, 1.0, max(length, 2))
    return np.stack([np.interp(dst, src, traj[:, j]) for j in range(traj.shape[1])], axis=1)


def augment(traj: np.ndarray, aug: Augmentation) -> np.ndarray:
    out = traj[int(np.floor(aug.start_crop * len(traj))):]
    if aug.time_factor != 1.0:
        out = resample(out, int(round(len(out) * aug.time_factor)))
    if aug.noise_sigma > 0:
        out = out + np.random.default_rng(aug.seed).normal(0.0, aug.noise_sigma, out.shape)
    return out


Trajectory = Union[DemoVideo, Rollout, np.ndarray]


def mask_agent(item: Trajectory) -> np.ndarray:
    """Per-frame environment features with every agent channel removed."""
    if isinstance(item, DemoVideo):
        if item.env_truth is None:
            raise DataError(f"demo of {item.scene_ref} carries no environment truth")
        out = np.asarray(item.env_truth, dtype=float)
    elif isinstance(item, Rollout):
        out = item.env_features()
    else:
        out = np.asarray(item, dtype=float)
    if out.ndim != 2:
        raise DataError("environment trajectory must be (frames, features)")
    return out


def unmasked(item: Union[DemoVideo, Rollout]) -> np.ndarray:
    """Environment features followed by the agent's position and grip."""
    if isinstance(item, DemoVideo):
        if item.agent_truth is None:
            raise DataError(f"demo of {item.scene_ref} carries no agent truth")
        agent = np.asarray(item.agent_truth, dtype=float)
    else:
        agent = item.agent_features()
    return np.concatenate([mask_agent(item), agent], axis=1)


class Embedder:
    """Frozen random embeddings for one feature dimension.

    ``frame_dim`` and ``video_dim`` are the sizes of the per-frame and per-video
    vectors; ``gain`` scales the frame projection so that typical joint travel
    moves the tanh well away from its linear region.
    """

    def __init__(self, feature_dim: int, seed: int = 0, frame_dim: int = 16, video_dim: int = 64,
                 gain: float = 3.0):
        if feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        rng = np.random.default_rng([seed, feature_dim])
        self.feature_dim = feature_dim
        self.seed = seed
        self.frame_proj = rng.normal(0.0, gain / np.sqrt(feature_dim), (feature_dim, frame_dim))
        self.frame_bias = rng.uniform(-0.5, 0.5, frame_dim)
        self.video_proj = rng.normal(0.0, 1.0 / np.sqrt(3 * frame_dim), (3 * frame_dim, video_dim))
        for a in (self.frame_proj, self.frame_bias, self.video_proj):
            a.setflags(write=False)

    @property
    def frame_dim(self) -> int:
        return self.frame_proj.shape[1]

    @property
    def video_dim(self) -> int:
        return self.video_proj.shape[1]

    def lipschitz_bound(self) -> float:
        """Operator 2-norm of the frame projection; tanh is 1-Lipschitz."""
        return float(np.linalg.norm(self.frame_proj, 2))

    def frame_embed(self, frames) -> np.ndarray:
        x = np.asarray(frames, dtype=float)
        if x.shape[-1] != self.feature_dim:
            raise DataError(f"frame has {x.shape[-1]} features, embedder expects {self.feature_dim}")
        return np.tanh(x @ self.frame_proj + self.frame_bias)

    def pool(self, frame_embeddings: np.ndarray) -> np.ndarray:
        e = frame_embeddings
        return np.concatenate([e.mean(axis=0), e[-1] - e[0], e.max(axis=0)])

    def video_embed(self, traj: np.ndarray, augs: Sequence[Augmentation] = DEFAULT_AUGMENTATIONS) -> np.ndarray:
        traj = np.asarray(traj, dtype=float)
        if traj.ndim != 2 or len(traj) < MIN_FRAMES:
            raise DataError(f"need at least {MIN_FRAMES} frames to embed a video")
        augs = tuple(augs) or (IDENTITY,)
        pooled = [self.pool(self.frame_embed(augment(traj, a))) for a in augs]
        return np.mean(pooled, axis=0) @ self.video_proj


def task_cost(embedder: Embedder, demo: DemoVideo, ro: Rollout, augs: Sequence[Augmentation] = DEFAULT_AUGMENTATIONS,
              agent_agnostic: bool = True, demo_embedding: Optional[np.ndarray] = None) -> float:
    """Distance between the demo's and the rollout's video embeddings.

    ``demo_embedding`` lets callers reuse a precomputed demo side.
    """
    view = mask_agent if agent_agnostic else unmasked
    if demo_embedding is None:
        demo_embedding = embedder.video_embed(view(demo), augs)
    return embedding_distance(demo_embedding, embedder.video_embed(view(ro), augs))


def embedding_distance(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(np.sqrt(np.sum(d * d)))


def change_score(embedder: Embedder, item: Trajectory) -> float:
    """Largest distance between any two frame embeddings of the masked trajectory."""
    traj = mask_agent(item)
    if len(traj) < 2:
        raise DataError("change score needs at least two frames")
    # repeated frames (a resting scene) cannot raise the maximum
    e = embedder.frame_embed(np.unique(traj, axis=0))
    best = 0.0
    for i in range(len(e) - 1):
        d = e[i + 1:] - e[i]
        best = max(best, float(np.sqrt(np.max(np.sum(d * d, axis=1)))))
    return best


def prior_features(prior: Prior) -> np.ndarray:
    """Prior vector with angles divided by pi so every entry is of order one."""
    v = prior.to_vector().copy()
    k = prior.continuous_dim - 4
    v[k:k + 3] /= np.pi
    return v


def demo_condition_vector(embedder: Embedder, demo: DemoVideo, prior: Prior,
                          augs: Sequence[Augmentation] = DEFAULT_AUGMENTATIONS) -> np.ndarray:
    """Conditioning input for the policies: demo video embedding ⊕ normalized prior."""
    return np.concatenate([embedder.video_embed(mask_agent(demo), augs), prior_features(prior)])
