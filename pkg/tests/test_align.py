import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import pull_action
from whirl.action import Prior
from whirl.align import (DEFAULT_AUGMENTATIONS, IDENTITY, Augmentation, DataError, Embedder, change_score,
                         demo_condition_vector, embedding_distance, mask_agent, resample, task_cost, unmasked)
from whirl.demo import scripted_expert
from whirl.prior import extract_prior
from whirl.sim import Rollout, rollout


def brute_force_change(embedder, traj):
    e = embedder.frame_embed(traj)
    best = 0.0
    for i, j in itertools.combinations(range(len(e)), 2):
        best = max(best, float(np.sqrt(np.sum((e[i] - e[j]) ** 2))))
    return best


@pytest.fixture(scope="module")
def demos(experiments):
    out = {}
    for task in ("drawer", "door", "dishwasher"):
        exp = experiments[task]
        scene, settings = exp.scenes[exp.train_demos[0]]
        out[task] = (scene, scripted_expert(scene, 0, settings)[0])
    return out


@pytest.fixture(scope="module")
def drawer_rollouts(drawer_scene):
    home = drawer_scene.home.position
    static = rollout(drawer_scene, Prior(home, (home,), home, (0, 0, 0), 1.0, 0.3, 0.8))
    return static, rollout(drawer_scene, pull_action(drawer_scene, 0.25))


def test_mask_ignores_agent(drawer_rollouts):
    _, ro = drawer_rollouts
    other = ro.with_agent(ee_position=ro.ee_position[::-1], aperture=np.zeros(ro.n_frames))
    assert np.array_equal(mask_agent(ro), mask_agent(other))
    assert mask_agent(ro).shape[1] == 1


def test_static_scene_masks_to_constant(drawer_rollouts):
    static, _ = drawer_rollouts
    env = mask_agent(static)
    assert np.all(env == env[0])


def test_pull_increases_joint(drawer_rollouts):
    _, ro = drawer_rollouts
    q = mask_agent(ro)[:, 0]
    moving = np.flatnonzero(np.diff(q) != 0)
    assert len(moving) > 5
    assert np.all(np.diff(q[moving[0]:moving[-1] + 2]) > 0)


def test_missing_env_truth(demos):
    _, demo = demos["drawer"]
    bad = replace(demo)
    object.__setattr__(bad, "env_truth", None)  # bypasses the constructor's length check
    with pytest.raises(DataError):
        mask_agent(bad)


def test_unmasked_appends_agent(drawer_rollouts, demos):
    _, ro = drawer_rollouts
    assert unmasked(ro).shape == (ro.n_frames, 1 + 7)
    _, demo = demos["drawer"]
    assert unmasked(demo).shape == (demo.T, 1 + 7)


def test_frame_embedding_basics():
    emb = Embedder(5, seed=3)
    x = np.random.default_rng(0).normal(size=5)
    assert embedding_distance(emb.frame_embed(x), emb.frame_embed(x.copy())) == 0.0
    assert np.array_equal(emb.frame_embed(np.zeros(5)), np.tanh(emb.frame_bias))
    with pytest.raises(DataError):
        emb.frame_embed(np.zeros(4))


@given(st.integers(1, 12), st.integers(0, 2 ** 31), st.floats(1e-6, 2.0))
def test_frame_embedding_lipschitz(dim, seed, scale):
    emb = Embedder(dim, seed=7)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=dim)
    d = rng.normal(size=dim) * scale
    dist = embedding_distance(emb.frame_embed(x), emb.frame_embed(x + d))
    assert dist <= emb.lipschitz_bound() * np.linalg.norm(d) * (1 + 1e-12)


def test_constant_trajectory_has_zero_delta_pool():
    emb = Embedder(3)
    pooled = emb.pool(emb.frame_embed(np.tile([0.1, 0.2, 0.3], (20, 1))))
    assert not pooled[emb.frame_dim:2 * emb.frame_dim].any()


def test_video_embedding_pure(demos):
    _, demo = demos["door"]
    a = Embedder(1, seed=2).video_embed(mask_agent(demo))
    b = Embedder(1, seed=2).video_embed(mask_agent(demo).copy())
    assert np.array_equal(a, b) and a.shape == (64,) and np.all(np.isfinite(a))


def test_speed_robustness(demos):
    emb = Embedder(1)
    trajs = {t: mask_agent(d) for t, (_, d) in demos.items()}
    phi = {t: emb.video_embed(x) for t, x in trajs.items()}
    inter = np.mean([embedding_distance(phi[a], phi[b]) for a, b in itertools.combinations(phi, 2)])
    for x in trajs.values():
        slow = resample(x, int(round(len(x) * 1.25)))
        assert embedding_distance(emb.video_embed(x), emb.video_embed(slow)) < 0.1 * inter


def test_too_short_to_embed():
    with pytest.raises(DataError):
        Embedder(2).video_embed(np.zeros((3, 2)))


def test_augmentation_validation():
    with pytest.raises(ValueError):
        Augmentation(time_factor=2.5)
    with pytest.raises(ValueError):
        Augmentation(start_crop=0.6)
    assert Embedder(1).video_embed(np.arange(10.0)[:, None], []).shape == (64,)


def test_cost_zero_for_matching_environment(demos):
    scene, demo = demos["drawer"]
    ro = rollout(scene, pull_action(scene, 0.25))
    emb = Embedder(1)
    # replay the demo's environment in a rollout with an unrelated agent path
    T = demo.T
    fake = Rollout(scene.name, demo.env_truth.reshape(T, 1), np.zeros((T, 0, 6)), np.zeros((T, 3)),
                   np.zeros((T, 3)), np.ones(T), np.full(T, -1))
    assert task_cost(emb, demo, fake, [IDENTITY]) == 0.0
    assert task_cost(emb, demo, fake) == 0.0


def test_static_rollout_costs_more_than_success(demos, drawer_rollouts):
    _, demo = demos["drawer"]
    static, pulled = drawer_rollouts
    emb = Embedder(1)
    assert task_cost(emb, demo, static) > task_cost(emb, demo, pulled)


def test_change_score_static_and_short(drawer_rollouts):
    static, pulled = drawer_rollouts
    emb = Embedder(1)
    assert change_score(emb, static) == 0.0
    assert change_score(emb, pulled) > 0.0
    with pytest.raises(DataError):
        change_score(emb, np.zeros((1, 1)))


@given(st.integers(2, 50), st.integers(1, 6), st.integers(0, 2 ** 31), st.booleans())
def test_change_score_matches_brute_force(T, dim, seed, repeats):
    rng = np.random.default_rng(seed)
    traj = rng.normal(size=(T, dim))
    if repeats:
        traj[rng.integers(0, T, T // 2)] = traj[0]
    emb = Embedder(dim, seed=seed % 5)
    assert change_score(emb, traj) == brute_force_change(emb, traj)


@given(seed=st.integers(0, 2 ** 31))
def test_agent_invariance(demos, drawer_rollouts, seed):
    ro = drawer_rollouts[1]
    demo = demos["drawer"][1]
    rng = np.random.default_rng(seed)
    moved = ro.with_agent(ee_position=ro.ee_position + rng.normal(0, 0.2, ro.ee_position.shape),
                          ee_orientation=rng.uniform(-3, 3, ro.ee_orientation.shape),
                          aperture=rng.random(ro.n_frames))
    emb = Embedder(1)
    assert task_cost(emb, demo, moved) - task_cost(emb, demo, ro) == 0.0
    assert change_score(emb, moved) - change_score(emb, ro) == 0.0


@given(st.integers(0, 2 ** 31))
def test_cost_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    emb = Embedder(2)
    a, b, c = (emb.video_embed(np.cumsum(rng.normal(size=(int(rng.integers(4, 30)), 2)), axis=0)) for _ in range(3))
    assert embedding_distance(a, c) <= embedding_distance(a, b) + embedding_distance(b, c) + 1e-12


def test_condition_vector(demos):
    emb = Embedder(1)
    vecs = {}
    for task, (scene, demo) in demos.items():
        prior = extract_prior(demo, scene.camera, sigma_wp=0.0)
        c = demo_condition_vector(emb, demo, prior)
        assert c.shape == (64 + 15,)
        assert np.array_equal(c, demo_condition_vector(emb, demo, prior))
        vecs[task] = c
    assert np.linalg.norm(vecs["drawer"] - vecs["door"]) > 0


def test_default_augmentations():
    assert [a.time_factor for a in DEFAULT_AUGMENTATIONS] == [0.8, 1.0, 1.25, 1.0]
    assert [a.noise_sigma for a in DEFAULT_AUGMENTATIONS] == [0.0, 0.0, 0.0, 0.01]
