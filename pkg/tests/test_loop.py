from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from whirl import harness
from whirl.loop import (CvaePolicy, IterationReport, LearningCurve, Learner, LoopConfig, check_elite_dominance,
                        evaluate, sample_residual, select_elites, select_exploration_elites, train)

SMALL = LoopConfig(M=6, n_elite=3, iterations=2, n_eval=4, epochs=20)


@pytest.fixture(scope="module")
def instances(experiments):
    return harness.make_instances(experiments["drawer"], 0)


@pytest.fixture(scope="module")
def small_curve(instances):
    train_set, test_set = instances
    return train(train_set[:2], test_set, SMALL, seed=3)


def test_config_validation():
    with pytest.raises(ValueError):
        LoopConfig(M=5, n_elite=6)
    with pytest.raises(ValueError):
        LoopConfig(p_explore=1.5)
    with pytest.raises(ValueError):
        LoopConfig(sigma_rotation=0.0)


def test_sigma_vector_layout():
    s = LoopConfig().sigma_vector(1)
    assert s.tolist() == [0.03] * 9 + [0.1] * 3 + [0.1] + [0.1, 0.1]
    assert len(LoopConfig().sigma_vector(2)) == 18


def _fitted_policies(seed=0):
    rng = np.random.default_rng(seed)
    cfg = LoopConfig()
    sigma = cfg.sigma_vector()
    task = CvaePolicy.create(15, 4, cfg, rng, sigma)
    exp = CvaePolicy.create(15, 4, cfg, rng, sigma)
    task.fitted = exp.fitted = True
    return task, exp


def test_iteration_zero_with_vanishing_sigma_executes_prior():
    sigma = np.full(15, 1e-12)
    delta, explore = sample_residual(0, None, None, np.zeros(4), LoopConfig(), np.random.default_rng(0), sigma)
    assert np.max(np.abs(delta)) < 1e-10 and not explore


def test_iteration_zero_is_gaussian():
    sigma = LoopConfig().sigma_vector()
    draws = np.array([sample_residual(0, None, None, np.zeros(4), LoopConfig(), np.random.default_rng(i), sigma)[0]
                      for i in range(2000)])
    assert np.allclose(draws.std(axis=0) / sigma, 1.0, atol=0.08)
    assert np.all(np.abs(draws.mean(axis=0) / sigma) < 0.1)


def test_no_exploration_probability():
    task, exp = _fitted_policies()
    cfg = LoopConfig(p_explore=0.0)
    flags = [sample_residual(1, task, exp, np.zeros(4), cfg, np.random.default_rng(i), cfg.sigma_vector())[1]
             for i in range(200)]
    assert not any(flags)
    cfg = LoopConfig(p_explore=1.0)
    flags = [sample_residual(1, task, exp, np.zeros(4), cfg, np.random.default_rng(i), cfg.sigma_vector())[1]
             for i in range(50)]
    assert all(flags)


def test_policy_samples_get_floor_noise():
    task, exp = _fitted_policies()
    cfg = LoopConfig(p_explore=0.0)
    sigma = cfg.sigma_vector()
    c = np.zeros(4)
    draws = []
    for i in range(400):
        delta, _ = sample_residual(1, task, exp, c, cfg, np.random.default_rng(i), sigma)
        rng = np.random.default_rng(i)
        rng.random()  # the exploration coin
        base = task.sample(c, rng)
        draws.append((delta - base) / sigma)
    assert np.std(draws) == pytest.approx(cfg.floor_frac, rel=0.1)


def test_elite_selection_examples():
    assert select_elites([5, 1, 3, 2, 4], 2) == [1, 3]
    assert select_elites([5, 1, 3], 3) == [0, 1, 2]
    assert select_exploration_elites([5, 1, 3, 2, 4], 2) == [0, 4]


@given(st.lists(st.integers(0, 6), min_size=1, max_size=40), st.integers(1, 40))
def test_elite_dominance(costs, n_elite):
    elites = select_elites(costs, n_elite)
    assert len(elites) == min(n_elite, len(costs))
    check_elite_dominance(costs, elites)


def test_dominance_violation_detected():
    with pytest.raises(AssertionError):
        check_elite_dominance([1.0, 5.0, 2.0], [1])


def test_curve_shape_and_reports(small_curve):
    assert len(small_curve) == SMALL.iterations + 1
    for r in small_curve.reports:
        for k in r.elites:
            assert len(r.elites[k]) == SMALL.n_elite
            costs = [s.cost for s in r.samples if s.demo == k]
            check_elite_dominance(costs, r.elites[k])
        assert 0.0 <= r.train_success <= 1.0
        assert r.test_success is not None
    fitted = small_curve.reports[:-1]
    assert all(r.task_fit_loss is not None for r in fitted)
    assert small_curve.reports[-1].task_fit_loss is None


def test_fitting_never_increases_loss(small_curve):
    for r in small_curve.reports[:-1]:
        for before, after in (r.task_fit_loss, r.exp_fit_loss):
            assert after <= before


def test_no_exploration_at_iteration_zero(small_curve):
    assert not any(s.explore for s in small_curve.reports[0].samples)


def test_training_deterministic(instances, small_curve):
    train_set, test_set = instances
    again = train(train_set[:2], test_set, SMALL, seed=3)
    assert harness.curve_csv(again) == harness.curve_csv(small_curve)
    assert harness.samples_csv(again) == harness.samples_csv(small_curve)


def test_extending_a_finished_run(tmp_path, instances, small_curve):
    train_set, test_set = instances
    first = train(train_set[:2], test_set, replace(SMALL, iterations=1), seed=3, checkpoint_dir=tmp_path)
    assert len(first) == 2
    extended = train(train_set[:2], test_set, SMALL, seed=3, checkpoint_dir=tmp_path, resume=True)
    assert harness.samples_csv(extended) == harness.samples_csv(small_curve)
    assert harness.curve_csv(extended) == harness.curve_csv(small_curve)


def test_resume_of_complete_run_is_unchanged(tmp_path, instances, small_curve):
    train_set, test_set = instances
    train(train_set[:2], test_set, SMALL, seed=3, checkpoint_dir=tmp_path)
    again = train(train_set[:2], test_set, SMALL, seed=3, checkpoint_dir=tmp_path, resume=True)
    assert harness.curve_csv(again) == harness.curve_csv(small_curve)


def test_resume_after_interruption(tmp_path, instances, small_curve):
    train_set, test_set = instances
    ckpt = tmp_path / "ck"
    learner = Learner(train_set[:2], test_set, SMALL, seed=3)
    curve = LearningCurve()
    report = learner.run_iteration(0, fit=True)
    curve.append(report)
    learner.save_checkpoint(ckpt, curve)
    resumed = train(train_set[:2], test_set, SMALL, seed=3, checkpoint_dir=ckpt, resume=True)
    assert harness.samples_csv(resumed) == harness.samples_csv(small_curve)


def test_zero_iterations_gives_prior_point(instances):
    train_set, test_set = instances
    curve = train(train_set[:1], [], replace(SMALL, iterations=0, M=4, n_elite=2), seed=1)
    assert len(curve) == 1 and curve.test_success == [None]


def test_held_out_residuals_never_fitted(instances, small_curve):
    train_set, test_set = instances
    learner = Learner(train_set[:2], test_set, SMALL, seed=3)
    report = small_curve.reports[0]
    with pytest.raises(AssertionError, match="leaked"):
        learner._dataset(report, {2: [0]})


def test_iteration_zero_waypoints_stay_near_prior(small_curve):
    sigma = SMALL.sigma_vector()
    within = []
    for s in small_curve.reports[0].samples:
        r = np.asarray(s.residual)
        for w in range(3):
            within.append(np.max(np.abs(r[3 * w:3 * w + 3])) <= 3 * np.hypot(sigma[0], SMALL.sigma_wp))
    assert np.mean(within) >= 0.95


def test_report_json_round_trip(small_curve):
    r = small_curve.reports[1]
    back = IterationReport.from_json(r.to_json())
    assert back == r


def test_evaluate_empty_is_none(instances):
    inst = instances[0][0]
    learner = Learner([inst], [], SMALL)
    assert evaluate(None, learner.base_priors[0], learner.conditions[0], inst.scene, 0, 0, SMALL) is None
    assert learner.evaluate_all(0) is None


def test_untrained_policy_matches_prior_rate(instances):
    inst = instances[0][0]
    learner = Learner([inst], [], SMALL)
    prior, c = learner.base_priors[0], learner.conditions[0]
    n = 60
    untrained = evaluate(learner.pi_task, prior, c, inst.scene, n, [1], SMALL)
    prior_only = evaluate(None, prior, c, inst.scene, n, [2], SMALL)
    p = (untrained + prior_only) / 2
    assert abs(untrained - prior_only) <= 3 * np.sqrt(max(p * (1 - p), 1e-3) * 2 / n)
