import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from revpomdp.errors import BudgetError, PreconditionError, UnsupportedStructure
from revpomdp.experiments import shipped_config, shipped_config_dir
from revpomdp.instances import HardInstanceSpec, build, optimal_policy
from revpomdp.learners import (
    ConfidenceSet,
    EnvironmentHandle,
    LearnerReport,
    always_explore,
    batch_budget,
    batch_log_likelihood,
    bruteforce_learn,
    bruteforce_plan,
    collision_statistic,
    collision_threshold,
    collision_uniformity_test,
    episode_bound,
    explore_then_exploit,
    log_likelihood,
    n_batches,
    omle,
    omle_class_from_family,
    oracle_exploit,
    uniform_baseline,
)
from revpomdp.pomdp import ActionSequencePolicy, TabularPOMDP, Trajectory, UniformPolicy, random_pomdp

from . import oracles


def tiny_pac():
    d = json.loads((shipped_config_dir() / "instances" / "tiny-pac.json").read_text())
    return HardInstanceSpec.from_dict(d)


def omle_single():
    return shipped_config("regret").templates()["single"]


def far_law(D, tv):
    return np.tile([(1 + 2 * tv) / D, (1 - 2 * tv) / D], D // 2)


# collision tester


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=2, max_size=40))
def test_collision_statistic_matches_pair_count(xs):
    n = len(xs)
    want = oracles.collision_count(xs) / (n * (n - 1) / 2)
    assert collision_statistic(xs, 6) == pytest.approx(want, abs=1e-12)


def test_collision_statistic_needs_two_samples():
    with pytest.raises(BudgetError):
        collision_statistic([1], 4)


@pytest.mark.parametrize("D,tv", [(4, 0.1), (20, 0.1), (64, 0.25)])
def test_threshold_is_midpoint_of_collision_rates(D, tv):
    far = float((far_law(D, tv) ** 2).sum())
    assert far == pytest.approx((1 + 4 * tv**2) / D)
    assert collision_threshold(D, tv) == pytest.approx((1 / D + far) / 2)
    # the perturbed law sits at the stated distance
    assert 0.5 * np.abs(far_law(D, tv) - 1 / D).sum() == pytest.approx(tv)


def test_batch_budget_and_batches():
    assert batch_budget(20, 0.1) == math.ceil(8 * math.sqrt(20) / 0.01)
    assert n_batches(0.5) == 1 and n_batches(1 / 3) == 1
    for conf in (0.2, 0.05, 0.01, 1e-4):
        b = n_batches(conf)
        assert b % 2 == 1 and b >= 18 * math.log(1 / conf)
    with pytest.raises(ValueError):
        n_batches(0.0)


def test_tester_verdicts():
    D, tv = 20, 0.2
    rng = np.random.default_rng(0)
    need = batch_budget(D, tv) * n_batches(0.01)
    assert not collision_uniformity_test(rng.integers(D, size=need), D, tv, 0.01).far
    far = rng.choice(D, size=need, p=far_law(D, tv))
    res = collision_uniformity_test(far, D, tv, 0.01)
    assert res.far and len(res.statistics) == n_batches(0.01)


def test_tester_errors():
    with pytest.raises(BudgetError):
        collision_uniformity_test(np.zeros(10, dtype=int), 20, 0.1)
    with pytest.raises(ValueError):
        collision_uniformity_test(np.full(10**5, 25), 20, 0.1)
    with pytest.raises(ValueError):
        collision_uniformity_test(np.zeros(10, dtype=int), 20, 1.5)


# likelihoods


def test_log_likelihood_matches_path_sum():
    p = random_pomdp(2, 3, 2, 3, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for _ in range(20):
        obs = tuple(int(x) for x in rng.integers(3, size=3))
        acts = tuple(int(x) for x in rng.integers(2, size=3))
        ll = log_likelihood(p, Trajectory(obs, acts))
        assert ll == pytest.approx(math.log(oracles.path_probability(p, obs, acts)), abs=1e-12)


def test_batch_log_likelihood_matches_single():
    spec = omle_single()
    inst = build(spec)
    acts = optimal_policy(spec).actions
    env = EnvironmentHandle.from_instance(inst, seed=0)
    obs = env.rollout_batch(acts, 50)
    null = build(spec.with_theta(None)).pomdp
    for model in (inst.pomdp, null):
        batch = batch_log_likelihood(model, obs, acts)
        single = [log_likelihood(model, Trajectory(tuple(o), acts)) for o in obs.tolist()]
        assert np.allclose(batch, single, atol=1e-12)


def test_log_likelihood_sentinel():
    H, S = 3, 2
    p = TabularPOMDP(
        np.tile(np.eye(S)[:, None, :], (H - 1, 1, 1, 1)),
        np.tile(np.eye(S), (H, 1, 1)),
        np.zeros((H, S, 1)),
        np.array([1.0, 0.0]),
    )
    assert log_likelihood(p, Trajectory((0, 0, 0), (0, 0, 0))) == 0.0
    assert log_likelihood(p, Trajectory((0, 1, 0), (0, 0, 0))) == -math.inf
    batch = batch_log_likelihood(p, np.array([[0, 0, 0], [1, 0, 0]]), (0, 0, 0))
    assert batch.tolist() == [0.0, -math.inf]


# environment handle


def test_environment_counts_and_determinism():
    spec = omle_single()
    inst = build(spec)
    acts = optimal_policy(spec).actions
    a = EnvironmentHandle.from_instance(inst, seed=3, per_call_streams=True)
    b = EnvironmentHandle.from_instance(inst, seed=3, per_call_streams=True)
    oa = a.rollout_batch(acts, 100)
    ob = b.rollout_batch(acts, 100)
    assert np.array_equal(oa, ob) and a.episodes == 100
    assert a.event_counts["correct"] == 100
    a.rollout(UniformPolicy(spec.A))
    assert a.episodes == 101


def test_environment_contracts():
    spec = omle_single()
    env = EnvironmentHandle.from_instance(build(spec), seed=0)
    with pytest.raises(PreconditionError):
        env.rollout_batch((0,), 5)
    with pytest.raises(PreconditionError):
        env.rollout_prefix(optimal_policy(spec).actions, 5, lambda obs: 0)
    kept = env.rollout_prefix(optimal_policy(spec).actions, 10, lambda obs: 4)
    assert kept.shape == (4, spec.H) and env.episodes == 4
    bare = EnvironmentHandle(build(spec).pomdp, seed=0)
    assert not bare.can_audit
    with pytest.raises(PreconditionError):
        bare.audit_regret(UniformPolicy(spec.A))


def test_latent_trace_is_opt_in():
    spec = omle_single()
    inst = build(spec)
    env = EnvironmentHandle.from_instance(inst, seed=0)
    env.rollout_batch(optimal_policy(spec).actions, 5)
    assert env.latent_log == []
    env = EnvironmentHandle.from_instance(inst, seed=0, trace_latent=True)
    env.rollout_batch(optimal_policy(spec).actions, 5)
    assert len(env.latent_log) == 1


# reports


def test_report_segments_and_rows():
    r = LearnerReport("x", 0, UniformPolicy(2))
    r.add_regret(3, 0.5)
    r.add_regret(2, 0.5)
    r.add_regret(0, 9.0)
    r.add_regret(1, 0.0)
    assert r.regret_segments == [(5, 0.5), (1, 0.0)]
    assert r.cumulative_regret() == pytest.approx(2.5)
    assert r.cumulative_regret(2) == pytest.approx(1.0)
    rows = list(r.regret_rows())
    assert rows[0] == (1, 0.5, 0.5) and rows[-1] == (6, 0.0, 2.5)
    assert np.allclose(r.cumulative_curve([1, 6]), [0.5, 2.5])
    d = r.to_dict()
    assert d["policy"] == "UniformPolicy" and d["cumulative_regret"] == pytest.approx(2.5)


def test_confidence_set():
    cs = ConfidenceSet(np.array([-1.0, -3.0, -10.0]), 2.5)
    assert cs.active.tolist() == [True, True, False]
    assert not cs.contains(2)


# brute force


def test_bruteforce_plan_contracts():
    pub = tiny_pac().public()
    plan = bruteforce_plan(pub, 0.25)
    assert plan.domain_size == 2 * pub.K * pub.L
    assert plan.far_tv == pytest.approx(pub.sigma * pub.epsilon / 2)
    assert plan.planned_episodes <= episode_bound(pub, plan.cell_budget)
    with pytest.raises(ValueError):
        bruteforce_plan(pub, 1.5)
    with pytest.raises(UnsupportedStructure):
        bruteforce_plan(omle_single().public(), 0.25)


@pytest.mark.parametrize("seed", [0, 1])
def test_bruteforce_recovers_theta(seed):
    spec = tiny_pac()
    env = EnvironmentHandle.from_instance(build(spec), seed=seed)
    rep = bruteforce_learn(spec.public(), env, audit_regret=True)
    assert rep.verdict == "theta" and rep.theta_hat == spec.theta
    assert rep.episodes == env.episodes <= rep.extras["planned_episodes"]
    assert env.audit_regret(rep.policy) == pytest.approx(0.0, abs=1e-12)
    assert rep.cumulative_regret() > 0


def test_bruteforce_null_verdict():
    spec = tiny_pac().with_theta(None)
    env = EnvironmentHandle.from_instance(build(spec), seed=0)
    rep = bruteforce_learn(spec.public(), env)
    assert rep.verdict == "null" and rep.theta_hat is None


def test_bruteforce_budget_too_small():
    spec = tiny_pac()
    env = EnvironmentHandle.from_instance(build(spec), seed=0)
    with pytest.raises(BudgetError):
        bruteforce_learn(spec.public(), env, max_episodes=10)


# OMLE and baselines


def test_omle_class_contains_truth_and_null():
    spec = omle_single()
    models = omle_class_from_family(spec)
    labels = [m.label for m in models]
    assert "null" in labels and str(spec.theta.to_dict()) in labels
    assert len(set(labels)) == len(labels)


@pytest.mark.parametrize("seed", range(3))
def test_omle_true_model_survives(seed):
    spec = omle_single()
    models = omle_class_from_family(spec)
    truth = [m.label for m in models].index(str(spec.theta.to_dict()))
    env = EnvironmentHandle.from_instance(build(spec), seed=seed)
    rep = omle(models, env, 2000, audit_index=truth)
    assert rep.extras["true_model_survived"]
    assert rep.episodes == 2000
    assert sum(n for _, n in rep.extras["picks"]) == 2000
    assert rep.cumulative_regret() < 2000 * (closed_gap(spec))


def closed_gap(spec):
    # the worst per-episode regret is at most the optimal value
    return (1 + 2 * spec.epsilon) / 4


def test_omle_needs_models():
    env = EnvironmentHandle.from_instance(build(omle_single()), seed=0)
    with pytest.raises(PreconditionError):
        omle([], env, 10)


def test_uniform_baseline_is_linear():
    spec = omle_single()
    env = EnvironmentHandle.from_instance(build(spec), seed=0)
    rep = uniform_baseline(env, 50)
    gap = env.audit_regret(UniformPolicy(spec.A))
    assert gap > 0 and rep.cumulative_regret() == pytest.approx(50 * gap)


def test_explore_baselines_on_tiny_pac():
    spec = tiny_pac()
    pub = spec.public()
    env = EnvironmentHandle.from_instance(build(spec), seed=0)
    rep = always_explore(pub, env, 500)
    assert rep.episodes == 500 == env.episodes
    with pytest.raises(ValueError):
        explore_then_exploit(pub, EnvironmentHandle.from_instance(build(spec), seed=0), 100, 1.0)
    rep = explore_then_exploit(pub, EnvironmentHandle.from_instance(build(spec), seed=0), 1000, 0.5)
    assert rep.episodes == 1000 and 0 < rep.extras["explore_episodes"] <= 500
    with pytest.raises(UnsupportedStructure):
        always_explore(omle_single().public(), EnvironmentHandle.from_instance(build(omle_single()), seed=0), 10)


def test_oracle_exploit_has_no_regret_after_exploring():
    spec = tiny_pac()
    env = EnvironmentHandle.from_instance(build(spec), seed=0)
    rep = oracle_exploit(spec.public(), env, 300, spec.theta, explore_episodes=100)
    trace = rep.regret_trace()
    assert trace.shape == (300,)
    assert np.all(trace[100:] == 0.0)
    assert isinstance(rep.policy, ActionSequencePolicy)

