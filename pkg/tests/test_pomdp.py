import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from revpomdp.errors import ConstructionInconsistency, EnumerationTooLarge, ShapeError
from revpomdp.pomdp import (
    ActionSequencePolicy,
    HistoryPolicy,
    RandomHistoryPolicy,
    ReactivePolicy,
    TabularPOMDP,
    UniformPolicy,
    enumerate_distribution,
    event_probability,
    open_loop_paths,
    optimal_value_bruteforce,
    policy_value,
    random_pomdp,
    sample_open_loop,
    sample_trajectory,
    trajectory_probability,
)

from . import oracles


def small_pomdp(seed=0, S=2, O=2, A=2, H=3):
    return random_pomdp(S, O, A, H, np.random.default_rng(seed))


dims = st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 2), st.integers(1, 3), st.integers(0, 10**6))


# construction


def test_shapes_are_checked():
    p = small_pomdp()
    with pytest.raises(ShapeError):
        TabularPOMDP(p.transitions[:1], p.emissions, p.rewards, p.initial)
    with pytest.raises(ShapeError):
        TabularPOMDP(p.transitions, p.emissions, p.rewards[:, :, :1], p.initial)
    with pytest.raises(ShapeError):
        TabularPOMDP(p.transitions, p.emissions, p.rewards, p.initial[:1])


def test_rows_must_be_stochastic():
    p = small_pomdp()
    em = p.emissions.copy()
    em[0, 0] *= 0.5
    with pytest.raises(ValueError):
        TabularPOMDP(p.transitions, em, p.rewards, p.initial)


def test_rewards_in_unit_interval():
    p = small_pomdp()
    with pytest.raises(ValueError):
        TabularPOMDP(p.transitions, p.emissions, p.rewards + 1.0, p.initial)


def test_masked_rows_raise():
    p = small_pomdp(S=2, H=2)
    trans = np.zeros_like(p.transitions)
    trans[..., 0] = 1.0
    trans[0, 1] = 0.0
    em = p.emissions.copy()
    em[:, 1] = 0.0
    mask = np.array([[True, False], [True, False]])
    init = np.array([1.0, 0.0])
    q = TabularPOMDP(trans, em, p.rewards, init, mask=mask)
    with pytest.raises(ConstructionInconsistency):
        q.emission_row(1, 1)
    with pytest.raises(ConstructionInconsistency):
        q.transition_row(0, 1, 0)
    assert q.emission_row(1, 0).sum() == pytest.approx(1.0)


def test_mask_must_cover_reachable_states():
    p = small_pomdp(S=2, H=2)
    with pytest.raises(ValueError):
        TabularPOMDP(p.transitions, p.emissions, p.rewards, p.initial, mask=np.array([[True, True], [True, False]]))


def test_arrays_are_read_only():
    p = small_pomdp()
    with pytest.raises(ValueError):
        p.emissions[0, 0, 0] = 1.0


def test_json_round_trip(tmp_path):
    p = small_pomdp(3, S=3, O=2, A=2, H=3)
    path = tmp_path / "m.json"
    p.save(path)
    q = TabularPOMDP.load(path)
    for name in ("transitions", "emissions", "rewards", "initial", "mask"):
        assert np.array_equal(getattr(p, name), getattr(q, name))
    assert q.state_labels == p.state_labels


def test_json_rejects_unknown_format():
    d = small_pomdp().to_dict()
    d["version"] = 99
    with pytest.raises(ValueError):
        TabularPOMDP.from_dict(d)


# exact evaluation against path-sum oracles


@settings(max_examples=25, deadline=None)
@given(dims)
def test_trajectory_probability_matches_state_path_sum(d):
    S, O, A, H, seed = d
    p = random_pomdp(S, O, A, H, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    obs = tuple(int(x) for x in rng.integers(O, size=H))
    acts = tuple(int(x) for x in rng.integers(A, size=H))
    assert trajectory_probability(p, obs, acts) == pytest.approx(oracles.path_probability(p, obs, acts), abs=1e-14)


@settings(max_examples=20, deadline=None)
@given(dims, st.booleans())
def test_enumeration_matches_oracle_law(d, stochastic):
    S, O, A, H, seed = d
    p = random_pomdp(S, O, A, H, np.random.default_rng(seed))
    pol = RandomHistoryPolicy(A, seed, stochastic=stochastic)
    law = oracles.trajectory_law(p, pol)
    got = {(t.obs, t.acts): q for t, q in enumerate_distribution(p, pol).items()}
    assert set(got) == set(law)
    for k, v in law.items():
        assert got[k] == pytest.approx(v, abs=1e-13)
    assert math.fsum(got.values()) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(dims)
def test_policy_value_forward_and_enumeration_agree_with_oracle(d):
    S, O, A, H, seed = d
    p = random_pomdp(S, O, A, H, np.random.default_rng(seed))
    for pol in (UniformPolicy(A), ActionSequencePolicy(tuple([A - 1] * H), A)):
        ref = oracles.value(p, pol)
        assert policy_value(p, pol, "forward") == pytest.approx(ref, abs=1e-12)
        assert policy_value(p, pol, "enumerate") == pytest.approx(ref, abs=1e-12)


def test_forward_rejects_history_policy():
    p = small_pomdp()
    with pytest.raises(ValueError):
        policy_value(p, RandomHistoryPolicy(2, 0), "forward")
    with pytest.raises(ValueError):
        policy_value(p, UniformPolicy(2), "bogus")


@settings(max_examples=15, deadline=None)
@given(dims)
def test_optimal_value_matches_oracle(d):
    S, O, A, H, seed = d
    p = random_pomdp(S, O, A, H, np.random.default_rng(seed))
    v, pol = optimal_value_bruteforce(p)
    assert v == pytest.approx(oracles.optimal_value(p), abs=1e-12)
    assert isinstance(pol, HistoryPolicy)
    assert policy_value(p, pol) == pytest.approx(v, abs=1e-12)


def test_optimal_value_dominates_random_policies():
    p = small_pomdp(7, S=3, O=2, A=3, H=3)
    v, _ = optimal_value_bruteforce(p)
    for seed in range(10):
        assert policy_value(p, RandomHistoryPolicy(3, seed)) <= v + 1e-12


def test_enumeration_cap():
    p = small_pomdp(S=2, O=3, A=2, H=4)
    with pytest.raises(EnumerationTooLarge):
        enumerate_distribution(p, UniformPolicy(2), cap=10)


def test_event_probability_complement():
    p = small_pomdp(1, S=2, O=2, A=2, H=3)
    pol = UniformPolicy(2)
    ev = lambda t: t.obs[0] == 0  # noqa: E731
    a = event_probability(p, pol, ev)
    b = event_probability(p, pol, lambda t: not ev(t))
    assert a + b == pytest.approx(1.0, abs=1e-12)
    assert a == pytest.approx(float(p.initial @ p.emissions[0][:, 0]), abs=1e-12)


def test_reactive_policy_value_matches_oracle():
    p = small_pomdp(4, S=2, O=2, A=2, H=3)
    pol = ReactivePolicy({(0, 0): 1, (1, 1): 1, (2, 0): 1}, 2)
    assert policy_value(p, pol) == pytest.approx(oracles.value(p, pol), abs=1e-12)


# sampling


def test_sample_trajectory_is_seeded():
    p = small_pomdp(2)
    a = sample_trajectory(p, UniformPolicy(2), 11, trace=True)
    b = sample_trajectory(p, UniformPolicy(2), 11, trace=True)
    assert a == b and a.states == b.states
    assert len(a.obs) == p.H


def _empirical(obs):
    keys, counts = np.unique(obs, axis=0, return_counts=True)
    return {tuple(int(x) for x in k): c / len(obs) for k, c in zip(keys, counts)}


@pytest.mark.parametrize("use_paths", [False, True])
def test_open_loop_sampler_law(use_paths):
    p = small_pomdp(5, S=3, O=2, A=2, H=3)
    acts = (1, 0, 1)
    paths = open_loop_paths(p, acts) if use_paths else None
    n = 200_000
    obs, _ = sample_open_loop(p, acts, n, np.random.default_rng(0), paths)
    emp = _empirical(obs)
    for o in np.ndindex(*(p.O,) * p.H):
        q = oracles.path_probability(p, o, acts)
        # 5-sigma binomial band
        assert abs(emp.get(o, 0.0) - q) <= 5 * math.sqrt(q * (1 - q) / n) + 1e-12


def test_open_loop_paths_probabilities():
    p = small_pomdp(6, S=2, O=3, A=2, H=3)
    acts = (0, 1, 0)
    paths = open_loop_paths(p, acts)
    assert paths.cdf[-1] == pytest.approx(1.0, abs=1e-12)
    marg = {}
    for o, q in zip(map(tuple, paths.obs), paths.probs):
        marg[o] = marg.get(o, 0.0) + q
    for o, q in marg.items():
        assert q == pytest.approx(oracles.path_probability(p, o, acts), abs=1e-13)


def test_open_loop_paths_cap():
    p = small_pomdp(S=3, O=3, A=2, H=4)
    assert open_loop_paths(p, (0,) * 4, cap=10) is None


def test_open_loop_prefix_stability():
    p = small_pomdp(8, S=2, O=2, A=2, H=3)
    paths = open_loop_paths(p, (0, 0, 0))
    for pth in (None, paths):
        a, _ = sample_open_loop(p, (0, 0, 0), 50, np.random.default_rng(3), pth)
        b, _ = sample_open_loop(p, (0, 0, 0), 500, np.random.default_rng(3), pth)
        assert np.array_equal(a, b[:50])
