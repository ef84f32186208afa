import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from bosa import envs
from bosa.envs import PENDULUM, POINT_MASS, BehaviorSpec, EnvState


def test_spec_validation():
    with pytest.raises(ValueError):
        envs.make_spec(POINT_MASS, mass_scale=0.0)
    with pytest.raises(ValueError):
        envs.make_spec(POINT_MASS, joint_noise=-0.1)
    with pytest.raises(ValueError):
        envs.make_spec(POINT_MASS, horizon=0)
    with pytest.raises(ValueError):
        envs.make_spec(POINT_MASS, reward_id="upright-cos")
    with pytest.raises(ValueError):
        envs.make_spec("cheetah")
    with pytest.raises(ValueError):
        envs.EnvSpec(POINT_MASS, 3, 2)


def test_spec_round_trip():
    spec = envs.make_spec(PENDULUM, mass_scale=0.5, joint_noise=0.05)
    assert envs.EnvSpec.from_dict(spec.to_dict()) == spec


def test_degenerate_reset_is_origin(rng):
    spec = envs.make_spec(POINT_MASS, init_std=0.0)
    assert np.array_equal(envs.reset(spec, rng).state, np.zeros(4))


def test_reset_is_deterministic_per_stream():
    spec = envs.make_spec(POINT_MASS)
    a = envs.reset(spec, np.random.default_rng(3))
    b = envs.reset(spec, np.random.default_rng(3))
    assert np.array_equal(a.state, b.state) and a.t == b.t == 0


@pytest.mark.parametrize("family", [POINT_MASS, PENDULUM])
def test_reset_mean_matches_family(family):
    spec = envs.make_spec(family)
    fam = spec.definition
    g = np.random.default_rng(0)
    n = 10_000
    states = np.stack([envs.reset(spec, g).state for _ in range(n)])
    if family == POINT_MASS:
        sample, mean = states[:, :2], np.asarray(fam.init_mean[:2])
    else:
        sample = np.stack([np.arctan2(states[:, 1], states[:, 0]), states[:, 2]], 1)
        mean = np.asarray(fam.init_mean)
    assert np.all(np.abs(sample.mean(0) - mean) < 3 * fam.init_std / math.sqrt(n))


@pytest.mark.parametrize("mass", [0.5, 1.0, 2.0])
def test_zero_action_at_rest_is_fixed_point(mass):
    spec = envs.make_spec(POINT_MASS, mass_scale=mass)
    s = EnvState(np.array([0.3, -0.2, 0.0, 0.0]))
    nxt, _, _ = envs.step(spec, s, np.zeros(2))
    assert np.array_equal(nxt.state, s.state)


@pytest.mark.parametrize("family", [POINT_MASS, PENDULUM])
def test_mass_shift_is_observable(family):
    a = envs.make_spec(family)
    b = a.shifted(mass_scale=2.0)
    s = envs.reset(a, np.random.default_rng(0))
    act = np.full(a.action_dim, 0.7)
    assert not np.allclose(envs.step(a, s, act)[0].state, envs.step(b, s, act)[0].state)


def test_joint_noise_bound():
    spec = envs.make_spec(POINT_MASS, joint_noise=0.05)
    g = np.random.default_rng(1)
    for _ in range(1000):
        cmd = g.uniform(-1.5, 1.5, 2)
        ex = envs.executed_action(spec, cmd, g)
        assert np.all(np.abs(ex - np.clip(cmd, -1, 1)) <= 0.05)


def test_step_rejects_bad_actions():
    spec = envs.make_spec(POINT_MASS)
    s = envs.reset(spec, np.random.default_rng(0))
    with pytest.raises(ValueError):
        envs.step(spec, s, np.array([math.nan, 0.0]))
    with pytest.raises(ValueError):
        envs.step(spec, s, np.zeros(3))


def test_no_steps_after_horizon():
    spec = envs.make_spec(POINT_MASS, horizon=3)
    s = envs.reset(spec, np.random.default_rng(0))
    done = False
    for _ in range(3):
        assert not done
        s, _, done = envs.step(spec, s, np.zeros(2))
    assert done and s.t == 3
    with pytest.raises(RuntimeError):
        envs.step(spec, s, np.zeros(2))


def test_pendulum_failure_terminates():
    spec = envs.make_spec(PENDULUM)
    th = 1.0
    s = EnvState(np.array([math.cos(th), math.sin(th), 3.0]))
    _, _, done = envs.step(spec, s, np.zeros(1))
    assert done


@settings(max_examples=60, deadline=None)
@given(
    family=st.sampled_from([POINT_MASS, PENDULUM]),
    mass=st.floats(0.1, 5.0),
    noise=st.floats(0.0, 0.5),
    seed=st.integers(0, 2**16),
)
def test_reward_shared_across_domains(family, mass, noise, seed):
    g = np.random.default_rng(seed)
    a = envs.make_spec(family)
    b = a.shifted(mass_scale=mass, joint_noise=noise)
    s = envs.reset(a, g)
    act = g.uniform(-1, 1, a.action_dim)
    assert envs.step(a, s, act, g)[1] == envs.step(b, s, act, g)[1]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16), family=st.sampled_from([POINT_MASS, PENDULUM]))
def test_noise_free_dynamics_are_pure(seed, family):
    g = np.random.default_rng(seed)
    spec = envs.make_spec(family)
    s = envs.reset(spec, g)
    act = g.uniform(-1, 1, spec.action_dim)
    assert np.array_equal(envs.step(spec, s, act)[0].state, envs.step(spec, s, act)[0].state)


def test_random_tier_is_uniform():
    spec = envs.make_spec(POINT_MASS)
    g = np.random.default_rng(2)
    s = envs.reset(spec, g)
    draws = np.stack([envs.scripted_policy(spec, BehaviorSpec("random", 0.3), s, g) for _ in range(10_000)])
    for d in range(2):
        assert stats.kstest(draws[:, d], stats.uniform(-1, 2).cdf).pvalue > 0.01


def test_expert_without_noise_is_deterministic(rng):
    spec = envs.make_spec(POINT_MASS)
    s = envs.reset(spec, rng)
    b = BehaviorSpec("expert", 0.0)
    assert np.array_equal(envs.scripted_policy(spec, b, s, rng), envs.scripted_policy(spec, b, s, rng))


@pytest.mark.parametrize("family", [POINT_MASS, PENDULUM])
def test_expert_beats_random_fivefold(family):
    spec = envs.make_spec(family)
    g = np.random.default_rng(0)
    rnd = envs.rollout_returns(spec, lambda s, r: envs.scripted_policy(spec, BehaviorSpec("random", 0.0), s, r), 100, g)
    exp = envs.rollout_returns(spec, lambda s, r: envs.scripted_policy(spec, BehaviorSpec("expert", 0.0), s, r), 100, g)
    assert exp.mean() >= 5 * rnd.mean()


@pytest.mark.parametrize("family", [POINT_MASS, PENDULUM])
def test_tiers_are_ordered(family):
    spec = envs.make_spec(family)
    g = np.random.default_rng(4)
    means = {
        q: envs.rollout_returns(spec, lambda s, r, q=q: envs.scripted_policy(spec, BehaviorSpec(q), s, r), 100, g).mean()
        for q in ("random", "medium", "expert")
    }
    assert means["random"] < means["medium"] < means["expert"]


@pytest.mark.parametrize("family", [POINT_MASS, PENDULUM])
def test_stored_references_match_monte_carlo(family):
    lo, hi = envs.references(family)
    r_lo, r_hi = envs.reference_returns(family, n_episodes=200, seed=99)
    assert r_lo == pytest.approx(lo, rel=0.1, abs=0.5)
    assert r_hi == pytest.approx(hi, rel=0.05)


def test_behavior_spec_validation():
    with pytest.raises(ValueError):
        BehaviorSpec("great")
    with pytest.raises(ValueError):
        BehaviorSpec("medium", -1.0)
