import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from apo.envs import env_factory
from apo.errors import BadParam, EnvFault, NoCompletedEpisodes, ShapeMismatch
from apo.nets import CATEGORICAL, GAUSSIAN, VALUE, MlpSpec, init_params
from apo.rollout import (
    Box,
    Discrete,
    EnvDescriptor,
    EpisodeSummary,
    TrajectoryBatch,
    collect,
    episode_stats,
    gae,
    normalize_advantages,
)


class CountdownEnv:
    """Terminates after ``length`` steps; reward equals the step index."""

    def __init__(self, seed, length=3, max_episode_len=1000):
        self.length = length
        self.descriptor = EnvDescriptor(1, Discrete(2), max_episode_len)
        self.t = 0

    def reset(self):
        self.t = 0
        return np.array([0.0])

    def step(self, action):
        self.t += 1
        return np.array([float(self.t)]), float(self.t), self.t >= self.length


class BernoulliEnv:
    def __init__(self, seed, p=0.3):
        self.rng = np.random.default_rng(seed)
        self.p = p
        self.descriptor = EnvDescriptor(1, Discrete(2), 10)

    def reset(self):
        return np.zeros(1)

    def step(self, action):
        return np.zeros(1), float(self.rng.random() < self.p), True


class BrokenEnv(CountdownEnv):
    def step(self, action):
        obs, r, done = super().step(action)
        return obs, (math.nan if self.t == 2 else r), done


def nets(obs_dim, discrete=True, seed=0):
    rng = np.random.default_rng(seed)
    ps = MlpSpec(obs_dim, 2, (8,), CATEGORICAL if discrete else GAUSSIAN)
    vs = MlpSpec(obs_dim, 1, (8,), VALUE)
    return (init_params(ps, rng), ps), (init_params(vs, rng), vs)


def hand_batch(rewards, values, ends, terminated, boot):
    n = len(rewards)
    return TrajectoryBatch(
        obs=np.zeros((n, 1)), actions=np.zeros(n, dtype=np.int64), rewards=np.asarray(rewards, float),
        terminated=np.asarray(terminated), ends=np.asarray(ends), last_obs_values=np.asarray(boot, float),
        logp_old=np.zeros(n), values=np.asarray(values, float), episode_ids=np.zeros(n, dtype=np.int64),
        episodes=[], gamma=0.9)


class TestSpaces:
    def test_bad_spaces(self):
        with pytest.raises(BadParam):
            Discrete(0)
        with pytest.raises(BadParam):
            Box(2, (0.0,), (1.0, 1.0))
        with pytest.raises(BadParam):
            Box(1, (1.0,), (1.0,))
        with pytest.raises(BadParam):
            EnvDescriptor(0, Discrete(2))


class TestCollect:
    def test_shapes_and_episodes(self):
        pol, val = nets(1)
        b = collect(lambda s: CountdownEnv(s), pol, val, 10, seed=1, gamma=0.9)
        assert len(b) == 10 and b.obs.shape == (10, 1)
        assert b.terminated.tolist() == [False, False, True] * 3 + [False]
        assert b.ends[-1] and not b.terminated[-1]
        assert [e.length for e in b.episodes] == [3, 3, 3, 1]
        assert b.episodes[-1].cut and not any(e.cut for e in b.episodes[:-1])
        assert b.episodes[0].ret == 6.0
        assert b.episodes[0].disc_ret == pytest.approx(1 + 0.9 * 2 + 0.81 * 3)
        assert b.episode_ids.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2, 3]

    def test_truncation_bootstraps(self):
        pol, val = nets(1)
        b = collect(lambda s: CountdownEnv(s, length=100, max_episode_len=4), pol, val, 8, seed=0, gamma=0.9)
        assert b.ends.tolist() == [False, False, False, True] * 2
        assert not b.terminated.any()
        assert all(e.truncated for e in b.episodes)
        assert np.all(b.last_obs_values[b.ends] != 0.0)

    def test_seed_determinism_across_workers(self):
        pol, val = nets(4, discrete=False)
        make = env_factory("point_goal")
        a = collect(make, pol, val, 600, seed=7, gamma=0.99, shards=4, workers=1)
        b = collect(make, pol, val, 600, seed=7, gamma=0.99, shards=4, workers=4)
        for name in ("obs", "actions", "rewards", "ends", "logp_old", "values", "last_obs_values", "episode_ids"):
            assert np.array_equal(getattr(a, name), getattr(b, name)), name
        c = collect(make, pol, val, 600, seed=8, gamma=0.99, shards=4, workers=1)
        assert not np.array_equal(a.actions, c.actions)

    def test_workers_env_var(self, monkeypatch):
        from apo.rollout import default_workers

        monkeypatch.setenv("APO_THREADS", "3")
        assert default_workers() == 3
        monkeypatch.setenv("APO_THREADS", "junk")
        assert default_workers() == 1

    def test_env_fault(self):
        pol, val = nets(1)
        with pytest.raises(EnvFault):
            collect(lambda s: BrokenEnv(s), pol, val, 5, seed=0, gamma=0.9)

    def test_bad_steps(self):
        pol, val = nets(1)
        with pytest.raises(BadParam):
            collect(lambda s: CountdownEnv(s), pol, val, 0, seed=0, gamma=0.9)

    def test_stored_log_probs_match_policy(self):
        from apo.nets import forward

        pol, val = nets(4, discrete=False)
        b = collect(env_factory("point_goal"), pol, val, 50, seed=3, gamma=0.99)
        np.testing.assert_allclose(forward(*pol, b.obs).log_prob(b.actions), b.logp_old, rtol=1e-12)


class TestGae:
    def test_lambda_zero_is_td_error(self):
        b = hand_batch([1, 2, 3], [0.5, 0.2, 0.1], [False, False, True], [False, False, True], [0, 0, 0])
        adv, _ = gae(b, 0.9, 0.0, normalize=False)
        np.testing.assert_allclose(adv, [1 + 0.9 * 0.2 - 0.5, 2 + 0.9 * 0.1 - 0.2, 3 - 0.1])

    def test_lambda_one_is_return_minus_value(self):
        r = [1.0, 2.0, 3.0, 4.0]
        v = [0.3, -0.2, 0.7, 1.1]
        b = hand_batch(r, v, [False, False, False, True], [False, False, False, False], [0, 0, 0, 5.0])
        adv, ret = gae(b, 0.9, 1.0, normalize=False)
        g = 0.9
        expect_ret = [sum(g**j * r[t + j] for j in range(4 - t)) + g ** (4 - t) * 5.0 for t in range(4)]
        np.testing.assert_allclose(ret, expect_ret, rtol=1e-12)
        np.testing.assert_allclose(adv, np.array(expect_ret) - v, rtol=1e-12)

    def test_no_leak_across_segments(self):
        b = hand_batch([1, 1, 1, 1], [0, 0, 0, 0], [False, True, False, True], [False, True, False, True], [0] * 4)
        adv, _ = gae(b, 0.9, 0.95, normalize=False)
        np.testing.assert_allclose(adv[:2], adv[2:])

    def test_terminal_never_bootstraps(self):
        b = hand_batch([0.0], [0.0], [True], [True], [100.0])
        adv, _ = gae(b, 0.9, 0.95, normalize=False)
        assert adv[0] == 0.0

    def test_shape_mismatch(self):
        b = hand_batch([0.0, 1.0], [0.0], [False, True], [False, True], [0.0, 0.0])
        with pytest.raises(ShapeMismatch):
            gae(b, 0.9, 0.95)

    def test_fills_batch(self):
        b = hand_batch([1, 2, 3], [0.5, 0.2, 0.1], [False, False, True], [False, False, True], [0, 0, 0])
        adv, ret = gae(b, 0.9, 0.95)
        assert b.advantages is adv and b.returns is ret
        assert abs(adv.mean()) < 1e-12 and adv.std() == pytest.approx(1.0)
        np.testing.assert_allclose(b.raw_advantages + b.values, ret)


class TestNormalize:
    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50))
    def test_affine_keeps_argmax(self, xs):
        x = np.array(xs)
        y = normalize_advantages(x)
        if x.std() >= 1e-8:
            assert np.argmax(y) == np.argmax(x) or y[np.argmax(x)] == y.max()
            assert abs(y.mean()) < 1e-9

    def test_degenerate_centering_only(self):
        np.testing.assert_array_equal(normalize_advantages(np.full(5, 3.0)), np.zeros(5))


class TestEpisodeStats:
    def test_single_episode(self):
        st_ = episode_stats([EpisodeSummary(4.0, 3.0, 10, False, False)])
        assert st_.mean_return == st_.worst_return == 4.0 and st_.std_return == 0.0

    def test_one_two_three(self):
        eps = [EpisodeSummary(v, v, 1, False, False) for v in (1.0, 2.0, 3.0)]
        eps.append(EpisodeSummary(-50.0, -50.0, 1, True, True))
        st_ = episode_stats(eps)
        assert (st_.mean_return, st_.worst_return, st_.n_episodes) == (2.0, 1.0, 3)
        assert st_.std_return == pytest.approx(np.std([1, 2, 3], ddof=1))

    def test_truncated_episodes_flagged(self):
        eps = [EpisodeSummary(1.0, 1.0, 5, True, False), EpisodeSummary(2.0, 2.0, 3, False, False)]
        assert episode_stats(eps).n_truncated == 1

    def test_none_completed(self):
        with pytest.raises(NoCompletedEpisodes):
            episode_stats([EpisodeSummary(1.0, 1.0, 5, True, True)])

    def test_bernoulli_mean_within_three_sigma(self):
        pol, val = nets(1)
        p = 0.3
        b = collect(lambda s: BernoulliEnv(s, p), pol, val, 10_000, seed=11, gamma=0.9)
        st_ = episode_stats(b)
        assert st_.n_episodes == 10_000
        assert abs(st_.mean_return - p) <= 3 * math.sqrt(p * (1 - p) / 10_000)
