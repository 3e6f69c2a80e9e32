"""Seeded trajectory collection, GAE and episode statistics."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from .errors import BadParam, EnvFault, NoCompletedEpisodes, ShapeMismatch
from .nets import MlpSpec, forward

DEFAULT_MAX_EPISODE_LEN = 1000
NORM_STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Discrete:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise BadParam("Discrete needs n >= 1")


@dataclass(frozen=True)
class Box:
    dim: int
    low: Tuple[float, ...]
    high: Tuple[float, ...]

    def __post_init__(self):
        if self.dim < 1 or len(self.low) != self.dim or len(self.high) != self.dim:
            raise BadParam("Box bounds must match dim >= 1")
        if any(lo >= hi for lo, hi in zip(self.low, self.high)):
            raise BadParam("Box needs low < high elementwise")


@dataclass(frozen=True)
class EnvDescriptor:
    obs_dim: int
    action_space: Union[Discrete, Box]
    max_episode_len: int = DEFAULT_MAX_EPISODE_LEN

    def __post_init__(self):
        if self.obs_dim < 1 or self.max_episode_len < 1:
            raise BadParam("obs_dim and max_episode_len must be >= 1")

    @property
    def discrete(self):
        return isinstance(self.action_space, Discrete)

    @property
    def action_dim(self):
        return self.action_space.n if self.discrete else self.action_space.dim


@dataclass(frozen=True)
class EpisodeSummary:
    ret: float            # undiscounted
    disc_ret: float       # discounted with the batch gamma
    length: int
    truncated: bool       # stopped without a terminal state
    cut: bool             # stopped by the end of the batch; excluded from stats


@dataclass
class TrajectoryBatch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminated: np.ndarray   # environment terminal: no bootstrap
    ends: np.ndarray         # last step of a segment (terminal, truncated or cut)
    last_obs_values: np.ndarray  # V(s_{t+1}) where ends & ~terminated, else 0
    logp_old: np.ndarray
    values: np.ndarray
    episode_ids: np.ndarray
    episodes: List[EpisodeSummary]
    gamma: float
    advantages: Optional[np.ndarray] = None
    raw_advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.rewards)


def default_workers():
    try:
        return max(1, int(os.environ.get("APO_THREADS", "1")))
    except ValueError:
        return 1


def _shard_sizes(total, shards):
    base, extra = divmod(total, shards)
    return [base + (1 if i < extra else 0) for i in range(shards)]


def _act(params, spec, obs, rng, discrete):
    dist = forward(params, spec, obs[None, :])
    a = dist.sample(rng)
    lp = dist.log_prob(a)[0]
    return (int(a[0]) if discrete else a[0]), lp


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, np.uint64)[0] >> np.uint64(1))


def _collect_shard(make_env, seq, policy, value, steps, gamma):
    pol_params, pol_spec = policy
    val_params, val_spec = value
    env_seq, act_seq = seq.spawn(2)
    env = make_env(_seed_int(env_seq))
    desc = env.descriptor
    rng = np.random.Generator(np.random.Philox(_seed_int(act_seq)))
    obs_l, act_l, rew_l, term_l, end_l, boot_l, lp_l, ep_l = ([] for _ in range(8))
    episodes = []
    obs = env.reset()
    ep_ret = ep_disc = 0.0
    ep_len = 0
    ep_id = 0
    for t in range(steps):
        a, lp = _act(pol_params, pol_spec, obs, rng, desc.discrete)
        nxt, r, terminated = env.step(a)
        r = float(r)
        if not (math.isfinite(r) and np.all(np.isfinite(nxt))):
            raise EnvFault(f"environment returned non-finite values at step {t}")
        obs_l.append(obs)
        act_l.append(a)
        rew_l.append(r)
        lp_l.append(lp)
        ep_l.append(ep_id)
        ep_disc += gamma**ep_len * r
        ep_ret += r
        ep_len += 1
        truncated = not terminated and ep_len >= desc.max_episode_len
        cut = not (terminated or truncated) and t == steps - 1
        term_l.append(bool(terminated))
        end = terminated or truncated or cut
        end_l.append(end)
        boot_l.append(nxt if end and not terminated else None)
        if end:
            episodes.append(EpisodeSummary(ep_ret, ep_disc, ep_len, truncated or cut, cut))
            ep_ret = ep_disc = 0.0
            ep_len = 0
            ep_id += 1
            obs = env.reset() if t < steps - 1 else nxt
        else:
            obs = nxt
    obs_arr = np.asarray(obs_l, dtype=np.float64)
    values = forward(val_params, val_spec, obs_arr)
    boot = np.zeros(steps)
    idx = [i for i, b in enumerate(boot_l) if b is not None]
    if idx:
        boot[idx] = forward(val_params, val_spec, np.asarray([boot_l[i] for i in idx]))
    dtype = np.int64 if desc.discrete else np.float64
    return dict(
        obs=obs_arr, actions=np.asarray(act_l, dtype=dtype), rewards=np.asarray(rew_l),
        terminated=np.asarray(term_l), ends=np.asarray(end_l), last_obs_values=boot,
        logp_old=np.asarray(lp_l), values=values, episode_ids=np.asarray(ep_l), episodes=episodes,
    )


def collect(make_env: Callable, policy, value, total_steps: int, seed: int, gamma: float,
            shards: int = 1, workers: Optional[int] = None) -> TrajectoryBatch:
    """Roll out ``total_steps`` transitions split over ``shards`` env instances.

    ``policy`` and ``value`` are ``(params, MlpSpec)`` snapshots. Each shard
    has its own seed derived from ``seed`` and its index, and shards are
    concatenated in index order, so the result does not depend on
    ``workers`` (which defaults to ``APO_THREADS``).
    """
    if total_steps < 1:
        raise BadParam("total_steps must be >= 1")
    shards = max(1, min(int(shards), total_steps))
    seqs = np.random.SeedSequence(seed).spawn(shards)
    sizes = _shard_sizes(total_steps, shards)
    workers = default_workers() if workers is None else max(1, int(workers))
    jobs = [(make_env, seqs[i], policy, value, sizes[i], gamma) for i in range(shards)]
    if workers > 1 and shards > 1:
        with ThreadPoolExecutor(max_workers=min(workers, shards)) as pool:
            parts = list(pool.map(lambda j: _collect_shard(*j), jobs))
    else:
        parts = [_collect_shard(*j) for j in jobs]
    offset = 0
    for part in parts:
        part["episode_ids"] = part["episode_ids"] + offset
        offset += len(part["episodes"])
    cat = {k: np.concatenate([p[k] for p in parts]) for k in parts[0] if k != "episodes"}
    episodes = [e for p in parts for e in p["episodes"]]
    return TrajectoryBatch(episodes=episodes, gamma=gamma, **cat)


def gae(batch: TrajectoryBatch, gamma: float, lam: float, normalize: bool = True):
    """Generalized advantage estimates and value targets.

    The value after a segment end is bootstrapped unless the environment
    terminated. Fills ``batch.advantages`` (normalized if asked),
    ``batch.raw_advantages`` and ``batch.returns`` and returns the first and last.
    """
    n = len(batch)
    if batch.values.shape != (n,) or batch.last_obs_values.shape != (n,):
        raise ShapeMismatch("value estimates must align with transitions")
    next_values = np.empty(n)
    next_values[:-1] = batch.values[1:]
    next_values[-1] = 0.0
    next_values = np.where(batch.ends, batch.last_obs_values, next_values)
    next_values = np.where(batch.terminated, 0.0, next_values)
    deltas = batch.rewards + gamma * next_values - batch.values
    adv = np.empty(n)
    running = 0.0
    decay = gamma * lam
    for t in range(n - 1, -1, -1):
        if batch.ends[t]:
            running = 0.0
        running = deltas[t] + decay * running
        adv[t] = running
    returns = adv + batch.values
    batch.raw_advantages = adv
    batch.returns = returns
    batch.advantages = normalize_advantages(adv) if normalize else adv.copy()
    return batch.advantages, returns


def normalize_advantages(adv):
    centered = adv - adv.mean()
    std = centered.std()
    if std < NORM_STD_FLOOR:
        return centered
    return centered / std


@dataclass(frozen=True)
class EpisodeStats:
    mean_return: float
    worst_return: float
    std_return: float
    n_episodes: int
    mean_disc_return: float
    var_disc_return: float
    n_truncated: int


def episode_stats(batch_or_episodes) -> EpisodeStats:
    """Return statistics over episodes that ended inside the batch.

    Episodes truncated at ``max_episode_len`` count; the one cut off by the
    end of the batch does not.
    """
    eps = batch_or_episodes.episodes if isinstance(batch_or_episodes, TrajectoryBatch) else batch_or_episodes
    done = [e for e in eps if not e.cut]
    if not done:
        raise NoCompletedEpisodes("no episode finished inside the batch")
    rets = np.array([e.ret for e in done])
    disc = np.array([e.disc_ret for e in done])
    return EpisodeStats(
        mean_return=float(rets.mean()),
        worst_return=float(rets.min()),
        std_return=float(rets.std(ddof=1)) if len(rets) > 1 else 0.0,
        n_episodes=len(done),
        mean_disc_return=float(disc.mean()),
        var_disc_return=float(disc.var(ddof=1)) if len(disc) > 1 else 0.0,
        n_truncated=sum(e.truncated for e in done),
    )
