"""Exact finite-MDP quantities and a brute-force Monte-Carlo oracle.

Conventions: ``trans[s, a, s']`` and ``reward[s, a, s']`` are dense tensors,
policies are row-stochastic ``probs[s, a]`` and the state transition matrix
under a policy is row-stochastic, ``P_pi[s, s'] = sum_a pi(a|s) P(s'|s,a)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidMdp,
    InvalidPolicy,
    NegativeK,
    NegativeVariance,
    SingularSystem,
)

PROB_TOL = 1e-12
CLAMP_TOL = 1e-9


@dataclass(frozen=True)
class TabularMdp:
    trans: np.ndarray
    reward: np.ndarray
    init_dist: np.ndarray
    gamma: float

    def __post_init__(self):
        trans = np.asarray(self.trans, dtype=np.float64)
        reward = np.asarray(self.reward, dtype=np.float64)
        mu = np.asarray(self.init_dist, dtype=np.float64)
        if trans.ndim != 3 or trans.shape[0] != trans.shape[2]:
            raise DimensionMismatch(f"trans must be (S, A, S), got {trans.shape}")
        if reward.shape != trans.shape:
            raise DimensionMismatch(f"reward shape {reward.shape} != trans shape {trans.shape}")
        if mu.shape != (trans.shape[0],):
            raise DimensionMismatch(f"init_dist shape {mu.shape} != ({trans.shape[0]},)")
        if np.any(trans < 0) or np.any(np.abs(trans.sum(axis=2) - 1.0) > PROB_TOL):
            raise InvalidMdp("transition rows must be non-negative and sum to 1")
        if np.any(mu < 0) or abs(mu.sum() - 1.0) > PROB_TOL:
            raise InvalidMdp("init_dist must be a probability vector")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidMdp(f"gamma must lie in [0, 1), got {self.gamma}")
        if not np.all(np.isfinite(reward)):
            raise InvalidMdp("rewards must be finite")
        object.__setattr__(self, "trans", trans)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "init_dist", mu)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.trans.shape[0]

    @property
    def n_actions(self) -> int:
        return self.trans.shape[1]


@dataclass(frozen=True)
class TabularPolicy:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise DimensionMismatch(f"policy must be (S, A), got {probs.shape}")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > PROB_TOL):
            raise InvalidPolicy("policy rows must be non-negative and sum to 1")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_logits(cls, logits):
        z = np.asarray(logits, dtype=np.float64)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        # renormalise once more so rows meet the 1e-12 contract exactly
        return cls(p / p.sum(axis=1, keepdims=True))

    @classmethod
    def uniform(cls, n_states, n_actions):
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))


def _check_pair(mdp: TabularMdp, pi: TabularPolicy):
    if pi.probs.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionMismatch(
            f"policy shape {pi.probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
        )


def policy_transition(mdp, pi):
    """Row-stochastic state-to-state matrix under ``pi``."""
    _check_pair(mdp, pi)
    return np.einsum("sa,sat->st", pi.probs, mdp.trans)


def policy_reward(mdp, pi):
    """Expected one-step reward per state under ``pi``."""
    _check_pair(mdp, pi)
    return np.einsum("sa,sat,sat->s", pi.probs, mdp.trans, mdp.reward)


def _solve(a, b):
    try:
        x = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystem("linear solve produced non-finite values")
    return x


def solve_values(mdp, pi):
    p_pi = policy_transition(mdp, pi)
    r_pi = policy_reward(mdp, pi)
    return _solve(np.eye(mdp.n_states) - mdp.gamma * p_pi, r_pi)


def performance(mdp, pi):
    return float(mdp.init_dist @ solve_values(mdp, pi))


def disc_state_dist(mdp, pi):
    """Normalised discounted state occupancy ``(1-g)(I - g P_pi^T)^-1 mu``."""
    p_pi = policy_transition(mdp, pi)
    n = mdp.n_states
    return (1.0 - mdp.gamma) * _solve(np.eye(n) - mdp.gamma * p_pi.T, mdp.init_dist)


def _clamp_nonneg(x, what):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < -CLAMP_TOL):
        raise NegativeVariance(f"{what} has entry {x.min():.3e} below -{CLAMP_TOL}")
    return np.maximum(x, 0.0)


def action_value_variance(mdp, pi, values=None):
    """Per-state variance of ``R + gamma V(s')`` under ``a ~ pi, s' ~ P``."""
    if values is None:
        values = solve_values(mdp, pi)
    q_sas = mdp.reward + mdp.gamma * values[None, None, :]
    second = np.einsum("sa,sat,sat->s", pi.probs, mdp.trans, q_sas**2)
    return _clamp_nonneg(second - values**2, "omega")


def return_variance_vector(mdp, pi, values=None):
    """Per-start-state return variance from the discount-squared linear system."""
    if values is None:
        values = solve_values(mdp, pi)
    omega = action_value_variance(mdp, pi, values)
    p_pi = policy_transition(mdp, pi)
    x = _solve(np.eye(mdp.n_states) - mdp.gamma**2 * p_pi, omega)
    return _clamp_nonneg(x, "return variance")


def variance_decomposition(mdp, pi):
    """Return ``(mean_variance, variance_mean, total)`` of the start-state return."""
    values = solve_values(mdp, pi)
    x = return_variance_vector(mdp, pi, values)
    mu = mdp.init_dist
    mv = float(mu @ x)
    j = float(mu @ values)
    vm = float(_clamp_nonneg(mu @ values**2 - j**2, "variance mean"))
    return mv, vm, mv + vm


def selberg_confidence(k, psi):
    return 1.0 - 1.0 / (k * k * psi + 1.0)


def absolute_bound(mdp, pi, k, psi=None):
    """Lower probability bound ``J - k * total_variance`` and its confidence.

    ``psi`` defaults to the policy's own exact total variance.
    """
    if k < 0:
        raise NegativeK(f"probability factor must be >= 0, got {k}")
    j = performance(mdp, pi)
    _, _, var = variance_decomposition(mdp, pi)
    if psi is None:
        psi = var
    return j - k * var, selberg_confidence(k, psi)


@dataclass(frozen=True)
class ExactEvaluation:
    values: np.ndarray
    q_values: np.ndarray
    q_sas: np.ndarray
    advantages: np.ndarray
    adv_sas: np.ndarray
    disc_state_dist: np.ndarray
    perf: float
    omega: np.ndarray
    var_vector: np.ndarray
    mean_variance: float
    variance_mean: float
    total_variance: float
    abs_bound: float
    k: float
    p_pi: np.ndarray = field(repr=False)
    second_moment: float = 0.0


def evaluate(mdp, pi, k=0.0) -> ExactEvaluation:
    """Every exact quantity of ``pi`` on ``mdp`` in one pass."""
    if k < 0:
        raise NegativeK(f"probability factor must be >= 0, got {k}")
    _check_pair(mdp, pi)
    g = mdp.gamma
    n = mdp.n_states
    p_pi = policy_transition(mdp, pi)
    r_pi = policy_reward(mdp, pi)
    v = _solve(np.eye(n) - g * p_pi, r_pi)
    q_sas = mdp.reward + g * v[None, None, :]
    q = np.einsum("sat,sat->sa", mdp.trans, q_sas)
    adv = q - v[:, None]
    adv_sas = q_sas - v[:, None, None]
    d = (1.0 - g) * _solve(np.eye(n) - g * p_pi.T, mdp.init_dist)
    omega = _clamp_nonneg(np.einsum("sa,sat,sat->s", pi.probs, mdp.trans, q_sas**2) - v**2, "omega")
    x = _clamp_nonneg(_solve(np.eye(n) - g * g * p_pi, omega), "return variance")
    mu = mdp.init_dist
    j = float(mu @ v)
    second = float(mu @ v**2)
    mv = float(mu @ x)
    vm = float(_clamp_nonneg(second - j * j, "variance mean"))
    total = mv + vm
    return ExactEvaluation(
        values=v, q_values=q, q_sas=q_sas, advantages=adv, adv_sas=adv_sas,
        disc_state_dist=d, perf=j, omega=omega, var_vector=x,
        mean_variance=mv, variance_mean=vm, total_variance=total,
        abs_bound=j - k * total, k=float(k), p_pi=p_pi, second_moment=second,
    )


# ---------------------------------------------------------------------------
# Random instances


def random_mdp(rng, n_states, n_actions, gamma, reward_scale=1.0, concentration=1.0):
    """Dense random MDP: Dirichlet transitions, uniform rewards in
    ``[-reward_scale, reward_scale]``, Dirichlet start distribution."""
    trans = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    reward = reward_scale * rng.uniform(-1.0, 1.0, (n_states, n_actions, n_states))
    mu = rng.dirichlet(np.ones(n_states))
    return TabularMdp(trans / trans.sum(axis=2, keepdims=True), reward, mu / mu.sum(), gamma)


def random_policy(rng, n_states, n_actions, temperature=1.0):
    return TabularPolicy.from_logits(temperature * rng.standard_normal((n_states, n_actions)))


# ---------------------------------------------------------------------------
# Monte-Carlo oracle


def truncation_horizon(gamma, r_max, tol=1e-6):
    """Smallest T with ``gamma**T * r_max / (1 - gamma) < tol``."""
    if gamma == 0.0 or r_max == 0.0:
        return 1
    t = math.log(tol * (1.0 - gamma) / r_max) / math.log(gamma)
    return max(1, int(math.ceil(t)) + 1)


def _alias_table(probs):
    """Vose alias table for one discrete distribution."""
    k = probs.shape[0]
    scaled = probs * k
    prob = np.zeros(k)
    alias = np.zeros(k, dtype=np.int64)
    small = [i for i in range(k) if scaled[i] < 1.0]
    large = [i for i in range(k) if scaled[i] >= 1.0]
    while small and large:
        lo, hi = small.pop(), large.pop()
        prob[lo] = scaled[lo]
        alias[lo] = hi
        scaled[hi] = scaled[hi] + scaled[lo] - 1.0
        (small if scaled[hi] < 1.0 else large).append(hi)
    for i in large + small:
        prob[i] = 1.0
        alias[i] = i
    return prob, alias


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@numba.njit(cache=True)
def _simulate(prob, alias, rew, nxt, starts, horizon, gamma, seed, out):
    # SplitMix64 stream; one uniform per step drives the alias draw
    state = np.uint64(seed)
    width = prob.shape[1]
    for i in range(starts.shape[0]):
        s = starts[i]
        disc = 1.0
        total = 0.0
        for _ in range(horizon):
            state += _GOLDEN
            z = state
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            z = z ^ (z >> np.uint64(31))
            x = (z >> np.uint64(11)) * (1.0 / 9007199254740992.0) * width
            j = min(int(x), width - 1)
            if x - j >= prob[s, j]:
                j = alias[s, j]
            total += disc * rew[s, j]
            disc *= gamma
            s = nxt[j]
        out[i] = total


@dataclass(frozen=True)
class MonteCarloStats:
    mean: float
    variance: float
    mean_se: float
    variance_se: float
    n: int
    horizon: int
    returns: np.ndarray = field(repr=False)

    def coverage(self, threshold):
        """Empirical fraction of sampled returns at or above ``threshold``."""
        return float(np.mean(self.returns >= threshold))


def monte_carlo_returns(mdp, pi, n_traj, seed, start_state=None, horizon=None, tol=1e-6):
    """Raw discounted returns of ``n_traj`` truncated rollouts."""
    _check_pair(mdp, pi)
    if horizon is None:
        horizon = truncation_horizon(mdp.gamma, float(np.abs(mdp.reward).max()), tol)
    n, m = mdp.n_states, mdp.n_actions
    # joint (a, s') table laid out so that index j = a * S + s'
    joint = (pi.probs[:, :, None] * mdp.trans).reshape(n, m * n)
    tables = [_alias_table(row / row.sum()) for row in joint]
    prob = np.stack([t[0] for t in tables])
    alias = np.stack([t[1] for t in tables])
    rew = mdp.reward.reshape(n, m * n)
    rng = np.random.Generator(np.random.Philox(seed))
    if start_state is None:
        starts = rng.choice(n, size=n_traj, p=mdp.init_dist).astype(np.int64)
    else:
        starts = np.full(n_traj, int(start_state), dtype=np.int64)
    out = np.empty(n_traj)
    kernel_seed = int(rng.integers(0, 2**63 - 1))
    nxt = np.arange(m * n, dtype=np.int64) % n
    _simulate(prob, alias, rew, nxt, starts, horizon, mdp.gamma, kernel_seed, out)
    return out, horizon


def monte_carlo_return_stats(mdp, pi, n_traj, seed, start_state=None, horizon=None, tol=1e-6):
    """Seeded sample mean/variance of truncated discounted returns.

    Starts are drawn from the initial distribution unless ``start_state`` is
    given. ``variance_se`` uses the fourth-central-moment approximation.
    """
    returns, horizon = monte_carlo_returns(mdp, pi, n_traj, seed, start_state, horizon, tol)
    mean = float(returns.mean())
    dev = returns - mean
    var = float(dev @ dev / max(n_traj - 1, 1))
    m4 = float(np.mean(dev**4))
    var_se = math.sqrt(max(m4 - var * var, 0.0) / n_traj)
    return MonteCarloStats(
        mean=mean, variance=var, mean_se=math.sqrt(var / n_traj), variance_se=var_se,
        n=n_traj, horizon=horizon, returns=returns,
    )


# ---------------------------------------------------------------------------
# Text format
#
#   mdp <n_states> <n_actions> <gamma>
#   mu <s> <p>
#   t <s> <a> <s'> <prob> <reward>
#
# Blank lines and '#' comments are ignored; unspecified transitions are zero.


def parse_mdp(text: str) -> TabularMdp:
    header = None
    trans = reward = mu = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "mdp":
                if header is not None or len(tok) != 4:
                    raise InvalidMdp(f"line {lineno}: malformed or repeated header")
                n, m, g = int(tok[1]), int(tok[2]), float(tok[3])
                if n < 1 or m < 1:
                    raise InvalidMdp(f"line {lineno}: state and action counts must be >= 1")
                header = (n, m, g)
                trans = np.zeros((n, m, n))
                reward = np.zeros((n, m, n))
                mu = np.zeros(n)
            elif header is None:
                raise InvalidMdp(f"line {lineno}: 'mdp' header must come first")
            elif tok[0] == "mu" and len(tok) == 3:
                s = int(tok[1])
                if not 0 <= s < header[0]:
                    raise IndexError(f"state {s} out of range")
                mu[s] = float(tok[2])
            elif tok[0] == "t" and len(tok) == 6:
                s, a, sp = int(tok[1]), int(tok[2]), int(tok[3])
                if not (0 <= s < header[0] and 0 <= sp < header[0] and 0 <= a < header[1]):
                    raise IndexError(f"index ({s}, {a}, {sp}) out of range")
                trans[s, a, sp] = float(tok[4])
                reward[s, a, sp] = float(tok[5])
            else:
                raise InvalidMdp(f"line {lineno}: unrecognised record {tok[0]!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, InvalidMdp):
                raise
            raise InvalidMdp(f"line {lineno}: {exc}") from exc
    if header is None:
        raise InvalidMdp("missing 'mdp' header")
    return TabularMdp(trans, reward, mu, header[2])


def format_mdp(mdp: TabularMdp) -> str:
    lines = [f"mdp {mdp.n_states} {mdp.n_actions} {float(mdp.gamma)!r}"]
    for s in range(mdp.n_states):
        if mdp.init_dist[s] != 0.0:
            lines.append(f"mu {s} {float(mdp.init_dist[s])!r}")
    for s, a, sp in zip(*np.nonzero(mdp.trans)):
        lines.append(f"t {s} {a} {sp} {float(mdp.trans[s, a, sp])!r} {float(mdp.reward[s, a, sp])!r}")
    return "\n".join(lines) + "\n"
