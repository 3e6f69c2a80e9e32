"""Built-in environments.

Every environment is built as ``env = factory(seed)`` and exposes
``descriptor``, ``reset() -> obs`` and ``step(action) -> (obs, reward,
terminated)``. Truncation at ``descriptor.max_episode_len`` is applied by the
rollout code. Each instance owns a Philox generator seeded at construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial

import numpy as np

from .errors import BadParam
from .rollout import Box, Discrete, EnvDescriptor
from .tabular import TabularMdp

DT = 0.02


def _rng(seed):
    return np.random.Generator(np.random.Philox(int(seed)))


# ---------------------------------------------------------------------------
# Tabular environments


class TabularEnv:
    """Step/reset view of a :class:`TabularMdp` with one-hot observations.

    ``restart_prob`` ends each step with that probability (a terminal, so
    undiscounted episode returns estimate discounted values when it equals
    ``1 - gamma``).
    """

    def __init__(self, mdp: TabularMdp, seed, max_episode_len=1000, restart_prob=0.0):
        if not 0.0 <= restart_prob <= 1.0:
            raise BadParam("restart_prob must lie in [0, 1]")
        self.mdp = mdp
        self.rng = _rng(seed)
        self.restart_prob = restart_prob
        self.descriptor = EnvDescriptor(mdp.n_states, Discrete(mdp.n_actions), max_episode_len)
        self._cdf = np.cumsum(mdp.trans, axis=2)
        self._mu_cdf = np.cumsum(mdp.init_dist)
        self.state = 0

    def _obs(self):
        o = np.zeros(self.mdp.n_states)
        o[self.state] = 1.0
        return o

    def reset(self):
        u = self.rng.random()
        self.state = min(int(np.searchsorted(self._mu_cdf, u * self._mu_cdf[-1], side="right")),
                         self.mdp.n_states - 1)
        return self._obs()

    def step(self, action):
        s, a = self.state, int(action)
        if not 0 <= a < self.mdp.n_actions:
            raise BadParam(f"action {a} outside [0, {self.mdp.n_actions})")
        cdf = self._cdf[s, a]
        nxt = min(int(np.searchsorted(cdf, self.rng.random() * cdf[-1], side="right")), self.mdp.n_states - 1)
        r = float(self.mdp.reward[s, a, nxt])
        self.state = nxt
        terminated = self.restart_prob > 0.0 and self.rng.random() < self.restart_prob
        return self._obs(), r, terminated


LEFT, RIGHT = 0, 1


def chain_mdp(n=5, slip=0.1, gamma=0.9) -> TabularMdp:
    """Chain of ``n`` states with walls at both ends.

    Action 0 moves left and 1 moves right; with probability ``slip`` the move
    is reversed. Every step taken from the right-end state pays 1. Episodes
    start at the left end.
    """
    if n < 2:
        raise BadParam("chain needs n >= 2")
    if not 0.0 <= slip < 1.0:
        raise BadParam("slip must lie in [0, 1)")
    trans = np.zeros((n, 2, n))
    for s in range(n):
        left, right = max(s - 1, 0), min(s + 1, n - 1)
        trans[s, RIGHT, right] += 1.0 - slip
        trans[s, RIGHT, left] += slip
        trans[s, LEFT, left] += 1.0 - slip
        trans[s, LEFT, right] += slip
    reward = np.zeros((n, 2, n))
    reward[n - 1] = 1.0
    return TabularMdp(trans, reward, np.eye(n)[0], gamma)


STEP_COST = -0.01
GOAL_REWARD = 1.0
MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0))  # up, down, left, right as (dx, dy)


def gridworld(width=4, height=4, goal=None, noise=0.1, gamma=0.9) -> TabularMdp:
    """Grid with reflective walls and an absorbing goal.

    State index is ``y * width + x``. With probability ``noise`` the move is
    replaced by a uniformly random one of the four. Entering the goal pays
    +1, every other step outside the goal costs 0.01, the goal pays nothing.
    Starts are uniform over non-goal cells.
    """
    if width < 1 or height < 1:
        raise BadParam("grid dimensions must be >= 1")
    if not 0.0 <= noise <= 1.0:
        raise BadParam("noise must lie in [0, 1]")
    gx, gy = (width - 1, height - 1) if goal is None else goal
    if not (0 <= gx < width and 0 <= gy < height):
        raise BadParam(f"goal {(gx, gy)} outside the grid")
    n = width * height
    g = gy * width + gx
    trans = np.zeros((n, 4, n))
    reward = np.zeros((n, 4, n))
    for s in range(n):
        if s == g:
            trans[s, :, s] = 1.0
            continue
        x, y = s % width, s // width
        dest = []
        for dx, dy in MOVES:
            nx, ny = x + dx, y + dy
            dest.append(ny * width + nx if 0 <= nx < width and 0 <= ny < height else s)
        for a in range(4):
            trans[s, a, dest[a]] += 1.0 - noise
            for b in range(4):
                trans[s, a, dest[b]] += noise / 4
        reward[s, :, :] = STEP_COST
        reward[s, :, g] = GOAL_REWARD
    mu = np.ones(n)
    if n > 1:
        mu[g] = 0.0
    return TabularMdp(trans, reward, mu / mu.sum(), gamma)


# ---------------------------------------------------------------------------
# Point-mass goal reaching


@dataclass(frozen=True)
class PointGoalConstants:
    arena: float = 2.0        # positions live in [-arena, arena]^2
    goal_radius: float = 0.3
    accel_gain: float = 4.0
    drag: float = 1.0
    dt: float = DT


class PointGoal:
    """2-D point mass steering to a goal that respawns when reached.

    Reward is the decrease in goal distance plus 1 whenever the new distance
    is inside ``goal_radius``; the goal then moves to a fresh uniform spot.
    Observation is ``(goal - pos, velocity)``.
    """

    def __init__(self, seed, max_episode_len=1000, constants=PointGoalConstants()):
        self.c = constants
        self.rng = _rng(seed)
        self.descriptor = EnvDescriptor(4, Box(2, (-1.0, -1.0), (1.0, 1.0)), max_episode_len)
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.goal = np.zeros(2)
        self.dist = 0.0
        self.goals_reached = 0

    def _spawn(self):
        return self.rng.uniform(-self.c.arena, self.c.arena, 2)

    def _obs(self):
        return np.concatenate([self.goal - self.pos, self.vel])

    def reset(self):
        self.pos = self._spawn()
        self.vel = np.zeros(2)
        self.goal = self._spawn()
        self.dist = float(np.linalg.norm(self.goal - self.pos))
        self.goals_reached = 0
        return self._obs()

    def step(self, action):
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        c = self.c
        self.vel = self.vel + c.dt * (c.accel_gain * a - c.drag * self.vel)
        new_pos = self.pos + c.dt * self.vel
        clipped = np.clip(new_pos, -c.arena, c.arena)
        self.vel = np.where(new_pos != clipped, 0.0, self.vel)
        self.pos = clipped
        d = float(np.linalg.norm(self.goal - self.pos))
        reward = self.dist - d
        if d < c.goal_radius:
            reward += 1.0
            self.goals_reached += 1
            self.goal = self._spawn()
            d = float(np.linalg.norm(self.goal - self.pos))
        self.dist = d
        return self._obs(), reward, False


# ---------------------------------------------------------------------------
# Classic control


@dataclass(frozen=True)
class CartPoleConstants:
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    force: float = 10.0
    dt: float = DT
    x_limit: float = 2.4
    theta_limit: float = 12 * 2 * math.pi / 360


class CartPole:
    """Cart-pole balancing with explicit Euler steps; +1 per step alive."""

    def __init__(self, seed, max_episode_len=500, constants=CartPoleConstants()):
        self.c = constants
        self.rng = _rng(seed)
        self.descriptor = EnvDescriptor(4, Discrete(2), max_episode_len)
        self.state = np.zeros(4)

    def reset(self):
        self.state = self.rng.uniform(-0.05, 0.05, 4)
        return self.state.copy()

    def dynamics(self, state, force):
        c = self.c
        x, x_dot, th, th_dot = state
        total = c.cart_mass + c.pole_mass
        pole_ml = c.pole_mass * c.half_length
        cos, sin = math.cos(th), math.sin(th)
        temp = (force + pole_ml * th_dot**2 * sin) / total
        th_acc = (c.gravity * sin - cos * temp) / (
            c.half_length * (4.0 / 3.0 - c.pole_mass * cos**2 / total))
        x_acc = temp - pole_ml * th_acc * cos / total
        return np.array([x_dot, x_acc, th_dot, th_acc])

    def step(self, action, force=None):
        if force is None:
            force = self.c.force if int(action) == 1 else -self.c.force
        self.state = self.state + self.c.dt * self.dynamics(self.state, force)
        x, _, th, _ = self.state
        terminated = abs(x) > self.c.x_limit or abs(th) > self.c.theta_limit
        return self.state.copy(), 1.0, bool(terminated)


@dataclass(frozen=True)
class PendulumConstants:
    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    max_torque: float = 2.0
    max_speed: float = 8.0
    dt: float = DT


class Pendulum:
    """Torque-limited swing-up; angle 0 is upright.

    Semi-implicit Euler: velocity first, then angle with the new velocity.
    """

    def __init__(self, seed, max_episode_len=200, constants=PendulumConstants()):
        self.c = constants
        self.rng = _rng(seed)
        self.descriptor = EnvDescriptor(3, Box(1, (-1.0,), (1.0,)), max_episode_len)
        self.theta = 0.0
        self.theta_dot = 0.0

    @property
    def omega_sq(self):
        return 3.0 * self.c.gravity / (2.0 * self.c.length)

    def energy(self):
        """Conserved quantity of the torque-free dynamics (per unit inertia)."""
        return 0.5 * self.theta_dot**2 + self.omega_sq * math.cos(self.theta)

    def _obs(self):
        return np.array([math.cos(self.theta), math.sin(self.theta), self.theta_dot])

    def reset(self):
        self.theta = self.rng.uniform(-math.pi, math.pi)
        self.theta_dot = self.rng.uniform(-1.0, 1.0)
        return self._obs()

    def step(self, action):
        c = self.c
        u = float(np.clip(np.asarray(action, dtype=np.float64).ravel()[0], -1.0, 1.0)) * c.max_torque
        angle = (self.theta + math.pi) % (2 * math.pi) - math.pi
        cost = angle**2 + 0.1 * self.theta_dot**2 + 0.001 * u**2
        acc = self.omega_sq * math.sin(self.theta) + 3.0 / (c.mass * c.length**2) * u
        self.theta_dot = float(np.clip(self.theta_dot + c.dt * acc, -c.max_speed, c.max_speed))
        self.theta = self.theta + c.dt * self.theta_dot
        return self._obs(), -cost, False


# ---------------------------------------------------------------------------
# Registry

ENV_PARAMS = {
    "chain": {"n": int, "slip": float, "gamma": float, "max_episode_len": int, "restart_prob": float},
    "grid": {"width": int, "height": int, "goal_x": int, "goal_y": int, "noise": float,
             "gamma": float, "max_episode_len": int, "restart_prob": float},
    "point_goal": {"max_episode_len": int},
    "cartpole": {"max_episode_len": int},
    "pendulum": {"max_episode_len": int},
}
TABULAR_IDS = ("chain", "grid")


def tabular_mdp_for(env_id, params=None) -> TabularMdp:
    """The exact MDP behind a tabular environment id."""
    p = dict(params or {})
    if env_id == "chain":
        return chain_mdp(p.get("n", 5), p.get("slip", 0.1), p.get("gamma", 0.9))
    if env_id == "grid":
        goal = None
        if "goal_x" in p or "goal_y" in p:
            goal = (p.get("goal_x", p.get("width", 4) - 1), p.get("goal_y", p.get("height", 4) - 1))
        return gridworld(p.get("width", 4), p.get("height", 4), goal, p.get("noise", 0.1), p.get("gamma", 0.9))
    raise BadParam(f"{env_id!r} is not a tabular environment")


def env_factory(env_id, params=None):
    """``seed -> env`` callable for a registry id and its parameters."""
    if env_id not in ENV_PARAMS:
        raise BadParam(f"unknown environment {env_id!r}; known: {sorted(ENV_PARAMS)}")
    p = dict(params or {})
    unknown = set(p) - set(ENV_PARAMS[env_id])
    if unknown:
        raise BadParam(f"unknown parameters for {env_id}: {sorted(unknown)}")
    if env_id in TABULAR_IDS:
        mdp = tabular_mdp_for(env_id, p)
        return partial(TabularEnv, mdp, max_episode_len=p.get("max_episode_len", 200),
                       restart_prob=p.get("restart_prob", 0.0))
    cls = {"point_goal": PointGoal, "cartpole": CartPole, "pendulum": Pendulum}[env_id]
    if "max_episode_len" in p:
        return partial(cls, max_episode_len=p["max_episode_len"])
    return cls
