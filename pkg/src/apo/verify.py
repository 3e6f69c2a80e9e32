"""Self-contained certificate suites behind ``apo verify``.

Each suite returns a list of :class:`Check` rows (name, passed, total) and
prints nothing itself; the command line formats them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .agents import exact_apo
from .envs import TABULAR_IDS, tabular_mdp_for
from .nets import CATEGORICAL, GAUSSIAN, MlpSpec, backward, forward, forward_cached, fvp, init_params, kl, log_prob_grad
from .surrogate import exact_theory_config, j_bounds, mv_bound, objective_m_k, vm_bound
from .tabular import TabularPolicy, evaluate, random_mdp

BOUND_SLACK = 1e-9
ANCHOR_TOL = 1e-7
MONOTONE_TOL = 1e-7
GRAD_TOL = 1e-4
FVP_TOL = 1e-3
K_VALUES = (0.5, 1.0, 2.0, 7.0)
MONOTONIC_K = (0.001, 7.0)


@dataclass
class Check:
    name: str
    passed: int
    total: int

    @property
    def ok(self):
        return self.passed == self.total


def random_pair(rng):
    """Random MDP (2-10 states, 2-4 actions) with an anchor policy and a nearby candidate."""
    n = int(rng.integers(2, 11))
    m = int(rng.integers(2, 5))
    mdp = random_mdp(rng, n, m, float(rng.uniform(0.5, 0.99)))
    logits = rng.normal(size=(n, m)) * rng.uniform(0.0, 3.0)
    old = TabularPolicy.from_logits(logits)
    new = TabularPolicy.from_logits(logits + rng.normal(size=(n, m)) * 10 ** rng.uniform(-3, 0))
    return mdp, old, new


def bounds_suite(seed=0, n=500) -> List[Check]:
    rng = np.random.default_rng(seed)
    names = ("J lower <= J", "J <= J upper", "MV <= MV bound", "VM <= VM bound", "M_k <= B_k", "anchor M_k = B_k")
    passed = dict.fromkeys(names, 0)
    for _ in range(n):
        mdp, old, new = random_pair(rng)
        k = float(rng.choice(K_VALUES))
        cfg = exact_theory_config(k=k, gamma=mdp.gamma)
        ev_old = evaluate(mdp, old, k)
        ev_new = evaluate(mdp, new, k)
        lo, hi = j_bounds(mdp, old, new, cfg)
        terms = objective_m_k(mdp, old, new, cfg, ev_old=ev_old)
        anchor = objective_m_k(mdp, old, old, cfg, ev_old=ev_old)
        passed["J lower <= J"] += lo <= ev_new.perf + BOUND_SLACK
        passed["J <= J upper"] += ev_new.perf <= hi + BOUND_SLACK
        passed["MV <= MV bound"] += ev_new.mean_variance <= mv_bound(mdp, old, new, cfg) + BOUND_SLACK
        passed["VM <= VM bound"] += ev_new.variance_mean <= vm_bound(mdp, old, new, cfg) + BOUND_SLACK
        passed["M_k <= B_k"] += terms.m_k <= ev_new.abs_bound + BOUND_SLACK
        passed["anchor M_k = B_k"] += abs(anchor.m_k - ev_old.abs_bound) <= ANCHOR_TOL
    return [Check(name, int(passed[name]), n) for name in names]


def monotonic_traces(seed=0, iterations=50, k=7.0, env_ids=TABULAR_IDS):
    """``{env_id: [ExactStep, ...]}`` from exact APO with a seeded random start."""
    out = {}
    for env_id in env_ids:
        mdp = tabular_mdp_for(env_id)
        rng = np.random.default_rng([seed, TABULAR_IDS.index(env_id)])
        out[env_id] = exact_apo(mdp, rng.normal(size=(mdp.n_states, mdp.n_actions)), k=k, iterations=iterations)
    return out


def is_monotone(trace, tol=MONOTONE_TOL):
    bounds = [s.bound for s in trace]
    return all(b1 >= b0 - tol for b0, b1 in zip(bounds, bounds[1:]))


def monotonic_suite(seed=0, iterations=50, report: Optional[Callable] = None) -> List[Check]:
    checks = []
    for k in MONOTONIC_K:
        for env_id, trace in monotonic_traces(seed, iterations, k).items():
            if report is not None:
                report(env_id, k, trace)
            checks.append(Check(f"{env_id} k={k:g} B_k non-decreasing", int(is_monotone(trace)), 1))
    return checks


def _rel_err(a, b, floor=1e-7):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _fd(f, x, idx, h=1e-5):
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        e = np.zeros_like(x)
        e[i] = h
        out[j] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def random_net(rng, family, max_params=None):
    while True:
        hidden = tuple(int(h) for h in rng.integers(2, 9, size=int(rng.integers(1, 3))))
        spec = MlpSpec(int(rng.integers(2, 6)), int(rng.integers(2, 4)), hidden, family)
        if max_params is None or spec.n_params <= max_params:
            return spec, init_params(spec, rng) + 0.3 * rng.normal(size=spec.n_params)


def weighted_log_prob(spec, obs, actions, weights):
    """``f(params) = mean(w * log pi(a|s))`` with its analytic gradient."""

    def value(p):
        return float(forward(p, spec, obs).log_prob(actions) @ weights) / len(weights)

    def gradient(p):
        dist, cache = forward_cached(p, spec, obs)
        g_out, g_ls = log_prob_grad(dist, actions)
        scale = (weights / len(weights))[:, None]
        return backward(cache, g_out * scale, None if g_ls is None else (g_ls * scale).sum(axis=0), p)

    return value, gradient


def gradient_errors(rng, family, coords=50, n=32):
    spec, params = random_net(rng, family)
    obs = rng.normal(size=(n, spec.input_dim))
    actions = forward(params, spec, obs).sample(rng)
    weights = rng.normal(size=n)
    value, gradient = weighted_log_prob(spec, obs, actions, weights)
    idx = rng.choice(spec.n_params, size=min(coords, spec.n_params), replace=False)
    return _rel_err(gradient(params)[idx], _fd(value, params, idx))


def fvp_error(rng, family, n=24, h=1e-4):
    spec, params = random_net(rng, family, max_params=60)
    obs = rng.normal(size=(n, spec.input_dim))
    anchor = forward(params, spec, obs)
    size = spec.n_params

    def f(p):
        return float(kl(forward(p, spec, obs), anchor).mean())

    hess = np.empty((size, size))
    eye = np.eye(size) * h
    for i in range(size):
        for j in range(i, size):
            val = (f(params + eye[i] + eye[j]) - f(params + eye[i] - eye[j])
                   - f(params - eye[i] + eye[j]) + f(params - eye[i] - eye[j])) / (4 * h * h)
            hess[i, j] = hess[j, i] = val
    v = rng.normal(size=size)
    ref = hess @ v
    return float(np.linalg.norm(fvp(params, spec, obs, v, damping=0.0) - ref) / np.linalg.norm(ref))


def gradients_suite(seed=0, nets=20, fvp_nets=3) -> List[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    for family in (CATEGORICAL, GAUSSIAN):
        errs = np.concatenate([gradient_errors(rng, family) for _ in range(nets)])
        checks.append(Check(f"{family} gradient vs central FD", int((errs <= GRAD_TOL).sum()), errs.size))
        fv = [fvp_error(rng, family) for _ in range(fvp_nets)]
        checks.append(Check(f"{family} FVP vs FD Hessian", sum(e <= FVP_TOL for e in fv), fvp_nets))
    return checks


SUITES = {"bounds": bounds_suite, "monotonic": monotonic_suite, "gradients": gradients_suite}
