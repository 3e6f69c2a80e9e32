"""End-to-end acceptance checks at their stated tolerances.

Each test records one PASS/FAIL line (printed in the terminal summary) and
then asserts. The desk-learning runs are shared between the trust-region and
learning checks through a session fixture.
"""
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from apo.agents import exact_apo
from apo.bench import normalized_score
from apo.config import load_run_config
from apo.envs import tabular_mdp_for
from apo.errors import UnsupportedSignCase
from apo.nets import (
    CATEGORICAL,
    GAUSSIAN,
    MlpSpec,
    backward,
    forward,
    forward_cached,
    fvp,
    init_params,
    kl,
    log_prob_grad,
)
from apo.surrogate import exact_theory_config, j_bounds, mv_bound, objective_m_k, vm_bound
from apo.tabular import (
    TabularPolicy,
    evaluate,
    monte_carlo_return_stats,
    random_mdp,
    random_policy,
    return_variance_vector,
)
from apo.train import train_run

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
TRUST = 0.02
DESK_SEEDS = (0, 1, 2, 3, 4)
GOALS_THRESHOLD = 2.0


def random_triple(rng):
    n = int(rng.integers(2, 11))
    m = int(rng.integers(2, 5))
    mdp = random_mdp(rng, n, m, float(rng.uniform(0.5, 0.99)))
    logits = rng.normal(size=(n, m)) * rng.uniform(0.0, 3.0)
    old = TabularPolicy.from_logits(logits)
    new = TabularPolicy.from_logits(logits + rng.normal(size=(n, m)) * 10 ** rng.uniform(-3, 0))
    return mdp, old, new


def test_sobel_variance_matches_monte_carlo(acceptance_log):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    covered = total = 0
    for i in range(100):
        n = int(rng.integers(2, 11))
        m = int(rng.integers(2, 5))
        mdp = random_mdp(rng, n, m, float(rng.uniform(0.5, 0.9)))
        pi = random_policy(rng, n, m)
        exact = return_variance_vector(mdp, pi)
        for s in range(n):
            mc = monte_carlo_return_stats(mdp, pi, 100_000, seed=1000 * i + s, start_state=s)
            covered += abs(mc.variance - exact[s]) <= 3 * mc.variance_se + 1e-9
            total += 1
    elapsed = time.perf_counter() - start
    frac = covered / total
    ok = frac >= 0.99 and elapsed < 120
    acceptance_log("sobel variance vs Monte Carlo", ok,
                   f"{covered}/{total} states within 3 se ({frac:.2%}, need >= 99%), {elapsed:.1f}s (< 120s)")
    assert ok


def test_selberg_coverage(acceptance_log):
    rng = np.random.default_rng(7)
    n_traj = 100_000
    worst_margin = math.inf
    failures = []
    for i in range(20):
        n = int(rng.integers(2, 11))
        m = int(rng.integers(2, 5))
        mdp = random_mdp(rng, n, m, float(rng.uniform(0.5, 0.95)))
        pi = random_policy(rng, n, m)
        mc = monte_carlo_return_stats(mdp, pi, n_traj, seed=500 + i)
        for k in (0.5, 1.0, 2.0, 7.0):
            ev = evaluate(mdp, pi, k)
            p = 1.0 - 1.0 / (k * k * ev.total_variance + 1.0)
            sigma = math.sqrt(max(p * (1 - p), 1e-300) / n_traj)
            margin = mc.coverage(ev.abs_bound) - (p - 3 * sigma)
            worst_margin = min(worst_margin, margin)
            if margin < 0:
                failures.append((i, k))
    ok = not failures
    acceptance_log("selberg coverage", ok,
                   f"80 (MDP, k) cases, {len(failures)} below p - 3 sigma, worst margin {worst_margin:.4f}")
    assert ok


def test_bound_suite(acceptance_log):
    rng = np.random.default_rng(31)
    start = time.perf_counter()
    violations = {"J^l <= J": 0, "J <= J^u": 0, "MV": 0, "VM": 0, "M_k <= B_k": 0}
    for _ in range(500):
        mdp, old, new = random_triple(rng)
        k = float(rng.choice([0.5, 1.0, 2.0, 7.0]))
        cfg = exact_theory_config(k=k, gamma=mdp.gamma)
        ev_old = evaluate(mdp, old, k)
        ev_new = evaluate(mdp, new, k)
        lo, hi = j_bounds(mdp, old, new, cfg)
        violations["J^l <= J"] += lo > ev_new.perf + 1e-9
        violations["J <= J^u"] += ev_new.perf > hi + 1e-9
        violations["MV"] += ev_new.mean_variance > mv_bound(mdp, old, new, cfg) + 1e-9
        violations["VM"] += ev_new.variance_mean > vm_bound(mdp, old, new, cfg) + 1e-9
        violations["M_k <= B_k"] += objective_m_k(mdp, old, new, cfg, ev_old=ev_old).m_k > ev_new.abs_bound + 1e-9
    elapsed = time.perf_counter() - start
    ok = sum(violations.values()) == 0 and elapsed < 120
    detail = ", ".join(f"{k} {v}" for k, v in violations.items())
    acceptance_log("bound suite", ok, f"500 triples, violations: {detail}; {elapsed:.1f}s")
    assert ok


def test_anchor_tightness(acceptance_log):
    rng = np.random.default_rng(41)
    worst = 0.0
    for _ in range(1000):
        mdp, old, _ = random_triple(rng)
        k = float(rng.choice([0.5, 1.0, 2.0, 7.0]))
        cfg = exact_theory_config(k=k, gamma=mdp.gamma)
        ev = evaluate(mdp, old, k)
        worst = max(worst, abs(objective_m_k(mdp, old, old, cfg, ev_old=ev).m_k - ev.abs_bound))
    ok = worst <= 1e-7
    acceptance_log("anchor tightness", ok, f"max |M_k(pi, pi) - B_k(pi)| = {worst:.2e} over 1000 triples (<= 1e-7)")
    assert ok


def test_monotonicity_certificate(acceptance_log):
    start = time.perf_counter()
    worst_drop = 0.0
    accepted = {}
    for k in (0.001, 7.0):
        for env_id in ("chain", "grid"):
            mdp = tabular_mdp_for(env_id)
            for seed in range(5):
                rng = np.random.default_rng([seed, 11])
                trace = exact_apo(mdp, rng.normal(size=(mdp.n_states, mdp.n_actions)), k=k, iterations=50)
                b = np.array([s.bound for s in trace])
                worst_drop = max(worst_drop, float(np.max(b[:-1] - b[1:])))
                accepted[(k, env_id)] = accepted.get((k, env_id), 0) + sum(s.accepted for s in trace)
    elapsed = time.perf_counter() - start
    moving = all(accepted[(0.001, e)] > 0 for e in ("chain", "grid"))
    ok = worst_drop <= 1e-7 and moving and elapsed < 300
    detail = ", ".join(f"{e} k={k:g}: {n}/250 accepted" for (k, e), n in accepted.items())
    acceptance_log("exact APO monotonicity", ok, f"largest B_k drop {worst_drop:.2e} (<= 1e-7); {detail}; {elapsed:.1f}s")
    assert ok


def _rel(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-7)


def test_gradient_and_fvp_certificates(acceptance_log):
    rng = np.random.default_rng(61)
    worst_grad = 0.0
    worst_fvp = 0.0
    h = 1e-5
    for family in (CATEGORICAL, GAUSSIAN):
        for _ in range(20):
            spec = MlpSpec(int(rng.integers(2, 6)), int(rng.integers(2, 4)), (int(rng.integers(4, 9)),) * 2, family)
            params = init_params(spec, rng) + 0.3 * rng.normal(size=spec.n_params)
            obs = rng.normal(size=(32, spec.input_dim))
            actions = forward(params, spec, obs).sample(rng)
            w = rng.normal(size=32) / 32

            def f(p):
                return float(forward(p, spec, obs).log_prob(actions) @ w)

            dist, cache = forward_cached(params, spec, obs)
            g_out, g_ls = log_prob_grad(dist, actions)
            g = backward(cache, g_out * w[:, None], None if g_ls is None else (g_ls * w[:, None]).sum(axis=0), params)
            idx = rng.choice(spec.n_params, size=min(50, spec.n_params), replace=False)
            fd = np.array([(f(params + h * np.eye(spec.n_params)[i]) - f(params - h * np.eye(spec.n_params)[i])) / (2 * h)
                           for i in idx])
            worst_grad = max(worst_grad, float(_rel(g[idx], fd).max()))
        for _ in range(3):
            spec = MlpSpec(3, 2, (int(rng.integers(3, 6)),), family)
            assert spec.n_params <= 60
            params = init_params(spec, rng) + 0.3 * rng.normal(size=spec.n_params)
            obs = rng.normal(size=(24, 3))
            anchor = forward(params, spec, obs)
            n = spec.n_params
            eye = np.eye(n) * 1e-4

            def mkl(p):
                return float(kl(forward(p, spec, obs), anchor).mean())

            hess = np.empty((n, n))
            for i in range(n):
                for j in range(i, n):
                    hess[i, j] = hess[j, i] = (mkl(params + eye[i] + eye[j]) - mkl(params + eye[i] - eye[j])
                                               - mkl(params - eye[i] + eye[j]) + mkl(params - eye[i] - eye[j])) / 4e-8
            v = rng.normal(size=n)
            ref = hess @ v
            worst_fvp = max(worst_fvp, float(np.linalg.norm(fvp(params, spec, obs, v, damping=0.0) - ref) / np.linalg.norm(ref)))
    ok = worst_grad <= 1e-4 and worst_fvp <= 1e-3
    acceptance_log("gradient and FVP certificates", ok,
                   f"worst gradient rel err {worst_grad:.2e} (<= 1e-4, 50 coords x 20 nets x 2 families), "
                   f"worst FVP rel err {worst_fvp:.2e} (<= 1e-3)")
    assert ok


def _desk_config(algorithm):
    return load_run_config((CONFIGS / f"point_goal_{algorithm}.cfg").read_text())


@pytest.fixture(scope="session")
def desk_runs():
    """Five-seed point-goal runs for apo and papo, with wall time per algorithm."""
    out = {}
    for algorithm in ("apo", "papo"):
        cfg = _desk_config(algorithm)
        assert cfg.epochs == 50 and cfg.steps_per_epoch == 4000 and cfg.seeds == DESK_SEEDS
        start = time.perf_counter()
        results = [train_run(cfg, seed) for seed in cfg.seeds]
        out[algorithm] = (results, time.perf_counter() - start)
    return out


def test_trust_region_safety(desk_runs, acceptance_log):
    apo_reports = desk_runs["apo"][0][0].reports
    trpo_reports = train_run(_desk_config("trpo"), 0).reports
    bad = 0
    accepted = 0
    for rep in apo_reports + trpo_reports:
        if rep.accepted:
            accepted += 1
            bad += not (rep.kl_after <= TRUST + 1e-8 and rep.objective_after >= rep.objective_before - 1e-12)
    papo_kls = [kl_ for res in desk_runs["papo"][0] for rep in res.reports for kl_ in rep.iterate_kls]
    papo_max = max(papo_kls)
    ok = bad == 0 and accepted > 0 and papo_max <= TRUST
    acceptance_log("trust-region safety", ok,
                   f"APO+TRPO {accepted}/{len(apo_reports) + len(trpo_reports)} accepted, {bad} unsafe; "
                   f"PAPO max iterate KL {papo_max:.4f} over {len(papo_kls)} iterates (<= {TRUST})")
    assert ok


def _same_run(a, b):
    same_records = a.records == b.records
    same_params = np.array_equal(a.policy_params, b.policy_params) and np.array_equal(a.value_params, b.value_params)
    return same_records and same_params


def test_reduction_identities(acceptance_log):
    results = {}
    for algorithm in ("apo", "trpo", "papo", "ppo"):
        cfg = _desk_config(algorithm)
        agent = replace(cfg.agent, k=0.0)
        cfg = replace(cfg, agent=agent, epochs=10, record_wallclock=False)
        results[algorithm] = train_run(cfg, 0)
    apo_trpo = _same_run(results["apo"], results["trpo"])
    papo_ppo = _same_run(results["papo"], results["ppo"])
    ok = apo_trpo and papo_ppo
    acceptance_log("k = 0 reductions", ok,
                   f"APO == TRPO bitwise: {apo_trpo}; PAPO == PPO bitwise: {papo_ppo} (10 epochs, point_goal)")
    assert ok


def test_desk_learning(desk_runs, acceptance_log):
    parts = []
    ok = True
    for algorithm in ("apo", "papo"):
        results, elapsed = desk_runs[algorithm]
        reached = 0
        worst_ok = 0
        finals = []
        peaks = []
        for res in results:
            last = res.records[-20:]
            final_mean = float(np.mean([r.mean_return for r in last]))
            finals.append(final_mean)
            peaks.append(max(r.mean_return for r in res.records))
            reached += final_mean >= GOALS_THRESHOLD
            worst_ok += min(r.worst_return for r in last) >= res.records[0].worst_return
        algo_ok = reached >= 4 and worst_ok == len(results) and elapsed < 900
        ok = ok and algo_ok
        parts.append(f"{algorithm}: last-20 mean {'/'.join(f'{v:.1f}' for v in finals)}, "
                     f"peak {'/'.join(f'{v:.1f}' for v in peaks)}, {reached}/5 >= {GOALS_THRESHOLD}, "
                     f"worst-return check {worst_ok}/5, {elapsed:.0f}s")
    acceptance_log("desk learning on point_goal", ok, "; ".join(parts))
    assert ok


def test_normalized_score_formula(acceptance_log):
    cases = [normalized_score(3.0, 3.0, 1.0) == 1.0,
             normalized_score(-2.0, -4.0, 0.0) == 2.0,
             normalized_score(-1.0, 1.0, 0.0) == -1.0]
    try:
        normalized_score(1.0, -1.0, 0.0)
        raised = False
    except UnsupportedSignCase:
        raised = True
    ok = all(cases) and raised
    acceptance_log("normalized score", ok, f"sign-case examples {sum(cases)}/3, unsupported case raises: {raised}")
    assert ok
