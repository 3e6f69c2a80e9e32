"""Multi-algorithm, multi-seed comparison with normalized scores."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional

import numpy as np

from .config import BenchConfig
from .envs import env_factory
from .errors import DivisionByZero, UnsupportedSignCase
from .train import summarize, train_run

METRICS = ("mean_all", "mean_last", "worst_all", "worst_last")
TIE_REL = 0.01
BASELINE = "trpo"


def normalized_score(agent, trpo, random):
    """Score of ``agent`` relative to ``trpo``, both measured from ``random``.

    With ``d_agent = agent - random`` and ``d_trpo = trpo - random`` this is
    ``d_trpo / d_agent`` when both are negative (both worse than random, so a
    smaller loss scores above 1) and ``d_agent / d_trpo`` otherwise.
    """
    for v in (agent, trpo, random):
        if not np.isfinite(v):
            raise ValueError("normalized_score needs finite inputs")
    d_agent = agent - random
    d_trpo = trpo - random
    if d_agent > 0 and d_trpo < 0:
        raise UnsupportedSignCase("agent beats random while the baseline is below it")
    if d_agent < 0 and d_trpo < 0:
        num, den = d_trpo, d_agent
    else:
        num, den = d_agent, d_trpo
    if den == 0:
        raise DivisionByZero("normalized score denominator is zero")
    return num / den


def random_baseline(env_id, params, episodes, seed=0):
    """Mean and worst undiscounted return of uniformly random actions."""
    env = env_factory(env_id, params)(seed)
    desc = env.descriptor
    rng = np.random.default_rng(seed)
    rets = []
    for _ in range(episodes):
        env.reset()
        total = 0.0
        for _ in range(desc.max_episode_len):
            if desc.discrete:
                a = int(rng.integers(desc.action_space.n))
            else:
                a = rng.uniform(desc.action_space.low, desc.action_space.high)
            _, r, done = env.step(a)
            total += r
            if done:
                break
        rets.append(total)
    mean, worst = float(np.mean(rets)), float(np.min(rets))
    return {"mean_all": mean, "mean_last": mean, "worst_all": worst, "worst_last": worst}


def winners(values: Dict[str, float], tie_rel=TIE_REL):
    """Algorithms within ``tie_rel`` (relative) of the best value; more than one means a tie."""
    best = max(values.values())
    slack = tie_rel * abs(best)
    return sorted(a for a, v in values.items() if v >= best - slack)


@dataclass
class BenchRow:
    env: str
    algorithm: str
    metric: str
    value: float
    normalized: float
    winner: bool
    tie: bool


def run_bench(cfg: BenchConfig, runner: Optional[Callable] = None,
              baseline: Optional[Callable] = None) -> List[BenchRow]:
    """Train every (env, algorithm, seed), average per-seed summaries, compare.

    ``runner(run_config, seed) -> records`` and ``baseline(env_id, params,
    episodes) -> metrics`` can be swapped for tests.
    """
    runner = runner or (lambda rc, seed: train_run(rc, seed).records)
    baseline = baseline or (lambda env_id, params, episodes: random_baseline(env_id, params, episodes))
    rows = []
    for env_id in cfg.envs:
        params = cfg.env_params.get(env_id, {})
        per_algo = {}
        for algo in cfg.algorithms:
            agent = replace(cfg.run.agent, algorithm=algo)
            rc = replace(cfg.run, env_id=env_id, env_params=params, agent=agent)
            summaries = [summarize(runner(rc, seed)) for seed in rc.seeds]
            per_algo[algo] = {m: float(np.mean([s[m] for s in summaries])) for m in METRICS}
        rand = baseline(env_id, params, cfg.random_episodes)
        for metric in METRICS:
            vals = {a: per_algo[a][metric] for a in cfg.algorithms}
            best = winners(vals)
            for algo in cfg.algorithms:
                score = float("nan")
                if BASELINE in per_algo:
                    try:
                        score = normalized_score(vals[algo], vals[BASELINE], rand[metric])
                    except (DivisionByZero, UnsupportedSignCase):
                        pass
                rows.append(BenchRow(env_id, algo, metric, vals[algo], score, algo in best, len(best) > 1))
    return rows


BENCH_COLUMNS = ("env", "algorithm", "metric", "value", "normalized", "winner", "tie")


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        w.writerow([r.env, r.algorithm, r.metric, repr(r.value), repr(r.normalized), int(r.winner), int(r.tie)])
    return buf.getvalue()


def format_table(rows) -> str:
    lines = [f"{'env':<12}{'algorithm':<10}{'metric':<12}{'value':>12}{'norm':>10}  winner"]
    for r in rows:
        mark = ("tie" if r.tie else "win") if r.winner else ""
        lines.append(f"{r.env:<12}{r.algorithm:<10}{r.metric:<12}{r.value:>12.4f}{r.normalized:>10.3f}  {mark}")
    return "\n".join(lines)
