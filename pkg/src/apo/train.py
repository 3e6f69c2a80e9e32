"""Seeded training loop: rollout, advantage estimation, policy and value updates, logging."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .agents import AgentConfig, Adam, UpdateReport, update_policy, value_update
from .envs import env_factory
from .errors import BadParam, NoCompletedEpisodes
from .fileio import atomic_write_text
from .nets import CATEGORICAL, GAUSSIAN, VALUE, MlpSpec, init_params, save_checkpoint
from .rollout import collect, episode_stats, gae

CSV_COLUMNS = (
    "epoch", "env_steps", "mean_return", "worst_return", "std_return", "n_episodes", "est_bound",
    "kl_after", "objective_before", "objective_after", "backtracks", "value_loss", "wallclock_s",
)
SUMMARY_WINDOW = 20


@dataclass(frozen=True)
class RunConfig:
    env_id: str = "point_goal"
    env_params: Dict[str, object] = field(default_factory=dict)
    agent: AgentConfig = field(default_factory=AgentConfig)
    epochs: int = 50
    steps_per_epoch: int = 4000
    seeds: tuple = (0,)
    out_dir: str = "runs"
    shards: int = 1
    record_wallclock: bool = True   # off gives byte-identical logs for identical seeds

    def __post_init__(self):
        if self.epochs < 1:
            raise BadParam("epochs must be >= 1")
        if self.steps_per_epoch < 1:
            raise BadParam("steps_per_epoch must be >= 1")
        if not self.seeds:
            raise BadParam("at least one seed is required")
        env_factory(self.env_id, self.env_params)  # validates id and params


@dataclass
class TrainRecord:
    epoch: int
    env_steps: int
    mean_return: float
    worst_return: float
    std_return: float
    n_episodes: int
    est_bound: float
    kl_after: float
    objective_before: float
    objective_after: float
    backtracks: int
    value_loss: float
    wallclock_s: float

    def row(self):
        return [getattr(self, c) for c in CSV_COLUMNS]


@dataclass
class TrainResult:
    seed: int
    records: List[TrainRecord]
    reports: List[UpdateReport]
    policy_spec: MlpSpec
    policy_params: np.ndarray
    value_spec: MlpSpec
    value_params: np.ndarray

    def summary(self, window=SUMMARY_WINDOW):
        return summarize(self.records, window)


def summarize(records, window=SUMMARY_WINDOW):
    tail = records[-window:]
    means = [r.mean_return for r in records]
    worsts = [r.worst_return for r in records]
    return {
        "epochs": len(records),
        "mean_all": float(np.mean(means)),
        "mean_last": float(np.mean([r.mean_return for r in tail])),
        "worst_all": float(np.min(worsts)),
        "worst_last": float(np.min([r.worst_return for r in tail])),
        "window": len(tail),
    }


def policy_spec_for(descriptor, hidden):
    family = CATEGORICAL if descriptor.discrete else GAUSSIAN
    return MlpSpec(descriptor.obs_dim, descriptor.action_dim, tuple(hidden), family)


def _stats(batch):
    try:
        return episode_stats(batch)
    except NoCompletedEpisodes:
        # a single episode spans the batch; report the partial one rather than nothing
        return episode_stats([e.__class__(e.ret, e.disc_ret, e.length, e.truncated, False) for e in batch.episodes])


def train_run(cfg: RunConfig, seed: int, on_epoch: Optional[Callable] = None,
              clock: Callable[[], float] = time.perf_counter) -> TrainResult:
    """Train one seed; ``on_epoch(record, report)`` is called after every epoch."""
    agent = cfg.agent
    make_env = env_factory(cfg.env_id, cfg.env_params)
    descriptor = make_env(0).descriptor
    pspec = policy_spec_for(descriptor, agent.hidden)
    vspec = MlpSpec(descriptor.obs_dim, 1, tuple(agent.hidden), VALUE)
    init_seq, roll_seq = np.random.SeedSequence(seed).spawn(2)
    init_rng = np.random.default_rng(init_seq)
    pparams = init_params(pspec, init_rng)
    vparams = init_params(vspec, init_rng)
    rollout_seeds = roll_seq.generate_state(cfg.epochs, np.uint32)
    popt = Adam(pspec.n_params, agent.policy_lr)
    vopt = Adam(vspec.n_params, agent.value_lr)
    records, reports = [], []
    start = clock()
    k_log = agent.k
    for epoch in range(cfg.epochs):
        batch = collect(make_env, (pparams, pspec), (vparams, vspec), cfg.steps_per_epoch,
                        int(rollout_seeds[epoch]), agent.gamma, shards=cfg.shards)
        gae(batch, agent.gamma, agent.lam, normalize=agent.normalize_advantages)
        pparams, report = update_policy(pparams, pspec, batch, agent, popt)
        vparams, vloss = value_update(vparams, vspec, batch, agent, vopt)
        report.value_loss = vloss
        st = _stats(batch)
        rec = TrainRecord(
            epoch=epoch + 1,
            env_steps=(epoch + 1) * cfg.steps_per_epoch,
            mean_return=st.mean_return,
            worst_return=st.worst_return,
            std_return=st.std_return,
            n_episodes=st.n_episodes,
            est_bound=st.mean_disc_return - k_log * st.var_disc_return,
            kl_after=report.kl_after,
            objective_before=report.objective_before,
            objective_after=report.objective_after,
            backtracks=report.backtracks,
            value_loss=vloss,
            wallclock_s=clock() - start if cfg.record_wallclock else 0.0,
        )
        records.append(rec)
        reports.append(report)
        if on_epoch is not None:
            on_epoch(rec, report)
    return TrainResult(seed, records, reports, pspec, pparams, vspec, vparams)


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r.row()])
    return buf.getvalue()


def read_csv(path) -> List[TrainRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise BadParam(f"{path}: header does not match the training log schema")
    ints = {"epoch", "env_steps", "n_episodes", "backtracks"}
    out = []
    for row in rows[1:]:
        vals = {c: (int(v) if c in ints else float(v)) for c, v in zip(CSV_COLUMNS, row)}
        out.append(TrainRecord(**vals))
    return out


def write_artifacts(result: TrainResult, cfg: RunConfig, out_dir):
    """Write ``seed{N}.csv``, ``seed{N}.ckpt`` (policy), ``seed{N}_value.ckpt`` and ``seed{N}.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"seed{result.seed}"
    atomic_write_text(out / f"{stem}.csv", records_to_csv(result.records))
    save_checkpoint(out / f"{stem}.ckpt", result.policy_spec, result.policy_params)
    save_checkpoint(out / f"{stem}_value.ckpt", result.value_spec, result.value_params)
    summary = dict(result.summary(), seed=result.seed, env=cfg.env_id, algorithm=cfg.agent.algorithm,
                   k=cfg.agent.k)
    atomic_write_text(out / f"{stem}.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out / f"{stem}.csv"
