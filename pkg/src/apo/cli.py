"""``apo`` command line: train, eval, verify, bench.

Exit codes: 0 ok, 1 verification failure, 2 config error, 3 runtime fault.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ApoError, ConfigError, ShapeMismatch
from .fileio import atomic_write_text

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _parse_env_params(pairs):
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def cmd_train(args, out=sys.stdout):
    from .config import load_run_config, read_text
    from .train import train_run, write_artifacts

    cfg = load_run_config(read_text(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    out_dir = Path(args.out or cfg.out_dir)
    for seed in cfg.seeds:
        def progress(rec, report, seed=seed):
            if not args.quiet:
                print(f"seed {seed} epoch {rec.epoch:4d} steps {rec.env_steps:8d} mean {rec.mean_return:9.3f} "
                      f"worst {rec.worst_return:9.3f} kl {rec.kl_after:.4f} bt {rec.backtracks:3d}", file=out)

        result = train_run(cfg, seed, progress)
        path = write_artifacts(result, cfg, out_dir)
        print(f"seed {seed}: {json.dumps(result.summary(), sort_keys=True)} -> {path}", file=out)
    return EXIT_OK


def cmd_eval(args, out=sys.stdout):
    from .envs import ENV_PARAMS, env_factory
    from .nets import forward, load_checkpoint
    from .rollout import EpisodeSummary, episode_stats

    if args.env not in ENV_PARAMS:
        raise ConfigError(f"unknown environment {args.env!r}; known: {sorted(ENV_PARAMS)}")
    raw = _parse_env_params(args.param)
    kinds = ENV_PARAMS[args.env]
    try:
        params = {k: kinds[k](v) for k, v in raw.items()}
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad --param for {args.env}: {exc}") from None
    if args.episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    spec, weights = load_checkpoint(args.ckpt)
    make_env = env_factory(args.env, params)
    env = make_env(args.seed)
    desc = env.descriptor
    if spec.input_dim != desc.obs_dim or spec.output_dim != desc.action_dim:
        raise ShapeMismatch(f"checkpoint net {spec.input_dim}->{spec.output_dim} does not fit {args.env} "
                            f"({desc.obs_dim}->{desc.action_dim})")
    rng = np.random.Generator(np.random.Philox(args.seed))
    episodes = []
    for _ in range(args.episodes):
        obs = env.reset()
        total, length, done = 0.0, 0, False
        while not done and length < desc.max_episode_len:
            dist = forward(weights, spec, obs[None, :])
            a = dist.mode() if args.deterministic else dist.sample(rng)
            a = int(a[0]) if desc.discrete else a[0]
            obs, r, done = env.step(a)
            total += r
            length += 1
        episodes.append(EpisodeSummary(total, total, length, not done, False))
    st = episode_stats(episodes)
    print(f"episodes {st.n_episodes} mean_return {st.mean_return:.6f} worst_return {st.worst_return:.6f} "
          f"std_return {st.std_return:.6f}", file=out)
    return EXIT_OK


def cmd_verify(args, out=sys.stdout):
    from .verify import SUITES

    names = list(SUITES) if args.suite == "all" else [args.suite]
    failed = 0

    def show_trace(env_id, k, trace):
        accepted = sum(s.accepted for s in trace)
        print(f"  {env_id} k={k:g}: {accepted}/{len(trace)} steps accepted", file=out)
        print("    B_k: " + " ".join(f"{s.bound:.6f}" for s in trace), file=out)

    for name in names:
        print(f"[{name}]", file=out)
        kwargs = {"report": show_trace} if name == "monotonic" else {}
        for check in SUITES[name](args.seed, **kwargs):
            status = "PASS" if check.ok else "FAIL"
            failed += not check.ok
            print(f"  {status} {check.name}: {check.passed}/{check.total}", file=out)
    print("all checks passed" if not failed else f"{failed} check(s) failed", file=out)
    return EXIT_OK if not failed else EXIT_VERIFY


def cmd_bench(args, out=sys.stdout):
    from .bench import format_table, rows_to_csv, run_bench
    from .config import load_bench_config, read_text

    cfg = load_bench_config(read_text(args.config))
    rows = run_bench(cfg)
    out_dir = Path(args.out or cfg.run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "bench.csv", rows_to_csv(rows))
    print(format_table(rows), file=out)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="apo", description="Absolute policy optimization toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run per seed from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="roll out a saved policy checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--env", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--param", action="append", help="environment parameter key=value (repeatable)")
    e.add_argument("--deterministic", action="store_true", help="act with the distribution mode")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run exact-tier certificates")
    v.add_argument("suite", choices=("bounds", "monotonic", "gradients", "all"))
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="compare algorithms over seeds and environments")
    b.add_argument("--config", required=True)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=err)
        return EXIT_CONFIG
    except (ApoError, OSError) as exc:
        print(f"error: {exc}", file=err)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
