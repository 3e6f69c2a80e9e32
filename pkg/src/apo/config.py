"""Line-based ``key = value`` run configuration.

Top-level keys describe the run (``env``, ``algorithm``, ``epochs`` ...),
dotted keys go to a section: ``env.<param>``, ``agent.<field>`` and
``surrogate.<field>``. ``#`` starts a comment. Bench configs additionally
take ``algorithms``, ``envs`` and ``random_episodes``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, List, Tuple

from .agents import ALGORITHMS, AgentConfig
from .envs import ENV_PARAMS
from .errors import ApoError, ConfigError
from .surrogate import SurrogateConfig
from .train import RunConfig

RUN_KEYS = {
    "env": str, "algorithm": str, "epochs": int, "steps_per_epoch": int, "seeds": "ints",
    "out_dir": str, "shards": int, "record_wallclock": bool,
}
BENCH_KEYS = {"algorithms": "strs", "envs": "strs", "random_episodes": int}
AGENT_SKIP = {"algorithm", "surrogate", "k", "gamma"}
AGENT_EXTRA = {"k": float, "gamma": float}
SURROGATE_SKIP = {"k", "gamma"}


def _parse_bool(text):
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_optional_float(text):
    return None if text.lower() in ("none", "computed") else float(text)


def _convert(text, kind):
    if kind is bool:
        return _parse_bool(text)
    if kind == "ints":
        return tuple(int(t) for t in text.split(",") if t.strip())
    if kind == "strs":
        return tuple(t.strip() for t in text.split(",") if t.strip())
    if kind == "hidden":
        return tuple(int(t) for t in text.split(",") if t.strip())
    if kind == "optfloat":
        return _parse_optional_float(text)
    return kind(text)


def _field_kinds(cls, skip):
    kinds = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default
        if f.name == "hidden":
            kinds[f.name] = "hidden"
        elif f.name in ("h_max", "penalty_scale"):
            kinds[f.name] = "optfloat"
        elif isinstance(default, bool):
            kinds[f.name] = bool
        elif isinstance(default, int):
            kinds[f.name] = int
        elif isinstance(default, float):
            kinds[f.name] = float
        else:
            kinds[f.name] = str
    return kinds


AGENT_KEYS = {**_field_kinds(AgentConfig, AGENT_SKIP), **AGENT_EXTRA}
SURROGATE_KEYS = _field_kinds(SurrogateConfig, SURROGATE_SKIP)


def parse_lines(text) -> List[Tuple[int, str, str]]:
    """``(line number, key, raw value)`` triples; duplicate keys are an error."""
    out, seen = [], {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", no)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", no)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first on line {seen[key]})", no)
        seen[key] = no
        out.append((no, key, value))
    return out


@dataclass(frozen=True)
class BenchConfig:
    run: RunConfig
    algorithms: Tuple[str, ...]
    envs: Tuple[str, ...]
    env_params: Dict[str, Dict[str, object]]
    random_episodes: int = 20


def _collect_sections(text, allow_bench):
    top, env_p, agent_p, sur_p, lines = {}, {}, {}, {}, {}
    for no, key, value in parse_lines(text):
        lines[key] = no
        section, _, name = key.partition(".")
        try:
            if not name:
                kinds = {**RUN_KEYS, **(BENCH_KEYS if allow_bench else {})}
                if key not in kinds:
                    raise ConfigError(f"unknown key {key!r}", no)
                top[key] = _convert(value, kinds[key])
            elif section == "agent":
                if name not in AGENT_KEYS:
                    raise ConfigError(f"unknown agent key {name!r}", no)
                agent_p[name] = _convert(value, AGENT_KEYS[name])
            elif section == "surrogate":
                if name not in SURROGATE_KEYS:
                    raise ConfigError(f"unknown surrogate key {name!r}", no)
                sur_p[name] = _convert(value, SURROGATE_KEYS[name])
            elif section == "env":
                # env.<param> or, in bench configs, env.<id>.<param>
                env_p[name] = value
            else:
                raise ConfigError(f"unknown section {section!r}", no)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {exc}", no) from None
    return top, env_p, agent_p, sur_p, lines


def _typed_env_params(env_id, raw, lines, prefix="env."):
    kinds = ENV_PARAMS.get(env_id)
    if kinds is None:
        raise ConfigError(f"unknown environment {env_id!r}; known: {sorted(ENV_PARAMS)}", lines.get("env") or lines.get("envs"))
    out = {}
    for name, value in raw.items():
        no = lines.get(prefix + name)
        if name not in kinds:
            raise ConfigError(f"unknown parameter {name!r} for environment {env_id}", no)
        try:
            out[name] = kinds[name](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {prefix + name!r}: {exc}", no) from None
    return out


def _build_run(top, env_id, env_params, agent_p, sur_p, lines):
    algorithm = top.get("algorithm", "apo")
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}", lines.get("algorithm"))
    try:
        surrogate = SurrogateConfig(**sur_p)
        agent = AgentConfig(algorithm=algorithm, surrogate=surrogate, **agent_p)
        kwargs = {k: v for k, v in top.items() if k in RUN_KEYS and k not in ("env", "algorithm")}
        return RunConfig(env_id=env_id, env_params=env_params, agent=agent, **kwargs)
    except ApoError as exc:
        raise ConfigError(str(exc)) from None


def load_run_config(text) -> RunConfig:
    top, env_raw, agent_p, sur_p, lines = _collect_sections(text, allow_bench=False)
    env_id = top.get("env", "point_goal")
    env_params = _typed_env_params(env_id, env_raw, lines)
    return _build_run(top, env_id, env_params, agent_p, sur_p, lines)


def load_bench_config(text) -> BenchConfig:
    top, env_raw, agent_p, sur_p, lines = _collect_sections(text, allow_bench=True)
    algorithms = top.get("algorithms", ())
    envs = top.get("envs", (top["env"],) if "env" in top else ())
    if len(algorithms) < 2:
        raise ConfigError("bench needs at least two algorithms", lines.get("algorithms"))
    if not envs:
        raise ConfigError("bench needs at least one environment", lines.get("envs"))
    for a in algorithms:
        if a not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {a!r}", lines.get("algorithms"))
    per_env = {}
    for env_id in envs:
        raw = {}
        for name, value in env_raw.items():
            owner, _, param = name.partition(".")
            if param and owner == env_id:
                raw[param] = value
            elif not param and owner not in ENV_PARAMS:
                raise ConfigError(f"bench env parameters must be written env.<id>.<param>, got env.{name}",
                                  lines.get("env." + name))
        per_env[env_id] = _typed_env_params(env_id, raw, lines, prefix=f"env.{env_id}.")
    base_top = {k: v for k, v in top.items() if k in RUN_KEYS and k != "env"}
    base_top["algorithm"] = algorithms[0]
    run = _build_run(base_top, envs[0], per_env[envs[0]], agent_p, sur_p, lines)
    random_episodes = top.get("random_episodes", 20)
    if random_episodes < 1:
        raise ConfigError("random_episodes must be >= 1", lines.get("random_episodes"))
    return BenchConfig(run, tuple(algorithms), tuple(envs), per_env, random_episodes)


def read_text(path):
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def format_run_config(cfg: RunConfig) -> str:
    """Config text that :func:`load_run_config` maps back to ``cfg``."""
    lines = [f"env = {cfg.env_id}", f"algorithm = {cfg.agent.algorithm}", f"epochs = {cfg.epochs}",
             f"steps_per_epoch = {cfg.steps_per_epoch}", "seeds = " + ", ".join(map(str, cfg.seeds)),
             f"out_dir = {cfg.out_dir}", f"shards = {cfg.shards}",
             f"record_wallclock = {str(cfg.record_wallclock).lower()}"]
    lines += [f"env.{k} = {v}" for k, v in sorted(cfg.env_params.items())]

    def fmt(v):
        if isinstance(v, bool):
            return str(v).lower()
        if v is None:
            return "none"
        if isinstance(v, tuple):
            return ", ".join(map(str, v))
        return repr(v) if isinstance(v, float) else str(v)

    for name in sorted(AGENT_KEYS):
        lines.append(f"agent.{name} = {fmt(getattr(cfg.agent, name))}")
    for name in sorted(SURROGATE_KEYS):
        lines.append(f"surrogate.{name} = {fmt(getattr(cfg.agent.surrogate, name))}")
    return "\n".join(lines) + "\n"
