"""Run configuration: INI-style sections, validated into dataclasses.

Defaults reproduce the reference hyperparameters. Sections:

    [agent]      AgentConfig fields (num_quantiles, gamma_discount, lambda_ep, ...)
    [losses]     LossWeights fields (kappa, lambda_reg, lambda_cal, coverage_p, interval_q)
    [env]        name plus environment keyword arguments
    [run]        seeds, frames, eval_episodes
    [synthetic]  harness settings
    [logging]    out
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields

from .agent import AgentConfig
from .envs import make_env
from .evidential import DomainError
from .losses import LossWeights


class ConfigError(ValueError):
    pass


ENV_PARAMS = {
    "chainworld": {"length": int, "left_reward": float, "goal_reward": float, "max_episode_steps": int},
    "trapmaze": {"p_trap": float, "goal_reward": float, "trap_penalty": float, "max_episode_steps": int},
}


@dataclass(frozen=True)
class EnvConfig:
    name: str = "chainworld"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RunSection:
    seeds: tuple = (0,)
    frames: int = 2_500_000
    eval_episodes: int = 100


@dataclass(frozen=True)
class SyntheticSection:
    n_train: int = 2000
    n_test: int = 1000
    hidden: int = 64
    steps: int = 3000
    batch_size: int = 128
    learning_rate: float = 3e-3
    seeds: tuple = (0, 1, 2, 3, 4)
    train_low: float = -3.0
    train_high: float = 3.0
    test_low: float = -5.0
    test_high: float = 5.0


@dataclass(frozen=True)
class RunConfig:
    agent: AgentConfig = field(default_factory=AgentConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    run: RunSection = field(default_factory=RunSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    out: str = "runs"

    def make_env(self):
        return make_env(self.env.name, **self.env.params)


def _convert(section: str, key: str, raw: str, typ):
    try:
        if typ is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if typ is tuple:
            return tuple(int(s) for s in raw.replace(",", " ").split())
        return typ(raw.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__}") from None


def _field_types(cls) -> dict:
    out = {}
    for f in fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[f.name] = type(default)
    return out


def _build(cls, section: str, values: dict, base):
    types = _field_types(cls)
    kwargs = {}
    for key, raw in values.items():
        if key not in types or types[key] in (LossWeights,):
            raise ConfigError(f"[{section}] unknown key {key!r}")
        kwargs[key] = _convert(section, key, raw, types[key])
    try:
        return dataclasses.replace(base, **kwargs)
    except DomainError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse(text: str = "", overrides: dict | None = None) -> RunConfig:
    """Parse INI text; ``overrides`` maps 'section.key' to string values (CLI flags)."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for dotted, value in (overrides or {}).items():
        sec, key = dotted.split(".", 1)
        if not cp.has_section(sec):
            cp.add_section(sec)
        cp.set(sec, key, str(value))
    known = {"agent", "losses", "env", "run", "synthetic", "logging"}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]")

    def section(name):
        return dict(cp.items(name)) if cp.has_section(name) else {}

    weights = _build(LossWeights, "losses", section("losses"), LossWeights())
    try:
        agent_base = dataclasses.replace(AgentConfig(), weights=weights)
    except DomainError as exc:
        raise ConfigError(f"[agent] {exc}") from None
    agent = _build(AgentConfig, "agent", section("agent"), agent_base)

    env_values = section("env")
    name = env_values.pop("name", "chainworld").strip().lower()
    if name not in ENV_PARAMS:
        raise ConfigError(f"[env] name: unknown environment {name!r}")
    params = {}
    for key, raw in env_values.items():
        if key not in ENV_PARAMS[name]:
            raise ConfigError(f"[env] unknown key {key!r} for {name}")
        params[key] = _convert("env", key, raw, ENV_PARAMS[name][key])
    try:
        make_env(name, **params)
    except DomainError as exc:
        raise ConfigError(f"[env] {exc}") from None
    env = EnvConfig(name, params)

    run = _build(RunSection, "run", section("run"), RunSection())
    if run.frames <= 0 or run.eval_episodes < 0 or not run.seeds:
        raise ConfigError("[run] frames must be positive, eval_episodes >= 0, seeds non-empty")
    syn = _build(SyntheticSection, "synthetic", section("synthetic"), SyntheticSection())
    if syn.steps <= 0 or syn.n_train <= 0 or syn.n_test <= 0 or syn.hidden <= 0:
        raise ConfigError("[synthetic] steps, n_train, n_test and hidden must be positive")
    if not (syn.test_low <= syn.train_low < syn.train_high <= syn.test_high):
        raise ConfigError("[synthetic] test range must contain the train range")
    logging = section("logging")
    unknown = set(logging) - {"out"}
    if unknown:
        raise ConfigError(f"[logging] unknown key {sorted(unknown)[0]!r}")
    return RunConfig(agent, env, run, syn, logging.get("out", RunConfig.out))


def load(path, overrides: dict | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse(text, overrides)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps(cfg: RunConfig) -> str:
    """Serialize every resolved value; ``parse(dumps(cfg)) == cfg``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp["agent"] = {f.name: _fmt(getattr(cfg.agent, f.name)) for f in fields(cfg.agent) if f.name != "weights"}
    cp["losses"] = {f.name: _fmt(getattr(cfg.agent.weights, f.name)) for f in fields(LossWeights)}
    cp["env"] = {"name": cfg.env.name, **{k: _fmt(v) for k, v in cfg.env.params.items()}}
    cp["run"] = {f.name: _fmt(getattr(cfg.run, f.name)) for f in fields(cfg.run)}
    cp["synthetic"] = {f.name: _fmt(getattr(cfg.synthetic, f.name)) for f in fields(cfg.synthetic)}
    cp["logging"] = {"out": cfg.out}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
