"""Run configuration: JSON file with one section per component.

Example::

    {
      "env": {"state_dim": 16, "drift": 0.3},
      "agent": {"gamma": 0.95, "hidden": [128, 128]},
      "csp_trainer": {"episodes": 300, "agent": {"hidden": [64, 64]}},
      "augment": {"enabled": true},
      "kind": "ddpg",
      "seeds": [0, 1, 2],
      "budget": 2000
    }

Absent keys take their defaults; unknown keys are errors. Dotted top-level
keys (``"agent.gamma": 0.9``) are accepted as shorthand for nested ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace

from .agents import AGENT_KINDS, AgentConfig
from .augment import AugmentConfig
from .csp import CspTrainerConfig
from .envsim import EnvConfig


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors) if isinstance(errors, (list, tuple)) else [errors]
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    csp_trainer: CspTrainerConfig = field(default_factory=CspTrainerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    kind: str = "ddpg"
    kinds: tuple = AGENT_KINDS
    seeds: tuple = (0,)
    budget: int = 2000
    pretrain_budget: int = 2000
    eval_every: int = 100
    eval_episodes: int = 10
    output_dir: str = "runs"
    record_wall_ms: bool = False

    def validate(self) -> list[str]:
        errs = []
        errs += self.env.validate()
        errs += self.agent.validate()
        errs += self.csp_trainer.validate()
        errs += self.augment.validate()
        if self.kind not in AGENT_KINDS:
            errs.append(f"kind must be one of {list(AGENT_KINDS)}, got {self.kind!r}")
        bad = [k for k in self.kinds if k not in AGENT_KINDS]
        if bad or not self.kinds:
            errs.append(f"kinds must be a non-empty subset of {list(AGENT_KINDS)}, got {list(self.kinds)}")
        if not self.seeds:
            errs.append("seeds must be non-empty")
        for name in ("budget", "pretrain_budget", "eval_every", "eval_episodes"):
            if getattr(self, name) < 0:
                errs.append(f"{name} must be >= 0, got {getattr(self, name)}")
        return errs

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "agent": self.agent.to_dict(),
            "csp_trainer": self.csp_trainer.to_dict(),
            "augment": self.augment.to_dict(),
            "kind": self.kind,
            "kinds": list(self.kinds),
            "seeds": list(self.seeds),
            "budget": self.budget,
            "pretrain_budget": self.pretrain_budget,
            "eval_every": self.eval_every,
            "eval_episodes": self.eval_episodes,
            "output_dir": self.output_dir,
            "record_wall_ms": self.record_wall_ms,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_SECTIONS = {"env": EnvConfig, "agent": AgentConfig, "csp_trainer": CspTrainerConfig, "augment": AugmentConfig}
_TUPLE_FIELDS = {"hidden", "kinds", "seeds"}


def _check_type(path, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        return f"{path}: expected {type(default).__name__}, got {type(value).__name__}"
    return None


def _build(cls, data: dict, path: str, errors: list):
    if not isinstance(data, dict):
        errors.append(f"{path}: expected an object")
        return cls()
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            errors.append(f"{where}: unknown key")
            continue
        default = getattr(defaults, key)
        if key in _SECTIONS or (cls is CspTrainerConfig and key == "agent"):
            sub = _SECTIONS.get(key, AgentConfig)
            kwargs[key] = _build(sub, value, where, errors)
            continue
        err = _check_type(where, value, default)
        if err:
            errors.append(err)
            continue
        if key in _TUPLE_FIELDS:
            value = tuple(value)
        elif isinstance(default, float):
            value = float(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        errors.append(f"{path or 'config'}: {e}")
        return cls()


def _expand_dotted(obj: dict) -> dict:
    out: dict = {}
    for key, value in obj.items():
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: conflicts with a non-object value")
        if isinstance(value, dict) and isinstance(node.get(parts[-1]), dict):
            node[parts[-1]].update(value)
        else:
            node[parts[-1]] = value
    return out


def config_from_dict(obj: dict) -> RunConfig:
    errors: list[str] = []
    cfg = _build(RunConfig, _expand_dotted(obj), "", errors)
    errors += cfg.validate()
    if errors:
        raise ConfigError(errors)
    return cfg


def loads_config(text: str) -> RunConfig:
    try:
        obj = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"parse error at line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(obj, dict):
        raise ConfigError("top level must be a JSON object")
    return config_from_dict(obj)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return loads_config(text)


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
