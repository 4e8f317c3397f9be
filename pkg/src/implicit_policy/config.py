"""Run configuration: one YAML/JSON document per run, strict keys, defaults
filled, dotted ``key=value`` overrides, and a canonical effective form."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .envs import EnvSpec, bimodal_axis, gaussian_bandit, multi_goal, noisy_wrap
from .rl import TrainConfig

COMMANDS = ("train", "imitate", "eval", "verify", "grad-check", "bandit-report")
ALGOS = ("nfp-onpolicy", "nbp-offpolicy", "gaussian-baseline")
ENV_KINDS = ("gaussian-bandit", "multi-goal-2d", "bimodal-axis")


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``3e-4``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?|\.[0-9_]+)[eE][-+]?[0-9]+$"),
    list("-+0123456789."),
)


def _yaml_load(text: str):
    return yaml.load(text, Loader=_Loader)


@dataclass
class EnvConfig:
    kind: str = "gaussian-bandit"
    horizon: int | None = None
    obs_noise: float = 0.0
    sigma: list | None = None
    beta_opt: float = 0.1
    step_scale: float | None = None

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ConfigError(f"env.kind must be one of {ENV_KINDS}, got {self.kind!r}")
        if self.obs_noise < 0:
            raise ConfigError("env.obs_noise must be >= 0")

    def build(self) -> EnvSpec:
        if self.kind == "gaussian-bandit":
            spec = gaussian_bandit(self.sigma or ((1.0, 0.95), (0.95, 1.0)), self.beta_opt)
        elif self.kind == "multi-goal-2d":
            extra = {} if self.step_scale is None else {"step_scale": self.step_scale}
            spec = multi_goal(self.horizon or 50, **extra)
        else:
            spec = bimodal_axis(self.horizon or 50)
        return noisy_wrap(spec, self.obs_noise) if self.obs_noise else spec


@dataclass
class ModelConfig:
    flow_layers: int = 4
    coupling_hidden: int = 3
    coupling_depth: int = 3
    embed_hidden: list = field(default_factory=lambda: [64, 64])
    scale_bound: float | None = 5.0
    squash: bool = True
    hidden: list = field(default_factory=lambda: [64, 64])
    dropout_p: float = 0.1
    rho_init: float = -4.0
    layer_norm: bool = True

    def __post_init__(self):
        if self.flow_layers < 1 or self.coupling_hidden < 1 or self.coupling_depth < 1:
            raise ConfigError("flow sizes must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("model.dropout_p must lie in [0, 1)")


@dataclass
class ImitationConfig:
    episodes: int = 10_000
    steps: int = 4000
    gan_steps: int = 2000
    batch: int = 256
    lr: float = 3e-4
    lr_d: float = 1e-3
    lr_g: float = 1e-3
    eval_episodes: int = 200
    log_interval: int = 100


@dataclass
class EvalConfig:
    episodes: int = 10
    checkpoint: str | None = None


@dataclass
class VerifyConfig:
    suite: str = "operators"
    instances: int | None = None


@dataclass
class GradCheckConfig:
    target: str = "all"


SECTIONS = {
    "env": EnvConfig,
    "model": ModelConfig,
    "imitation": ImitationConfig,
    "eval": EvalConfig,
    "verify": VerifyConfig,
    "grad_check": GradCheckConfig,
}


@dataclass
class RunConfig:
    command: str = "train"
    algo: str = "nfp-onpolicy"
    seed: int = 0
    output_dir: str = "runs/default"
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    imitation: ImitationConfig = field(default_factory=ImitationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    grad_check: GradCheckConfig = field(default_factory=GradCheckConfig)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"command must be one of {COMMANDS}, got {self.command!r}")
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        if self.train.seed != self.seed:
            self.train.seed = self.seed

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["train"].pop("seed")
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _section(cls, doc: Any, where: str, exclude: tuple[str, ...] = ()):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a mapping")
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**doc)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def config_from_dict(doc: dict | None) -> RunConfig:
    doc = dict(doc or {})
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {k: doc[k] for k in ("command", "algo", "seed", "output_dir") if k in doc}
    if "seed" in kwargs and not isinstance(kwargs["seed"], int):
        raise ConfigError("seed must be an integer")
    for name, cls in SECTIONS.items():
        kwargs[name] = _section(cls, doc.get(name), name)
    kwargs["train"] = _section(TrainConfig, doc.get("train"), "train", exclude=("seed",))
    return RunConfig(**kwargs)


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    return key.split("."), _yaml_load(raw) if raw else None


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    doc = json.loads(json.dumps(doc))
    for text in overrides:
        path, value = parse_override(text)
        node = doc
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-mapping")
        node[path[-1]] = value
    return doc


def load_document(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = _yaml_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must hold a mapping at top level")
    return doc


def parse_config(path=None, overrides: list[str] | None = None, base: dict | None = None) -> RunConfig:
    """Load, merge overrides, validate. ``path=None`` starts from defaults."""
    doc = dict(base or {})
    if path is not None:
        doc.update(load_document(path))
    return config_from_dict(apply_overrides(doc, overrides or []))


def save_effective(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(cfg.dumps() + "\n")
    return path
