"""Pipeline configuration: one YAML (or JSON) file plus ``key.path=value`` overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    domain: str = "movielens"
    ratings: str | None = None
    users: str | None = None
    movies: str | None = None
    reviews: str | None = None
    meta: str | None = None
    min_positive: int = 6
    synthetic: bool = False


@dataclass
class EvalConfig:
    n_users: int | None = 1000
    n_runs: int = 3
    disjoint_training_users: bool = True


@dataclass
class GenerationConfig:
    temperature: float = 0.6
    top_p: float = 0.9
    max_tokens: int = 2048


@dataclass
class EndpointConfig:
    kind: str = "mock"
    base_url: str | None = None
    model_name: str | None = None
    max_inflight: int = 4
    max_attempts: int = 5
    mock_script: str | None = None
    mock_fallback: str = ""
    log_path: str | None = None


@dataclass
class GrpoSection:
    eps_clip: float = 0.2
    beta: float = 0.04
    std_floor: float = 1e-8


@dataclass
class ToyConfig:
    policy_dim: int = 20
    steps: int = 500
    group_size: int = 8
    learning_rate: float = 0.1
    inner_epochs: int = 2
    max_grad_norm: float = 1.0


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    workdir: str = "chainrec_out"
    seed: int = 0
    chains_k: int = 5
    group_size: int = 8
    sft_samples: int = 500
    sft_chains_per_user: int = 5
    rl_samples: int = 500
    max_prompt_chars: int | None = None
    iot_template: str | None = None
    rank_template: str | None = None
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)
    grpo: GrpoSection = field(default_factory=GrpoSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)

    @property
    def out(self) -> Path:
        return Path(self.workdir)

    def path(self, name: str) -> Path:
        return self.out / name

    def validate(self, need_data: bool = False) -> "PipelineConfig":
        if self.chains_k < 0 or self.chains_k > 5:
            raise ConfigError("chains_k must lie in 0..5")
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")
        if self.eval.n_runs < 1:
            raise ConfigError("eval.n_runs must be >= 1")
        if self.endpoint.kind not in ("mock", "http"):
            raise ConfigError(f"endpoint.kind must be 'mock' or 'http', got {self.endpoint.kind!r}")
        if self.endpoint.kind == "http" and not (self.endpoint.base_url and self.endpoint.model_name):
            raise ConfigError("http endpoint needs endpoint.base_url and endpoint.model_name")
        for p in (self.iot_template, self.rank_template, self.endpoint.mock_script):
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"file not found: {p}")
        if need_data and not self.data.synthetic:
            if self.data.domain == "movielens":
                needed = {"ratings": self.data.ratings, "users": self.data.users, "movies": self.data.movies}
            else:
                needed = {"reviews": self.data.reviews}
                if self.data.meta is not None:
                    needed["meta"] = self.data.meta
            for key, p in needed.items():
                if p is None:
                    raise ConfigError(f"data.{key} is not set")
                if not Path(p).is_file():
                    raise ConfigError(f"file not found: {p}")
        return self


def _coerce(value: str) -> Any:
    try:
        parsed = yaml.safe_load(value)
    except yaml.YAMLError:
        return value
    if isinstance(parsed, dict) or (parsed is None and value not in ("null", "~", "")):
        return value
    return parsed


def _apply(obj, mapping: dict, prefix: str = ""):
    valid = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in mapping.items():
        if key not in valid:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix + key} must be a mapping")
            _apply(current, value, prefix + key + ".")
        else:
            setattr(obj, key, value)


def _set_path(obj, dotted: str, value):
    *parents, leaf = dotted.split(".")
    target = obj
    for part in parents:
        if not hasattr(target, part) or not dataclasses.is_dataclass(getattr(target, part)):
            raise ConfigError(f"unknown config key {dotted!r}")
        target = getattr(target, part)
    if not dataclasses.is_dataclass(target) or leaf not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unknown config key {dotted!r}")
    setattr(target, leaf, value)


def load_config(path=None, overrides: Iterable[str] = (), **flags) -> PipelineConfig:
    """Read ``path`` (optional), then apply ``key.path=value`` overrides, then
    keyword flags (dotted names with ``__`` for ``.``); later sources win."""
    cfg = PipelineConfig()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid config file {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping")
        _apply(cfg, raw)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        _set_path(cfg, key.strip(), _coerce(value.strip()))
    for key, value in flags.items():
        if value is not None:
            _set_path(cfg, key.replace("__", "."), value)
    return cfg
