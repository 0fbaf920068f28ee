"""Experiment configuration: nested dataclasses read from and written to YAML.

Unknown keys are rejected, every default is materialized in the resolved
config, and ``parse_config(dump_config(cfg)) == cfg`` holds.
"""
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from nce.data import DatasetSpec
from nce.errors import ConfigError
from nce.quantize import QuantConfig

MODES = ("nce", "prune-only", "random", "fixed", "width-multiplier")


@dataclass
class ModelConfig:
    arch: str = "resnet8"
    seed_width: Optional[int] = None


@dataclass
class SearchConfig:
    warmup_epochs: int = 5
    search_epochs: int = 30
    retrain_epochs: int = 60
    threshold: float = 0.3
    sample_size: int = 2
    initial_candidates: int = 8
    expansion_cap: int = 16
    batch_size: int = 64

    def __post_init__(self):
        n0 = self.initial_candidates
        if n0 < 1 or self.expansion_cap < n0:
            raise ConfigError("search.expansion_cap must be >= search.initial_candidates >= 1")
        if not (1.0 / n0 < self.threshold < 1.0):
            raise ConfigError(
                f"search.threshold must lie in (1/{n0}, 1) = ({1.0 / n0:.4g}, 1); got {self.threshold}")
        for name in ("warmup_epochs", "search_epochs", "retrain_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"search.{name} must be >= 0")
        if self.sample_size < 1 or self.batch_size < 1:
            raise ConfigError("search.sample_size and search.batch_size must be >= 1")


@dataclass
class BudgetConfig:
    flop_target: Optional[float] = None  # None: the seed architecture's exact cost
    param_target: Optional[float] = None
    lambda_flop: float = 2.0
    lambda_param: float = 2.0
    band: float = 0.05

    def __post_init__(self):
        if not 0 <= self.band < 1:
            raise ConfigError("budget.band must lie in [0, 1)")
        if self.lambda_flop < 0 or self.lambda_param < 0:
            raise ConfigError("budget.lambda_flop and budget.lambda_param must be >= 0")
        for name in ("flop_target", "param_target"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ConfigError(f"budget.{name} must be positive")


@dataclass
class OptimConfig:
    weight_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    arch_lr: float = 0.001
    arch_betas: list = field(default_factory=lambda: [0.9, 0.999])
    arch_eps: float = 1e-8

    def __post_init__(self):
        if len(self.arch_betas) != 2:
            raise ConfigError("optim.arch_betas needs two values")


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    output_dir: str = "runs/experiment"


@dataclass
class ExperimentConfig:
    mode: str = "nce"
    width_multiplier: float = 1.0
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    dataset_seed: int = 0
    search: SearchConfig = field(default_factory=SearchConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.width_multiplier > 0:
            raise ConfigError("width_multiplier must be positive")

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"run.seed": 3})``."""
        data = to_dict(self)
        for key, value in changes.items():
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown key {key!r}")
            node[leaf] = value
        return resolve_config(data)


# module that consumes each documented key
KEY_OWNERS = {
    "mode": "pipeline",
    "width_multiplier": "pipeline",
    "model.arch": "pipeline",
    "model.seed_width": "pipeline",
    "dataset.kind": "data",
    "dataset.classes": "data",
    "dataset.train_samples": "data",
    "dataset.test_samples": "data",
    "dataset.image_size": "data",
    "dataset.channels": "data",
    "dataset.noise": "data",
    "dataset.dims": "data",
    "dataset.margin": "data",
    "dataset.path": "data",
    "dataset_seed": "pipeline",
    "search.warmup_epochs": "pipeline",
    "search.search_epochs": "pipeline",
    "search.retrain_epochs": "pipeline",
    "search.threshold": "pipeline",
    "search.sample_size": "pipeline",
    "search.initial_candidates": "pipeline",
    "search.expansion_cap": "pipeline",
    "search.batch_size": "pipeline",
    "quant.weight_bits": "searchspace",
    "quant.activation_bits": "searchspace",
    "quant.pact_clip_init": "searchspace",
    "quant.pact_reg": "pipeline",
    "quant.excluded_layers": "network",
    "quant.quantize_warmup": "pipeline",
    "budget.flop_target": "pipeline",
    "budget.param_target": "pipeline",
    "budget.lambda_flop": "pipeline",
    "budget.lambda_param": "pipeline",
    "budget.band": "pipeline",
    "optim.weight_lr": "pipeline",
    "optim.momentum": "pipeline",
    "optim.weight_decay": "pipeline",
    "optim.arch_lr": "pipeline",
    "optim.arch_betas": "pipeline",
    "optim.arch_eps": "pipeline",
    "run.seed": "pipeline",
    "run.threads": "cli",
    "run.output_dir": "cli",
}


def _check_type(value, hint, key: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        for option in typing.get_args(hint):
            try:
                return _check_type(value, option, key)
            except ConfigError:
                continue
        raise ConfigError(f"{key}: expected {hint}, got {type(value).__name__} {value!r}")
    if hint is type(None):
        if value is None:
            return None
        raise ConfigError(f"{key}: expected null")
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is str:
        if isinstance(value, str):
            return value
    elif hint is list or origin is list:
        if isinstance(value, (list, tuple)):
            return list(value)
    elif dataclasses.is_dataclass(hint):
        if isinstance(value, dict):
            return value
    else:
        return value
    expected = getattr(hint, "__name__", str(hint))
    raise ConfigError(f"{key}: expected {expected}, got {type(value).__name__} {value!r}")


def _build(cls, data, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"section {prefix.rstrip('.') or '<root>'} must be a mapping")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.init]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown key '{prefix}{unknown[0]}'")
    kwargs = {}
    for name in names:
        if name not in data:
            continue
        hint = hints[name]
        value = _check_type(data[name], hint, prefix + name)
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value, f"{prefix}{name}.")
        kwargs[name] = value
    return cls(**kwargs)


def resolve_config(data: Optional[dict]) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {})


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc.__class__.__name__})") from None
    return resolve_config(data)


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def flat_keys(d: dict, prefix: str = "") -> list:
    keys = []
    for k, v in d.items():
        if isinstance(v, dict):
            keys.extend(flat_keys(v, f"{prefix}{k}."))
        else:
            keys.append(prefix + k)
    return keys
