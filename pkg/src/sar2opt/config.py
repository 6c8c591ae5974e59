"""Experiment configuration: a versioned YAML document mapped onto the
per-stage dataclasses, with unknown keys rejected."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .backbone import EncoderConfig
from .diffusion import DenoiserConfig, TranslatorConfig, UncertaintyConfig
from .distill import DistillWeights, EncoderTrainConfig
from .errors import ConfigError
from .io import config_hash
from .synthdata import DatasetConfig

CONFIG_SCHEMA = 1
WORKDIR_ENV = "SAR2OPT_WORKDIR"
STAGE_NAMES = ("dataset", "teacher", "distill", "translator", "sampler")


@dataclass
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 5.5
    eta: float = 0.0
    split: str = "test"
    limit: int | None = None


@dataclass
class EvalConfig:
    uiqi_window: int | None = 8
    d_lambda_p: float = 1.0
    strict: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    workdir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    teacher: EncoderTrainConfig = field(default_factory=EncoderTrainConfig)
    distill: EncoderTrainConfig = field(default_factory=EncoderTrainConfig)
    weights: DistillWeights = field(default_factory=DistillWeights)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    translator: TranslatorConfig = field(default_factory=TranslatorConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)
    schema: int = CONFIG_SCHEMA

    def __post_init__(self):
        self.apply_root_seed()

    def apply_root_seed(self) -> None:
        """Derive every stage seed from the root seed."""
        seeds = stage_seeds(self.seed)
        self.dataset.seed = seeds["dataset"]
        self.teacher.seed = seeds["teacher"]
        self.distill.seed = seeds["distill"]
        self.translator.seed = seeds["translator"]

    @property
    def workdir_path(self) -> Path:
        return Path(os.environ.get(WORKDIR_ENV, self.workdir))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"].pop("class_counts")
        d["weights"].pop("total")
        return _plain(d)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("workdir")
        return config_hash(d)


def stage_seeds(root: int) -> dict[str, int]:
    """Independent 31-bit seeds for each stage spawned from one root sequence."""
    children = np.random.SeedSequence(root).spawn(len(STAGE_NAMES))
    return {name: int(c.generate_state(1)[0] >> 1) for name, c in zip(STAGE_NAMES, children)}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default) and not isinstance(default, type):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data or {})
    schema = data.get("schema", CONFIG_SCHEMA)
    if schema != CONFIG_SCHEMA:
        raise ConfigError(f"config schema {schema} is not supported (expected {CONFIG_SCHEMA})")
    return _build(ExperimentConfig, data, "config")


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def smoke_config(workdir: str = "runs/smoke", seed: int = 0) -> ExperimentConfig:
    """A 200-scene configuration that runs the whole pipeline in minutes."""
    return config_from_dict(
        {
            "seed": seed,
            "workdir": workdir,
            "dataset": {"n_scenes": 200},
            "teacher": {"steps": 60, "eval_every": 30},
            "distill": {"steps": 60, "eval_every": 30},
            "translator": {"steps": 40, "batch_size": 8, "warmup": 10},
            "sampler": {"steps": 10, "limit": 8},
        }
    )
