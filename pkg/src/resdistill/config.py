"""Experiment configuration: schema, validation, hashing and run manifests.

Configs are YAML files; every defaulted value is materialized before hashing
so a run manifest pins the full hyperparameter set.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import torch
import yaml

from . import models
from .data import NATIVE, BILINEAR_UPSAMPLE
from .losses import MEAN, PRINTED


class ConfigError(ValueError):
    """Raised with the full list of offending fields."""

    def __init__(self, problems: List[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class ModelSpec:
    arch: str = "tiny_cnn"
    input_res: int = 32
    embed_dim: int = 512
    input_mode: str = NATIVE  # student only: native or bilinear_upsample


@dataclass
class CriticConfig:
    tau: float = 0.1
    n_negatives: int = 512
    relation_dim: int = 128
    proj_dim: int = 128
    hidden_dim: Optional[int] = None


@dataclass
class BankConfig:
    capacity: int = 4096
    policy: str = "supervised"


@dataclass
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: List[int] = field(default_factory=lambda: [21, 28, 32])
    gamma: float = 0.1


@dataclass
class ExperimentConfig:
    teacher: ModelSpec = field(default_factory=lambda: ModelSpec(arch="small_cnn"))
    student: ModelSpec = field(default_factory=ModelSpec)
    alpha: float = 0.5
    beta: float = 2.0
    rho: float = 4.0
    cls_mode: str = "cross_entropy"
    negative_weighting: str = PRINTED
    critic: CriticConfig = field(default_factory=CriticConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 96
    epochs: int = 35
    teacher_epochs: int = 10
    seed: int = 5
    factor: int = 4
    eval_protocols: List[str] = field(default_factory=lambda: ["top1"])

    def validate(self):
        problems = []
        for role, spec in (("teacher", self.teacher), ("student", self.student)):
            if spec.arch not in models.registered_architectures():
                problems.append(f"{role}.arch: unknown architecture {spec.arch!r}")
            if spec.input_res < 1:
                problems.append(f"{role}.input_res: must be positive")
            if spec.embed_dim < 1:
                problems.append(f"{role}.embed_dim: must be positive")
        if self.student.input_mode not in (NATIVE, BILINEAR_UPSAMPLE):
            problems.append(f"student.input_mode: unknown mode {self.student.input_mode!r}")
        if self.alpha < 0:
            problems.append("alpha: must be nonnegative")
        if self.beta < 0:
            problems.append("beta: must be nonnegative")
        if self.rho <= 0:
            problems.append("rho: must be positive")
        if self.cls_mode not in ("cross_entropy", "arcface"):
            problems.append(f"cls_mode: unknown mode {self.cls_mode!r}")
        if self.negative_weighting not in (PRINTED, MEAN):
            problems.append(f"negative_weighting: must be printed or mean")
        if self.critic.tau <= 0:
            problems.append("critic.tau: must be positive")
        if self.critic.n_negatives < 1:
            problems.append("critic.n_negatives: must be >= 1")
        if self.critic.n_negatives > self.bank.capacity:
            problems.append("critic.n_negatives: exceeds bank.capacity")
        if self.bank.policy not in ("supervised", "unsupervised"):
            problems.append(f"bank.policy: unknown policy {self.bank.policy!r}")
        if self.optimizer.milestones != sorted(self.optimizer.milestones):
            problems.append("optimizer.milestones: must be sorted ascending")
        if self.batch_size < 1:
            problems.append("batch_size: must be positive")
        if self.epochs < 0 or self.teacher_epochs < 0:
            problems.append("epochs: must be nonnegative")
        if self.factor < 1:
            problems.append("factor: must be >= 1")
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_NESTED = {"teacher": ModelSpec, "student": ModelSpec, "critic": CriticConfig,
           "bank": BankConfig, "optimizer": OptimizerConfig}


def config_from_dict(raw: dict) -> ExperimentConfig:
    problems = []
    kwargs = {}
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key, value in raw.items():
        if key not in known:
            problems.append(f"{key}: unknown field")
            continue
        if key in _NESTED:
            cls = _NESTED[key]
            sub_known = {f.name for f in dataclasses.fields(cls)}
            bad = [f"{key}.{k}: unknown field" for k in value if k not in sub_known]
            problems.extend(bad)
            if not bad:
                kwargs[key] = cls(**value)
        else:
            kwargs[key] = value
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(**kwargs).validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return config_from_dict(raw)


def apply_overrides(config: ExperimentConfig, overrides: List[str]) -> ExperimentConfig:
    """Apply `key=value` / `section.key=value` overrides to a config."""
    raw = config.to_dict()
    problems = []
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            problems.append(f"{item}: expected key=value")
            continue
        target = raw
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in target or not isinstance(target[part], dict):
                problems.append(f"{key}: unknown field")
                break
            target = target[part]
        else:
            leaf = parts[-1]
            if leaf not in target:
                problems.append(f"{key}: unknown field")
            else:
                target[leaf] = yaml.safe_load(value)
    if problems:
        raise ConfigError(problems)
    return config_from_dict(raw)


def write_run_manifest(config: ExperimentConfig, path, extra: Optional[dict] = None):
    """Resolved key: value manifest covering every result-affecting setting."""
    flat = _flatten(config.to_dict())
    lines = [f"config_hash: {config.config_hash()}",
             f"platform: {platform.platform()}",
             f"torch_version: {torch.__version__}",
             f"precision: float32",
             f"timestamp: {time.strftime('%Y-%m-%dT%H:%M:%S')}"]
    lines += [f"{k}: {v}" for k, v in sorted(flat.items())]
    if extra:
        lines += [f"{k}: {v}" for k, v in sorted(extra.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out
