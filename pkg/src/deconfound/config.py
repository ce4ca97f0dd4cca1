"""Experiment configuration files.

A config is a YAML (or JSON) document with named sections. Unknown keys are
rejected so that a typo never silently falls back to a default.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .synthgen import GenConfig
from .trainers import AdvConfig, TrainConfig


class ConfigError(ValueError):
    """The configuration file is missing, malformed or inconsistent."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DomainSection(_Section):
    base_rate_given_v: tuple[float, float]
    seed: int
    n_samples: int = Field(20000, ge=1)
    d: int = Field(32, ge=1)
    p_v: float = Field(0.5, ge=0.0, le=1.0)
    signal_strength: float = Field(0.4, ge=0.0)
    marker_strength: float = Field(3.0, ge=0.0)
    noise_sd: float = Field(1.0, ge=0.0)
    signal_dims: list[int] = [0, 1, 2, 3]
    marker_dims: list[int] = [4, 5]
    aux_labels: int = Field(0, ge=0)
    age_effect: float = 0.5

    def gen_config(self, domain: str, **overrides) -> GenConfig:
        fields = self.model_dump(exclude={"age_effect"})
        fields.update(domain=domain, **overrides)
        try:
            return GenConfig(**fields)
        except ValueError as exc:
            raise ConfigError(f"generation.{domain}: {exc}") from None


class GenerationSection(_Section):
    source: DomainSection
    target: DomainSection
    nuisance: Literal["binary", "continuous"] = "binary"
    n_test: int = Field(20000, ge=1)


class TrainSection(_Section):
    initial_lr: float = Field(1e-2, gt=0)
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    batch_size: int = Field(128, ge=1)
    lr_decay_factor: float = Field(10.0, gt=0)
    patience_epochs: int = Field(3, ge=1)
    val_fraction: float = Field(0.05, gt=0, lt=1)
    max_epochs: int = Field(50, ge=1)
    hidden_sizes: list[int] = [64, 32]

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.model_dump())


class AdversarialSection(_Section):
    lambda_weight: float = Field(1.0, ge=0)
    adversary_hidden: list[int] = [32, 32, 32]
    adversary_pretrain_epochs: int = Field(1, ge=0)
    joint_epochs: int = Field(200, ge=0)
    adversary_lr: float = Field(1e-2, gt=0)

    def adv_config(self, nuisance_kind: str) -> AdvConfig:
        return AdvConfig(nuisance_kind=nuisance_kind, **self.model_dump())


Method = Literal["standard", "adversarial", "instance_weighting", "matching", "covariate"]


class TrainerSection(_Section):
    method: Method
    train: TrainSection = TrainSection()
    adversarial: AdversarialSection = AdversarialSection()


class DiagnosticsSection(_Section):
    probe: bool = True
    probe_epochs: int = Field(40, ge=1)
    ks: bool = True
    orthogonality: bool = False
    export_scores: bool = True
    export_embedding: bool = False


class SweepSection(_Section):
    ratios: list[float] = [1.0, 2.0, 10.0, 100.0]
    n_per_view: int = Field(10000, ge=1)
    overall_rate: float = Field(0.05, ge=0, le=1)
    target_base_rates: tuple[float, float] = (0.05, 0.05)
    n_target: int = Field(20000, ge=1)
    tolerance: float = Field(0.01, ge=0)

    @field_validator("ratios")
    @classmethod
    def _positive(cls, v):
        if not v or any(r <= 0 for r in v):
            raise ValueError("ratios must be a non-empty list of positive numbers")
        return v


class ExperimentConfig(_Section):
    generation: GenerationSection
    trainer: TrainerSection
    diagnostics: DiagnosticsSection = DiagnosticsSection()
    sweep: SweepSection = SweepSection()
    replicates: int = Field(3, ge=1)
    output_dir: str = "runs/default"
    seed: int = 0

    def digest(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replicate_seeds(self) -> list[int]:
        return [self.seed + i * 10007 for i in range(self.replicates)]


def _describe(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_config(doc) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping of named sections")
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(doc)


def default_config_dict(method: str = "standard") -> dict:
    """The flipped source/target experiment: the label/nuisance association reverses across domains."""
    return {
        "generation": {
            "source": {"base_rate_given_v": [0.021, 0.039], "seed": 1},
            "target": {"base_rate_given_v": [0.039, 0.021], "seed": 2},
        },
        "trainer": {"method": method},
    }
