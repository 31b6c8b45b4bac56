"""Experiment configuration: YAML file or bundled preset, validated up front."""

from __future__ import annotations

import os
from importlib import resources
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .federation import MODES

PRESETS = ("eicu_like", "tcga_like")
OUTPUT_DIR_ENV = "CYCLICDP_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Strict):
    hidden: list[int] = Field(default_factory=lambda: [64])
    activation: Literal["relu", "tanh"] = "relu"

    @field_validator("hidden")
    @classmethod
    def _positive(cls, v):
        if any(h < 1 for h in v):
            raise ValueError("hidden layer sizes must be >= 1")
        return v


class DpConfig(_Strict):
    noise_multiplier: float = Field(ge=0)
    batch_size: int = Field(ge=1)
    learning_rate: float = Field(gt=0)
    clip_norm: float = Field(default=1.0, gt=0)
    sampling: Literal["poisson", "with_replacement"] = "poisson"
    clip_from_paper: bool = False


class BudgetConfig(_Strict):
    epsilon: float = Field(gt=0)
    delta: float = Field(default=1e-5, gt=0, lt=1)


class SiteSpecConfig(_Strict):
    n: int = Field(ge=1)
    id: Optional[str] = None
    feature_shift: Union[float, list[float]] = 0.0
    label_bias: float = 0.0
    positive_fraction_hint: Optional[float] = Field(default=None, gt=0, lt=1)


class SyntheticConfig(_Strict):
    d: int = Field(ge=1)
    signal: float = Field(default=3.0, ge=0)  # L2 norm of the global weight vector
    random_shift: float = Field(default=0.0, ge=0)  # std of per-site random mean offsets
    train_sites: list[SiteSpecConfig] = Field(min_length=1)
    test_sites: list[SiteSpecConfig] = Field(default_factory=list)


class CsvConfig(_Strict):
    train: str
    test: Optional[str] = None
    label_column: str
    site_column: Optional[str] = None


class DataConfig(_Strict):
    synthetic: Optional[SyntheticConfig] = None
    csv: Optional[CsvConfig] = None
    test_fraction: Optional[float] = Field(default=None, gt=0, lt=1)
    normalize: bool = True
    top_k: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.synthetic is None) == (self.csv is None):
            raise ValueError("exactly one of 'synthetic' or 'csv' must be given")
        has_test = bool(self.synthetic and self.synthetic.test_sites) or bool(self.csv and self.csv.test)
        if not has_test and self.test_fraction is None:
            raise ValueError("give held-out test sites/file or a test_fraction")
        if self.synthetic is not None:
            for i, s in enumerate(self.synthetic.train_sites + self.synthetic.test_sites):
                if isinstance(s.feature_shift, list) and len(s.feature_shift) != self.synthetic.d:
                    raise ValueError(f"site {i}: feature_shift must have length {self.synthetic.d}")
            if self.top_k is not None and self.top_k > self.synthetic.d:
                raise ValueError("top_k exceeds the number of features")
        return self


class ExperimentConfig(_Strict):
    name: str = "experiment"
    modes: list[Literal["central", "central_private", "distributed", "distributed_private"]] = Field(
        default_factory=lambda: list(MODES), min_length=1)
    site_counts: Optional[list[int]] = None
    epochs: int = Field(ge=1)
    repeats: int = Field(default=1, ge=1)
    seed: int = 0
    output_dir: str = "runs"
    convergence_tol: Optional[float] = Field(default=1e-4, ge=0)
    fidelity_postcheck: bool = False
    save_epoch_checkpoints: bool = True
    model: ModelConfig = Field(default_factory=ModelConfig)
    dp: DpConfig
    budget: BudgetConfig
    data: DataConfig

    @model_validator(mode="after")
    def _check_counts(self):
        n_train = len(self.data.synthetic.train_sites) if self.data.synthetic else None
        if self.site_counts is not None:
            if any(c < 1 for c in self.site_counts):
                raise ValueError("site_counts entries must be >= 1")
            if n_train is not None and max(self.site_counts) > n_train:
                raise ValueError(f"site_counts exceed the {n_train} configured training sites")
        if self.dp.clip_from_paper and self.dp.noise_multiplier == 0:
            raise ValueError("dp.clip_from_paper with noise_multiplier 0 gives clip_norm 0")
        return self

    @property
    def clip_norm(self) -> float:
        if self.dp.clip_from_paper:
            return self.dp.noise_multiplier / self.dp.batch_size
        return self.dp.clip_norm


def _format_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines)


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    return resources.files("cyclicdp.presets").joinpath(f"{name}.yaml").read_text(encoding="utf-8")


def load_raw(source: str) -> dict:
    """Parse a YAML file path, or a bundled preset name."""
    path = Path(source)
    if path.is_file():
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {source}: {e}") from e
    elif source in PRESETS:
        text = preset_text(source)
    else:
        raise ConfigError(f"config {source!r} is neither a file nor a preset ({', '.join(PRESETS)})")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config {source} is not valid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {source} must be a mapping at the top level")
    return raw


def validate(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(_format_error(e)) from None


def resolve(source: str, overrides: dict | None = None) -> ExperimentConfig:
    """Load, apply scalar overrides ("dp.clip_from_paper" style keys), validate.

    The output directory comes from, in order: an explicit override, the
    CYCLICDP_OUTPUT_DIR environment variable, the file.
    """
    raw = load_raw(source)
    env_dir = os.environ.get(OUTPUT_DIR_ENV)
    if env_dir:
        raw["output_dir"] = env_dir
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: cannot override inside a non-mapping")
        node[leaf] = value
    return validate(raw)


def dump(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
