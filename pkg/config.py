#!/usr/bin/env python3
"""
Configuration management for the WCL relation extraction pipeline.

One TOML file drives every stage. Sections mirror the pipeline stages and
are validated strictly: unknown keys and bad values are errors naming the
offending key. Strings and booleans are never coerced into numbers.
Environment variables are never consulted.
"""

import json
import logging
import math
from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import (AfterValidator, BaseModel, ConfigDict, Field, StrictBool, StrictFloat, StrictInt, StrictStr,
                      ValidationError, field_validator, model_validator)
from pydantic_settings import BaseSettings, SettingsConfigDict, TomlConfigSettingsSource
from typing_extensions import Annotated

from errors import ConfigError

logger = logging.getLogger(__name__)

EFFECTIVE_CONFIG_NAME = "effective_config.toml"

DEFAULT_PRONOUNS = [
    "he", "she", "it", "they", "him", "her", "them", "his",
    "hers", "its", "their", "we", "you", "i", "me", "us",
]

# (low, high) ranges explored for the contrastive hyperparameters
SEARCH_RANGES = {
    "wcl.bag_size": (2, 8),
    "wcl.batch_bags": (8, 32),
    "wcl.temperature": (0.05, 1.0),
}


def _positive_temperature(value: float) -> float:
    if not value > 0:
        raise ValueError("temperature must be positive")
    return value


# divides cosine similarities inside the contrastive exponentials
Temperature = Annotated[StrictFloat, AfterValidator(_positive_temperature)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EncoderSection(_Section):
    d_model: StrictInt = Field(64, ge=2)
    n_layers: StrictInt = Field(2, ge=0)
    n_heads: StrictInt = Field(4, ge=1)
    ffn_width: StrictInt = Field(128, ge=1)
    max_len: StrictInt = Field(128, ge=7)
    min_freq: StrictInt = Field(2, ge=1)
    init_std: StrictFloat = Field(0.02, gt=0)
    layer_norm_eps: StrictFloat = Field(1e-5, gt=0)

    @model_validator(mode="after")
    def _heads_divide_width(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        return self


class WclSection(_Section):
    batch_bags: StrictInt = Field(16, ge=1)
    bag_size: StrictInt = Field(4, ge=2)
    temperature: Temperature = 0.2
    include_self: StrictBool = False
    outer_anchor_weight: StrictBool = False


class MaskingPolicy(_Section):
    """BERT-style masking: select mask_rate of maskable tokens, then 80/10/10"""

    mask_rate: StrictFloat = 0.15
    replace_mask: StrictFloat = Field(0.8, ge=0, le=1)
    replace_random: StrictFloat = Field(0.1, ge=0, le=1)
    keep: StrictFloat = Field(0.1, ge=0, le=1)

    @field_validator("mask_rate")
    @classmethod
    def _open_unit_interval(cls, value):
        if not 0 < value < 1:
            raise ValueError("mask_rate must lie in (0, 1)")
        return value

    @model_validator(mode="after")
    def _split_sums_to_one(self):
        total = self.replace_mask + self.replace_random + self.keep
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ValueError(f"replace_mask + replace_random + keep must equal 1 (got {total})")
        return self


class _OptimizerSection(_Section):
    lr: StrictFloat = Field(1e-3, gt=0)
    clip: StrictFloat = Field(1.0, gt=0)


class ReliabilitySection(_OptimizerSection):
    epochs: StrictInt = Field(10, ge=1)
    batch_size: StrictInt = Field(32, ge=1)


class PretrainSection(_OptimizerSection):
    steps: StrictInt = Field(1000, ge=1)
    warmup_fraction: StrictFloat = Field(0.1, ge=0, lt=1)
    checkpoint_every: StrictInt = Field(100, ge=1)
    unweighted: StrictBool = False
    na_per_step: StrictInt = Field(4, ge=0)


class FinetuneSection(_OptimizerSection):
    lr: StrictFloat = Field(5e-4, gt=0)
    epochs: StrictInt = Field(10, ge=1)
    batch_size: StrictInt = Field(32, ge=1)


class DsSection(_Section):
    cap: StrictInt = Field(100, ge=1)
    drop_pronouns: StrictBool = False
    corpus_mode: Literal["doc", "line"] = "line"
    pronouns: List[StrictStr] = Field(default_factory=lambda: list(DEFAULT_PRONOUNS))
    workers: StrictInt = Field(1, ge=1)
    drop_conflicting_na: StrictBool = False

    @field_validator("pronouns")
    @classmethod
    def _lowercase(cls, value):
        return [p.lower() for p in value]


class EvalSection(_Section):
    na_label: StrictStr = Field("NA", min_length=1)
    f1_mode: Literal["exclude_na", "all"] = "exclude_na"


class NoiseBenchConfig(_Section):
    """Synthetic noisy-DS benchmark: relation-correlated trigger tokens plus label flips"""

    num_relations: StrictInt = Field(4, ge=2)
    triggers_per_relation: StrictInt = Field(3, ge=1)
    pairs_per_relation: StrictInt = Field(6, ge=1)
    filler_vocab: StrictInt = Field(40, ge=1)
    sentence_length: StrictInt = Field(10, ge=4)
    ha_size: StrictInt = Field(160, ge=2)
    ds_size: StrictInt = Field(600, ge=2)
    test_size: StrictInt = Field(200, ge=1)
    na_fraction: StrictFloat = Field(0.2, ge=0, lt=1)
    noise_rate: StrictFloat = Field(0.3, ge=0, lt=1)
    seeds: List[StrictInt] = Field(default_factory=lambda: [1, 2, 3], min_length=1)


class PipelineConfig(BaseSettings):
    """Every hyperparameter of the two-stage pipeline"""

    model_config = SettingsConfigDict(extra="forbid")

    seed: StrictInt = Field(13, ge=0)
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    wcl: WclSection = Field(default_factory=WclSection)
    mlm: MaskingPolicy = Field(default_factory=MaskingPolicy)
    reliability: ReliabilitySection = Field(default_factory=ReliabilitySection)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    finetune: FinetuneSection = Field(default_factory=FinetuneSection)
    ds: DsSection = Field(default_factory=DsSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    bench: NoiseBenchConfig = Field(default_factory=NoiseBenchConfig)

    @classmethod
    def settings_customise_sources(cls, settings_cls, init_settings, env_settings,
                                   dotenv_settings, file_secret_settings):
        # Flags and the config file only
        return (init_settings,)


def _config_error(exc: ValidationError) -> ConfigError:
    err = exc.errors()[0]
    key = ".".join(str(part) for part in err["loc"]) or "<root>"
    if err["type"] == "extra_forbidden":
        return ConfigError(key, "unknown key")
    message = err["msg"]
    if message.startswith("Value error, "):
        message = message[len("Value error, "):]
    return ConfigError(key, message)


def build_config(data: Optional[dict] = None) -> PipelineConfig:
    """Validate a plain dict (already-parsed TOML) into a PipelineConfig"""
    try:
        config = PipelineConfig(**(data or {}))
    except ValidationError as exc:
        raise _config_error(exc) from None
    warn_out_of_range(config)
    return config


def load_config(path: Optional[Union[str, Path]] = None) -> PipelineConfig:
    """Parse a TOML config file; omitted keys take their defaults"""
    if path is None:
        return build_config()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(str(path), "config file not found")
    try:
        data = TomlConfigSettingsSource(PipelineConfig, toml_file=path)()
    except ValueError as exc:  # tomllib.TOMLDecodeError
        raise ConfigError(str(path), f"invalid TOML: {exc}") from None
    logger.debug(f"Loaded config from {path}")
    return build_config(data)


parse_config = load_config


def with_seed(config: PipelineConfig, seed: Optional[int]) -> PipelineConfig:
    if seed is None:
        return config
    if seed < 0:
        raise ConfigError("seed", "seed must be non-negative")
    return config.model_copy(update={"seed": seed})


def warn_out_of_range(config: PipelineConfig):
    values = {
        "wcl.bag_size": config.wcl.bag_size,
        "wcl.batch_bags": config.wcl.batch_bags,
        "wcl.temperature": config.wcl.temperature,
    }
    for key, value in values.items():
        low, high = SEARCH_RANGES[key]
        if not low <= value <= high:
            logger.warning(f"⚠️ {key}={value} is outside the explored range [{low}, {high}]")


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return json.dumps(value)


def render_config(config: PipelineConfig) -> str:
    """Render the config as TOML that load_config reads back to an equal config"""
    data = config.model_dump()
    lines = []
    for key, value in data.items():
        if not isinstance(value, dict):
            lines.append(f"{key} = {_toml_value(value)}")
    for key, value in data.items():
        if isinstance(value, dict):
            lines.append("")
            lines.append(f"[{key}]")
            for inner, inner_value in value.items():
                lines.append(f"{inner} = {_toml_value(inner_value)}")
    return "\n".join(lines) + "\n"


def write_effective_config(config: PipelineConfig, out_dir: Union[str, Path]) -> Path:
    """Echo the effective config next to an output for provenance"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / EFFECTIVE_CONFIG_NAME
    target.write_text(render_config(config), encoding="utf-8")
    return target


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent, reproducible generator for one (seed, stream...) coordinate"""
    return np.random.default_rng([int(seed), *[int(s) for s in stream]])
