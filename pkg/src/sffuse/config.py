"""Application configuration: one documented home for every numeric default.

Values marked "fixed by the training recipe" are the constants the whole
artifact is calibrated against; the rest are declared engineering defaults.

  pipeline.n            = 8     samples per (instance, setting); recipe value
  pipeline.tau_acc      = 0.75  inclusive accuracy threshold; recipe value
  pipeline.tau_cons     = 0.8   inclusive consistency threshold; recipe value
  rewards.lambda_acc    = 1.0   stage-2 answer-accuracy weight; recipe value
  rewards.lambda_mps    = 0.2   stage-2 structure-reward weight; recipe value
  allocation.last_k     = 16    layer window for attention allocation; recipe value
  grpo.clip_alpha       = 0.2   clip range; declared default
  grpo.kl_beta          = 0.01  KL coefficient; declared default
  grpo.eps_stab         = 1e-8  advantage-normalization stabilizer; declared default
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .attention_core import DEFAULT_ALLOCATION_WINDOW
from .pem_pipeline import EndpointConfig, PipelineConfig
from .rl_core import GrpoConfig, RewardConfig


@dataclass(frozen=True)
class AppConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    rewards: RewardConfig = field(default_factory=RewardConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    last_k: int = DEFAULT_ALLOCATION_WINDOW
    seed: int = 0

    def __post_init__(self) -> None:
        if self.last_k < 1:
            raise ValueError("last_k must be >= 1")


class ConfigError(ValueError):
    pass


def _build_pipeline(obj: dict) -> PipelineConfig:
    endpoint = EndpointConfig(**obj.pop("endpoint", {}))
    embedder = EndpointConfig(**obj.pop("embedder_endpoint", {}))
    return PipelineConfig(endpoint=endpoint, embedder_endpoint=embedder, **obj)


def config_from_dict(obj: dict) -> AppConfig:
    """Build and validate an AppConfig from a parsed key-value record."""
    known = {"pipeline", "rewards", "grpo", "last_k", "seed"}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        return AppConfig(
            pipeline=_build_pipeline(dict(obj.get("pipeline", {}))),
            rewards=RewardConfig(**obj.get("rewards", {})),
            grpo=GrpoConfig(**obj.get("grpo", {})),
            last_k=int(obj.get("last_k", DEFAULT_ALLOCATION_WINDOW)),
            seed=int(obj.get("seed", 0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> AppConfig:
    """Load a JSON config file; None yields the documented defaults."""
    if path is None:
        return AppConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("config root must be an object")
    return config_from_dict(obj)
