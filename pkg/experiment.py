# experiment.py
"""ExperimentConfig: the JSON schema that fully determines a run.

Every field has a default, unknown keys are rejected, and validation errors
are re-raised as ConfigError listing each offending field path.
"""
import json
import logging
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

import config
from contrastive import NegativeSamplingStrategy
from errors import ConfigError, InputTooShortError
from model import ModelConfig
from synthdata import (TARGETS, DiscreteJointTask, GaussianPairTask, LatentMarkovSequenceTask)
from utils import config_hash

logger = logging.getLogger(__name__)

TaskConfig = Annotated[
    Union[LatentMarkovSequenceTask, GaussianPairTask, DiscreteJointTask],
    Field(discriminator="kind"),
]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TrainingConfig(_Section):
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(8, ge=1)
    sequences_per_source: int = Field(2, ge=1)
    learning_rate: float = Field(config.DEFAULT_LEARNING_RATE, gt=0.0)
    seed: int = Field(0, ge=0, lt=2 ** 64)
    log_every: int = Field(config.DEFAULT_LOG_EVERY, ge=1)
    reduction: Literal["mean", "sum"] = "mean"


class ContrastiveConfig(_Section):
    num_negatives: int = Field(16, ge=1, description="N: candidates per context (1 positive + N-1 negatives)")
    strategy: NegativeSamplingStrategy = NegativeSamplingStrategy.MIXED_SOURCE
    objective: Literal["infonce", "mine"] = "infonce"


class ProbeConfig(_Section):
    targets: List[Literal["hidden-state", "source-id"]] = Field(default_factory=lambda: list(TARGETS))
    l2_grid: List[float] = Field(default_factory=lambda: list(config.PROBE_L2_GRID))
    include_hidden: bool = False
    hidden_width: int = Field(config.PROBE_HIDDEN_WIDTH, ge=1)
    hidden_steps: int = Field(500, ge=1)
    include_supervised: bool = True
    supervised_steps: int = Field(1000, ge=0)
    train_sequences: int = Field(32, ge=1)
    val_sequences: int = Field(8, ge=1)
    test_sequences: int = Field(16, ge=1)

    @model_validator(mode="after")
    def _check_grid(self) -> "ProbeConfig":
        if not self.l2_grid or min(self.l2_grid) < 0:
            raise ValueError("l2_grid must be a non-empty list of non-negative values")
        return self


class EvalConfig(_Section):
    batches: int = Field(50, ge=1)
    sequences: int = Field(8, ge=1)


class ExperimentConfig(_Section):
    task: TaskConfig = Field(default_factory=LatentMarkovSequenceTask)
    model: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    contrastive: ContrastiveConfig = Field(default_factory=ContrastiveConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    out_dir: str = ""

    @model_validator(mode="after")
    def _check_run(self) -> "ExperimentConfig":
        if self.contrastive.objective == "mine" and self.contrastive.num_negatives < 2:
            raise ValueError("the mine objective needs num_negatives >= 2")
        if isinstance(self.task, LatentMarkovSequenceTask):
            try:
                frames = self.model.encoder.output_length(self.task.length)
            except InputTooShortError as e:
                raise ValueError(str(e)) from e
            if frames <= self.model.max_horizon:
                raise ValueError(
                    f"sequences give {frames} latent frames; max_horizon {self.model.max_horizon} needs more")
        return self

    @property
    def is_sequence_task(self) -> bool:
        return isinstance(self.task, LatentMarkovSequenceTask)

    @property
    def latent_frames(self) -> int:
        return self.model.encoder.output_length(self.task.length)

    def output_dir(self) -> Path:
        return Path(self.out_dir or config.OUTPUT_ROOT)

    def hash(self) -> str:
        return config_hash(self.model_dump(mode="json", exclude={"out_dir"}))

    def update(self, **changes: Any) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. update(**{"training.seed": 3}); re-validated."""
        payload = self.model_dump(mode="json")
        for path, value in changes.items():
            node = payload
            *parents, leaf = path.split(".")
            for key in parents:
                node = node[key]
            node[leaf] = value
        return parse_config(payload)


def _field_paths(error: ValidationError) -> List[str]:
    return [".".join(str(part) for part in item["loc"]) or "<root>" for item in error.errors()]


def parse_config(payload: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as e:
        fields = _field_paths(e)
        details = "; ".join(f"{'.'.join(str(p) for p in item['loc']) or '<root>'}: {item['msg']}"
                            for item in e.errors())
        raise ConfigError(f"invalid config ({len(fields)} field(s)): {details}", fields=fields) from e


def load_config(path: Optional[Union[str, Path]] = None, seed: Optional[int] = None,
                out_dir: Optional[str] = None) -> ExperimentConfig:
    """Read and validate a JSON config; None gives the defaults. --seed/--out override the file."""
    payload: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}", fields=["--config"]) from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno} (offset {e.pos})",
                              fields=["<json>"]) from e
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: top-level JSON value must be an object", fields=["<root>"])
    cfg = parse_config(payload)
    overrides: Dict[str, Any] = {}
    if seed is not None:
        overrides["training.seed"] = seed
    if out_dir is not None:
        overrides["out_dir"] = out_dir
    if overrides:
        cfg = cfg.update(**overrides)
    logger.debug("Loaded config %s (hash %s)", path or "<defaults>", cfg.hash())
    return cfg


def dump_defaults() -> Dict[str, Any]:
    return ExperimentConfig().model_dump(mode="json")
