"""
Experiment configuration schemas for airsum.
Validates JSON experiment documents and materialises every default.
"""

import json
import math
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from airsum.aggregate import AggregationRule
from airsum.channel import SNR_CONVENTION
from airsum.decoder import DecoderConfig, DecoderMode
from airsum.uracode import CodebookMode
from core.exceptions import ConfigError
from core.types import JSONDict, PathLike


class StrictModel(BaseModel):
    """Base schema: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)


# ============================================================================
# FEEL
# ============================================================================


class TaskConfig(StrictModel):
    """
    Synthetic Gaussian-mixture classification task.

    Attributes:
        input_dim: Feature dimension.
        hidden: Hidden layer widths of the perceptron (empty: linear model).
        classes: Number of labels.
        train_samples: Samples shared among the devices.
        test_samples: Held-out samples for test accuracy.
        bs_samples: Separate IID samples held by the BS.
        separation: Scale of the class means.
    """

    input_dim: int = Field(default=16, ge=1)
    hidden: list[int] = Field(default_factory=lambda: [96])
    classes: int = Field(default=8, ge=2)
    train_samples: int = Field(default=4000, ge=1)
    test_samples: int = Field(default=1000, ge=1)
    bs_samples: int = Field(default=400, ge=1)
    separation: float = Field(default=2.0, gt=0)

    @field_validator("hidden")
    @classmethod
    def validate_hidden(cls, value: list[int]) -> list[int]:
        if any(width < 1 for width in value):
            raise ValueError("hidden widths must be positive")
        return value


class QuantiserConfig(StrictModel):
    """Fragment length d, codebook size n and the quantiser variants."""

    d: int = Field(default=8, ge=1)
    n: int = Field(default=32, ge=1)
    curvature: bool = False
    ordered: bool = True
    epsilon: float = Field(default=1e-8, ge=0)


class UplinkConfig(StrictModel):
    """
    How device updates reach the BS.

    perfect: exact average of the updates. quantised: quantise and aggregate
    with the true counts (no channel). digital_ota: the full codebook,
    channel and decoder pipeline.
    """

    kind: Literal["perfect", "quantised", "digital_ota"] = "perfect"
    mode: DecoderMode = DecoderMode.LEARNED
    snr_db: float = 10.0
    rule: str = "mean"

    @field_validator("rule")
    @classmethod
    def validate_rule(cls, value: str) -> str:
        AggregationRule.parse(value)
        return value

    @field_validator("snr_db")
    @classmethod
    def validate_snr(cls, value: float) -> float:
        if math.isnan(value) or value == -math.inf:
            raise ValueError("snr_db must be finite or +inf")
        return value

    @property
    def aggregation_rule(self) -> AggregationRule:
        return AggregationRule.parse(self.rule)


class FeelConfig(StrictModel):
    """
    Federated edge learning run.

    Attributes:
        devices: Total devices K_t.
        ka_min, ka_max: Active devices per round, drawn uniformly.
        rounds: Communication rounds.
        local_epochs: Local SGD epochs E.
        local_lr: Local learning rate.
        local_batch: Local minibatch size.
        global_lr: Global learning rate η.
        iid_fraction: Share of samples dealt uniformly at random.
        corruption_fraction: Share of active devices sending noise.
        corruption_scale: Multiplier on the honest-norm noise scale.
        error_feedback: None enables it for clean runs only.
        include_bs: Add the BS update to the aggregate as one more device.
        ef_warning_ratio: Warn when ‖e‖ exceeds this multiple of ‖Δw‖.
    """

    devices: int = Field(default=20, ge=1)
    ka_min: int = Field(default=2, ge=1)
    ka_max: int = Field(default=4, ge=1)
    rounds: int = Field(default=30, ge=1)
    local_epochs: int = Field(default=1, ge=1)
    local_lr: float = Field(default=0.05, ge=0)
    local_batch: int = Field(default=32, ge=1)
    global_lr: float = Field(default=1.0, ge=0)
    iid_fraction: float = Field(default=0.2, ge=0, le=1)
    corruption_fraction: float = Field(default=0.0, ge=0, le=1)
    corruption_scale: float = Field(default=1.0, gt=0)
    error_feedback: bool | None = None
    include_bs: bool = False
    ef_warning_ratio: float = Field(default=5.0, gt=0)
    task: TaskConfig = Field(default_factory=TaskConfig)
    quantiser: QuantiserConfig = Field(default_factory=QuantiserConfig)
    uplink: UplinkConfig = Field(default_factory=UplinkConfig)
    seed: int = 0

    @model_validator(mode="after")
    def validate_active_range(self) -> "FeelConfig":
        if not 1 <= self.ka_min <= self.ka_max <= self.devices:
            raise ValueError(
                f"active range [{self.ka_min}, {self.ka_max}] must lie within [1, {self.devices}]"
            )
        return self

    @property
    def error_feedback_enabled(self) -> bool:
        if self.error_feedback is None:
            return self.corruption_fraction == 0.0
        return self.error_feedback


# ============================================================================
# Codebook, decoder, trainer
# ============================================================================


class CodebookConfig(StrictModel):
    l: int = Field(default=24, ge=1)  # noqa: E741
    mode: CodebookMode = CodebookMode.LEARNED


class DecoderSection(StrictModel):
    """Decoder depth and posterior settings; n and l come from quantiser/codebook."""

    layers: int = Field(default=6, ge=1)
    prior_ka_mean: float | None = Field(default=None, gt=0)
    x_max: int | None = Field(default=None, ge=1)
    filters: int = Field(default=32, ge=1)
    kernel: int = Field(default=3, ge=1)

    @field_validator("kernel")
    @classmethod
    def validate_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("kernel width must be odd")
        return value


class TrainConfig(StrictModel):
    """
    Decoder pre-training settings.

    Record counts are whole FEEL rounds; every fragment slot of a record is
    one training sample and a record is one gradient-accumulation block.
    """

    train_records: int = Field(default=16, ge=1)
    val_records: int = Field(default=2, ge=1)
    test_records: int = Field(default=2, ge=1)
    batch_size: int = Field(default=64, ge=1)
    max_epochs: int = Field(default=100, ge=0)
    patience: int = Field(default=20, ge=1)
    tolerance: float = Field(default=1e-6, ge=0)
    lr: float = Field(default=1e-4, gt=0)
    halving_patience: int = Field(default=10, ge=1)
    lambda_l1: float = Field(default=0.01, ge=0)
    lambda_w: float = Field(default=0.001, ge=0)
    lambda_k: float = Field(default=0.01, ge=0)
    lambda_q: float = Field(default=0.1, ge=0)
    quant_loss: bool = False
    snr_min: float = 0.0
    snr_max: float = 20.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(default=1e-8, gt=0)

    @model_validator(mode="after")
    def validate_snr_range(self) -> "TrainConfig":
        if not self.snr_min <= self.snr_max:
            raise ValueError(f"snr range [{self.snr_min}, {self.snr_max}] is empty")
        return self


# ============================================================================
# Evaluation, benchmark, output
# ============================================================================


class EvalConfig(StrictModel):
    snr_list: list[float] = Field(default_factory=lambda: [0.0, 5.0, 10.0, 20.0])
    seeds: list[int] = Field(default_factory=lambda: [0])


class BenchConfig(StrictModel):
    """Decoder-only benchmark: slots per (SNR, seed) drawn at random or from a dataset."""

    slots: int = Field(default=500, ge=1)
    snr_list: list[float] = Field(default_factory=lambda: [0.0, 5.0, 10.0, 20.0])
    seeds: list[int] = Field(default_factory=lambda: [0])
    source: Literal["random", "dataset"] = "random"


class OutputConfig(StrictModel):
    dir: str = "runs"


class ExperimentConfig(StrictModel):
    """
    Top-level experiment document.

    Examples:
        >>> config = ExperimentConfig.model_validate({"seed": 3, "feel": {"rounds": 5}})
        >>> config.feel.rounds, config.decoder.layers
        (5, 6)
    """

    seed: int = 0
    feel: FeelConfig = Field(default_factory=FeelConfig)
    codebook: CodebookConfig = Field(default_factory=CodebookConfig)
    decoder: DecoderSection = Field(default_factory=DecoderSection)
    trainer: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    def decoder_config(self) -> DecoderConfig:
        """DecoderConfig for this experiment's n, l and active range."""
        prior = self.decoder.prior_ka_mean
        if prior is None:
            prior = (self.feel.ka_min + self.feel.ka_max) / 2.0
        return DecoderConfig(
            n=self.feel.quantiser.n,
            l=self.codebook.l,
            layers=self.decoder.layers,
            prior_ka_mean=prior,
            x_max=self.decoder.x_max,
            filters=self.decoder.filters,
            kernel=self.decoder.kernel,
        )

    def resolved(self) -> JSONDict:
        """Every field with defaults materialised, plus the SNR convention."""
        return {**self.model_dump(mode="json"), "snr_convention": SNR_CONVENTION}

    def with_overrides(self, **sections: Any) -> "ExperimentConfig":
        """Copy with nested fields replaced, re-validated."""
        data = self.model_dump(mode="json")
        for dotted, value in sections.items():
            node = data
            *parents, leaf = dotted.split("__")
            for key in parents:
                node = node[key]
            node[leaf] = value
        return parse_config(data)


def parse_config(data: JSONDict) -> ExperimentConfig:
    """
    Validate a configuration mapping.

    Raises:
        ConfigError: On unknown keys or invalid values.
    """
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid experiment config:\n{exc}") from exc


def load_config(path: PathLike | None) -> ExperimentConfig:
    """
    Load a JSON experiment config; None gives the defaults.

    Raises:
        ConfigError: If the file is not valid JSON or fails validation.
        OSError: If the file cannot be read.
    """
    if path is None:
        return ExperimentConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(data)


def write_resolved(config: ExperimentConfig, directory: PathLike) -> Path:
    """Write resolved_config.json into directory."""
    target = Path(directory) / "resolved_config.json"
    target.write_text(json.dumps(config.resolved(), indent=2, sort_keys=True) + "\n")
    return target
