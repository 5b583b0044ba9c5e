"""
Real AWGN multiple-access channel.

SNR is the ratio of total received signal power to noise power: with unit-norm
codewords and K_a active devices the noise variance per channel use is
K_a / (l · 10^(snr_db/10)), so noise scales linearly with K_a at fixed SNR.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass

import torch

from airsum import numkernel
from airsum.numkernel import RngStream
from core.exceptions import ShapeError
from core.types import Tensor

SNR_CONVENTION = "sigma2 = ka / (l * 10**(snr_db / 10)); unit-norm codewords, cross terms neglected"


@dataclass(frozen=True)
class ChannelConfig:
    """
    Attributes:
        snr_db: SNR in decibels; +inf means noiseless.
        ka_for_power: Active devices in the slot.
    """

    snr_db: float
    ka_for_power: int

    def __post_init__(self) -> None:
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError(f"snr_db must be finite or +inf, got {self.snr_db}")
        if self.ka_for_power < 0:
            raise ValueError(f"ka_for_power must be non-negative, got {self.ka_for_power}")


def noise_variance(cfg: ChannelConfig, l: int) -> float:  # noqa: E741
    """
    Per-channel-use noise variance.

    Examples:
        >>> noise_variance(ChannelConfig(snr_db=10.0, ka_for_power=10), 64)
        0.015625
    """
    if l < 1:
        raise ShapeError(f"noise_variance: l must be positive, got {l}")
    if cfg.ka_for_power == 0 or cfg.snr_db == math.inf:
        return 0.0
    return cfg.ka_for_power / (l * 10.0 ** (cfg.snr_db / 10.0))


def apply(signal: Tensor, cfg: ChannelConfig, rng: RngStream) -> Tensor:
    """y = signal + n with n ~ N(0, σ² I); signal may carry batch dimensions."""
    variance = noise_variance(cfg, int(signal.shape[-1]))
    if variance == 0.0:
        return signal
    return signal + math.sqrt(variance) * numkernel.gauss(rng, signal.shape)


def apply_many(signals: Tensor, cfgs: Sequence[ChannelConfig], rng: RngStream) -> Tensor:
    """Per-row channel for (B, l) signals, one config per row."""
    if signals.dim() != 2 or signals.shape[0] != len(cfgs):
        raise ShapeError(
            f"apply_many: {len(cfgs)} configs for signals {tuple(signals.shape)}"
        )
    l = int(signals.shape[1])  # noqa: E741
    std = torch.tensor(
        [math.sqrt(noise_variance(cfg, l)) for cfg in cfgs], dtype=numkernel.DTYPE
    )
    return signals + std.unsqueeze(1) * numkernel.gauss(rng, signals.shape)
