"""
Pytest configuration and fixtures for airsum tests.

This module provides seeded random streams, small codebooks and decoders,
and configuration objects sized for fast unit tests.
"""

from pathlib import Path

import pytest
import torch

from airsum import numkernel, uracode
from airsum.decoder import DecoderConfig, DecoderMode, DecoderParams
from airsum.numkernel import RngStream
from airsum.serializers import ExperimentConfig, FeelConfig
from airsum.uracode import CodebookMode, UraCodebook
from tests.factories import ExperimentConfigFactory, FeelConfigFactory


@pytest.fixture
def rng() -> RngStream:
    """
    Provide a fresh seeded random stream.

    Returns:
        RngStream: Stream with seed 1234 and label "test".

    Examples:
        >>> def test_draw(rng):
        ...     assert numkernel.gauss(rng, (3,)).shape == (3,)
    """
    return RngStream(1234, "test")


@pytest.fixture
def decoder_config() -> DecoderConfig:
    """
    Provide a small decoder configuration (n=16, l=8, two layers).

    Returns:
        DecoderConfig: Configuration with prior K_a mean 3 and 4 CNN filters.
    """
    return DecoderConfig(n=16, l=8, layers=2, prior_ka_mean=3.0, filters=4)


@pytest.fixture
def learned_params(decoder_config: DecoderConfig) -> DecoderParams:
    """Provide learned-mode decoder parameters at initialisation."""
    return DecoderParams(decoder_config, DecoderMode.LEARNED, RngStream(7, "decoder"))


@pytest.fixture
def fixed_params(decoder_config: DecoderConfig) -> DecoderParams:
    """Provide fixed-mode decoder parameters."""
    return DecoderParams(decoder_config, DecoderMode.FIXED, RngStream(7, "decoder"))


@pytest.fixture
def ura_codebook(decoder_config: DecoderConfig) -> UraCodebook:
    """
    Provide a learned-mode URA codebook matching decoder_config.

    Returns:
        UraCodebook: n=16 codewords of length 8 with unit rows.

    Examples:
        >>> def test_shape(ura_codebook):
        ...     assert ura_codebook.sensing_matrix().shape == (8, 16)
    """
    return uracode.init_codebook(
        decoder_config.n, decoder_config.l, CodebookMode.LEARNED, RngStream(11, "codebook")
    )


@pytest.fixture
def perturbed_params(learned_params: DecoderParams) -> DecoderParams:
    """
    Provide learned parameters with every tensor nudged off its initial value.

    The last convolution starts with a single non-zero tap; perturbing it makes
    CNN gradients flow into every layer.
    """
    stream = RngStream(21, "perturb")
    with torch.no_grad():
        for parameter in learned_params.parameters():
            parameter.add_(0.1 * numkernel.gauss(stream, parameter.shape))
    return learned_params


@pytest.fixture
def feel_config() -> FeelConfig:
    """Provide a tiny perfect-aggregation FEEL configuration."""
    return FeelConfigFactory(seed=0)


@pytest.fixture
def experiment_config() -> ExperimentConfig:
    """Provide a tiny experiment configuration (n=8, l=6, two layers)."""
    return ExperimentConfigFactory()


@pytest.fixture
def out_dir(tmp_path: Path) -> Path:
    """
    Provide an existing, empty output directory.

    Examples:
        >>> def test_writes(out_dir):
        ...     assert out_dir.is_dir()
    """
    target = tmp_path / "out"
    target.mkdir()
    return target
