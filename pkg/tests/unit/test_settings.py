"""
Unit tests for process settings.
"""

import pytest
from pytest_mock import MockerFixture

from config import settings
from core.exceptions import ConfigError


@pytest.mark.unit
class TestThreads:
    """Test suite for AIRSUM_THREADS parsing."""

    def test_explicit_value(self, monkeypatch: pytest.MonkeyPatch) -> None:
        """Test a positive integer is used as is."""
        monkeypatch.setenv("AIRSUM_THREADS", "3")

        assert settings.read_threads() == 3

    def test_unset_uses_cpu_count(self, monkeypatch: pytest.MonkeyPatch) -> None:
        """Test an empty value falls back to the CPU count."""
        monkeypatch.setenv("AIRSUM_THREADS", "")

        assert settings.read_threads() >= 1

    @pytest.mark.parametrize("raw", ["0", "-2", "many"])
    def test_invalid_value(self, monkeypatch: pytest.MonkeyPatch, raw: str) -> None:
        """Test non-positive or non-numeric values raise ConfigError."""
        monkeypatch.setenv("AIRSUM_THREADS", raw)

        with pytest.raises(ConfigError):
            settings.read_threads()


@pytest.mark.unit
class TestConfigureLogging:
    """Test suite for configure_logging."""

    def test_unknown_format(self, mocker: MockerFixture) -> None:
        """Test an unknown formatter name raises ConfigError."""
        mocker.patch.object(settings, "LOG_FORMAT", "xml")

        with pytest.raises(ConfigError, match="AIRSUM_LOG_FORMAT"):
            settings.configure_logging()

    @pytest.mark.parametrize(("verbose", "level"), [(True, "DEBUG"), (False, "WARNING")])
    def test_verbose_lowers_level(self, mocker: MockerFixture, verbose: bool, level: str) -> None:
        """Test --verbose switches the airsum logger to DEBUG."""
        mocker.patch.object(settings, "LOG_LEVEL", "WARNING")
        dict_config = mocker.patch("logging.config.dictConfig")
        settings.configure_logging(verbose)

        applied = dict_config.call_args.args[0]
        assert applied["loggers"]["airsum"]["level"] == level
        assert applied["loggers"]["airsum"]["propagate"] is False
