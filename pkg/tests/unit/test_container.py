"""
Unit tests for the binary container format.
"""

from pathlib import Path

import pytest
import torch

from airsum import container, numkernel
from airsum.container import Container
from airsum.numkernel import RngStream
from core.exceptions import ContainerCorruptError, ContainerVersionError


@pytest.fixture
def sample(rng: RngStream) -> Container:
    """Container with a float matrix, an int vector and metadata."""
    return Container(
        kind="dataset",
        meta={"record_count": 2, "note": "desk"},
        arrays={
            "weights": numkernel.gauss(rng, (3, 4)),
            "indices": torch.tensor([4, -1, 7], dtype=torch.int64),
        },
    )


@pytest.mark.unit
class TestEncodeDecode:
    """Test suite for container encoding."""

    def test_round_trip(self, sample: Container) -> None:
        """Test arrays, dtypes and metadata survive encoding."""
        restored = container.decode(container.encode(sample), "dataset")

        assert restored.meta == sample.meta
        assert list(restored.arrays) == ["weights", "indices"]
        assert torch.equal(restored.arrays["weights"], sample.arrays["weights"])
        assert restored.arrays["indices"].dtype == torch.int64
        assert restored.arrays["indices"].tolist() == [4, -1, 7]

    def test_magic_line(self, sample: Container) -> None:
        """Test the first line names the format, kind and version."""
        assert container.encode(sample).split(b"\n", 1)[0] == b"AIRSUM dataset v1"

    def test_truncated_payload(self, sample: Container) -> None:
        """Test a cut-off payload raises ContainerCorruptError."""
        with pytest.raises(ContainerCorruptError):
            container.decode(container.encode(sample)[:-5])

    def test_truncated_header(self) -> None:
        """Test a file without a full header raises ContainerCorruptError."""
        with pytest.raises(ContainerCorruptError):
            container.decode(b"AIRSUM dataset v1\n{")

    def test_checksum(self, sample: Container) -> None:
        """Test a flipped payload byte fails the checksum."""
        data = bytearray(container.encode(sample))
        data[-1] ^= 0xFF

        with pytest.raises(ContainerCorruptError, match="checksum"):
            container.decode(bytes(data))

    def test_old_version(self, sample: Container) -> None:
        """Test an older version tag raises ContainerVersionError."""
        data = container.encode(sample).replace(b" v1\n", b" v0\n", 1)

        with pytest.raises(ContainerVersionError):
            container.decode(data)

    def test_bad_magic(self, sample: Container) -> None:
        """Test a foreign file raises ContainerCorruptError."""
        with pytest.raises(ContainerCorruptError):
            container.decode(container.encode(sample).replace(b"AIRSUM", b"NUMPYZ", 1))

    def test_wrong_kind(self, sample: Container) -> None:
        """Test reading a dataset as a checkpoint fails."""
        with pytest.raises(ContainerCorruptError, match="kind"):
            container.decode(container.encode(sample), "checkpoint")

    def test_unsupported_dtype(self) -> None:
        """Test float32 tensors are rejected."""
        with pytest.raises(ContainerCorruptError):
            container.encode(Container("dataset", arrays={"x": torch.zeros(2, dtype=torch.float32)}))


@pytest.mark.unit
class TestFiles:
    """Test suite for write and read."""

    def test_write_read(self, sample: Container, out_dir: Path) -> None:
        """Test a written file reads back."""
        path = container.write(out_dir / "data.airsum", "dataset", sample.meta, sample.arrays)

        assert container.read(path, "dataset").meta["record_count"] == 2

    def test_missing_directory(self, sample: Container, tmp_path: Path) -> None:
        """Test writing into a missing directory raises FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            container.write(tmp_path / "absent" / "data.airsum", "dataset", {}, sample.arrays)
