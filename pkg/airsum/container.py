"""
Versioned little-endian binary container for checkpoints and datasets.
Layout is documented in docs/formats.md.
"""

import json
import logging
import zlib
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from core.exceptions import ContainerCorruptError, ContainerVersionError
from core.types import JSONDict, PathLike, Tensor

logger = logging.getLogger(__name__)

MAGIC = "AIRSUM"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float64: "<f8",
    torch.int64: "<i8",
}
_TORCH_DTYPES = {code: dtype for dtype, code in _DTYPES.items()}


@dataclass
class Container:
    """
    In-memory view of a container file.

    Attributes:
        kind: Payload kind, e.g. "checkpoint" or "dataset".
        meta: JSON-serialisable metadata.
        arrays: Named float64 / int64 tensors, kept in insertion order.
        version: Format version the container was read with.
    """

    kind: str
    meta: JSONDict = field(default_factory=dict)
    arrays: dict[str, Tensor] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _array_bytes(tensor: Tensor) -> tuple[str, bytes]:
    code = _DTYPES.get(tensor.dtype)
    if code is None:
        raise ContainerCorruptError(f"unsupported tensor dtype {tensor.dtype}")
    array = tensor.detach().cpu().contiguous().numpy().astype(code, copy=False)
    return code, array.tobytes(order="C")


def encode(container: Container) -> bytes:
    """Serialise a container to bytes."""
    table = []
    chunks = []
    offset = 0
    for name, tensor in container.arrays.items():
        code, raw = _array_bytes(tensor)
        table.append(
            {
                "name": name,
                "dtype": code,
                "shape": list(tensor.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "meta": container.meta,
        "arrays": table,
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
    }
    head = f"{MAGIC} {container.kind} v{container.version}\n"
    return (head + json.dumps(header, sort_keys=True) + "\n").encode() + payload


def decode(data: bytes, kind: str | None = None) -> Container:
    """
    Parse container bytes.

    Args:
        data: Raw file contents.
        kind: Expected kind; None accepts any.

    Raises:
        ContainerCorruptError: Bad magic, unreadable header, wrong kind,
            truncated payload or checksum mismatch.
        ContainerVersionError: The version tag is not FORMAT_VERSION.
    """
    first_end = data.find(b"\n")
    second_end = data.find(b"\n", first_end + 1) if first_end >= 0 else -1
    if first_end < 0 or second_end < 0:
        raise ContainerCorruptError("container: header is truncated")
    try:
        magic, found_kind, tag = data[:first_end].decode().split(" ")
    except (UnicodeDecodeError, ValueError) as exc:
        raise ContainerCorruptError("container: malformed magic line") from exc
    if magic != MAGIC or not tag.startswith("v") or not tag[1:].isdigit():
        raise ContainerCorruptError(f"container: bad magic line {data[:first_end]!r}")
    version = int(tag[1:])
    if version != FORMAT_VERSION:
        raise ContainerVersionError(
            f"container: version {version} is not supported (expected {FORMAT_VERSION})"
        )
    if kind is not None and found_kind != kind:
        raise ContainerCorruptError(f"container: expected kind {kind!r}, found {found_kind!r}")
    try:
        header = json.loads(data[first_end + 1 : second_end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerCorruptError("container: unreadable JSON header") from exc

    payload = data[second_end + 1 :]
    if len(payload) != header.get("payload_bytes"):
        raise ContainerCorruptError(
            f"container: payload has {len(payload)} bytes, header declares "
            f"{header.get('payload_bytes')}"
        )
    if zlib.crc32(payload) != header.get("crc32"):
        raise ContainerCorruptError("container: checksum mismatch")

    arrays: dict[str, Tensor] = {}
    for entry in header["arrays"]:
        code = entry["dtype"]
        if code not in _TORCH_DTYPES:
            raise ContainerCorruptError(f"container: unknown dtype {code!r}")
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(raw, dtype=np.dtype(code)).reshape(entry["shape"])
        arrays[entry["name"]] = torch.from_numpy(array.copy()).to(_TORCH_DTYPES[code])
    return Container(kind=found_kind, meta=header["meta"], arrays=arrays, version=version)


def write(path: PathLike, kind: str, meta: JSONDict, arrays: Mapping[str, Tensor]) -> Path:
    """
    Write a container file.

    Raises:
        FileNotFoundError: If the parent directory does not exist.
    """
    target = Path(path)
    if not target.parent.is_dir():
        raise FileNotFoundError(f"output directory {target.parent} does not exist")
    target.write_bytes(encode(Container(kind=kind, meta=meta, arrays=dict(arrays))))
    logger.info("Wrote %s container %s (%d arrays)", kind, target, len(arrays))
    return target


def read(path: PathLike, kind: str | None = None) -> Container:
    """Read and validate a container file."""
    return decode(Path(path).read_bytes(), kind)
