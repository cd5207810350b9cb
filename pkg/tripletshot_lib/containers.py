"""
Versioned binary containers and atomic file writes.

Layout shared by dataset caches and checkpoints::

    magic       4 bytes
    version     uint32, little endian
    header_len  uint32, little endian
    header      UTF-8 JSON (sorted keys, compact separators)
    payload     raw little-endian arrays, back to back

The header carries a ``tensors`` table of {name, dtype, shape, offset, nbytes}
entries pointing into the payload. Writing the same arrays and header twice
produces the same bytes.
"""
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from .exceptions import IngestionError

PathLike = Union[str, os.PathLike]

_PREFIX = struct.Struct("<4sII")


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Write to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def encode_container(magic: bytes, version: int, header: Mapping, arrays: Mapping[str, np.ndarray]) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, array in arrays.items():
        array = np.asarray(array)
        little = array.astype(array.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(little).tobytes()
        table.append({
            "name": name,
            "dtype": little.dtype.str,
            "shape": list(array.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    full_header = dict(header)
    full_header["tensors"] = table
    header_bytes = json.dumps(full_header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(magic, version, len(header_bytes)) + header_bytes + b"".join(chunks)


def write_container(path: PathLike, magic: bytes, version: int, header: Mapping,
                    arrays: Mapping[str, np.ndarray]) -> Path:
    return atomic_write_bytes(path, encode_container(magic, version, header, arrays))


def read_container(path: PathLike, magic: bytes, supported_versions=(1,)) -> Tuple[Dict, Dict[str, np.ndarray]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise IngestionError(f"cannot read {magic.decode()} container ({e.strerror})", str(path)) from e
    if len(blob) < _PREFIX.size:
        raise IngestionError("truncated container", str(path))
    found, version, header_len = _PREFIX.unpack_from(blob)
    if found != magic:
        raise IngestionError(f"bad magic {found!r}, expected {magic!r}", str(path))
    if version not in supported_versions:
        raise IngestionError(f"unsupported container version {version}", str(path))
    start = _PREFIX.size
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
        tensors = header.pop("tensors")
    except (UnicodeDecodeError, ValueError, KeyError) as e:
        raise IngestionError(f"unreadable container header ({e})", str(path)) from None
    payload = memoryview(blob)[start + header_len:]
    arrays = {}
    for entry in tensors:
        name = entry.get("name", "?") if isinstance(entry, dict) else "?"
        try:
            end = entry["offset"] + entry["nbytes"]
            if end > len(payload):
                raise IngestionError(f"truncated container: tensor {name} runs past the end", str(path))
            raw = payload[entry["offset"]:end]
            dtype = np.dtype(entry["dtype"])
            array = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
        except (TypeError, ValueError, KeyError) as e:
            raise IngestionError(f"tensor {name} does not match its header ({e})", str(path)) from None
        arrays[name] = array.astype(dtype.newbyteorder("="), copy=True)
    return header, arrays
