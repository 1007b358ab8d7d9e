"""Array encoding and checksums shared by every on-disk format.

Arrays are stored as ``{"dtype": "<f8", "shape": [...], "data": <base64>}``
with little-endian 64-bit floats.  JSON is always dumped with sorted keys and
fixed separators so identical content gives identical bytes.
"""

from __future__ import annotations

import base64
import hashlib
import json
from typing import Any

import numpy as np

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed or incompatible file content.  ``offset`` is a byte offset when known."""

    def __init__(self, message: str, offset: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}: "
        if offset is not None:
            where += f"byte {offset}: "
        super().__init__(where + message)
        self.offset = offset
        self.path = path


class VersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


def encode_array(arr) -> dict:
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    return {"dtype": "<f8", "shape": list(a.shape),
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj: Any) -> np.ndarray:
    try:
        if obj["dtype"] != "<f8":
            raise FormatError(f"unsupported dtype {obj['dtype']!r}")
        raw = base64.b64decode(obj["data"], validate=True)
        shape = tuple(int(s) for s in obj["shape"])
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        return arr.reshape(shape)
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad array record: {exc}") from exc


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def check_version(header: dict, path: str | None = None) -> None:
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"format_version {version!r} is not supported "
                           f"(expected {FORMAT_VERSION})", offset=0, path=path)
