"""Self-describing binary container for datasets, volumes, and checkpoints.

Layout: 4-byte magic "SPI1" | u32 little-endian header length | UTF-8 JSON
header | raw little-endian payload, row-major. The header always carries
dtype, shape, and a role tag; geometry, seed provenance, and a config hash
ride along as plain JSON.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"SPI1"
ROLES = {"images", "density", "intensity", "rotations", "gammas", "params"}

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "uint8": "<u1",
    "int64": "<i8",
}


class ContainerError(Exception):
    """Base for container parse failures; offset is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class BadMagicError(ContainerError):
    pass


class HeaderError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    def __init__(self, expected: int, actual: int, offset: int):
        super().__init__(f"payload: expected {expected} bytes, found {actual}", offset)
        self.expected = expected
        self.actual = actual


def _dtype_name(arr: np.ndarray) -> str:
    for name, code in _DTYPES.items():
        if arr.dtype == np.dtype(code).newbyteorder("="):
            return name
    raise ValueError(f"unsupported payload dtype {arr.dtype}")


def write_container(path: str, header: dict, payload: np.ndarray) -> None:
    """Serialize payload with its JSON header; dtype/shape are filled in
    from the array and must not conflict with caller-provided values."""
    payload = np.ascontiguousarray(payload)
    name = _dtype_name(payload)
    full = dict(header)
    if "role" not in full or full["role"] not in ROLES:
        raise ValueError(f"header must carry a role in {sorted(ROLES)}")
    for key, value in (("dtype", name), ("shape", list(payload.shape))):
        if key in full and full[key] != value:
            raise ValueError(f"header {key}={full[key]!r} conflicts with payload {value!r}")
        full[key] = value
    blob = json.dumps(full, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload.astype(_DTYPES[name], copy=False).tobytes())


def read_container(path: str) -> tuple[dict, np.ndarray]:
    """Parse a container; raises a distinct error kind per failure mode."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", 0)
    if len(raw) < 8:
        raise HeaderError("missing header length field", 4)
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise HeaderError(f"header declared {hlen} bytes, file too short", 8)
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise HeaderError(f"header JSON parse failure: {exc}", 8) from None
    for key in ("dtype", "shape", "role"):
        if key not in header:
            raise HeaderError(f"header missing required key {key!r}", 8)
    if header["dtype"] not in _DTYPES:
        raise HeaderError(f"unknown dtype {header['dtype']!r}", 8)
    shape = tuple(int(s) for s in header["shape"])
    dtype = np.dtype(_DTYPES[header["dtype"]])
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    actual = len(raw) - 8 - hlen
    if actual != expected:
        raise TruncatedPayloadError(expected, actual, 8 + hlen)
    payload = np.frombuffer(raw, dtype=dtype, count=expected // dtype.itemsize, offset=8 + hlen)
    return header, payload.reshape(shape).copy()
