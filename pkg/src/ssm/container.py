"""Binary container shared by feature files and checkpoints.

Layout: 4 magic bytes, 1 version byte, u32 little-endian header length,
UTF-8 JSON header, then a raw payload whose size the header determines.
"""

from __future__ import annotations

import json
import struct

VERSION = 1


class FormatError(ValueError):
    """Base class for container parse failures."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    """Fewer bytes than the header promises."""


class SizeMismatchError(FormatError):
    """Trailing bytes beyond what the header declares."""


class HeaderError(FormatError):
    """Header is not valid JSON or lacks required fields."""


def pack(magic: bytes, header: dict, payload: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + bytes([VERSION]) + struct.pack("<I", len(head)) + head + payload


def unpack(data: bytes, magic: bytes) -> tuple[dict, bytes]:
    if len(data) < 4 or data[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, got {data[:4]!r}")
    if len(data) < 9:
        raise TruncatedError("file ends inside the preamble")
    if data[4] != VERSION:
        raise UnsupportedVersionError(f"unsupported version {data[4]}")
    (n,) = struct.unpack("<I", data[5:9])
    if len(data) < 9 + n:
        raise TruncatedError("file ends inside the JSON header")
    try:
        header = json.loads(data[9 : 9 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderError("header must be a JSON object")
    return header, data[9 + n :]


def check_payload(payload: bytes, expected: int) -> None:
    if len(payload) < expected:
        raise TruncatedError(f"payload holds {len(payload)} bytes, header needs {expected}")
    if len(payload) > expected:
        raise SizeMismatchError(f"payload holds {len(payload)} bytes, header declares {expected}")
