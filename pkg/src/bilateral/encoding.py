"""Canonical byte encoding for signed payloads.

Values are nested tuples/lists of ``int``, ``str``, ``bytes``, ``bool`` and
``None``.  Every value is written as a one-byte tag followed by a fixed-width
big-endian integer or a 4-byte length prefix and the raw bytes, so an
encoding is unique for a given value and stable across platforms.
"""

from __future__ import annotations

import struct
from typing import Any

from .errors import EncodingError

_INT = b"i"
_BYTES = b"b"
_STR = b"s"
_NONE = b"n"
_TRUE = b"T"
_FALSE = b"F"
_LIST = b"l"

_I64 = struct.Struct(">q")
_U32 = struct.Struct(">I")


def _write(value: Any, out: bytearray) -> None:
    # bool before int: bool is an int subclass
    if value is True:
        out += _TRUE
    elif value is False:
        out += _FALSE
    elif value is None:
        out += _NONE
    elif isinstance(value, int):
        out += _INT
        try:
            out += _I64.pack(value)
        except struct.error as exc:
            raise EncodingError(f"integer out of range: {value}") from exc
    elif isinstance(value, (bytes, bytearray)):
        out += _BYTES + _U32.pack(len(value)) + bytes(value)
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out += _STR + _U32.pack(len(raw)) + raw
    elif isinstance(value, (tuple, list)):
        out += _LIST + _U32.pack(len(value))
        for item in value:
            _write(item, out)
    else:
        raise EncodingError(f"cannot encode {type(value).__name__}")


def encode(value: Any) -> bytes:
    out = bytearray()
    _write(value, out)
    return bytes(out)


def _read(data: bytes, pos: int) -> tuple[Any, int]:
    if pos >= len(data):
        raise EncodingError("truncated value")
    tag = data[pos : pos + 1]
    pos += 1
    if tag == _TRUE:
        return True, pos
    if tag == _FALSE:
        return False, pos
    if tag == _NONE:
        return None, pos
    if tag == _INT:
        if pos + 8 > len(data):
            raise EncodingError("truncated integer")
        return _I64.unpack_from(data, pos)[0], pos + 8
    if tag in (_BYTES, _STR, _LIST):
        if pos + 4 > len(data):
            raise EncodingError("truncated length prefix")
        (n,) = _U32.unpack_from(data, pos)
        pos += 4
        if tag == _LIST:
            items = []
            for _ in range(n):
                item, pos = _read(data, pos)
                items.append(item)
            return tuple(items), pos
        if pos + n > len(data):
            raise EncodingError("truncated payload")
        raw = data[pos : pos + n]
        if tag == _BYTES:
            return bytes(raw), pos + n
        try:
            return raw.decode("utf-8"), pos + n
        except UnicodeDecodeError as exc:
            raise EncodingError("invalid utf-8 in string field") from exc
    raise EncodingError(f"unknown tag {tag!r} at offset {pos - 1}")


def decode(data: bytes) -> Any:
    """Inverse of :func:`encode`; lists come back as tuples."""
    value, pos = _read(data, 0)
    if pos != len(data):
        raise EncodingError(f"{len(data) - pos} trailing bytes")
    return value


def expect_shape(fields: Any, n: int, what: str) -> tuple:
    if not isinstance(fields, tuple) or len(fields) != n:
        raise EncodingError(f"malformed {what}")
    return fields
