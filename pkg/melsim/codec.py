"""
Canonical binary serialization for entity state, messages and wire frames.

Values are encoded as a type byte followed by little-endian data. Encoding
is canonical: dict entries and set members are written sorted by their
encoded bytes, and lists encode exactly like tuples, so equal values always
produce equal bytes. That property is what makes state digests comparable
across sequential and parallel runs.

Frozen dataclasses take part after being registered with `register`; they
encode as their registered name followed by their field values in
declaration order.
"""

from __future__ import annotations

import dataclasses
import struct
from fractions import Fraction
from typing import Any, TypeVar

_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")
_FRAME_HEADER = struct.Struct("<BI")

_I64_MIN = -(2**63)
_I64_MAX = 2**63 - 1

# Frame tags shared by every cross-context payload
TAG_MODEL = 0
TAG_EOS = 1
TAG_MIGRATION = 2
TAG_REGION = 3
TAG_ABORT = 4
FRAME_TAGS = (TAG_MODEL, TAG_EOS, TAG_MIGRATION, TAG_REGION, TAG_ABORT)

_REGISTRY: dict[str, type] = {}

T = TypeVar("T")


class CodecError(ValueError):
    """Raised for values that cannot be encoded or bytes that cannot be decoded."""


def register(cls: type[T]) -> type[T]:
    """Class decorator: make a dataclass encodable under its qualified name."""
    if not dataclasses.is_dataclass(cls):
        raise TypeError(f"{cls!r} is not a dataclass")
    name = cls.__qualname__
    existing = _REGISTRY.get(name)
    if existing is not None and existing is not cls:
        raise TypeError(f"codec name {name!r} already registered by {existing!r}")
    _REGISTRY[name] = cls
    return cls


def encode(value: Any) -> bytes:
    """Canonical bytes for value."""
    out = bytearray()
    _encode_into(value, out)
    return bytes(out)


def decode(data: bytes) -> Any:
    """Inverse of encode. Lists come back as tuples, sets as frozensets."""
    try:
        value, offset = _decode_from(memoryview(data), 0)
    except (struct.error, UnicodeDecodeError, ZeroDivisionError, TypeError) as exc:
        raise CodecError(f"malformed encoding: {exc}") from exc
    if offset != len(data):
        raise CodecError(f"trailing bytes after value ({len(data) - offset})")
    return value


def _encode_str(s: str, out: bytearray) -> None:
    raw = s.encode("utf-8")
    out += _U32.pack(len(raw))
    out += raw


def _encode_into(value: Any, out: bytearray) -> None:
    # bool before int: bool is an int subclass
    if value is None:
        out += b"N"
    elif value is True:
        out += b"T"
    elif value is False:
        out += b"F"
    elif isinstance(value, int):
        if _I64_MIN <= value <= _I64_MAX:
            out += b"i"
            out += _I64.pack(value)
        else:
            raw = value.to_bytes((value.bit_length() + 8) // 8, "little", signed=True)
            out += b"I"
            out += _U32.pack(len(raw))
            out += raw
    elif isinstance(value, float):
        out += b"f"
        out += _F64.pack(value)
    elif isinstance(value, str):
        out += b"s"
        _encode_str(value, out)
    elif isinstance(value, (bytes, bytearray, memoryview)):
        raw = bytes(value)
        out += b"b"
        out += _U32.pack(len(raw))
        out += raw
    elif isinstance(value, (tuple, list)):
        out += b"t"
        out += _U32.pack(len(value))
        for item in value:
            _encode_into(item, out)
    elif isinstance(value, dict):
        entries = sorted((encode(k), encode(v)) for k, v in value.items())
        out += b"d"
        out += _U32.pack(len(entries))
        for k, v in entries:
            out += k
            out += v
    elif isinstance(value, (set, frozenset)):
        members = sorted(encode(v) for v in value)
        out += b"S"
        out += _U32.pack(len(members))
        for m in members:
            out += m
    elif isinstance(value, Fraction):
        out += b"q"
        _encode_into(value.numerator, out)
        _encode_into(value.denominator, out)
    elif dataclasses.is_dataclass(value) and not isinstance(value, type):
        name = type(value).__qualname__
        if _REGISTRY.get(name) is not type(value):
            raise CodecError(f"dataclass {name} is not registered with the codec")
        fields = dataclasses.fields(value)
        out += b"D"
        _encode_str(name, out)
        out += _U32.pack(len(fields))
        for f in fields:
            _encode_into(getattr(value, f.name), out)
    else:
        raise CodecError(f"cannot encode value of type {type(value).__name__}")


def _read_u32(buf: memoryview, offset: int) -> tuple[int, int]:
    if offset + 4 > len(buf):
        raise CodecError("truncated length field")
    return _U32.unpack_from(buf, offset)[0], offset + 4


def _read_fixed(fmt: struct.Struct, buf: memoryview, offset: int) -> tuple[Any, int]:
    if offset + fmt.size > len(buf):
        raise CodecError(f"truncated {fmt.size}-byte field at offset {offset}")
    return fmt.unpack_from(buf, offset)[0], offset + fmt.size


def _read_bytes(buf: memoryview, offset: int) -> tuple[bytes, int]:
    n, offset = _read_u32(buf, offset)
    if offset + n > len(buf):
        raise CodecError("truncated byte string")
    return bytes(buf[offset:offset + n]), offset + n


def _decode_from(buf: memoryview, offset: int) -> tuple[Any, int]:
    if offset >= len(buf):
        raise CodecError("unexpected end of data")
    tag = chr(buf[offset])
    offset += 1
    if tag == "N":
        return None, offset
    if tag == "T":
        return True, offset
    if tag == "F":
        return False, offset
    if tag == "i":
        return _read_fixed(_I64, buf, offset)
    if tag == "I":
        raw, offset = _read_bytes(buf, offset)
        return int.from_bytes(raw, "little", signed=True), offset
    if tag == "f":
        return _read_fixed(_F64, buf, offset)
    if tag == "s":
        raw, offset = _read_bytes(buf, offset)
        return raw.decode("utf-8"), offset
    if tag == "b":
        return _read_bytes(buf, offset)
    if tag == "t":
        n, offset = _read_u32(buf, offset)
        items = []
        for _ in range(n):
            item, offset = _decode_from(buf, offset)
            items.append(item)
        return tuple(items), offset
    if tag == "d":
        n, offset = _read_u32(buf, offset)
        result = {}
        for _ in range(n):
            k, offset = _decode_from(buf, offset)
            v, offset = _decode_from(buf, offset)
            result[k] = v
        return result, offset
    if tag == "S":
        n, offset = _read_u32(buf, offset)
        members = []
        for _ in range(n):
            m, offset = _decode_from(buf, offset)
            members.append(m)
        return frozenset(members), offset
    if tag == "q":
        num, offset = _decode_from(buf, offset)
        den, offset = _decode_from(buf, offset)
        return Fraction(num, den), offset
    if tag == "D":
        raw, offset = _read_bytes(buf, offset)
        name = raw.decode("utf-8")
        cls = _REGISTRY.get(name)
        if cls is None:
            raise CodecError(f"unknown dataclass {name!r}")
        n, offset = _read_u32(buf, offset)
        values = []
        for _ in range(n):
            v, offset = _decode_from(buf, offset)
            values.append(v)
        fields = dataclasses.fields(cls)
        if len(fields) != n:
            raise CodecError(f"{name}: expected {len(fields)} fields, got {n}")
        return cls(*values), offset
    raise CodecError(f"unknown type byte {tag!r} at offset {offset - 1}")


def encode_frame(tag: int, body: Any) -> bytes:
    """Tagged, length-prefixed frame: tag byte, u32 body length, canonical body."""
    if tag not in FRAME_TAGS:
        raise CodecError(f"unknown frame tag {tag}")
    payload = encode(body)
    return _FRAME_HEADER.pack(tag, len(payload)) + payload


def decode_frame(frame: bytes) -> tuple[int, Any]:
    """Return (tag, body) from a frame produced by encode_frame."""
    if len(frame) < _FRAME_HEADER.size:
        raise CodecError("frame shorter than header")
    tag, length = _FRAME_HEADER.unpack_from(frame, 0)
    if tag not in FRAME_TAGS:
        raise CodecError(f"unknown frame tag {tag}")
    body = frame[_FRAME_HEADER.size:]
    if len(body) != length:
        raise CodecError(f"frame length mismatch: header {length}, body {len(body)}")
    return tag, decode(body)
