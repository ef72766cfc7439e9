"""Tag-length-value encoding for structured (non-tensor) checkpoint state.

Wire format, little-endian throughout::

    value := tag:u8 payload
    0 null    -> (empty)
    1 int64   -> i64
    2 float64 -> f64
    3 string  -> len:u64 utf-8 bytes
    4 bytes   -> len:u64 raw bytes
    5 list    -> count:u64 value*
    6 map     -> count:u64 (string-value value)*

Map keys are encoded as full string values (tag 3). Booleans are encoded as
int64 and decode as ``int``; tuples encode as lists.
"""

import struct
from typing import Any

TAG_NULL = 0
TAG_INT = 1
TAG_FLOAT = 2
TAG_STR = 3
TAG_BYTES = 4
TAG_LIST = 5
TAG_MAP = 6

_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")
_INT_MIN = -(1 << 63)
_INT_MAX = (1 << 63) - 1


class EncodingError(ValueError):
    """A value (or a part of it) cannot be represented in the TLV encoding."""

    def __init__(self, path: str, reason: str):
        self.path = path
        super().__init__(f"cannot encode value at {path or '<root>'}: {reason}")


class DecodingError(ValueError):
    pass


def _encode_into(out: bytearray, value: Any, path: str) -> None:
    if value is None:
        out.append(TAG_NULL)
    elif isinstance(value, (bool, int)):
        v = int(value)
        if not _INT_MIN <= v <= _INT_MAX:
            raise EncodingError(path, f"integer {v} out of int64 range")
        out.append(TAG_INT)
        out += _I64.pack(v)
    elif isinstance(value, float):
        out.append(TAG_FLOAT)
        out += _F64.pack(value)
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out.append(TAG_STR)
        out += _U64.pack(len(raw))
        out += raw
    elif isinstance(value, (bytes, bytearray, memoryview)):
        raw = memoryview(value).cast("B")
        out.append(TAG_BYTES)
        out += _U64.pack(len(raw))
        out += raw
    elif isinstance(value, (list, tuple)):
        out.append(TAG_LIST)
        out += _U64.pack(len(value))
        for i, item in enumerate(value):
            _encode_into(out, item, f"{path}[{i}]")
    elif isinstance(value, dict):
        out.append(TAG_MAP)
        out += _U64.pack(len(value))
        for key, item in value.items():
            if not isinstance(key, str):
                raise EncodingError(path, f"map key {key!r} is not a string")
            raw = key.encode("utf-8")
            out.append(TAG_STR)
            out += _U64.pack(len(raw))
            out += raw
            _encode_into(out, item, f"{path}.{key}" if path else key)
    else:
        raise EncodingError(path, f"unsupported type {type(value).__name__}")


def encode(value: Any) -> bytes:
    out = bytearray()
    _encode_into(out, value, "")
    return bytes(out)


def _need(data, pos: int, n: int) -> None:
    if pos + n > len(data):
        raise DecodingError(f"truncated input at offset {pos} (need {n} bytes)")


def _decode_at(data: memoryview, pos: int, depth: int) -> tuple[Any, int]:
    if depth > 256:
        raise DecodingError("nesting too deep")
    _need(data, pos, 1)
    tag = data[pos]
    pos += 1
    if tag == TAG_NULL:
        return None, pos
    if tag == TAG_INT:
        _need(data, pos, 8)
        return _I64.unpack_from(data, pos)[0], pos + 8
    if tag == TAG_FLOAT:
        _need(data, pos, 8)
        return _F64.unpack_from(data, pos)[0], pos + 8
    if tag in (TAG_STR, TAG_BYTES):
        _need(data, pos, 8)
        n = _U64.unpack_from(data, pos)[0]
        pos += 8
        _need(data, pos, n)
        raw = bytes(data[pos:pos + n])
        if tag == TAG_BYTES:
            return raw, pos + n
        try:
            return raw.decode("utf-8"), pos + n
        except UnicodeDecodeError as exc:
            raise DecodingError(f"invalid utf-8 string at offset {pos}") from exc
    if tag in (TAG_LIST, TAG_MAP):
        _need(data, pos, 8)
        count = _U64.unpack_from(data, pos)[0]
        pos += 8
        # every element takes at least one byte
        _need(data, pos, count if tag == TAG_LIST else 2 * count)
        if tag == TAG_LIST:
            items = []
            for _ in range(count):
                item, pos = _decode_at(data, pos, depth + 1)
                items.append(item)
            return items, pos
        mapping = {}
        for _ in range(count):
            if pos < len(data) and data[pos] != TAG_STR:
                raise DecodingError(f"map key at offset {pos} is not a string")
            key, pos = _decode_at(data, pos, depth + 1)
            mapping[key], pos = _decode_at(data, pos, depth + 1)
        return mapping, pos
    raise DecodingError(f"unknown tag {tag} at offset {pos - 1}")


def decode(data) -> Any:
    view = memoryview(data).cast("B")
    value, end = _decode_at(view, 0, 0)
    if end != len(view):
        raise DecodingError(f"{len(view) - end} trailing bytes after value")
    return value


def dump_text(value: Any, indent: int = 0) -> str:
    """Render a decoded value as indented, JSON-like text for reports."""
    pad = "  " * indent
    if isinstance(value, dict):
        if not value:
            return "{}"
        lines = ["{"]
        for key, item in value.items():
            lines.append(f"{pad}  {key}: {dump_text(item, indent + 1)}")
        lines.append(pad + "}")
        return "\n".join(lines)
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in value):
            return "[" + ", ".join(dump_text(v) for v in value) + "]"
        lines = ["["]
        for item in value:
            lines.append(f"{pad}  {dump_text(item, indent + 1)}")
        lines.append(pad + "]")
        return "\n".join(lines)
    if isinstance(value, (bytes, bytearray)):
        head = bytes(value[:16]).hex()
        return f"<{len(value)} bytes {head}{'...' if len(value) > 16 else ''}>"
    if isinstance(value, str):
        return repr(value)
    if value is None:
        return "null"
    return repr(value)
