"""Tag-length-value records: 1-byte tag, 4-byte big-endian length, value."""

from __future__ import annotations

from typing import Iterable

from .errors import ValidationError

MAX_LEN = 2**32 - 1


def encode(fields: Iterable[tuple[int, bytes]]) -> bytes:
    out = bytearray()
    for tag, value in fields:
        if not 0 <= tag <= 0xFF:
            raise ValidationError(f"tag {tag} does not fit in one byte")
        if len(value) > MAX_LEN:
            raise ValidationError("value too long for a 4-byte length")
        out += bytes([tag]) + len(value).to_bytes(4, "big") + bytes(value)
    return bytes(out)


def decode(data: bytes) -> list[tuple[int, bytes]]:
    fields = []
    pos = 0
    while pos < len(data):
        if pos + 5 > len(data):
            raise ValidationError("truncated TLV header")
        tag = data[pos]
        size = int.from_bytes(data[pos + 1 : pos + 5], "big")
        pos += 5
        if pos + size > len(data):
            raise ValidationError(f"TLV value for tag 0x{tag:02x} runs past the end")
        fields.append((tag, bytes(data[pos : pos + size])))
        pos += size
    return fields


def encode_list(items: Iterable[bytes]) -> bytes:
    """Length-prefixed concatenation, so lists of variable-size items stay decodable."""
    return b"".join(len(x).to_bytes(4, "big") + bytes(x) for x in items)


def decode_list(data: bytes) -> list[bytes]:
    items, pos = [], 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ValidationError("truncated list item length")
        size = int.from_bytes(data[pos : pos + 4], "big")
        pos += 4
        if pos + size > len(data):
            raise ValidationError("list item runs past the end")
        items.append(bytes(data[pos : pos + size]))
        pos += size
    return items


def u32(x: int) -> bytes:
    return int(x).to_bytes(4, "big")


def read_u32(b: bytes) -> int:
    if len(b) != 4:
        raise ValidationError("expected a 4-byte integer")
    return int.from_bytes(b, "big")
