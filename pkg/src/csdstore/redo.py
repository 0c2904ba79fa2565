"""Redo records and their wire format."""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass

from .codec import PAGE_SIZE
from .errors import CorruptionError

_HEAD = struct.Struct("<QQHH")
TXN_PAGE = 0xFFFFFFFFFFFFFFFF  # page id carried by transaction marks


class RedoKind(enum.IntEnum):
    PATCH = 0
    TXN_MARK = 1


@dataclass(frozen=True)
class RedoRecord:
    lsn: int
    page_id: int
    offset: int = 0
    data: bytes = b""
    kind: RedoKind = RedoKind.PATCH

    def __post_init__(self):
        if self.kind is RedoKind.PATCH:
            if self.offset < 0 or self.offset + len(self.data) > PAGE_SIZE:
                raise ValueError(f"patch [{self.offset}, +{len(self.data)}) leaves the page")
        elif self.data:
            raise ValueError("transaction marks carry no data")

    @classmethod
    def mark(cls, lsn: int) -> "RedoRecord":
        return cls(lsn, TXN_PAGE, 0, b"", RedoKind.TXN_MARK)

    @property
    def wire_size(self) -> int:
        return _HEAD.size + len(self.data) + 4

    def to_bytes(self) -> bytes:
        page = TXN_PAGE if self.kind is RedoKind.TXN_MARK else self.page_id
        body = _HEAD.pack(self.lsn, page, self.offset, len(self.data)) + self.data
        return body + struct.pack("<I", zlib.crc32(body))

    def apply(self, page: bytearray) -> None:
        if self.kind is RedoKind.PATCH:
            page[self.offset:self.offset + len(self.data)] = self.data


def decode_one(buf: bytes, pos: int = 0) -> tuple[RedoRecord, int] | None:
    """Decode the record at ``pos``; None at padding, a torn tail or a bad crc."""
    if pos + _HEAD.size + 4 > len(buf):
        return None
    lsn, page, off, length = _HEAD.unpack_from(buf, pos)
    end = pos + _HEAD.size + length
    if lsn == 0 or end + 4 > len(buf):
        return None
    (crc,) = struct.unpack_from("<I", buf, end)
    if zlib.crc32(buf[pos:end]) != crc:
        return None
    if page == TXN_PAGE:
        return RedoRecord.mark(lsn), end + 4
    return RedoRecord(lsn, page, off, bytes(buf[pos + _HEAD.size:end])), end + 4


def decode_stream(buf: bytes, strict: bool = False) -> list[RedoRecord]:
    """Decode consecutive records; stops at zero padding or a torn tail.

    With ``strict`` a bad record followed by more data raises.
    """
    out = []
    pos = 0
    while pos < len(buf):
        got = decode_one(buf, pos)
        if got is None:
            if strict and any(buf[pos:]):
                raise CorruptionError(f"undecodable redo record at byte {pos}")
            break
        rec, pos = got
        out.append(rec)
    return out


def encode_many(records) -> bytes:
    return b"".join(r.to_bytes() for r in records)
