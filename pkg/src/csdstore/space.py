"""Space management for one storage node: allocators, page index and WAL.

Logical space is handed out in two levels. A device-wide extent allocator
owns 128 KB extents; each chunk carves 4 KB blocks out of the extents it owns
with a bitmap. The hash index maps page ids to compressed block runs. Index
and bitmaps live in memory; every mutation is journaled to a write-ahead log
on the fast log device before it is acknowledged, and a checkpoint bounds how
much of that log recovery has to replay.
"""

from __future__ import annotations

import contextlib
import enum
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .codec import Algorithm
from .errors import (CorruptWal, DoubleFree, NotFound, OutOfLogicalSpace,
                     OutOfLogSpace)

BLOCK_SIZE = 4096
EXTENT_SIZE = 131072
BLOCKS_PER_EXTENT = EXTENT_SIZE // BLOCK_SIZE
MAX_RUN = 256
GROUP_COMMIT_BYTES = 65536


class FastLog:
    """Append-only, uncompressed log device with group commit.

    Appends collect in a buffer; ``flush`` makes them durable. Only durable
    bytes survive ``crash``, except for an optional torn prefix of the
    buffer, which models a flush interrupted part way through.
    """

    def __init__(self, capacity: int = 64 << 20, group_bytes: int = GROUP_COMMIT_BYTES):
        self.capacity = capacity
        self.group_bytes = group_bytes
        self.durable = bytearray()
        self._buffer = bytearray()
        self.base = 0  # bytes reclaimed from the front, for accounting only
        self.bytes_written = 0
        self.bytes_read = 0
        self.flushes = 0
        self.reads = 0

    def append(self, data: bytes) -> None:
        if len(self.durable) + len(self._buffer) + len(data) > self.capacity:
            raise OutOfLogSpace(f"fast log full ({self.capacity} bytes)")
        self._buffer += data
        if len(self._buffer) >= self.group_bytes:
            self.flush()

    def flush(self) -> None:
        if self._buffer:
            self.durable += self._buffer
            self.bytes_written += len(self._buffer)
            self._buffer.clear()
            self.flushes += 1

    @property
    def pending(self) -> int:
        return len(self._buffer)

    def read(self) -> bytes:
        self.reads += 1
        self.bytes_read += len(self.durable)
        return bytes(self.durable)

    def read_range(self, offset: int, length: int) -> bytes:
        self.reads += 1
        self.bytes_read += length
        return bytes(self.durable[offset:offset + length])

    def reset(self, data: bytes = b"") -> None:
        """Replace the durable contents (log truncation after a checkpoint)."""
        self.base += max(0, len(self.durable) - len(data))
        self.durable = bytearray(data)
        self._buffer.clear()

    def crash(self, torn_bytes: int = 0) -> None:
        if torn_bytes:
            self.durable += self._buffer[:torn_bytes]
        self._buffer.clear()

    def save(self, path) -> None:
        self.flush()
        Path(path).write_bytes(bytes(self.durable))

    @classmethod
    def load(cls, path, capacity: int = 64 << 20) -> "FastLog":
        log = cls(capacity)
        p = Path(path)
        if p.exists():
            log.durable = bytearray(p.read_bytes())
        return log


class DurableCell:
    """A small atomically-replaced blob (checkpoint image)."""

    def __init__(self, data: bytes = b""):
        self.data = bytes(data)
        self.writes = 0

    def write(self, data: bytes) -> None:
        self.data = bytes(data)
        self.writes += 1


# ---- index entries

class WriteMode(enum.IntEnum):
    NORMAL = 0
    NONE = 1
    HEAVY = 2


_ENTRY = struct.Struct("<QBBIQQHIHHHQ")


@dataclass(frozen=True)
class IndexEntry:
    """Where one 16 KB page lives.

    For NORMAL/NONE pages ``start``/``block_count`` describe the page's own
    run. For HEAVY pages they describe the whole shared segment and
    ``segment_index`` locates the page inside it.
    """
    page_id: int
    mode: WriteMode
    algorithm: Algorithm
    start: int
    block_count: int
    payload_len: int
    crc16: int = 0
    segment_index: int = 0
    segment_pages: int = 0
    chunk: int = 0
    page_lsn: int = 0

    @property
    def blocks(self) -> range:
        return range(self.start, self.start + self.block_count)

    def to_bytes(self) -> bytes:
        return _ENTRY.pack(self.page_id, self.mode, self.algorithm, self.chunk, self.page_lsn,
                           self.start, self.block_count, self.payload_len, self.crc16,
                           self.segment_index, self.segment_pages, 0)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "IndexEntry":
        (page_id, mode, alg, chunk, page_lsn, start, count, plen, crc,
         sidx, spages, _) = _ENTRY.unpack(raw)
        return cls(page_id, WriteMode(mode), Algorithm(alg), start, count, plen, crc,
                   sidx, spages, chunk, page_lsn)


# ---- allocators

class ExtentAllocator:
    """Device-wide free map of 128 KB extents; lowest-address first fit."""

    def __init__(self, total_extents: int):
        self.total = total_extents
        self._free = bytearray(b"\x01" * total_extents)
        self.free_count = total_extents

    def is_free(self, ext: int) -> bool:
        return bool(self._free[ext])

    def allocate(self, count: int = 1) -> int:
        run = 0
        for ext in range(self.total):
            run = run + 1 if self._free[ext] else 0
            if run == count:
                first = ext - count + 1
                for e in range(first, ext + 1):
                    self.claim(e)
                return first
        raise OutOfLogicalSpace(f"no run of {count} free extents")

    def claim(self, ext: int) -> None:
        if not self._free[ext]:
            raise DoubleFree(f"extent {ext} already owned")
        self._free[ext] = 0
        self.free_count -= 1

    def release(self, ext: int) -> None:
        if self._free[ext]:
            raise DoubleFree(f"extent {ext} already free")
        self._free[ext] = 1
        self.free_count += 1

    def to_bytes(self) -> bytes:
        return struct.pack("<I", self.total) + bytes(self._free)

    @classmethod
    def from_bytes(cls, raw: bytes) -> tuple["ExtentAllocator", int]:
        (total,) = struct.unpack_from("<I", raw)
        ea = cls(total)
        ea._free = bytearray(raw[4:4 + total])
        ea.free_count = sum(ea._free)
        return ea, 4 + total


class BitmapAllocator:
    """Per-chunk 4 KB bitmap over the extents the chunk owns."""

    def __init__(self, chunk: int):
        self.chunk = chunk
        self.owned: list[int] = []  # acquisition order
        self.masks: dict[int, int] = {}

    @property
    def popcount(self) -> int:
        return sum(bin(m).count("1") for m in self.masks.values())

    def is_allocated(self, block: int) -> bool:
        ext, bit = divmod(block, BLOCKS_PER_EXTENT)
        return bool(self.masks.get(ext, 0) >> bit & 1)

    def allocated_blocks(self) -> set[int]:
        out = set()
        for ext, mask in self.masks.items():
            for bit in range(BLOCKS_PER_EXTENT):
                if mask >> bit & 1:
                    out.add(ext * BLOCKS_PER_EXTENT + bit)
        return out

    def find(self, n: int, extents: ExtentAllocator) -> int:
        """Pick a start block for ``n`` blocks without changing any state."""
        if n <= BLOCKS_PER_EXTENT:
            want = (1 << n) - 1
            for ext in reversed(self.owned):
                mask = self.masks[ext]
                for bit in range(BLOCKS_PER_EXTENT - n + 1):
                    if not mask & (want << bit):
                        return ext * BLOCKS_PER_EXTENT + bit
        k = -(-n // BLOCKS_PER_EXTENT)
        run = 0
        for ext in range(extents.total):
            run = run + 1 if extents.is_free(ext) else 0
            if run == k:
                return (ext - k + 1) * BLOCKS_PER_EXTENT
        raise OutOfLogicalSpace(f"chunk {self.chunk}: no room for {n} blocks")

    def claim(self, start: int, n: int, extents: ExtentAllocator) -> None:
        for block in range(start, start + n):
            ext, bit = divmod(block, BLOCKS_PER_EXTENT)
            if ext not in self.masks:
                extents.claim(ext)
                self.owned.append(ext)
                self.masks[ext] = 0
            if self.masks[ext] >> bit & 1:
                raise DoubleFree(f"block {block} already allocated")
            self.masks[ext] |= 1 << bit

    def release(self, start: int, n: int, extents: ExtentAllocator) -> None:
        for block in range(start, start + n):
            if not self.is_allocated(block):
                raise DoubleFree(f"block {block} is not allocated")
        for block in range(start, start + n):
            ext, bit = divmod(block, BLOCKS_PER_EXTENT)
            self.masks[ext] &= ~(1 << bit)
            if not self.masks[ext]:
                del self.masks[ext]
                self.owned.remove(ext)
                extents.release(ext)


# ---- WAL records

class RecordKind(enum.IntEnum):
    INDEX_UPDATE = 1
    ALLOC = 2
    FREE = 3
    CHECKPOINT = 4


_REC_HEAD = struct.Struct("<QBI")
_GROUP_END = 0x01
_OP_PUT, _OP_REMOVE = 1, 2


@dataclass(frozen=True)
class WalRecord:
    lsn: int
    kind: RecordKind
    payload: bytes

    def to_bytes(self) -> bytes:
        body = _REC_HEAD.pack(self.lsn, self.kind, len(self.payload)) + self.payload
        return body + struct.pack("<I", zlib.crc32(body))

    @property
    def ends_group(self) -> bool:
        return bool(self.payload and self.payload[0] & _GROUP_END)


def parse_wal(data: bytes) -> list[WalRecord]:
    """Decode a WAL stream, dropping a torn tail.

    A record that runs past the end of the stream, or the final record when
    its CRC fails, is a torn tail. A CRC failure with more data after it, or
    a gap in the LSN sequence, means corruption.
    """
    out: list[WalRecord] = []
    pos, n = 0, len(data)
    while pos < n:
        if pos + _REC_HEAD.size > n:
            break
        lsn, kind, plen = _REC_HEAD.unpack_from(data, pos)
        end = pos + _REC_HEAD.size + plen + 4
        if end > n:
            break
        (crc,) = struct.unpack_from("<I", data, end - 4)
        if zlib.crc32(data[pos:end - 4]) != crc:
            if end == n:
                break
            raise CorruptWal(f"bad crc at byte {pos} (lsn {lsn})")
        try:
            kind = RecordKind(kind)
        except ValueError:
            raise CorruptWal(f"unknown record kind {kind} at lsn {lsn}") from None
        if out and lsn != out[-1].lsn + 1:
            raise CorruptWal(f"lsn gap: {out[-1].lsn} -> {lsn}")
        out.append(WalRecord(lsn, kind, bytes(data[pos + _REC_HEAD.size:end - 4])))
        pos = end
    return out


# ---- the space manager

_CKPT_MAGIC = b"CKPT"
_CKPT_VERSION = 1


@dataclass
class _Txn:
    records: list = field(default_factory=list)  # (kind, body) pending encode
    index_ops: list = field(default_factory=list)  # (op, page_id, entry)
    trims: list = field(default_factory=list)
    undo: list = field(default_factory=list)


class SpaceManager:
    """Allocators + index + WAL for one node.

    Mutations happen inside ``transaction()``: allocator changes apply at
    once (single writer), index changes become visible and freed blocks are
    trimmed only after the transaction's WAL records are durable.
    """

    def __init__(self, data_blocks: int, device=None, wal: FastLog | None = None,
                 checkpoint: DurableCell | None = None):
        if data_blocks % BLOCKS_PER_EXTENT:
            raise ValueError("data region must be a whole number of extents")
        self.data_blocks = data_blocks
        self.device = device
        self.wal = wal if wal is not None else FastLog()
        self.ckpt = checkpoint if checkpoint is not None else DurableCell()
        self.extents = ExtentAllocator(data_blocks // BLOCKS_PER_EXTENT)
        self.chunks: dict[int, BitmapAllocator] = {}
        self.index: dict[int, IndexEntry] = {}
        self.next_lsn = 1
        self.checkpoint_lsn = 0
        self.crash_hook = None
        self._txn: _Txn | None = None
        self._lock = threading.RLock()

    # ---- transactions
    def _hook(self, point: str) -> None:
        if self.crash_hook is not None:
            self.crash_hook(point)

    @contextlib.contextmanager
    def transaction(self, publish: bool = True):
        """Group mutations into one atomic, durable WAL group.

        With ``publish=False`` the caller gets the committed transaction back
        and must call ``publish`` once the write is acknowledged; until then
        readers keep seeing the previous index entries and freed blocks are
        not trimmed.
        """
        if self._txn is not None:
            yield self._txn
            return
        with self._lock:
            txn = self._txn = _Txn()
            try:
                yield txn
            except BaseException:
                self._txn = None
                for fn in reversed(txn.undo):
                    fn()
                raise
            self._txn = None
            self._commit(txn)
            if publish:
                self.publish(txn)

    def _commit(self, txn: _Txn) -> None:
        if not txn.records:
            return
        last = len(txn.records) - 1
        for i, (kind, body) in enumerate(txn.records):
            flags = _GROUP_END if i == last else 0
            rec = WalRecord(self.next_lsn, kind, bytes([flags]) + body)
            self.next_lsn += 1
            self.wal.append(rec.to_bytes())
        self._hook("before_flush")
        self.wal.flush()
        self._hook("after_flush")

    def publish(self, txn: _Txn) -> None:
        with self._lock:
            for op, page_id, entry in txn.index_ops:
                if op == _OP_PUT:
                    self.index[page_id] = entry
                else:
                    self.index.pop(page_id, None)
            for start, count in txn.trims:
                if self.device is not None:
                    self.device.trim(range(start, start + count))
            txn.index_ops = []
            txn.trims = []

    def _log(self, kind: RecordKind, body: bytes) -> None:
        assert self._txn is not None
        self._txn.records.append((kind, body))

    # ---- allocation
    def chunk(self, chunk: int) -> BitmapAllocator:
        if chunk not in self.chunks:
            self.chunks[chunk] = BitmapAllocator(chunk)
        return self.chunks[chunk]

    def allocate_blocks(self, chunk: int, n: int) -> tuple[int, int]:
        if not 1 <= n <= MAX_RUN:
            raise ValueError(f"runs are 1..{MAX_RUN} blocks")
        with self.transaction() as txn:
            bm = self.chunk(chunk)
            start = bm.find(n, self.extents)
            self._log(RecordKind.ALLOC, struct.pack("<IQI", chunk, start, n))
            bm.claim(start, n, self.extents)
            txn.undo.append(lambda: bm.release(start, n, self.extents))
            return start, n

    def free_blocks(self, chunk: int, start: int, n: int) -> None:
        with self.transaction() as txn:
            bm = self.chunk(chunk)
            for block in range(start, start + n):
                if not bm.is_allocated(block):
                    raise DoubleFree(f"block {block} of chunk {chunk} is not allocated")
            self._log(RecordKind.FREE, struct.pack("<IQI", chunk, start, n))
            bm.release(start, n, self.extents)
            txn.undo.append(lambda: bm.claim(start, n, self.extents))
            txn.trims.append((start, n))

    # ---- index
    def index_put(self, entry: IndexEntry) -> None:
        with self.transaction() as txn:
            self._log(RecordKind.INDEX_UPDATE, bytes([_OP_PUT]) + entry.to_bytes())
            txn.index_ops.append((_OP_PUT, entry.page_id, entry))

    def index_remove(self, page_id: int) -> None:
        with self.transaction() as txn:
            if self._staged_get(page_id) is None:
                raise NotFound(page_id)
            self._log(RecordKind.INDEX_UPDATE, bytes([_OP_REMOVE]) + struct.pack("<Q", page_id))
            txn.index_ops.append((_OP_REMOVE, page_id, None))

    def index_get(self, page_id: int) -> IndexEntry:
        try:
            return self.index[page_id]
        except KeyError:
            raise NotFound(page_id) from None

    def staged_get(self, page_id: int) -> IndexEntry | None:
        """Entry as the current transaction sees it (None when unmapped)."""
        return self._staged_get(page_id)

    def _staged_get(self, page_id: int) -> IndexEntry | None:
        entry = self.index.get(page_id)
        if self._txn is not None:
            for op, pid, e in self._txn.index_ops:
                if pid == page_id:
                    entry = e if op == _OP_PUT else None
        return entry

    # ---- checkpoint & recovery
    def snapshot(self) -> bytes:
        parts = [_CKPT_MAGIC, struct.pack("<HQQ", _CKPT_VERSION, self.next_lsn - 1, self.data_blocks),
                 self.extents.to_bytes(), struct.pack("<I", len(self.chunks))]
        for cid in sorted(self.chunks):
            bm = self.chunks[cid]
            parts.append(struct.pack("<II", cid, len(bm.owned)))
            parts += [struct.pack("<II", ext, bm.masks[ext]) for ext in bm.owned]
        parts.append(struct.pack("<I", len(self.index)))
        parts += [self.index[pid].to_bytes() for pid in sorted(self.index)]
        blob = b"".join(parts)
        return blob + struct.pack("<I", zlib.crc32(blob))

    def checkpoint(self) -> int:
        """Persist a snapshot and truncate the WAL behind it; returns its LSN."""
        with self._lock:
            if self._txn is not None:
                raise RuntimeError("checkpoint inside a transaction")
            self.wal.flush()
            lsn = self.next_lsn - 1
            if self.checkpoint_lsn and lsn == self.checkpoint_lsn + 1 and self.ckpt.data:
                return self.checkpoint_lsn  # only our own mark since the last one
            self.ckpt.write(self.snapshot())
            self._hook("after_checkpoint_write")
            self.wal.reset()
            self.checkpoint_lsn = lsn
            rec = WalRecord(self.next_lsn, RecordKind.CHECKPOINT,
                            bytes([_GROUP_END]) + struct.pack("<Q", lsn))
            self.next_lsn += 1
            self.wal.append(rec.to_bytes())
            self.wal.flush()
            return lsn

    def _load_snapshot(self, blob: bytes) -> None:
        if len(blob) < 8 or zlib.crc32(blob[:-4]) != struct.unpack("<I", blob[-4:])[0]:
            raise CorruptWal("checkpoint image fails crc")
        if blob[:4] != _CKPT_MAGIC:
            raise CorruptWal("bad checkpoint magic")
        version, lsn, data_blocks = struct.unpack_from("<HQQ", blob, 4)
        if version != _CKPT_VERSION or data_blocks != self.data_blocks:
            raise CorruptWal("checkpoint does not match this layout")
        pos = 4 + struct.calcsize("<HQQ")
        self.extents, used = ExtentAllocator.from_bytes(blob[pos:])
        pos += used
        (nchunks,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        for _ in range(nchunks):
            cid, nowned = struct.unpack_from("<II", blob, pos)
            pos += 8
            bm = self.chunk(cid)
            for _ in range(nowned):
                ext, mask = struct.unpack_from("<II", blob, pos)
                pos += 8
                bm.owned.append(ext)
                bm.masks[ext] = mask
        (nentries,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        for _ in range(nentries):
            e = IndexEntry.from_bytes(blob[pos:pos + _ENTRY.size])
            pos += _ENTRY.size
            self.index[e.page_id] = e
        self.checkpoint_lsn = lsn
        self.next_lsn = lsn + 1

    def _replay(self, rec: WalRecord) -> None:
        body = rec.payload[1:]
        if rec.kind is RecordKind.ALLOC:
            chunk, start, n = struct.unpack("<IQI", body)
            self.chunk(chunk).claim(start, n, self.extents)
        elif rec.kind is RecordKind.FREE:
            chunk, start, n = struct.unpack("<IQI", body)
            self.chunk(chunk).release(start, n, self.extents)
        elif rec.kind is RecordKind.INDEX_UPDATE:
            if body[0] == _OP_PUT:
                e = IndexEntry.from_bytes(body[1:])
                self.index[e.page_id] = e
            else:
                (pid,) = struct.unpack("<Q", body[1:])
                self.index.pop(pid, None)

    @classmethod
    def recover(cls, data_blocks: int, wal: FastLog, checkpoint: DurableCell,
                device=None) -> "SpaceManager":
        """Rebuild allocators and index from the checkpoint plus WAL replay.

        Records are applied one atomic group at a time; an unterminated final
        group is dropped along with any torn tail, and the WAL is rewritten
        without it so later appends stay contiguous.
        """
        sm = cls(data_blocks, device, wal, checkpoint)
        if checkpoint.data:
            sm._load_snapshot(checkpoint.data)
        records = parse_wal(bytes(wal.durable))
        group: list[WalRecord] = []
        kept_end = 0
        last_lsn = sm.checkpoint_lsn
        pos = 0
        for rec in records:
            pos += len(rec.to_bytes())
            group.append(rec)
            if not rec.ends_group:
                continue
            for r in group:
                if r.lsn > sm.checkpoint_lsn:
                    try:
                        sm._replay(r)
                    except (DoubleFree, struct.error, ValueError) as exc:
                        raise CorruptWal(f"record {r.lsn} does not apply: {exc}") from exc
                last_lsn = max(last_lsn, r.lsn)
            group = []
            kept_end = pos
        if kept_end != len(wal.durable):
            wal.reset(bytes(wal.durable[:kept_end]))
        sm.next_lsn = last_lsn + 1
        return sm

    def reconcile_device(self) -> int:
        """Trim device blocks in the data region that no allocator owns."""
        if self.device is None:
            return 0
        owned = set()
        for bm in self.chunks.values():
            owned |= bm.allocated_blocks()
        stale = [lba for lba in self.device.mapped_lbas()
                 if lba < self.data_blocks and lba not in owned]
        for lba in stale:
            self.device.trim([lba])
        return len(stale)

    # ---- introspection used by tests and the engine
    def referenced_blocks(self) -> set[int]:
        out = set()
        for e in self.index.values():
            out.update(e.blocks)
        return out

    def allocated_blocks(self) -> set[int]:
        out = set()
        for bm in self.chunks.values():
            out |= bm.allocated_blocks()
        return out

    def state(self) -> tuple:
        """Comparable summary of index and allocator state."""
        return (
            dict(self.index),
            {cid: (tuple(bm.owned), dict(bm.masks)) for cid, bm in self.chunks.items() if bm.owned},
            bytes(self.extents._free),
        )

