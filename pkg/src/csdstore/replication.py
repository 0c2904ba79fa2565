"""In-process replication harness.

Each replica is a deterministic state machine over its own device, WAL,
checkpoint and redo log. The leader (replica 0, fixed) applies an operation
first and forwards it; the operation commits once a majority has made it
durable. Followers can be stalled to model slow or partitioned nodes: their
messages queue in the leader's log and are redelivered on ``heal``.
"""

from __future__ import annotations

import bisect
import copy
import random
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .codec import PAGE_SIZE, Algorithm, CompressedPage, HeavySegment
from .csd import BLOCK_SIZE, CsdDevice
from .errors import CorruptionError, StoreError
from .redo import decode_one, decode_stream
from .space import (BLOCKS_PER_EXTENT, DurableCell, FastLog, IndexEntry,
                    SpaceManager, WriteMode)

PAGE_BLOCKS = PAGE_SIZE // BLOCK_SIZE
WAL_CHECKPOINT_BYTES = 1 << 20


@dataclass(frozen=True)
class Layout:
    """Split of the device's logical space into allocator space and log slots.

    Every page id owns one 4 KB slot block after the data region. The slots
    only cost logical space, which a thin-provisioned device has to spare.
    """
    data_blocks: int
    max_pages: int

    @classmethod
    def for_blocks(cls, logical_blocks: int) -> "Layout":
        data = (logical_blocks * 4 // 5) // BLOCKS_PER_EXTENT * BLOCKS_PER_EXTENT
        return cls(data, logical_blocks - data)

    def slot_lba(self, page_id: int) -> int:
        if not 0 <= page_id < self.max_pages:
            raise ValueError(f"page id {page_id} outside 0..{self.max_pages - 1}")
        return self.data_blocks + page_id


# ---- replicated operations

@dataclass(frozen=True)
class PutPage:
    page_id: int
    mode: WriteMode
    page: CompressedPage
    page_lsn: int
    chunk: int = 0


@dataclass(frozen=True)
class PutSegment:
    page_ids: tuple
    segment: HeavySegment
    page_lsns: tuple
    chunk: int = 0


@dataclass(frozen=True)
class AppendRedo:
    blob: bytes
    last_lsn: int


@dataclass(frozen=True)
class WriteSlot:
    page_id: int
    block: bytes


@dataclass(frozen=True)
class TrimSlots:
    page_ids: tuple


@dataclass(frozen=True)
class ReclaimRedo:
    apply_lsn: int


@dataclass
class ReplicaStorage:
    """Everything of a replica that survives a crash."""
    device: CsdDevice
    wal: FastLog
    checkpoint: DurableCell
    redo: FastLog
    meta: DurableCell

    @classmethod
    def fresh(cls, device_config, fast_log_capacity: int) -> "ReplicaStorage":
        return cls(CsdDevice(device_config), FastLog(fast_log_capacity), DurableCell(),
                   FastLog(fast_log_capacity), DurableCell(struct.pack("<Q", 0)))

    def crash(self, torn_bytes: int = 0) -> None:
        self.wal.crash(torn_bytes)
        self.redo.crash()

    def clone(self) -> "ReplicaStorage":
        return ReplicaStorage(CsdDevice.from_image(self.device.to_image()),
                              copy.deepcopy(self.wal), copy.deepcopy(self.checkpoint),
                              copy.deepcopy(self.redo), copy.deepcopy(self.meta))

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.device.save(d / "device.img")
        self.wal.save(d / "wal.log")
        self.redo.save(d / "redo.log")
        (d / "checkpoint.bin").write_bytes(self.checkpoint.data)
        (d / "meta.bin").write_bytes(self.meta.data)

    @classmethod
    def load(cls, directory, fast_log_capacity: int) -> "ReplicaStorage":
        d = Path(directory)
        return cls(CsdDevice.load(d / "device.img"),
                   FastLog.load(d / "wal.log", fast_log_capacity),
                   DurableCell((d / "checkpoint.bin").read_bytes()),
                   FastLog.load(d / "redo.log", fast_log_capacity),
                   DurableCell((d / "meta.bin").read_bytes()))

    @property
    def apply_lsn(self) -> int:
        return struct.unpack("<Q", self.meta.data)[0] if self.meta.data else 0


class Replica:
    def __init__(self, rid: int, layout: Layout, storage: ReplicaStorage,
                 space: SpaceManager | None = None):
        self.rid = rid
        self.layout = layout
        self.storage = storage
        self.device = storage.device
        self.space = space or SpaceManager(layout.data_blocks, storage.device,
                                           storage.wal, storage.checkpoint)
        self.segment_refs: Counter = Counter()
        # (lsn, absolute offset, length) of every record still in the redo log
        self.redo_positions: list[tuple[int, int, int]] = []
        self.apply_lsn = storage.apply_lsn
        self.last_redo_lsn = self.apply_lsn
        self.crash_hook = None

    def _hook(self, point: str) -> None:
        if self.crash_hook is not None:
            self.crash_hook(point)

    @classmethod
    def recover(cls, rid: int, layout: Layout, storage: ReplicaStorage) -> "Replica":
        space = SpaceManager.recover(layout.data_blocks, storage.wal, storage.checkpoint,
                                     storage.device)
        space.reconcile_device()
        rep = cls(rid, layout, storage, space)
        # slot contents are rebuilt from the redo log, so stale slots go
        slots = [lba for lba in storage.device.mapped_lbas() if lba >= layout.data_blocks]
        if slots:
            storage.device.trim(slots)
        rep.segment_refs = Counter(e.start for e in space.index.values()
                                   if e.mode is WriteMode.HEAVY)
        rep._index_redo()
        return rep

    def _index_redo(self) -> None:
        buf = bytes(self.storage.redo.durable)
        self.redo_positions = []
        pos = 0
        for rec in decode_stream(buf):
            size = rec.wire_size
            self.redo_positions.append((rec.lsn, self.storage.redo.base + pos, size))
            pos += size
            self.last_redo_lsn = max(self.last_redo_lsn, rec.lsn)

    def redo_at(self, lsn: int):
        """Read one redo record from the log by lsn (one fast-log read)."""
        i = bisect.bisect_left(self.redo_positions, (lsn,))
        if i == len(self.redo_positions) or self.redo_positions[i][0] != lsn:
            raise KeyError(lsn)
        _, off, size = self.redo_positions[i]
        redo = self.storage.redo
        got = decode_one(redo.read_range(off - redo.base, size))
        if got is None:
            raise CorruptionError(f"redo record {lsn} does not decode")
        return got[0]

    def redo_records(self):
        return decode_stream(bytes(self.storage.redo.durable))

    @property
    def progress(self) -> tuple[int, int]:
        return (self.space.next_lsn, self.last_redo_lsn)

    # ---- state machine
    def apply(self, op, publish: bool = True):
        if isinstance(op, PutPage):
            return self._put_page(op, publish)
        if isinstance(op, PutSegment):
            return self._put_segment(op, publish)
        if isinstance(op, AppendRedo):
            self._append_redo(op)
        elif isinstance(op, WriteSlot):
            self.device.write_block(self.layout.slot_lba(op.page_id), op.block)
        elif isinstance(op, TrimSlots):
            self.device.trim([self.layout.slot_lba(p) for p in op.page_ids])
        elif isinstance(op, ReclaimRedo):
            self._reclaim(op.apply_lsn)
        else:
            raise TypeError(f"unknown op {op!r}")
        return None

    def _release(self, old: IndexEntry | None, txn) -> None:
        if old is None:
            return
        if old.mode is WriteMode.HEAVY:
            self.segment_refs[old.start] -= 1
            txn.undo.append(lambda: self.segment_refs.update([old.start]))
            if self.segment_refs[old.start] == 0:
                del self.segment_refs[old.start]
                self.space.free_blocks(old.chunk, old.start, old.block_count)
        else:
            self.space.free_blocks(old.chunk, old.start, old.block_count)

    def _write_run(self, start: int, blocks) -> None:
        try:
            for i, blk in enumerate(blocks):
                self.device.write_block(start + i, blk)
        except StoreError:
            # the allocation is rolled back, so nothing may stay mapped there
            self.device.trim(range(start, start + len(blocks)))
            raise

    def _put_page(self, op: PutPage, publish: bool):
        cp = op.page
        with self.space.transaction(publish=publish) as txn:
            old = self.space.staged_get(op.page_id)
            start, n = self.space.allocate_blocks(op.chunk, cp.block_count)
            self._write_run(start, cp.blocks())
            self._hook("after_device_write")
            self.space.index_put(IndexEntry(op.page_id, op.mode, cp.algorithm, start, n,
                                            len(cp.payload), cp.crc16, chunk=op.chunk,
                                            page_lsn=op.page_lsn))
            self._release(old, txn)
        return txn

    def _put_segment(self, op: PutSegment, publish: bool):
        seg = op.segment
        blob = seg.payload + bytes(seg.padded_len - len(seg.payload))
        blocks = [blob[i:i + BLOCK_SIZE] for i in range(0, len(blob), BLOCK_SIZE)]
        crc = CompressedPage(Algorithm.ZSTD, seg.payload).crc16
        with self.space.transaction(publish=publish) as txn:
            start, n = self.space.allocate_blocks(op.chunk, seg.block_count)
            self._write_run(start, blocks)
            self._hook("after_device_write")
            for i, (pid, lsn) in enumerate(zip(op.page_ids, op.page_lsns)):
                old = self.space.staged_get(pid)
                self.space.index_put(IndexEntry(pid, WriteMode.HEAVY, seg.algorithm, start, n,
                                                len(seg.payload), crc, i, len(op.page_ids),
                                                op.chunk, lsn))
                self._release(old, txn)
            self.segment_refs[start] += len(op.page_ids)
            txn.undo.append(lambda: self.segment_refs.subtract({start: len(op.page_ids)}))
        return txn

    def _append_redo(self, op: AppendRedo) -> None:
        redo = self.storage.redo
        pos = redo.base + len(redo.durable) + redo.pending
        redo.append(op.blob)
        self._hook("before_redo_flush")
        redo.flush()
        for rec in decode_stream(op.blob):
            self.redo_positions.append((rec.lsn, pos, rec.wire_size))
            pos += rec.wire_size
        self.last_redo_lsn = max(self.last_redo_lsn, op.last_lsn)

    def _reclaim(self, apply_lsn: int) -> None:
        redo = self.storage.redo
        keep_from = len(redo.durable)
        for lsn, off, _ in self.redo_positions:
            if lsn > apply_lsn:
                keep_from = off - redo.base
                break
        redo.reset(bytes(redo.durable[keep_from:]))
        self.redo_positions = [p for p in self.redo_positions if p[0] > apply_lsn]
        self.apply_lsn = apply_lsn
        self.storage.meta.write(struct.pack("<Q", apply_lsn))
        if len(self.space.wal.durable) > WAL_CHECKPOINT_BYTES:
            self.space.checkpoint()


class ReplicationGroup:
    """Leader-driven majority commit over a fixed set of replicas."""

    def __init__(self, replicas: list[Replica], seed: int = 0):
        self.replicas = replicas
        self.majority = len(replicas) // 2 + 1
        self.rng = random.Random(seed)
        self.stalled: set[int] = set()
        self.log: list = []
        self.acks: list[set] = []
        self.delivered = [0] * len(replicas)
        self.committed = 0
        self._on_commit: dict[int, object] = {}
        self._leader_txn: dict[int, object] = {}
        self.failed: set[int] = set()
        self.listeners: list = []  # called with the op index after each commit

    @property
    def leader(self) -> Replica:
        return self.replicas[0]

    @property
    def pending(self) -> int:
        return len(self.log) - self.committed

    def stall(self, rid: int) -> None:
        if rid == 0:
            raise ValueError("the leader is fixed and cannot be stalled")
        self.stalled.add(rid)

    def heal(self, rid: int | None = None) -> None:
        for r in ([rid] if rid is not None else sorted(self.stalled)):
            self.stalled.discard(r)
            self._deliver(r)
        self._advance()

    def submit(self, op, on_commit=None) -> bool:
        """Replicate ``op``; True when it reached a majority right away."""
        idx = len(self.log)
        self.log.append(op)
        self.acks.append(set())
        try:
            self._leader_txn[idx] = self.leader.apply(op, publish=False)
        except BaseException:
            self.log.pop()
            self.acks.pop()
            raise
        self.delivered[0] = idx + 1
        self.acks[idx].add(0)
        if on_commit is not None:
            self._on_commit[idx] = on_commit
        followers = list(range(1, len(self.replicas)))
        self.rng.shuffle(followers)  # acknowledgment arrival order
        for rid in followers:
            self._deliver(rid)
        self._advance()
        return self.committed > idx

    def _deliver(self, rid: int) -> None:
        if rid in self.stalled or rid in self.failed:
            return
        rep = self.replicas[rid]
        while self.delivered[rid] < len(self.log):
            i = self.delivered[rid]
            try:
                rep.apply(self.log[i])
            except StoreError:
                self.failed.add(rid)
                return
            self.delivered[rid] = i + 1
            self.acks[i].add(rid)

    def _advance(self) -> None:
        while self.committed < len(self.log) and len(self.acks[self.committed]) >= self.majority:
            i = self.committed
            txn = self._leader_txn.pop(i, None)
            if txn is not None:
                self.leader.space.publish(txn)
            self.committed += 1
            cb = self._on_commit.pop(i, None)
            if cb is not None:
                cb()
            for fn in self.listeners:
                fn(i)

    def durable_on(self, idx: int) -> set:
        return set(self.acks[idx])
