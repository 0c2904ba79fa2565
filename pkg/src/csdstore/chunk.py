"""The per-chunk page store.

Pages go through the software codec into whole 4 KB blocks on the device.
Redo records skip every codec: they are appended as-is to the fast log and
kept in a memory cache until evicted. An evicted page's records are packed
into that page's own 4 KB log slot, so bringing the page up to date later
costs a single extra read. Every mutation is replicated and acknowledged only
once a majority of replicas holds it.

Versions are not kept: a page can be read at any LSN from its materialized
LSN up to the durable LSN. Reading below the materialized LSN raises
``StaleLsn``.
"""

from __future__ import annotations

import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

from .codec import (PAGE_SIZE, Algorithm, CompressedPage, HeavySegment, Hints,
                    MeasuredLatency, ModeledLatency, UnitBuffer, build_heavy_segment,
                    compress_fixed, compress_page, decompress_page, extract_page)
from . import codec
from .config import EngineConfig
from .csd import BLOCK_SIZE
from .errors import (CorruptPayload, FutureLsn, NotFound, OutOfRange,
                     ReplicationLost, StaleLsn)
from .metrics import Metrics
from .redo import RedoKind, RedoRecord, decode_stream, encode_many
from .replication import (AppendRedo, Layout, PutPage, PutSegment, ReclaimRedo,
                          Replica, ReplicaStorage, ReplicationGroup, TrimSlots,
                          WriteSlot)
from .space import IndexEntry, WriteMode


@dataclass(frozen=True)
class LsnState:
    durable_lsn: int
    apply_lsn: int
    reader_lsns: dict = field(default_factory=dict)


def _recovery_rank(total: int, present: int) -> int:
    """Which replica (1 = most advanced) holds exactly the committed prefix.

    A committed op sits on at least a majority of all replicas. With some
    replicas missing it is only guaranteed on ``majority - missing`` of the
    ones that remain.
    """
    majority = total // 2 + 1
    return max(1, majority - (total - present))


class ChunkStore:
    def __init__(self, config: EngineConfig | None = None, storages=None):
        self.cfg = cfg = config or EngineConfig()
        self.layout = Layout.for_blocks(cfg.device.logical_blocks)
        if storages is None:
            storages = [ReplicaStorage.fresh(cfg.device, cfg.fast_log_capacity)
                        for _ in range(cfg.replicas)]
            replicas = [Replica(i, self.layout, s) for i, s in enumerate(storages)]
        else:
            replicas = storages
        self._reset_state(replicas)
        self.metrics = Metrics()
        self.latency = MeasuredLatency() if cfg.timing else ModeledLatency()
        self.unit_buffer = UnitBuffer()
        self.ack_count = 0
        self._lock = threading.RLock()

    def _reset_state(self, replicas: list[Replica]) -> None:
        self.replicas = replicas
        self.group = ReplicationGroup(replicas, seed=self.cfg.seed)
        self.durable_lsn = replicas[0].last_redo_lsn
        self.apply_lsn = replicas[0].apply_lsn
        self.readers: dict[str, int] = {}
        self.cache: OrderedDict[int, list[RedoRecord]] = OrderedDict()
        self.cache_bytes = 0
        self.slots: dict[int, list[RedoRecord]] = {}
        self.scattered: dict[int, list[int]] = {}
        self._followups: list = []

    @property
    def leader(self) -> Replica:
        return self.replicas[0]

    @property
    def space(self):
        return self.leader.space

    @property
    def device(self):
        return self.leader.device

    # ---- replication plumbing
    def _submit(self, op, on_commit=None) -> None:
        if self.group.pending:
            raise ReplicationLost(f"{self.group.pending} earlier operation(s) still lack a majority")
        if not self.group.submit(op, on_commit):
            raise ReplicationLost("operation reached fewer than a majority of replicas")

    def _drain(self) -> None:
        while self._followups:
            self._submit(self._followups.pop(0))
        self._enforce_budget()

    def stall(self, rid: int) -> None:
        self.group.stall(rid)

    def heal(self, rid: int | None = None) -> None:
        with self._lock:
            self.group.heal(rid)
            if not self.group.pending:
                self._drain()

    def lsn_state(self) -> LsnState:
        return LsnState(self.durable_lsn, self.apply_lsn, dict(self.readers))

    # ---- readers
    def reader_floor(self) -> int:
        return min(self.readers.values(), default=self.durable_lsn)

    def register_reader(self, name: str, lsn: int | None = None) -> None:
        self.update_reader(name, self.durable_lsn if lsn is None else lsn)

    def update_reader(self, name: str, lsn: int) -> None:
        if lsn > self.durable_lsn:
            raise FutureLsn(f"reader lsn {lsn} beyond durable lsn {self.durable_lsn}")
        if lsn < self.apply_lsn:
            raise StaleLsn(f"reader lsn {lsn} below apply lsn {self.apply_lsn}")
        self.readers[name] = lsn

    def unregister_reader(self, name: str) -> None:
        self.readers.pop(name, None)

    # ---- page writes
    def _check_page_id(self, page_id: int) -> None:
        if not 0 <= page_id < self.layout.max_pages:
            raise OutOfRange(f"page id {page_id} outside 0..{self.layout.max_pages - 1}")

    def _encode(self, data: bytes, mode: WriteMode, page_id: int, hints: Hints | None):
        if mode is WriteMode.NONE or self.cfg.software == "off":
            return CompressedPage(Algorithm.NONE, bytes(data))
        if self.cfg.software == "lz4":
            return compress_fixed(data, Algorithm.LZ4)
        if self.cfg.software == "zstd":
            return compress_fixed(data, Algorithm.ZSTD)
        prev = self.space.index.get(page_id)
        last = prev.algorithm if prev is not None and prev.mode is not WriteMode.HEAVY else None
        cp, _ = compress_page(data, last, hints, self.cfg.selector, self.latency)
        return cp

    def write_page(self, page_id: int, data: bytes, mode: WriteMode = WriteMode.NORMAL,
                   hints: Hints | None = None) -> int:
        """Store a full page image; returns the LSN the write is visible at."""
        mode = WriteMode(mode)
        if mode is WriteMode.HEAVY:
            raise ValueError("heavy compression is only reachable through archive_range")
        if len(data) != PAGE_SIZE:
            raise ValueError(f"pages are {PAGE_SIZE} bytes, got {len(data)}")
        with self._lock:
            self._check_page_id(page_id)
            self._put(page_id, bytes(data), mode, hints, self.durable_lsn, count_ack=True)
            self._drain()
            return self.durable_lsn

    def _put(self, page_id, data, mode, hints, page_lsn, count_ack=False) -> None:
        before = codec.PROBE.compress_calls
        cp = self._encode(data, mode, page_id, hints)
        self.metrics.codec_compress_calls += codec.PROBE.compress_calls - before
        op = PutPage(page_id, mode, cp, page_lsn, self.cfg.chunk)

        def committed():
            self.metrics.algorithms[cp.algorithm.name] += 1
            self.metrics.pages_written += 1
            self.metrics.device_writes += cp.block_count
            if count_ack:
                self.metrics.bytes_in += PAGE_SIZE
                self.ack_count += 1
            self._drop_records(page_id, page_lsn)

        self._submit(op, committed)

    def write(self, offset: int, data: bytes) -> int:
        """Byte-addressed write. Anything not covering whole pages is stored raw."""
        if offset < 0:
            raise ValueError("negative offset")
        if offset % PAGE_SIZE == 0 and len(data) % PAGE_SIZE == 0:
            for i in range(0, len(data), PAGE_SIZE):
                self.write_page((offset + i) // PAGE_SIZE, data[i:i + PAGE_SIZE])
            return self.durable_lsn
        pos = 0
        while pos < len(data):
            pid, within = divmod(offset + pos, PAGE_SIZE)
            take = min(PAGE_SIZE - within, len(data) - pos)
            try:
                page = bytearray(self.read_page(pid))
            except NotFound:
                page = bytearray(PAGE_SIZE)
            page[within:within + take] = data[pos:pos + take]
            mode = WriteMode.NORMAL if take == PAGE_SIZE else WriteMode.NONE
            self.write_page(pid, bytes(page), mode)
            pos += take
        return self.durable_lsn

    # ---- redo path
    def write_redo(self, records) -> int:
        """Append redo records; returns the durable LSN once a majority holds them."""
        records = list(records)
        if not records:
            return self.durable_lsn
        with self._lock:
            expect = self.durable_lsn + 1
            for r in records:
                if r.lsn != expect:
                    raise ValueError(f"redo lsn {r.lsn} breaks continuity, expected {expect}")
                expect += 1
                if r.kind is RedoKind.PATCH:
                    self._check_page_id(r.page_id)
                    if r.page_id not in self.space.index:
                        raise NotFound(r.page_id)
            blob = encode_many(records)
            last = records[-1].lsn

            def committed():
                self.durable_lsn = last
                self.ack_count += 1
                self.metrics.redo_records += len(records)
                self.metrics.redo_bytes += len(blob)
                self.metrics.bytes_in += sum(len(r.data) for r in records)
                for r in records:
                    if r.kind is RedoKind.PATCH:
                        self._cache_add(r)

            self._submit(AppendRedo(blob, last), committed)
            self._drain()
            return self.durable_lsn

    def _cache_add(self, rec: RedoRecord) -> None:
        self.cache.setdefault(rec.page_id, []).append(rec)
        self.cache.move_to_end(rec.page_id)
        self.cache_bytes += rec.wire_size

    def _cache_take(self, page_id: int) -> list[RedoRecord]:
        recs = self.cache.pop(page_id, [])
        self.cache_bytes -= sum(r.wire_size for r in recs)
        return recs

    def _enforce_budget(self) -> None:
        if self.cache_bytes <= self.cfg.log_cache_budget:
            return
        for pid in list(self.cache):
            if self.cache_bytes <= self.cfg.log_cache_budget:
                break
            self._evict(pid)

    # ---- eviction to per-page slots
    def evict_logs(self, page_ids=None) -> None:
        with self._lock:
            for pid in list(self.cache if page_ids is None else page_ids):
                if pid in self.cache:
                    self._evict(pid)
            self._drain()

    def _evict(self, pid: int) -> None:
        if not self.cfg.per_page_log:
            recs = self._cache_take(pid)
            self.scattered.setdefault(pid, []).extend(r.lsn for r in recs)
            return
        merged = self.slots.get(pid, []) + self.cache.get(pid, [])
        if len(encode_many(merged)) > BLOCK_SIZE:
            self._consolidate(pid, self._target(pid))
            merged = self.slots.get(pid, []) + self.cache.get(pid, [])
            if not self.cache.get(pid) or len(encode_many(merged)) > BLOCK_SIZE:
                return  # what is left is above a lagging reader and stays cached
        blob = encode_many(merged)

        def committed():
            self._cache_take(pid)
            self.slots[pid] = merged
            self.metrics.log_slot_writes += 1
            self.metrics.device_writes += 1

        self._submit(WriteSlot(pid, blob + bytes(BLOCK_SIZE - len(blob))), committed)

    def _drop_records(self, pid: int, upto: int) -> None:
        """Forget records at or below ``upto``; called once the page covers them."""
        recs = self._cache_take(pid)
        keep = [r for r in recs if r.lsn > upto]
        for r in keep:
            self._cache_add(r)
        if pid in self.scattered:
            self.scattered[pid] = [lsn for lsn in self.scattered[pid] if lsn > upto]
            if not self.scattered[pid]:
                del self.scattered[pid]
        old = self.slots.get(pid)
        if old:
            left = [r for r in old if r.lsn > upto]
            if len(left) != len(old):
                if left:
                    self.slots[pid] = left
                    blob = encode_many(left)
                    self._followups.append(WriteSlot(pid, blob + bytes(BLOCK_SIZE - len(blob))))
                else:
                    del self.slots[pid]
                    self._followups.append(TrimSlots((pid,)))

    # ---- reads
    def _read_base(self, entry: IndexEntry) -> bytes:
        blocks = [self.device.read_block(lba) for lba in entry.blocks]
        self.metrics.device_reads += len(blocks)
        self.metrics.blocks_per_page_read[len(blocks)] += 1
        payload = b"".join(blocks)[:entry.payload_len]
        if CompressedPage(entry.algorithm, payload).crc16 != entry.crc16:
            raise CorruptPayload(f"page {entry.page_id} fails its checksum")
        before = codec.PROBE.decompress_calls
        t0 = time.perf_counter()
        if entry.mode is WriteMode.HEAVY:
            self.metrics.heavy_segment_reads += 1
            self.metrics.heavy_blocks_read += len(blocks)
            offsets = tuple((i, i * PAGE_SIZE, PAGE_SIZE) for i in range(entry.segment_pages))
            seg = HeavySegment(payload, offsets, self.cfg.heavy_unit_size, Algorithm.ZSTD,
                               self.cfg.heavy_level)
            page = extract_page(seg, entry.segment_index, self.unit_buffer)
        else:
            page = decompress_page(CompressedPage(entry.algorithm, payload))
        if self.cfg.timing:
            self.metrics.decompress_us += (time.perf_counter() - t0) * 1e6
        elif entry.algorithm is not Algorithm.NONE:
            self.metrics.decompress_us += self.latency(entry.algorithm, payload, len(page))
        self.metrics.codec_decompress_calls += codec.PROBE.decompress_calls - before
        return page

    def _materialize(self, pid: int, at_lsn: int) -> tuple[bytes, IndexEntry]:
        entry = self.space.index_get(pid)
        if at_lsn < entry.page_lsn:
            raise StaleLsn(f"page {pid} is materialized at lsn {entry.page_lsn} > {at_lsn}")
        page = bytearray(self._read_base(entry))

        def wanted(lsn):
            return entry.page_lsn < lsn <= at_lsn

        recs = {r.lsn: r for r in self.cache.get(pid, ()) if wanted(r.lsn)}
        log_reads = 0
        if any(wanted(r.lsn) for r in self.slots.get(pid, ())):
            block = self.device.read_block(self.layout.slot_lba(pid))
            self.metrics.device_reads += 1
            log_reads += 1
            for r in decode_stream(block):
                if r.page_id == pid and wanted(r.lsn):
                    recs[r.lsn] = r
        for lsn in self.scattered.get(pid, ()):
            if wanted(lsn):
                recs[lsn] = self.leader.redo_at(lsn)
                self.metrics.device_reads += 1
                log_reads += 1
        for lsn in sorted(recs):
            recs[lsn].apply(page)
        if recs or log_reads:
            self.metrics.log_reads_per_consolidation[log_reads] += 1
        return bytes(page), entry

    def read_page(self, page_id: int, at_lsn: int | None = None) -> bytes:
        with self._lock:
            at = self.durable_lsn if at_lsn is None else at_lsn
            if at > self.durable_lsn:
                raise FutureLsn(f"lsn {at} is beyond durable lsn {self.durable_lsn}")
            page, _ = self._materialize(page_id, at)
            self.metrics.pages_read += 1
            self.metrics.bytes_out += PAGE_SIZE
            return page

    # ---- consolidation
    def _target(self, pid: int) -> int:
        entry = self.space.index_get(pid)
        return max(self.reader_floor(), entry.page_lsn)

    def _pending_lsns(self, pid: int) -> list[int]:
        out = [r.lsn for r in self.cache.get(pid, ())]
        out += [r.lsn for r in self.slots.get(pid, ())]
        out += self.scattered.get(pid, [])
        return out

    def _consolidate(self, pid: int, target: int) -> bool:
        entry = self.space.index_get(pid)
        if not any(entry.page_lsn < lsn <= target for lsn in self._pending_lsns(pid)):
            return False
        page, entry = self._materialize(pid, target)
        self.metrics.consolidations += 1
        self._put(pid, page, WriteMode.NORMAL, None, target)
        return True

    def consolidate(self, page_id: int) -> int:
        """Materialize one page up to the reader floor; returns its new base LSN."""
        with self._lock:
            self._consolidate(page_id, self._target(page_id))
            self._drain()
            return self.space.index_get(page_id).page_lsn

    def advance_apply_lsn(self) -> int:
        with self._lock:
            floor = self.reader_floor()
            if floor <= self.apply_lsn:
                return self.apply_lsn
            pids = {pid for pid in set(self.cache) | set(self.slots) | set(self.scattered)
                    if any(lsn <= floor for lsn in self._pending_lsns(pid))}
            for pid in sorted(pids):
                self._consolidate(pid, max(floor, self.space.index_get(pid).page_lsn))
                self._drain()

            def committed():
                self.apply_lsn = floor

            self._submit(ReclaimRedo(floor), committed)
            self._drain()
            return self.apply_lsn

    # ---- archival
    def archive_range(self, page_ids) -> int:
        """Repack existing pages as heavy segments; returns blocks now used."""
        page_ids = list(dict.fromkeys(page_ids))
        with self._lock:
            for pid in page_ids:
                self.space.index_get(pid)
            per_unit = self.cfg.heavy_unit_size // PAGE_SIZE
            used = 0
            for i in range(0, len(page_ids), per_unit):
                batch = page_ids[i:i + per_unit]
                lsns = tuple(self._target(pid) for pid in batch)
                pages = [self._materialize(pid, lsn)[0] for pid, lsn in zip(batch, lsns)]
                before = codec.PROBE.compress_calls
                seg = build_heavy_segment(pages, self.cfg.heavy_unit_size, self.cfg.heavy_level)
                self.metrics.codec_compress_calls += codec.PROBE.compress_calls - before

                def committed(batch=batch, lsns=lsns, seg=seg):
                    self.metrics.algorithms["HEAVY"] += len(batch)
                    self.metrics.device_writes += seg.block_count
                    for pid, lsn in zip(batch, lsns):
                        self._drop_records(pid, lsn)

                self._submit(PutSegment(tuple(batch), seg, lsns, self.cfg.chunk), committed)
                self._drain()
                used += seg.block_count
            return used

    # ---- reporting
    def stored_blocks(self, page_ids=None) -> int:
        """Logical blocks referenced by the given pages (heavy segments once)."""
        seen = set()
        for pid in (self.space.index if page_ids is None else page_ids):
            e = self.space.index_get(pid)
            seen.update(e.blocks)
        return len(seen)

    def snapshot_metrics(self) -> Metrics:
        m = self.metrics
        m.logical_used = len(self.space.index) * PAGE_SIZE
        stats = self.device.device_stats()
        m.device_logical_used = stats.logical_used
        m.physical_live = stats.physical_live
        return m

    # ---- crash & recovery
    def storages(self) -> list[ReplicaStorage]:
        return [r.storage for r in self.replicas]

    def set_crash_hook(self, hook) -> None:
        """Install ``hook(point)`` on the leader's write path."""
        self.leader.crash_hook = hook
        self.space.crash_hook = hook

    def crash(self, torn_bytes: int = 0) -> list[ReplicaStorage]:
        """Drop all volatile state; returns what survives on each replica."""
        for s in self.storages():
            s.crash(torn_bytes)
        return self.storages()

    @classmethod
    def recover(cls, storages, config: EngineConfig | None = None) -> "ChunkStore":
        """Rebuild a store from surviving replica storage.

        ``storages`` holds one entry per replica, None for a lost one. The
        replica holding exactly the committed prefix is chosen and copied
        over the others.
        """
        cfg = config or EngineConfig()
        if len(storages) != cfg.replicas:
            raise ValueError(f"expected {cfg.replicas} storages, got {len(storages)}")
        layout = Layout.for_blocks(cfg.device.logical_blocks)
        present = [(i, s) for i, s in enumerate(storages) if s is not None]
        if not present:
            raise ReplicationLost("no replica storage survived")
        recovered = [(i, Replica.recover(i, layout, s)) for i, s in present]
        ranked = sorted(recovered, key=lambda t: (t[1].progress, t[1].apply_lsn, -t[0]),
                        reverse=True)
        rank = _recovery_rank(cfg.replicas, len(present))
        source = ranked[min(rank, len(ranked)) - 1][1]
        replicas = []
        for i in range(cfg.replicas):
            if i == source.rid:
                replicas.append(source)
            else:
                replicas.append(Replica.recover(i, layout, source.storage.clone()))
        store = cls(cfg, replicas)
        store._rebuild_cache()
        store._enforce_budget()
        return store

    def _rebuild_cache(self) -> None:
        index = self.space.index
        for rec in self.leader.redo_records():
            self.durable_lsn = max(self.durable_lsn, rec.lsn)
            if rec.kind is not RedoKind.PATCH or rec.lsn <= self.apply_lsn:
                continue
            entry = index.get(rec.page_id)
            if entry is not None and rec.lsn > entry.page_lsn:
                self._cache_add(rec)

    def save(self, directory) -> None:
        with self._lock:
            for i, s in enumerate(self.storages()):
                s.save(Path(directory) / f"replica{i}")

    @classmethod
    def load(cls, directory, config: EngineConfig | None = None) -> "ChunkStore":
        cfg = config or EngineConfig()
        storages = []
        for i in range(cfg.replicas):
            d = Path(directory) / f"replica{i}"
            storages.append(ReplicaStorage.load(d, cfg.fast_log_capacity) if d.exists() else None)
        return cls.recover(storages, cfg)
