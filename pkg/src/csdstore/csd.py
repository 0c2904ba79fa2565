"""Simulated computational storage device.

The device exposes a 4 KB block interface. Every block is deflated on the way
in and appended to a log-structured physical space; the logical-to-physical
table maps each LBA to a byte-granular (V1) or 16-byte-granular (V2)
location inside a segment. Logical and physical capacity are independent,
so a device can advertise more logical space than it has flash.
"""

from __future__ import annotations

import enum
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CorruptImage, OutOfPhysicalSpace, Unmapped, Unrepresentable

BLOCK_SIZE = 4096
DEFAULT_RATIO = 2.5

IMAGE_MAGIC = b"CSDM"
IMAGE_VERSION = 1

_SEG_ID_BITS = 24
_SEG_PAGE_BITS = 15
_NO_SEGMENT = 0xFFFFFFFF


class EntryFormat(enum.IntEnum):
    V1 = 1
    V2 = 2

    @property
    def granularity(self) -> int:
        return 1 if self is EntryFormat.V1 else 16

    @property
    def entry_size(self) -> int:
        return 8 if self is EntryFormat.V1 else 7


@dataclass(frozen=True)
class DeviceConfig:
    logical_capacity: int = 64 * 1024 * 1024
    physical_capacity: int | None = None
    entry_format: EntryFormat = EntryFormat.V2
    deflate_level: int = 5
    gc_segment_size: int = 262144
    gc_trigger_garbage_fraction: float = 0.5
    compression: bool = True
    background_gc: bool = True

    def __post_init__(self):
        object.__setattr__(self, "entry_format", EntryFormat(self.entry_format))
        if self.logical_capacity <= 0 or self.logical_capacity % BLOCK_SIZE:
            raise ValueError("logical_capacity must be a positive multiple of 4096")
        seg = self.gc_segment_size
        if seg <= 0 or seg % BLOCK_SIZE or seg // BLOCK_SIZE > (1 << _SEG_PAGE_BITS):
            raise ValueError(f"bad gc_segment_size {seg}")
        if self.physical_capacity is None:
            phys = _round_up(int(self.logical_capacity / DEFAULT_RATIO), seg)
            object.__setattr__(self, "physical_capacity", max(seg, phys))
        if self.physical_capacity % seg or self.physical_capacity < seg:
            raise ValueError("physical_capacity must be a positive multiple of gc_segment_size")
        if self.segment_count > (1 << _SEG_ID_BITS):
            raise ValueError("too many segments for the entry encoding")
        if not 0 < self.gc_trigger_garbage_fraction <= 1:
            raise ValueError("gc_trigger_garbage_fraction must be in (0, 1]")
        if not 0 <= self.deflate_level <= 9:
            raise ValueError("deflate_level must be in 0..9")

    @property
    def offset_granularity(self) -> int:
        return self.entry_format.granularity

    @property
    def logical_blocks(self) -> int:
        return self.logical_capacity // BLOCK_SIZE

    @property
    def segment_count(self) -> int:
        # one hidden over-provisioned segment backs copy-forward GC
        return self.physical_capacity // self.gc_segment_size + 1


@dataclass(frozen=True)
class L2PEntry:
    lba: int
    segment_id: int
    offset: int
    length: int
    raw_flag: bool = False


@dataclass(frozen=True)
class DeviceStats:
    logical_used: int = 0
    physical_used: int = 0
    physical_live: int = 0
    gc_bytes_moved: int = 0
    reads: int = 0
    writes: int = 0
    trims: int = 0


def _round_up(n: int, g: int) -> int:
    return -(-n // g) * g


def encode_entry(e: L2PEntry, fmt: EntryFormat) -> bytes:
    """Pack an entry into its fixed-width form (8 bytes V1, 7 bytes V2).

    The low 40 bits hold segment id, 4 KB page within the segment and the raw
    flag; the remaining bits carry the in-page offset and the stored length.
    Raw entries always cover exactly one block and store a zero length field.
    """
    fmt = EntryFormat(fmt)
    g = fmt.granularity
    if not 0 <= e.segment_id < (1 << _SEG_ID_BITS) or e.offset < 0:
        raise Unrepresentable(f"segment/offset out of range: {e}")
    page, in_page = divmod(e.offset, BLOCK_SIZE)
    if page >= (1 << _SEG_PAGE_BITS):
        raise Unrepresentable(f"offset {e.offset} beyond segment page field")
    if e.offset % g:
        raise Unrepresentable(f"offset {e.offset} not aligned to {g} bytes")
    if e.raw_flag:
        if e.length != BLOCK_SIZE:
            raise Unrepresentable("raw entries must have length 4096")
        length_field = 0
    else:
        if not 0 <= e.length < BLOCK_SIZE or e.length % g:
            raise Unrepresentable(f"length {e.length} not representable in {fmt.name}")
        length_field = e.length // g
    value = e.segment_id | (page << _SEG_ID_BITS) | (int(e.raw_flag) << 39)
    if fmt is EntryFormat.V1:
        value |= (in_page << 40) | (length_field << 52)
    else:
        value |= ((in_page // g) << 40) | (length_field << 48)
    return value.to_bytes(fmt.entry_size, "little")


def decode_entry(data: bytes, fmt: EntryFormat, lba: int = 0) -> L2PEntry:
    fmt = EntryFormat(fmt)
    if len(data) != fmt.entry_size:
        raise Unrepresentable(f"{fmt.name} entries are {fmt.entry_size} bytes, got {len(data)}")
    value = int.from_bytes(data, "little")
    seg = value & ((1 << _SEG_ID_BITS) - 1)
    page = (value >> _SEG_ID_BITS) & ((1 << _SEG_PAGE_BITS) - 1)
    raw = bool((value >> 39) & 1)
    if fmt is EntryFormat.V1:
        in_page = (value >> 40) & 0xFFF
        length = (value >> 52) & 0xFFF
    else:
        in_page = ((value >> 40) & 0xFF) * 16
        length = ((value >> 48) & 0xFF) * 16
    if raw:
        length = BLOCK_SIZE
    return L2PEntry(lba, seg, page * BLOCK_SIZE + in_page, length, raw)


def device_compress(block: bytes, level: int = 5, granularity: int = 16) -> tuple[bytes, bool, int]:
    """What the device stores for one block: (bytes, raw flag, accounted length)."""
    c = zlib.compressobj(level, zlib.DEFLATED, -15)
    comp = c.compress(block) + c.flush()
    acc = _round_up(len(comp), granularity)
    if acc >= BLOCK_SIZE:
        return bytes(block), True, BLOCK_SIZE
    return comp, False, acc


def stored_size(block: bytes, fmt: EntryFormat = EntryFormat.V2, level: int = 5) -> int:
    """Physical bytes one 4 KB block costs on a compressing device."""
    return device_compress(block, level, EntryFormat(fmt).granularity)[2]


@dataclass
class _Segment:
    sid: int
    data: bytearray
    write_ptr: int = 0
    live: int = 0
    lbas: set = field(default_factory=set)


class CsdDevice:
    """In-memory CSD. All public methods are serialized by one lock."""

    def __init__(self, config: DeviceConfig | None = None):
        self.config = config or DeviceConfig()
        cfg = self.config
        self._lock = threading.RLock()
        self._l2p: dict[int, L2PEntry] = {}
        self._segments: dict[int, _Segment] = {}
        self._free = list(range(cfg.segment_count))  # kept sorted, lowest id first
        self._active: _Segment | None = None
        self._physical_live = 0
        self._gc_bytes_moved = 0
        self._reads = 0
        self._writes = 0
        self._trims = 0
        # counters not part of DeviceStats
        self.deflate_calls = 0
        self.bytes_deflated = 0
        self._in_gc = False

    # ---- accounting helpers
    def _stored_len(self, e: L2PEntry) -> int:
        return e.length

    def _sealed_bytes(self) -> int:
        n_sealed = len(self._segments) - (1 if self._active is not None else 0)
        return n_sealed * self.config.gc_segment_size

    # ---- block interface
    def write_block(self, lba: int, data: bytes) -> None:
        cfg = self.config
        if not 0 <= lba < cfg.logical_blocks:
            raise IndexError(f"lba {lba} outside logical capacity")
        if len(data) != BLOCK_SIZE:
            raise ValueError(f"blocks are exactly {BLOCK_SIZE} bytes, got {len(data)}")
        if cfg.compression:
            self.deflate_calls += 1
            self.bytes_deflated += BLOCK_SIZE
            stored, raw, acc = device_compress(data, cfg.deflate_level, cfg.offset_granularity)
        else:
            stored, raw, acc = bytes(data), True, BLOCK_SIZE
        with self._lock:
            seg, off = self._append(acc)
            seg.data[off:off + len(stored)] = stored
            if len(stored) < acc:
                seg.data[off + len(stored):off + acc] = bytes(acc - len(stored))
            self._unmap(lba)
            self._map(L2PEntry(lba, seg.sid, off, acc, raw))
            self._writes += 1

    def read_block(self, lba: int) -> bytes:
        with self._lock:
            e = self._l2p.get(lba)
            if e is None:
                raise Unmapped(lba)
            self._reads += 1
            buf = bytes(self._segments[e.segment_id].data[e.offset:e.offset + e.length])
        if e.raw_flag:
            return buf
        d = zlib.decompressobj(-15)
        out = d.decompress(buf, BLOCK_SIZE + 1)
        if len(out) != BLOCK_SIZE or not d.eof:
            raise CorruptImage(f"lba {lba} does not inflate to one block")
        return out

    def trim(self, lbas) -> None:
        """Unmap a range (or any iterable) of LBAs; unmapped ones are skipped.

        ``trims`` in the stats counts blocks actually unmapped.
        """
        with self._lock:
            for lba in lbas:
                if self._unmap(lba) is not None:
                    self._trims += 1

    def is_mapped(self, lba: int) -> bool:
        return lba in self._l2p

    def mapped_lbas(self) -> list[int]:
        with self._lock:
            return sorted(self._l2p)

    def entry(self, lba: int) -> L2PEntry:
        try:
            return self._l2p[lba]
        except KeyError:
            raise Unmapped(lba) from None

    def device_stats(self) -> DeviceStats:
        with self._lock:
            active_ptr = self._active.write_ptr if self._active is not None else 0
            return DeviceStats(
                logical_used=len(self._l2p) * BLOCK_SIZE,
                physical_used=self._sealed_bytes() + active_ptr,
                physical_live=self._physical_live,
                gc_bytes_moved=self._gc_bytes_moved,
                reads=self._reads,
                writes=self._writes,
                trims=self._trims,
            )

    def recompute_live(self) -> int:
        """Physical live bytes recomputed from the L2P table alone."""
        with self._lock:
            return sum(self._stored_len(e) for e in self._l2p.values())

    # ---- mapping internals
    def _map(self, e: L2PEntry) -> None:
        self._l2p[e.lba] = e
        seg = self._segments[e.segment_id]
        seg.lbas.add(e.lba)
        seg.live += e.length
        self._physical_live += e.length

    def _unmap(self, lba: int) -> L2PEntry | None:
        e = self._l2p.pop(lba, None)
        if e is None:
            return None
        seg = self._segments[e.segment_id]
        seg.lbas.discard(lba)
        seg.live -= e.length
        self._physical_live -= e.length
        return e

    def _open_segment(self) -> _Segment:
        sid = self._free.pop(0)
        seg = _Segment(sid, bytearray(self.config.gc_segment_size))
        self._segments[sid] = seg
        return seg

    def _seal_active(self) -> None:
        self._active = None
        if self.config.background_gc and not self._in_gc:
            self._collect(self.config.gc_trigger_garbage_fraction, include_active=False)

    def _append(self, n: int, for_gc: bool = False) -> tuple[_Segment, int]:
        seg_size = self.config.gc_segment_size
        if self._active is not None and self._active.write_ptr + n <= seg_size:
            seg = self._active
        else:
            if self._active is not None:
                self._seal_active()
            # one free segment is held back so copy-forward GC always has room
            reserve = 0 if for_gc else 1
            if len(self._free) <= reserve and not for_gc and not self._in_gc:
                self._collect(0.0, include_active=False, until_free=reserve + 1)
            if len(self._free) <= reserve:
                raise OutOfPhysicalSpace(
                    f"physical space exhausted ({self.device_stats().physical_live} live bytes)")
            seg = self._active = self._open_segment()
        off = seg.write_ptr
        seg.write_ptr += n
        return seg, off

    # ---- garbage collection
    def _garbage(self, seg: _Segment) -> int:
        used = seg.write_ptr if seg is self._active else self.config.gc_segment_size
        return used - seg.live

    def _collectable(self, seg: _Segment, threshold: float) -> bool:
        garbage = self._garbage(seg)
        if garbage <= 0 or garbage / self.config.gc_segment_size <= threshold:
            return False
        # relocation can strand up to one block of tail waste; demanding more
        # garbage than that keeps forced GC from cycling
        return seg.live == 0 or garbage > BLOCK_SIZE

    def run_gc(self) -> int:
        """Compact every segment whose garbage fraction exceeds the trigger.

        Returns the bytes reclaimed: segment size minus live bytes copied
        forward, summed over the freed segments.
        """
        with self._lock:
            return self._collect(self.config.gc_trigger_garbage_fraction, include_active=True)

    def _collect(self, threshold: float, include_active: bool, until_free: int | None = None) -> int:
        self._in_gc = True
        try:
            return self._collect_loop(threshold, include_active, until_free)
        finally:
            self._in_gc = False

    def _collect_loop(self, threshold, include_active, until_free) -> int:
        seg_size = self.config.gc_segment_size
        reclaimed = 0
        while True:
            if until_free is not None and len(self._free) >= until_free:
                break
            cands = [s for s in self._segments.values()
                     if (include_active or s is not self._active)
                     and self._collectable(s, threshold)]
            if not cands:
                break
            victim = max(cands, key=lambda s: (self._garbage(s), -s.sid))
            if victim is self._active:
                self._active = None
            room = 0 if self._active is None else seg_size - self._active.write_ptr
            if victim.live > room and not self._free:
                break
            moved = self._relocate(victim)
            reclaimed += seg_size - moved
        return reclaimed

    def _relocate(self, victim: _Segment) -> int:
        moved = 0
        for lba in sorted(victim.lbas, key=lambda x: self._l2p[x].offset):
            e = self._l2p[lba]
            payload = bytes(victim.data[e.offset:e.offset + e.length])
            self._unmap(lba)
            seg, off = self._append(e.length, for_gc=True)
            seg.data[off:off + e.length] = payload
            self._map(L2PEntry(lba, seg.sid, off, e.length, e.raw_flag))
            moved += e.length
        self._gc_bytes_moved += moved
        del self._segments[victim.sid]
        self._free.append(victim.sid)
        self._free.sort()
        return moved

    # ---- persistence
    def save(self, path) -> None:
        Path(path).write_bytes(self.to_image())

    @classmethod
    def load(cls, path) -> "CsdDevice":
        return cls.from_image(Path(path).read_bytes())

    def to_image(self) -> bytes:
        cfg = self.config
        with self._lock:
            header = IMAGE_MAGIC + struct.pack(
                "<HQQBIdBQQQQ", IMAGE_VERSION, cfg.logical_capacity, cfg.physical_capacity,
                cfg.deflate_level, cfg.gc_segment_size, cfg.gc_trigger_garbage_fraction,
                int(cfg.compression) | (int(cfg.background_gc) << 1),
                self._gc_bytes_moved, self._reads, self._writes, self._trims)
            parts = [header, struct.pack("<I", zlib.crc32(header))]
            fmt = cfg.entry_format
            l2p = bytearray(struct.pack("<BI", fmt, len(self._l2p)))
            for lba in sorted(self._l2p):
                l2p += struct.pack("<Q", lba) + encode_entry(self._l2p[lba], fmt)
            parts += [bytes(l2p), struct.pack("<I", zlib.crc32(l2p))]
            active = self._active.sid if self._active is not None else _NO_SEGMENT
            parts.append(struct.pack("<II", active, len(self._segments)))
            for sid in sorted(self._segments):
                seg = self._segments[sid]
                blob = struct.pack("<II", sid, seg.write_ptr) + bytes(seg.data[:seg.write_ptr])
                parts += [blob, struct.pack("<I", zlib.crc32(blob))]
        return b"".join(parts)

    @classmethod
    def from_image(cls, image: bytes) -> "CsdDevice":
        view = memoryview(image)
        hsize = 4 + struct.calcsize("<HQQBIdBQQQQ")
        if bytes(view[:4]) != IMAGE_MAGIC:
            raise CorruptImage("bad magic")
        header = bytes(view[:hsize])
        pos = hsize

        def take_crc(start: int, end: int) -> None:
            (crc,) = struct.unpack_from("<I", view, end)
            if zlib.crc32(view[start:end]) != crc:
                raise CorruptImage(f"crc mismatch in region at {start}")

        take_crc(0, hsize)
        pos += 4
        (version, logical, physical, level, seg_size, trigger, flags,
         gc_moved, reads, writes, trims) = struct.unpack_from("<HQQBIdBQQQQ", header, 4)
        if version != IMAGE_VERSION:
            raise CorruptImage(f"unsupported image version {version}")
        fmt_raw, count = struct.unpack_from("<BI", view, pos)
        fmt = EntryFormat(fmt_raw)
        esize = 8 + fmt.entry_size
        l2p_start, l2p_end = pos, pos + 5 + count * esize
        take_crc(l2p_start, l2p_end)
        cfg = DeviceConfig(logical, physical, fmt, level, seg_size, trigger,
                           bool(flags & 1), bool(flags & 2))
        dev = cls(cfg)
        entries = []
        for i in range(count):
            off = l2p_start + 5 + i * esize
            (lba,) = struct.unpack_from("<Q", view, off)
            entries.append(decode_entry(bytes(view[off + 8:off + esize]), fmt, lba))
        pos = l2p_end + 4
        active, nseg = struct.unpack_from("<II", view, pos)
        pos += 8
        for _ in range(nseg):
            sid, ptr = struct.unpack_from("<II", view, pos)
            take_crc(pos, pos + 8 + ptr)
            seg = _Segment(sid, bytearray(seg_size))
            seg.data[:ptr] = view[pos + 8:pos + 8 + ptr]
            seg.write_ptr = ptr
            dev._segments[sid] = seg
            dev._free.remove(sid)
            pos += 8 + ptr + 4
        if active != _NO_SEGMENT:
            dev._active = dev._segments[active]
        for e in entries:
            dev._map(e)
        dev._gc_bytes_moved, dev._reads, dev._writes, dev._trims = gc_moved, reads, writes, trims
        return dev
