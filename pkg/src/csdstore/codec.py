"""Software compression layer for 16 KB pages.

Pages are compressed with lz4 or zstd and stored as whole 4 KB blocks. The
per-page algorithm choice weighs the bytes zstd saves after 4 KB alignment
against the extra microseconds it costs to decompress. Archival ranges are
packed into large single-unit heavy segments instead.
"""

from __future__ import annotations

import binascii
import enum
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import lz4.block
import zstandard

from .errors import CorruptPayload, OutOfRange

PAGE_SIZE = 16384
BLOCK_SIZE = 4096
HEADER = struct.Struct("<BBHHH")  # tag, reserved, uncompressed len, payload len, crc16

HOT_ZSTD_LEVEL = 1
HEAVY_ZSTD_LEVEL = 19
HEAVY_UNIT_SIZE = 1 << 20


class Algorithm(enum.IntEnum):
    NONE = 0
    LZ4 = 1
    ZSTD = 2


def padded(n: int) -> int:
    return -(-n // BLOCK_SIZE) * BLOCK_SIZE


@dataclass(frozen=True)
class SelectorConfig:
    benefit_per_overhead_threshold: float = 300.0  # bytes per microsecond
    cpu_utilization_ceiling: float = 0.20
    update_fraction_trigger: float = 0.30
    io_latency_saving_per_4k: tuple[float, float] = (12.0, 14.0)

    def __post_init__(self):
        if self.benefit_per_overhead_threshold <= 0:
            raise ValueError("threshold must be positive")
        for name in ("cpu_utilization_ceiling", "update_fraction_trigger"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be within [0, 1]")


@dataclass(frozen=True)
class Hints:
    cpu_utilization: float = 0.0
    update_fraction: float = 0.0


@dataclass(frozen=True)
class CompressedPage:
    algorithm: Algorithm
    payload: bytes

    @property
    def padded_len(self) -> int:
        return padded(len(self.payload))

    @property
    def block_count(self) -> int:
        return self.padded_len // BLOCK_SIZE

    @property
    def crc16(self) -> int:
        return binascii.crc_hqx(self.payload, 0xFFFF)

    def header(self) -> bytes:
        return HEADER.pack(self.algorithm, 0, PAGE_SIZE & 0xFFFF, len(self.payload), self.crc16)

    def blocks(self) -> list[bytes]:
        """Payload split into zero-padded 4 KB blocks, ready for the device."""
        buf = self.payload + bytes(self.padded_len - len(self.payload))
        return [buf[i:i + BLOCK_SIZE] for i in range(0, len(buf), BLOCK_SIZE)]


def unpack_header(raw: bytes) -> tuple[Algorithm, int, int, int]:
    tag, _, ulen, plen, crc = HEADER.unpack(raw)
    try:
        alg = Algorithm(tag)
    except ValueError:
        raise CorruptPayload(f"unknown algorithm tag {tag}") from None
    return alg, ulen or PAGE_SIZE, plen, crc


@dataclass
class Selection:
    """What the selector saw and decided for one page."""
    branch: str  # "cpu", "select" or "reuse"
    chosen: Algorithm
    lz4_padded: int | None = None
    zstd_padded: int | None = None
    lz4_latency_us: float | None = None
    zstd_latency_us: float | None = None

    @property
    def benefit(self) -> int | None:
        if self.lz4_padded is None or self.zstd_padded is None:
            return None
        return self.lz4_padded - self.zstd_padded

    @property
    def overhead(self) -> float | None:
        if self.lz4_latency_us is None or self.zstd_latency_us is None:
            return None
        return self.zstd_latency_us - self.lz4_latency_us


_local = threading.local()


def _zstd_compressor(level: int) -> zstandard.ZstdCompressor:
    cache = getattr(_local, "zc", None)
    if cache is None:
        cache = _local.zc = {}
    if level not in cache:
        cache[level] = zstandard.ZstdCompressor(level=level, write_content_size=True)
    return cache[level]


def _zstd_decompressor() -> zstandard.ZstdDecompressor:
    d = getattr(_local, "zd", None)
    if d is None:
        d = _local.zd = zstandard.ZstdDecompressor()
    return d


@dataclass
class CodecProbe:
    """Process-wide tally of real codec invocations (NONE is not counted)."""
    compress_calls: int = 0
    decompress_calls: int = 0
    bytes_compressed: int = 0
    bytes_produced: int = 0

    def snapshot(self) -> tuple:
        return (self.compress_calls, self.decompress_calls,
                self.bytes_compressed, self.bytes_produced)


PROBE = CodecProbe()


def compress_bytes(algorithm: Algorithm, data: bytes, level: int = HOT_ZSTD_LEVEL) -> bytes:
    if algorithm is not Algorithm.NONE:
        PROBE.compress_calls += 1
        PROBE.bytes_compressed += len(data)
    out = _compress(algorithm, data, level)
    if algorithm is not Algorithm.NONE:
        PROBE.bytes_produced += len(out)
    return out


def _compress(algorithm: Algorithm, data: bytes, level: int) -> bytes:
    if algorithm is Algorithm.LZ4:
        return lz4.block.compress(data, mode="default", store_size=False)
    if algorithm is Algorithm.ZSTD:
        return _zstd_compressor(level).compress(data)
    return bytes(data)


def decompress_bytes(algorithm: Algorithm, payload: bytes, size: int) -> bytes:
    if algorithm is not Algorithm.NONE:
        PROBE.decompress_calls += 1
    try:
        if algorithm is Algorithm.LZ4:
            out = lz4.block.decompress(payload, uncompressed_size=size)
        elif algorithm is Algorithm.ZSTD:
            out = _zstd_decompressor().decompress(payload, max_output_size=size)
        else:
            out = bytes(payload)
    except (lz4.block.LZ4BlockError, zstandard.ZstdError, ValueError) as exc:
        raise CorruptPayload(f"{algorithm.name} payload does not decode: {exc}") from exc
    if len(out) != size:
        raise CorruptPayload(f"{algorithm.name} payload decoded to {len(out)} bytes, want {size}")
    return out


# ---- decompression latency providers

@dataclass(frozen=True)
class ModeledLatency:
    """Deterministic decompression cost: fixed part plus per-output-byte part.

    Defaults put a 16 KB lz4 decode near 5 us and a zstd decode near 16 us,
    roughly the gap between the two decoders on a server core.
    """
    lz4_fixed_us: float = 0.5
    lz4_ns_per_byte: float = 0.30
    zstd_fixed_us: float = 1.5
    zstd_ns_per_byte: float = 0.90

    def __call__(self, algorithm: Algorithm, payload: bytes, size: int) -> float:
        if algorithm is Algorithm.LZ4:
            return self.lz4_fixed_us + self.lz4_ns_per_byte * size / 1000.0
        if algorithm is Algorithm.ZSTD:
            return self.zstd_fixed_us + self.zstd_ns_per_byte * size / 1000.0
        return 0.0


@dataclass
class MeasuredLatency:
    """Wall-clock probe: best of ``repeat`` timed decompressions."""
    repeat: int = 5
    clock: object = time.perf_counter_ns

    def __call__(self, algorithm: Algorithm, payload: bytes, size: int) -> float:
        best = None
        for _ in range(self.repeat):
            t0 = self.clock()
            decompress_bytes(algorithm, payload, size)
            dt = self.clock() - t0
            best = dt if best is None else min(best, dt)
        return best / 1000.0


DEFAULT_LATENCY = ModeledLatency()


def prefer_zstd(benefit: float, overhead: float, threshold: float) -> bool:
    # a zstd decode that is not slower costs nothing, so any saving wins
    if overhead <= 0:
        return benefit > 0
    return benefit / overhead > threshold


def compress_page(page: bytes, last_algorithm: Algorithm | None = None,
                  hints: Hints | None = None, config: SelectorConfig | None = None,
                  latency=DEFAULT_LATENCY) -> tuple[CompressedPage, Selection]:
    """Compress one page, picking lz4 or zstd per the adaptive rule.

    ``last_algorithm=None`` marks an initial write, which runs the full
    selection like a heavily updated page does (CPU ceiling permitting).
    """
    if len(page) != PAGE_SIZE:
        raise ValueError(f"pages are {PAGE_SIZE} bytes, got {len(page)}")
    page = bytes(page)
    hints = hints or Hints()
    cfg = config or SelectorConfig()

    if hints.cpu_utilization > cfg.cpu_utilization_ceiling:
        payload = compress_bytes(Algorithm.LZ4, page)
        sel = Selection("cpu", Algorithm.LZ4, lz4_padded=padded(len(payload)))
    elif last_algorithm is None or hints.update_fraction > cfg.update_fraction_trigger:
        lz = compress_bytes(Algorithm.LZ4, page)
        zs = compress_bytes(Algorithm.ZSTD, page)
        sel = Selection("select", Algorithm.LZ4, padded(len(lz)), padded(len(zs)),
                        latency(Algorithm.LZ4, lz, PAGE_SIZE),
                        latency(Algorithm.ZSTD, zs, PAGE_SIZE))
        if prefer_zstd(sel.benefit, sel.overhead, cfg.benefit_per_overhead_threshold):
            sel.chosen, payload = Algorithm.ZSTD, zs
        else:
            payload = lz
    else:
        alg = Algorithm(last_algorithm)
        if alg is Algorithm.NONE:
            alg = Algorithm.LZ4
        payload = compress_bytes(alg, page)
        sel = Selection("reuse", alg)

    if padded(len(payload)) >= PAGE_SIZE:
        return CompressedPage(Algorithm.NONE, page), sel
    return CompressedPage(sel.chosen, payload), sel


def compress_fixed(page: bytes, algorithm: Algorithm) -> CompressedPage:
    """Compress with one algorithm, no selection; NONE when nothing is saved."""
    if algorithm is Algorithm.NONE:
        return CompressedPage(Algorithm.NONE, bytes(page))
    payload = compress_bytes(algorithm, page)
    if padded(len(payload)) >= PAGE_SIZE:
        return CompressedPage(Algorithm.NONE, bytes(page))
    return CompressedPage(algorithm, payload)


def decompress_page(cp: CompressedPage) -> bytes:
    if cp.algorithm is Algorithm.NONE and len(cp.payload) != PAGE_SIZE:
        raise CorruptPayload(f"raw page has {len(cp.payload)} bytes")
    return decompress_bytes(cp.algorithm, cp.payload, PAGE_SIZE)


# ---- heavy segments

@dataclass(frozen=True)
class HeavySegment:
    payload: bytes
    page_offsets: tuple[tuple[int, int, int], ...]  # (page index, offset, length)
    unit_size: int = HEAVY_UNIT_SIZE
    algorithm: Algorithm = Algorithm.ZSTD
    level: int = HEAVY_ZSTD_LEVEL

    @property
    def page_count(self) -> int:
        return len(self.page_offsets)

    @property
    def uncompressed_len(self) -> int:
        return sum(length for _, _, length in self.page_offsets)

    @property
    def padded_len(self) -> int:
        return padded(len(self.payload))

    @property
    def block_count(self) -> int:
        return self.padded_len // BLOCK_SIZE


def build_heavy_segment(pages, unit_size: int = HEAVY_UNIT_SIZE,
                        level: int = HEAVY_ZSTD_LEVEL) -> HeavySegment:
    pages = [bytes(p) for p in pages]
    if not 1 <= len(pages) <= unit_size // PAGE_SIZE:
        raise ValueError(f"a {unit_size}-byte unit holds 1..{unit_size // PAGE_SIZE} pages")
    for p in pages:
        if len(p) != PAGE_SIZE:
            raise ValueError("heavy segments take whole pages")
    unit = b"".join(pages)
    offsets = tuple((i, i * PAGE_SIZE, PAGE_SIZE) for i in range(len(pages)))
    return HeavySegment(compress_bytes(Algorithm.ZSTD, unit, level), offsets, unit_size,
                        Algorithm.ZSTD, level)


class UnitBuffer:
    """Small LRU of decompressed heavy units, so sequential extraction pays once."""

    def __init__(self, capacity: int = 4):
        self.capacity = capacity
        self.decompressions = 0
        self._units: OrderedDict = OrderedDict()

    def get(self, seg: HeavySegment) -> bytes:
        key = (len(seg.payload), hash(seg.payload))
        hit = self._units.get(key)
        if hit is not None and (hit[0] is seg.payload or hit[0] == seg.payload):
            self._units.move_to_end(key)
            return hit[1]
        unit = decompress_bytes(seg.algorithm, seg.payload, seg.uncompressed_len)
        self.decompressions += 1
        self._units[key] = (seg.payload, unit)
        while len(self._units) > self.capacity:
            self._units.popitem(last=False)
        return unit

    def clear(self) -> None:
        self._units.clear()


def extract_page(seg: HeavySegment, page_index: int, buffer: UnitBuffer | None = None) -> bytes:
    if not 0 <= page_index < seg.page_count:
        raise OutOfRange(f"page {page_index} not in a {seg.page_count}-page segment")
    if buffer is None:
        unit = decompress_bytes(seg.algorithm, seg.payload, seg.uncompressed_len)
    else:
        unit = buffer.get(seg)
    _, off, length = seg.page_offsets[page_index]
    return unit[off:off + length]
