"""Synthetic pages, trace replay and the corpus ratio report."""

from __future__ import annotations

import enum
import functools
import random
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .chunk import ChunkStore
from .codec import (PAGE_SIZE, Algorithm, build_heavy_segment, compress_fixed,
                    compress_page, padded)
from .csd import BLOCK_SIZE, EntryFormat, device_compress
from .errors import MissingCorpus, StoreError
from .metrics import Metrics
from .redo import RedoRecord
from .space import WriteMode

DEVICE_LEVEL = 5


class Generator(enum.Enum):
    REPEAT_FILL = "repeat_fill"
    TEXT_MIX = "text_mix"
    RANDOM = "random"


@dataclass(frozen=True)
class CompressibilitySpec:
    target_ratio: float = 2.0
    generator: Generator = Generator.REPEAT_FILL
    seed: int = 0

    def __post_init__(self):
        if self.target_ratio < 1.0:
            raise ValueError("target ratio must be at least 1")
        if self.generator is Generator.RANDOM and self.target_ratio != 1.0:
            raise ValueError("random pages are incompressible; use target_ratio=1.0")


def deflate_ratio(page: bytes, level: int = DEVICE_LEVEL) -> float:
    """Single-layer ratio: page bytes over the byte-granular deflated 4 KB blocks."""
    total = 0
    for i in range(0, len(page), BLOCK_SIZE):
        stored, raw, _ = device_compress(page[i:i + BLOCK_SIZE], level, 1)
        total += len(stored)
    return len(page) / total


def _block_size_after(block: bytes) -> int:
    return len(device_compress(block, DEVICE_LEVEL, 1)[0])


def _bisect(lo: int, hi: int, size_of, want: float) -> int:
    """Smallest parameter in [lo, hi] whose compressed size reaches ``want``."""
    while lo < hi:
        mid = (lo + hi) // 2
        if size_of(mid) < want:
            lo = mid + 1
        else:
            hi = mid
    return lo


@functools.lru_cache(maxsize=256)
def _repeat_prefix(target: float) -> int:
    """Longest random prefix per block whose device footprint stays within 4096/target.

    The footprint is the worst case over a few sample blocks, measured with
    16-byte accounting, so a device sized at the target ratio can actually be
    filled with these pages.
    """
    rng = random.Random("repeat-calibration")
    samples = [rng.randbytes(BLOCK_SIZE) for _ in range(16)]
    want = BLOCK_SIZE / target

    def footprint(k):
        return max(device_compress(s[:k] + bytes(BLOCK_SIZE - k), DEVICE_LEVEL, 16)[2]
                   for s in samples)

    # first k that overshoots, minus one
    return max(0, _bisect(0, BLOCK_SIZE, footprint, want + 1e-9) - 1)


_SYLLABLES = [a + b for a in ("", "b", "c", "d", "f", "g", "l", "m", "n", "p", "r", "s", "t", "v")
              for b in ("a", "e", "i", "o", "u", "ar", "en", "is", "on", "um")]


def _pseudo_text(rng: random.Random, n: int) -> bytes:
    words = []
    size = 0
    while size < n:
        # heavy-tailed word choice gives text-like redundancy
        w = "".join(_SYLLABLES[min(len(_SYLLABLES) - 1, int(rng.paretovariate(1.2)) - 1)]
                    for _ in range(rng.randint(1, 4)))
        words.append(w)
        size += len(w) + 1
    return " ".join(words).encode().ljust(n)[:n]


def _text_block(rng: random.Random, text_len: int, noise: int) -> bytes:
    body = bytearray(_pseudo_text(rng, text_len))
    for _ in range(noise):
        body[rng.randrange(len(body))] = rng.randrange(256)
    return bytes(body) + bytes(BLOCK_SIZE - text_len)


@functools.lru_cache(maxsize=256)
def _text_params(target: float) -> tuple[int, int]:
    """(text length, noisy bytes) per block hitting ``target`` on a sample block."""
    want = BLOCK_SIZE / target

    def size(text_len, noise):
        return _block_size_after(_text_block(random.Random("text-calibration"), text_len, noise))

    if size(BLOCK_SIZE, 0) < want:
        # plain text compresses better than asked; add noise until it matches
        return BLOCK_SIZE, _bisect(0, BLOCK_SIZE, lambda q: size(BLOCK_SIZE, q), want)
    return _bisect(1, BLOCK_SIZE, lambda t: size(t, 0), want), 0


def generate_page(spec: CompressibilitySpec, page_index: int) -> bytes:
    """A deterministic page for ``(spec.seed, page_index)``."""
    rng = random.Random(f"{spec.generator.value}:{spec.seed}:{page_index}")
    if spec.generator is Generator.RANDOM:
        return rng.randbytes(PAGE_SIZE)
    blocks = []
    if spec.generator is Generator.REPEAT_FILL:
        k = _repeat_prefix(spec.target_ratio)
        for _ in range(PAGE_SIZE // BLOCK_SIZE):
            blocks.append(rng.randbytes(k) + bytes(BLOCK_SIZE - k))
    else:
        text_len, noise = _text_params(spec.target_ratio)
        for _ in range(PAGE_SIZE // BLOCK_SIZE):
            blocks.append(_text_block(rng, text_len, noise))
    return b"".join(blocks)


# ---- traces

@dataclass(frozen=True)
class TraceOp:
    op: str
    args: tuple = ()
    line: int = 0


_ARITY = {"W": (1, 2), "R": (1, 2), "REDO": (3, 3), "ARCHIVE": (2, 2), "CRASH": (0, 1),
          "EVICT": (0, 64), "ADVANCE": (0, 0), "STALL": (1, 1), "HEAL": (0, 1)}


def parse_trace(text: str) -> list[TraceOp]:
    """One op per line; ``#`` starts a comment.

    W page_id [NORMAL|NONE]   write a generated page
    R page_id [lsn|-]         read at lsn (default: durable)
    REDO page_id off len      append one patch record
    ARCHIVE lo hi             heavy-compress pages lo..hi inclusive
    CRASH [torn_bytes]        crash every replica and recover
    EVICT [page_id ...]       evict cached redo (all pages by default)
    ADVANCE                   materialize up to the reader floor
    STALL rid / HEAL [rid]    replica faults
    """
    ops = []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        head = head.upper()
        if head not in _ARITY:
            raise ValueError(f"line {no}: unknown op {head!r}")
        lo, hi = _ARITY[head]
        if not lo <= len(rest) <= hi:
            raise ValueError(f"line {no}: {head} takes {lo}..{hi} arguments")
        ops.append(TraceOp(head, tuple(rest), no))
    return ops


@dataclass
class TraceRunner:
    """Replays trace ops against a store, surviving crashes and recording errors."""
    engine: ChunkStore
    spec: CompressibilitySpec = field(default_factory=CompressibilitySpec)
    reads: list = field(default_factory=list)  # (line, page_id, lsn, crc32 or error name)
    writes: int = 0

    @property
    def metrics(self) -> Metrics:
        return self.engine.metrics

    def run(self, ops) -> Metrics:
        for op in ops:
            try:
                self._step(op)
            except (StoreError, KeyError, ValueError, IndexError) as exc:
                self.metrics.errors[type(exc).__name__] += 1
                if op.op == "R":
                    self.reads.append((op.line, int(op.args[0]), None, type(exc).__name__))
        return self.engine.snapshot_metrics()

    def _step(self, op: TraceOp) -> None:
        e = self.engine
        a = op.args
        if op.op == "W":
            mode = WriteMode[a[1].upper()] if len(a) > 1 else WriteMode.NORMAL
            page = generate_page(self.spec, self.writes)
            self.writes += 1
            e.write_page(int(a[0]), page, mode)
        elif op.op == "R":
            lsn = None if len(a) < 2 or a[1] == "-" else int(a[1])
            page = e.read_page(int(a[0]), lsn)
            self.reads.append((op.line, int(a[0]), lsn, zlib.crc32(page)))
        elif op.op == "REDO":
            pid, off, length = int(a[0]), int(a[1]), int(a[2])
            rng = random.Random(f"redo:{self.spec.seed}:{e.durable_lsn + 1}")
            e.write_redo([RedoRecord(e.durable_lsn + 1, pid, off, rng.randbytes(length))])
        elif op.op == "ARCHIVE":
            e.archive_range(range(int(a[0]), int(a[1]) + 1))
        elif op.op == "EVICT":
            e.evict_logs([int(x) for x in a] if a else None)
        elif op.op == "ADVANCE":
            e.advance_apply_lsn()
        elif op.op == "STALL":
            e.stall(int(a[0]))
        elif op.op == "HEAL":
            e.heal(int(a[0]) if a else None)
        elif op.op == "CRASH":
            self.crash(int(a[0]) if a else 0)

    def crash(self, torn_bytes: int = 0) -> None:
        metrics = self.engine.metrics
        storages = self.engine.crash(torn_bytes)
        self.engine = ChunkStore.recover(storages, self.engine.cfg)
        self.engine.metrics = metrics


def run_trace(trace, engine: ChunkStore, spec: CompressibilitySpec | None = None) -> Metrics:
    ops = parse_trace(trace) if isinstance(trace, str) else list(trace)
    runner = TraceRunner(engine, spec or CompressibilitySpec())
    return runner.run(ops)


# ---- corpus report

class Pipeline(enum.Enum):
    LZ4_ONLY = "lz4_only"
    ZSTD_ONLY = "zstd_only"
    ADAPTIVE = "adaptive"
    HEAVY = "heavy"


@dataclass
class PipelineReport:
    pipeline: Pipeline
    pages: int = 0
    logical: int = 0
    software_bytes: int = 0  # compressed payloads, byte-granular
    software_aligned: int = 0  # payloads rounded up to whole 4 KB blocks
    dual_bytes: int = 0  # aligned blocks after the device's own compression
    device_only: int = 0  # raw pages through the device alone
    algorithms: dict = field(default_factory=dict)

    @property
    def alignment_overhead(self) -> float:
        return self.software_aligned / self.software_bytes - 1

    def ratio(self, layer: str) -> float:
        stored = {"software": self.software_bytes, "aligned": self.software_aligned,
                  "dual": self.dual_bytes, "device": self.device_only}[layer]
        return self.logical / stored

    def row(self) -> dict:
        return {"pipeline": self.pipeline.value, "pages": self.pages, "logical": self.logical,
                "software_bytes": self.software_bytes, "software_aligned": self.software_aligned,
                "dual_bytes": self.dual_bytes, "device_only": self.device_only,
                "alignment_overhead": self.alignment_overhead,
                "ratio_software": self.ratio("software"), "ratio_dual": self.ratio("dual"),
                "ratio_device": self.ratio("device")}


def bundled_corpus() -> Path:
    return Path(str(resources.files("csdstore") / "corpus" / "mixed"))


def load_corpus(corpus_dir) -> list[bytes]:
    d = Path(corpus_dir)
    files = sorted(d.glob("*.pages")) if d.is_dir() else []
    if not files:
        raise MissingCorpus(f"no *.pages files under {d}")
    pages = []
    for f in files:
        blob = f.read_bytes()
        if len(blob) % PAGE_SIZE:
            raise MissingCorpus(f"{f} is not a whole number of pages")
        pages += [blob[i:i + PAGE_SIZE] for i in range(0, len(blob), PAGE_SIZE)]
    return pages


def _device_bytes(blob: bytes, fmt: EntryFormat) -> int:
    g = fmt.granularity
    return sum(device_compress(blob[i:i + BLOCK_SIZE], DEVICE_LEVEL, g)[2]
               for i in range(0, len(blob), BLOCK_SIZE))


def _aligned(payload: bytes) -> bytes:
    return payload + bytes(padded(len(payload)) - len(payload))


def corpus_report(corpus_dir, pipeline: Pipeline, fmt: EntryFormat = EntryFormat.V2,
                  heavy_pages: int = 64, pages: list | None = None) -> PipelineReport:
    pages = load_corpus(corpus_dir) if pages is None else pages
    rep = PipelineReport(Pipeline(pipeline), len(pages), len(pages) * PAGE_SIZE)
    algs: dict[str, int] = {}
    if rep.pipeline is Pipeline.HEAVY:
        for i in range(0, len(pages), heavy_pages):
            seg = build_heavy_segment(pages[i:i + heavy_pages], heavy_pages * PAGE_SIZE)
            rep.software_bytes += len(seg.payload)
            rep.software_aligned += seg.padded_len
            rep.dual_bytes += _device_bytes(_aligned(seg.payload), fmt)
            algs["HEAVY"] = algs.get("HEAVY", 0) + seg.page_count
    else:
        for page in pages:
            if rep.pipeline is Pipeline.LZ4_ONLY:
                cp = compress_fixed(page, Algorithm.LZ4)
            elif rep.pipeline is Pipeline.ZSTD_ONLY:
                cp = compress_fixed(page, Algorithm.ZSTD)
            else:
                cp, _ = compress_page(page)
            rep.software_bytes += len(cp.payload)
            rep.software_aligned += cp.padded_len
            rep.dual_bytes += _device_bytes(_aligned(cp.payload), fmt)
            algs[cp.algorithm.name] = algs.get(cp.algorithm.name, 0) + 1
    rep.device_only = sum(_device_bytes(p, fmt) for p in pages)
    rep.algorithms = dict(sorted(algs.items()))
    return rep


def zstd_advantage(lz4: PipelineReport, zstd: PipelineReport, layer: str) -> float:
    """Extra bytes lz4 needs relative to zstd at one layer."""
    a = {"software": lz4.software_bytes, "dual": lz4.dual_bytes}[layer]
    b = {"software": zstd.software_bytes, "dual": zstd.dual_bytes}[layer]
    return (a - b) / b
