"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS or FAIL line that the conftest hook prints after
the run, so ``pytest tests/test_acceptance.py`` ends with an 11-line summary.
"""

import contextlib
import os
import random
import time
import zlib
from pathlib import Path

import pytest

from csdstore import codec
from csdstore.chunk import ChunkStore
from csdstore.codec import Algorithm, Hints, compress_page
from csdstore.config import EngineConfig, load_population
from csdstore.csd import (BLOCK_SIZE, CsdDevice, DeviceConfig, EntryFormat, L2PEntry,
                          decode_entry, encode_entry)
from csdstore.errors import OutOfPhysicalSpace, ReplicationLost
from csdstore.redo import RedoRecord
from csdstore.scheduler import apply_plan, in_range_fraction, schedule_round, violation
from csdstore.scheduler import build_population
from csdstore.space import SpaceManager, WriteMode
from csdstore.workload import (CompressibilitySpec, Generator, Pipeline, bundled_corpus,
                               corpus_report, generate_page, load_corpus, zstd_advantage)

from conftest import ACCEPTANCE, small_config, text_page
from crashfuzz import run_many
from oracles import ceil4k, lz4_len, reference_select, structured_page, zstd_len
from test_csd import check_against_shadow, oracle_stored, shadow_trace

POPULATION = Path(str(__import__("csdstore").__file__)).parent / "populations" / "cluster100.yaml"


@contextlib.contextmanager
def criterion(n: int, title: str):
    start = time.monotonic()
    try:
        yield
    except BaseException as exc:
        line = f"criterion {n}: FAIL  {title} ({type(exc).__name__}: {str(exc)[:120]})"
        print(line)
        ACCEPTANCE.append(line)
        raise
    line = f"criterion {n}: PASS  {title} [{time.monotonic() - start:.1f}s]"
    print(line)
    ACCEPTANCE.append(line)


@pytest.fixture(scope="module")
def corpus():
    return load_corpus(bundled_corpus())


@pytest.fixture(scope="module")
def reports(corpus):
    return {p: corpus_report(None, p, pages=corpus) for p in Pipeline}


def test_1_dual_layer_convergence(reports):
    with criterion(1, "zstd advantage after device deflate < half its software value"):
        lz4, zstd = reports[Pipeline.LZ4_ONLY], reports[Pipeline.ZSTD_ONLY]
        soft = zstd_advantage(lz4, zstd, "software")
        dual = zstd_advantage(lz4, zstd, "dual")
        print(f"software advantage {soft:.4f}, dual-layer advantage {dual:.4f}")
        assert soft > 0
        assert dual < soft / 2


def test_2_index_granularity_overhead(reports, tmp_path):
    with criterion(2, "4 KB-aligned accounting 30-120% above byte-granular (zstd pages)"):
        over = reports[Pipeline.ZSTD_ONLY].alignment_overhead
        print(f"alignment overhead {over:.4f}")
        assert 0.30 <= over <= 1.20
        # hard invariant on every corpus, including tiny synthetic ones
        rng = random.Random(2)
        for i in range(5):
            d = tmp_path / f"c{i}"
            d.mkdir()
            pages = [structured_page(rng) for _ in range(rng.randint(1, 12))]
            (d / "x.pages").write_bytes(b"".join(pages))
            for p in Pipeline:
                assert corpus_report(d, p).alignment_overhead >= 0
        for rep in reports.values():
            assert rep.alignment_overhead >= 0


def _boundary_case(rng, page):
    """Hints and latencies placed on or next to a decision boundary."""
    benefit = ceil4k(lz4_len(page)) - ceil4k(zstd_len(page))
    kind = rng.randrange(6)
    cpu, upd = rng.random() * 0.19, rng.random()
    lz, zs = rng.uniform(1, 20), rng.uniform(1, 60)
    if kind == 0:
        cpu = 0.20
    elif kind == 1:
        cpu, upd = 0.0, 0.30
    elif kind == 2 and benefit > 0:
        lz, zs = 0.0, benefit / 300  # ratio exactly 300
    elif kind == 3 and benefit > 0:
        lz, zs = 0.0, benefit / 300 * (1 - 1e-9)  # just above 300
    elif kind == 4:
        zs = lz  # zero overhead
    return cpu, upd, lz, zs


def test_3_selector_fidelity():
    with criterion(3, "adaptive selection equals the reference in 10^4 cases"):
        rng = random.Random(3)
        lasts = [None, "LZ4", "ZSTD", "NONE"]
        mismatches = 0
        boundary_hits = {"cpu": 0, "update": 0, "ratio": 0}
        for i in range(10_000):
            page = structured_page(rng)
            last = rng.choice(lasts)
            if i % 2:
                cpu, upd, lz, zs = _boundary_case(rng, page)
            else:
                cpu, upd = rng.random() * 0.4, rng.random()
                lz, zs = rng.uniform(0.5, 30), rng.uniform(0.5, 80)
            boundary_hits["cpu"] += cpu == 0.20
            boundary_hits["update"] += upd == 0.30
            benefit = ceil4k(lz4_len(page)) - ceil4k(zstd_len(page))
            boundary_hits["ratio"] += zs - lz > 0 and benefit / (zs - lz) == 300
            cp, _ = compress_page(page, None if last is None else Algorithm[last], Hints(cpu, upd),
                                  latency=lambda a, p, s, lz=lz, zs=zs: lz if a is Algorithm.LZ4 else zs)
            want = reference_select(cpu, upd, last, lz4_len(page), zstd_len(page), lz, zs)
            mismatches += cp.algorithm.name != want
        print(f"mismatches {mismatches}; boundary cases {boundary_hits}")
        assert all(v > 100 for v in boundary_hits.values())
        assert mismatches == 0


def test_4_per_page_log_single_read():
    with criterion(4, "consolidation reads logs once per page, k times when scattered"):
        for k in (2, 3, 5):
            counts = {}
            for per_page in (True, False):
                s = ChunkStore(small_config(per_page_log=per_page))
                s.write_page(0, text_page(4))
                for i in range(k):
                    s.write_redo([RedoRecord(s.durable_lsn + 1, 0, 64 * i, b"r" * 40)])
                s.evict_logs([0])
                before = s.metrics.device_reads
                s.read_page(0)
                counts[per_page] = s.metrics.device_reads - before - s.space.index_get(0).block_count
            print(f"k={k}: per-page {counts[True]}, scattered {counts[False]}")
            assert counts[True] == 1
            assert counts[False] == k


def test_5_redo_bypass_and_quorum():
    with criterion(5, "redo path skips codecs; ack needs 2 of 3; 2 stalled replicas block ack"):
        s = ChunkStore(small_config())
        s.write_page(0, text_page(5))
        probe = codec.PROBE.snapshot()
        deflates = [r.device.deflate_calls for r in s.replicas]
        recs = [RedoRecord(i + 1, 0, i, os.urandom(100)) for i in range(20)]
        for r in recs:
            s.write_redo([r])
        assert codec.PROBE.snapshot() == probe
        assert [r.device.deflate_calls for r in s.replicas] == deflates
        for i in range(s.group.committed):
            assert len(s.group.durable_on(i)) >= 2
        s.stall(1)
        s.write_redo([RedoRecord(21, 0, 0, b"x")])
        assert s.durable_lsn == 21
        s.stall(2)
        acks = s.ack_count
        with pytest.raises(ReplicationLost):
            s.write_redo([RedoRecord(22, 0, 0, b"y")])
        assert s.durable_lsn == 21 and s.ack_count == acks
        s.heal()
        assert s.durable_lsn == 22


def test_6_crash_recovery_equivalence():
    with criterion(6, "1000 crash-point traces recover to the last acknowledged state"):
        outcomes = run_many(700, base_seed=600_000)
        outcomes += run_many(300, base_seed=700_000, checkpoint_bytes=2048)
        bad = [o for o in outcomes if not o.ok]
        crashed = sum(o.crashed_at is not None for o in outcomes)
        print(f"{len(outcomes)} traces, {crashed} crashed mid-op, {len(bad)} mismatched")
        assert len(outcomes) == 1000
        assert not bad, bad[:3]


def test_7_device_shadow_model():
    with criterion(7, "device matches shadow model before/after GC; entries 8/7 bytes, exhaustive roundtrip"):
        for fmt in (EntryFormat.V1, EntryFormat.V2):
            d = CsdDevice(DeviceConfig(logical_capacity=4 << 20, entry_format=fmt))
            shadow, pool, sizes = shadow_trace(d, 100_000, seed=70 + int(fmt), gc_every=5000)
            check_against_shadow(d, shadow, pool, sizes)
            d.run_gc()
            check_against_shadow(d, shadow, pool, sizes)
        e = L2PEntry(0, 9, 4096 * 3 + 16, 2000)
        assert len(encode_entry(e, EntryFormat.V1)) == 8
        assert len(encode_entry(e, EntryFormat.V2)) == 7
        for off in range(4096):
            base = 4096 * 7 + off
            for length in range(4096):
                e = L2PEntry(0, 123, base, length)
                if decode_entry(encode_entry(e, EntryFormat.V1), EntryFormat.V1) != e:
                    raise AssertionError(f"V1 roundtrip failed at {off}, {length}")
        for off in range(0, 4096, 16):
            for length in range(0, 4096, 16):
                e = L2PEntry(0, 123, 4096 * 7 + off, length)
                assert decode_entry(encode_entry(e, EntryFormat.V2), EntryFormat.V2) == e


def test_8_thin_provisioning():
    with criterion(8, "incompressible data exhausts physical space; ratio-2.5 data reaches logical capacity"):
        cfg = DeviceConfig(logical_capacity=10 << 20, physical_capacity=4 << 20)
        assert cfg.logical_capacity / cfg.physical_capacity == 2.5
        d = CsdDevice(cfg)
        rng = random.Random(8)
        written = 0
        with pytest.raises(OutOfPhysicalSpace):
            for lba in range(cfg.logical_blocks):
                d.write_block(lba, rng.randbytes(BLOCK_SIZE))
                written += 1
        print(f"random data: {written} of {cfg.logical_blocks} blocks before exhaustion")
        assert abs(written * BLOCK_SIZE - cfg.physical_capacity) <= cfg.gc_segment_size
        assert written < cfg.logical_blocks
        d = CsdDevice(cfg)
        spec = CompressibilitySpec(2.5, Generator.REPEAT_FILL, 8)
        lba = 0
        while lba < cfg.logical_blocks:
            page = generate_page(spec, lba // 4)
            for i in range(4):
                d.write_block(lba, page[i * BLOCK_SIZE:(i + 1) * BLOCK_SIZE])
                lba += 1
        st = d.device_stats()
        print(f"ratio-2.5 data: logical {st.logical_used}, physical live {st.physical_live}")
        assert st.logical_used == cfg.logical_capacity


def test_9_scheduler_convergence():
    with criterion(9, "100-node population ends >= 85% in range with conservation and monotone moves"):
        spec, cfg = load_population(POPULATION)
        assert spec.nodes == 100
        initial = build_population(spec, cfg, seed=0)
        final, plan = schedule_round(initial, cfg)
        frac = in_range_fraction(final, cfg)
        print(f"in range before {in_range_fraction(initial, cfg):.3f}, after {frac:.3f}, "
              f"{len(plan)} moves")
        assert frac >= 0.85
        assert final.totals() == initial.totals()
        ratio_moves = [m for m in plan if m.kind == "ratio"]
        logical_moves = [m for m in plan if m.kind == "logical"]
        work, _ = apply_plan(initial, logical_moves)
        v = violation(work, cfg)
        for m in ratio_moves:
            work, _ = apply_plan(work, [m])
            nv = violation(work, cfg)
            assert nv < v
            v = nv
        # a second round starting from the result has nothing left to do
        _, again = schedule_round(final, cfg)
        assert len(again) <= len(plan)


def test_10_heavy_compression(corpus):
    with criterion(10, "archived corpus smaller than NORMAL; bit-identical; whole-segment reads"):
        cfg = EngineConfig(device=DeviceConfig(logical_capacity=32 << 20))
        pages = corpus[:320]
        normal = ChunkStore(cfg)
        heavy = ChunkStore(cfg)
        for pid, page in enumerate(pages):
            normal.write_page(pid, page)
            heavy.write_page(pid, page)
        heavy.archive_range(range(len(pages)))
        n_blocks, h_blocks = normal.stored_blocks(), heavy.stored_blocks()
        n_live = normal.device.device_stats().physical_live
        h_live = heavy.device.device_stats().physical_live
        print(f"blocks NORMAL {n_blocks} vs archived {h_blocks}; "
              f"device bytes {n_live} vs {h_live}")
        assert h_blocks < n_blocks and h_live < n_live
        for pid, page in enumerate(pages):
            assert heavy.read_page(pid) == page
        fresh = ChunkStore.recover(heavy.crash(), cfg)
        pid = random.Random(10).randrange(len(pages))
        entry = fresh.space.index_get(pid)
        assert entry.mode is WriteMode.HEAVY
        before = fresh.metrics.heavy_blocks_read
        assert fresh.read_page(pid) == pages[pid]
        assert fresh.metrics.heavy_segment_reads == 1
        assert fresh.metrics.heavy_blocks_read - before == entry.block_count > 1


def test_11_trim_effect():
    with criterion(11, "free+trim lowers physical_live by exactly the dataset's stored bytes"):
        for fmt in (EntryFormat.V1, EntryFormat.V2):
            dev = CsdDevice(DeviceConfig(logical_capacity=16 << 20, entry_format=fmt))
            sm = SpaceManager(dev.config.logical_blocks, device=dev)
            spec = CompressibilitySpec(3.0, Generator.TEXT_MIX, 11)
            runs = {}
            for ds in ("keep", "drop"):
                runs[ds] = []
                for i in range(40):
                    start, n = sm.allocate_blocks(0 if ds == "keep" else 1, 4)
                    page = generate_page(spec, i + (100 if ds == "drop" else 0))
                    for b in range(n):
                        dev.write_block(start + b, page[b * BLOCK_SIZE:(b + 1) * BLOCK_SIZE])
                    runs[ds].append((start, n, page))
            g = fmt.granularity
            dropped = sum(oracle_stored(page[b * BLOCK_SIZE:(b + 1) * BLOCK_SIZE], g)
                          for _, n, page in runs["drop"] for b in range(n))
            before = dev.device_stats().physical_live
            for start, n, _ in runs["drop"]:
                sm.free_blocks(1, start, n)
            after = dev.device_stats().physical_live
            print(f"{fmt.name}: physical_live {before} -> {after}, dataset stored {dropped}")
            assert before - after == dropped
            assert after == sum(oracle_stored(page[b * BLOCK_SIZE:(b + 1) * BLOCK_SIZE], g)
                                for _, n, page in runs["keep"] for b in range(n))
