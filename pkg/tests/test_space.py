import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csdstore.codec import Algorithm
from csdstore.csd import CsdDevice, DeviceConfig
from csdstore.errors import CorruptWal, DoubleFree, NotFound, OutOfLogicalSpace
from csdstore.errors import SimulatedCrash
from csdstore.space import (BLOCKS_PER_EXTENT, DurableCell, FastLog, IndexEntry, RecordKind,
                            SpaceManager, WalRecord, WriteMode, parse_wal)

DATA_BLOCKS = 32 * BLOCKS_PER_EXTENT


def entry(pid, start=0, n=1, **kw):
    return IndexEntry(pid, WriteMode.NORMAL, Algorithm.LZ4, start, n, 100 * n, **kw)


def fresh(**kw):
    return SpaceManager(DATA_BLOCKS, **kw)


# ---- allocation

def test_first_allocation_takes_one_extent():
    sm = fresh()
    assert sm.allocate_blocks(0, 4) == (0, 4)
    assert sm.extents.free_count == sm.extents.total - 1
    assert sm.chunk(0).allocated_blocks() == {0, 1, 2, 3}


def test_32_single_blocks_fill_one_extent():
    sm = fresh()
    starts = [sm.allocate_blocks(0, 1)[0] for _ in range(32)]
    assert sorted(starts) == list(range(32))
    assert sm.extents.free_count == sm.extents.total - 1
    sm.allocate_blocks(0, 1)
    assert sm.extents.free_count == sm.extents.total - 2


def test_chunks_get_separate_extents():
    sm = fresh()
    a, _ = sm.allocate_blocks(0, 1)
    b, _ = sm.allocate_blocks(1, 1)
    assert a // BLOCKS_PER_EXTENT != b // BLOCKS_PER_EXTENT


def test_large_run_spans_extents():
    sm = fresh()
    start, n = sm.allocate_blocks(0, 100)
    assert n == 100 and start % BLOCKS_PER_EXTENT == 0
    assert sm.extents.free_count == sm.extents.total - 4


def test_run_limits():
    sm = fresh()
    for bad in (0, 257):
        with pytest.raises(ValueError):
            sm.allocate_blocks(0, bad)


def test_out_of_logical_space():
    sm = SpaceManager(BLOCKS_PER_EXTENT)
    sm.allocate_blocks(0, 32)
    with pytest.raises(OutOfLogicalSpace):
        sm.allocate_blocks(0, 1)


def test_double_free():
    sm = fresh()
    start, n = sm.allocate_blocks(0, 3)
    sm.free_blocks(0, start, n)
    with pytest.raises(DoubleFree):
        sm.free_blocks(0, start, n)
    assert sm.extents.free_count == sm.extents.total


def test_free_trims_device():
    dev = CsdDevice(DeviceConfig(logical_capacity=8 << 20))
    sm = fresh(device=dev)
    before = dev.device_stats().logical_used
    start, n = sm.allocate_blocks(0, 2)
    for lba in range(start, start + n):
        dev.write_block(lba, bytes(4096))
    sm.free_blocks(0, start, n)
    assert dev.device_stats().logical_used == before


@settings(max_examples=60, deadline=None)
@given(ops=st.lists(st.tuples(st.booleans(), st.integers(0, 2), st.integers(1, 40)),
                    min_size=1, max_size=80))
def test_allocator_matches_reference(ops):
    sm = fresh()
    live: dict[int, list] = {0: [], 1: [], 2: []}  # chunk -> [(start, n)]
    rng = random.Random(len(ops))
    for alloc, chunk, n in ops:
        if alloc or not live[chunk]:
            try:
                start, got = sm.allocate_blocks(chunk, n)
            except OutOfLogicalSpace:
                continue
            live[chunk].append((start, got))
        else:
            start, got = live[chunk].pop(rng.randrange(len(live[chunk])))
            sm.free_blocks(chunk, start, got)
        # no overlap between any two live runs, across chunks too
        blocks = [b for runs in live.values() for s, k in runs for b in range(s, s + k)]
        assert len(blocks) == len(set(blocks))
        for c, runs in live.items():
            expect = {b for s, k in runs for b in range(s, s + k)}
            assert sm.chunk(c).allocated_blocks() == expect
            assert sm.chunk(c).popcount == len(expect)
        owned = sum(len(bm.owned) for bm in sm.chunks.values())
        assert owned + sm.extents.free_count == sm.extents.total


# ---- index

def test_index_put_get_remove():
    sm = fresh()
    with pytest.raises(NotFound):
        sm.index_get(5)
    sm.index_put(entry(5, 10))
    assert sm.index_get(5) == entry(5, 10)
    sm.index_put(entry(5, 20))
    assert sm.index_get(5).start == 20
    sm.index_remove(5)
    with pytest.raises(NotFound):
        sm.index_remove(5)


def test_index_entry_bytes_roundtrip():
    e = IndexEntry(7, WriteMode.HEAVY, Algorithm.ZSTD, 64, 40, 160_000, 0xBEEF, 3, 64, 2, 99)
    assert IndexEntry.from_bytes(e.to_bytes()) == e


def test_index_matches_plain_map():
    sm = fresh()
    ref = {}
    rng = random.Random(1)
    for i in range(100_000):
        pid = rng.randrange(500)
        if rng.random() < 0.75:
            e = entry(pid, rng.randrange(1000), rng.randint(1, 4))
            sm.index_put(e)
            ref[pid] = e
        elif pid in ref:
            sm.index_remove(pid)
            del ref[pid]
        if i % 20_000 == 0:
            sm.checkpoint()
    assert sm.index == ref
    back = SpaceManager.recover(DATA_BLOCKS, sm.wal, sm.ckpt)
    assert back.index == ref


def test_unpublished_transaction_hidden_until_publish():
    sm = fresh()
    with sm.transaction(publish=False) as txn:
        sm.index_put(entry(1))
    assert 1 not in sm.index
    sm.publish(txn)
    assert sm.index_get(1) == entry(1)


def test_failed_transaction_rolls_back_allocations():
    sm = fresh()
    with pytest.raises(RuntimeError):
        with sm.transaction():
            sm.allocate_blocks(0, 4)
            raise RuntimeError("boom")
    assert sm.chunk(0).popcount == 0
    assert sm.extents.free_count == sm.extents.total
    assert parse_wal(bytes(sm.wal.durable)) == []


# ---- WAL

def test_wal_record_layout():
    rec = WalRecord(42, RecordKind.ALLOC, b"\x01abc")
    raw = rec.to_bytes()
    lsn, kind, plen = struct.unpack_from("<QBI", raw)
    assert (lsn, kind, plen) == (42, RecordKind.ALLOC, 4)
    assert parse_wal(raw) == [rec]


def populated(n=20, seed=0):
    sm = fresh()
    rng = random.Random(seed)
    for pid in range(n):
        start, k = sm.allocate_blocks(0, rng.randint(1, 4))
        sm.index_put(entry(pid, start, k))
    return sm


def test_recover_replays_full_wal():
    sm = populated()
    back = SpaceManager.recover(DATA_BLOCKS, sm.wal, DurableCell())
    assert back.state() == sm.state()
    assert back.next_lsn == sm.next_lsn


def test_torn_tail_dropped():
    sm = populated()
    good = bytes(sm.wal.durable)
    state = sm.state()
    sm.allocate_blocks(0, 2)
    torn = bytes(sm.wal.durable)[:len(good) + 7]
    back = SpaceManager.recover(DATA_BLOCKS, FastLog(), DurableCell())
    log = FastLog()
    log.durable = bytearray(torn)
    back = SpaceManager.recover(DATA_BLOCKS, log, DurableCell())
    assert back.state() == state
    assert bytes(log.durable) == good


def test_torn_final_crc_dropped():
    sm = populated()
    data = bytearray(sm.wal.durable)
    data[-1] ^= 0xFF
    log = FastLog()
    log.durable = data
    back = SpaceManager.recover(DATA_BLOCKS, log, DurableCell())
    assert len(back.index) == 19


def test_interior_crc_failure_is_corruption():
    sm = populated()
    data = bytearray(sm.wal.durable)
    data[20] ^= 0xFF
    with pytest.raises(CorruptWal):
        parse_wal(bytes(data))


def test_lsn_gap_is_corruption():
    a = WalRecord(1, RecordKind.ALLOC, b"\x01").to_bytes()
    c = WalRecord(3, RecordKind.ALLOC, b"\x01").to_bytes()
    with pytest.raises(CorruptWal):
        parse_wal(a + c)


def test_incomplete_group_is_dropped():
    sm = populated(5)
    state = sm.state()

    def hook(point):
        if point == "before_flush":
            raise SimulatedCrash(point)

    sm.crash_hook = hook
    with pytest.raises(SimulatedCrash):
        with sm.transaction():
            start, k = sm.allocate_blocks(0, 1)
            sm.index_put(entry(99, start, k))
    # half the group reached the log before the crash
    sm.wal.crash(torn_bytes=40)
    back = SpaceManager.recover(DATA_BLOCKS, sm.wal, sm.ckpt)
    assert back.state() == state


def test_crash_after_flush_keeps_operation():
    sm = populated(5)

    def hook(point):
        if point == "after_flush":
            raise SimulatedCrash(point)

    sm.crash_hook = hook
    with pytest.raises(SimulatedCrash):
        sm.index_put(entry(99))
    sm.wal.crash()
    back = SpaceManager.recover(DATA_BLOCKS, sm.wal, sm.ckpt)
    assert back.index_get(99) == entry(99)


def test_unflushed_buffer_lost():
    log = FastLog(group_bytes=1 << 20)
    log.append(b"abc")
    assert log.pending == 3
    log.crash()
    assert bytes(log.durable) == b""


# ---- checkpoint

def test_checkpoint_equivalent_to_full_replay():
    sm = populated(30)
    full = SpaceManager.recover(DATA_BLOCKS, FastLog(), DurableCell())
    log = FastLog()
    log.durable = bytearray(sm.wal.durable)
    full = SpaceManager.recover(DATA_BLOCKS, log, DurableCell())
    sm.checkpoint()
    from_ckpt = SpaceManager.recover(DATA_BLOCKS, sm.wal, sm.ckpt)
    assert from_ckpt.state() == full.state() == sm.state()


def test_two_checkpoints_identical_snapshots():
    sm = populated(10)
    lsn = sm.checkpoint()
    first = sm.ckpt.data
    assert sm.checkpoint() == lsn
    assert sm.ckpt.data == first


def test_checkpoint_mid_trace_then_crash():
    sm = populated(10)
    sm.checkpoint()
    for pid in range(10, 25):
        start, k = sm.allocate_blocks(0, 2)
        sm.index_put(entry(pid, start, k))
    sm.index_remove(3)
    sm.wal.crash()
    back = SpaceManager.recover(DATA_BLOCKS, sm.wal, sm.ckpt)
    assert back.state() == sm.state()
    # the recovered manager keeps logging contiguously
    back.index_put(entry(200))
    again = SpaceManager.recover(DATA_BLOCKS, back.wal, back.ckpt)
    assert again.index_get(200) == entry(200)


def test_corrupt_checkpoint_rejected():
    sm = populated(3)
    sm.checkpoint()
    bad = bytearray(sm.ckpt.data)
    bad[10] ^= 1
    with pytest.raises(CorruptWal):
        SpaceManager.recover(DATA_BLOCKS, FastLog(), DurableCell(bytes(bad)))


def test_reconcile_trims_unowned_blocks():
    dev = CsdDevice(DeviceConfig(logical_capacity=8 << 20))
    sm = fresh(device=dev)
    start, _ = sm.allocate_blocks(0, 1)
    dev.write_block(start, bytes(4096))
    dev.write_block(start + 5, bytes(4096))
    assert sm.reconcile_device() == 1
    assert dev.mapped_lbas() == [start]
