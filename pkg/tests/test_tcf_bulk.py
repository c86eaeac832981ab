"""Bulk-API two-choice filter tests.

The partition and merge building blocks are checked against independent
oracles (python sorts over the public hashing module) before the composed
batch operations.
"""

import numpy as np
import pytest

from filterkit import FilterFullError, ValidationError, hashing
from filterkit.tcf_bulk import BulkTcf, BulkTcfParams


def _oracle_partition(keys, params):
    """Independent (primary block, word) partition via python sorting."""
    pairs = []
    for k in keys.tolist():
        fp = hashing.fingerprint(k, seed=params.seed)
        b1, _ = hashing.potc_pair(fp, params.num_blocks)
        word = hashing.remap_tag(fp & ((1 << params.tag_bits) - 1))
        pairs.append((b1, word))
    return sorted(pairs)


class TestPartition:
    def test_matches_sort_oracle(self):
        f = BulkTcf(num_blocks=32, seed=1)
        keys = np.random.default_rng(0).integers(0, 2 ** 60, 500, dtype=np.uint64)
        blocks, words, bounds, order = f.partition(keys)
        got = list(zip(blocks.tolist(), words.tolist()))
        assert got == _oracle_partition(keys, f.params)
        # bounds bracket each block's segment
        for b in range(f.params.num_blocks):
            seg = blocks[bounds[b]:bounds[b + 1]]
            assert (seg == b).all()
        assert bounds[0] == 0 and bounds[-1] == len(keys)

    def test_order_permutes_batch(self):
        f = BulkTcf(num_blocks=16, seed=2)
        keys = np.arange(300, dtype=np.uint64)
        _, words, _, order = f.partition(keys)
        fps = hashing.fingerprint_many(keys[order], f.params.seed)
        expect = hashing.remap_tag_many(fps & np.uint64(0xFFFF))
        assert (words == expect).all()


class TestMergeBlock:
    def test_matches_sorted_concat_oracle(self):
        f = BulkTcf(num_blocks=4, seed=3)
        rng = np.random.default_rng(1)
        a = np.sort(rng.integers(2, 2 ** 16, 40, dtype=np.uint64))
        b = rng.integers(2, 2 ** 16, 30, dtype=np.uint64)
        f.merge_block(2, a)
        f.merge_block(2, b)
        stored = f._blocks[2 * 128:2 * 128 + 70]
        assert stored.tolist() == sorted(a.tolist() + b.tolist())
        assert f.occupancy(2) == 70

    def test_overflow_raises(self):
        f = BulkTcf(num_blocks=2, seed=4)
        f.merge_block(0, np.arange(2, 130, dtype=np.uint64))  # exactly full
        with pytest.raises(FilterFullError):
            f.merge_block(0, np.array([500], dtype=np.uint64))


class TestInsertBatch:
    def test_insert_then_query(self):
        f = BulkTcf(num_blocks=64, seed=5)
        keys = np.random.default_rng(2).integers(0, 2 ** 60, 5000, dtype=np.uint64)
        failed = f.insert_batch(keys)
        assert len(failed) == 0
        assert f.query_batch(keys).all()
        f.validate()

    def test_shortcut_tops_primary_blocks_first(self):
        # after one batch into an empty filter every primary block holds at
        # least min(segment length, cut) words: the shortcut ran before POTC
        f = BulkTcf(num_blocks=32, seed=6)
        keys = np.random.default_rng(3).integers(0, 2 ** 60, 3000, dtype=np.uint64)
        _, _, bounds, _ = f.partition(keys)
        seg_len = np.diff(bounds)
        f.insert_batch(keys)
        cut = f.params.cut_slots
        for b in range(32):
            assert f.occupancy(b) >= min(int(seg_len[b]), cut)

    def test_multi_batch_accumulates(self):
        f = BulkTcf(num_blocks=64, seed=7)
        rng = np.random.default_rng(4)
        all_keys = []
        for _ in range(5):
            batch = rng.integers(0, 2 ** 60, 1000, dtype=np.uint64)
            assert len(f.insert_batch(batch)) == 0
            all_keys.append(batch)
        assert f.query_batch(np.concatenate(all_keys)).all()
        f.validate()

    def test_worker_count_does_not_change_result(self):
        keys = np.random.default_rng(5).integers(0, 2 ** 60, 8000, dtype=np.uint64)
        tables = []
        for workers in (1, 3, 8):
            f = BulkTcf(num_blocks=64, seed=8)
            f.insert_batch(keys, workers=workers)
            tables.append((f._blocks.copy(), f._fill.copy(), f._backing.copy()))
        for blocks, fill, backing in tables[1:]:
            assert np.array_equal(blocks, tables[0][0])
            assert np.array_equal(fill, tables[0][1])
            assert np.array_equal(backing, tables[0][2])

    def test_failed_keys_reported_when_no_room(self):
        f = BulkTcf(num_blocks=2, backing_fraction=0.0, seed=9)
        keys = np.arange(400, dtype=np.uint64)  # 256 slots total
        failed = f.insert_batch(keys)
        assert len(failed) == 400 - 256
        assert f.load_factor() == 1.0
        # failed keys are real batch keys
        assert np.isin(failed, keys).all()
        f.validate()

    def test_overflow_spills_to_backing(self):
        f = BulkTcf(num_blocks=2, backing_fraction=0.25, seed=10)
        keys = np.arange(300, dtype=np.uint64)
        failed = f.insert_batch(keys)
        assert len(failed) == 0
        assert f.counters["inserts_backing"] == 300 - 256
        assert f.query_batch(keys).all()

    def test_fpr_sane(self):
        f = BulkTcf(num_blocks=512, seed=11)
        n = int(f.params.main_slots * 0.8)
        f.insert_batch(np.arange(n, dtype=np.uint64))
        neg = np.arange(2 ** 50, 2 ** 50 + 60_000, dtype=np.uint64)
        fpr = f.query_batch(neg).mean()
        # two 128-slot blocks of 16-bit tags: bound 2B/2^f ~ 0.0039
        assert fpr < 0.0045


class TestDeleteBatch:
    def test_delete_then_query_false(self):
        f = BulkTcf(num_blocks=64, seed=12)
        keys = np.random.default_rng(6).integers(0, 2 ** 60, 4000, dtype=np.uint64)
        f.insert_batch(keys)
        removed = f.delete_batch(keys[:2000])
        assert removed.all()
        assert f.query_batch(keys[2000:]).all()
        f.validate()

    def test_delete_removes_one_copy(self):
        f = BulkTcf(num_blocks=8, seed=13)
        f.insert_batch(np.array([99, 99], dtype=np.uint64))
        word = int(f._words(f._fps(np.array([99], dtype=np.uint64)))[0])
        assert sum(1 for _, w in f.items() if w == word) == 2
        assert f.delete_batch(np.array([99], dtype=np.uint64)).all()
        assert sum(1 for _, w in f.items() if w == word) == 1
        assert f.delete_batch(np.array([99], dtype=np.uint64)).all()
        assert sum(1 for _, w in f.items() if w == word) == 0
        assert not f.delete_batch(np.array([99], dtype=np.uint64)).any()

    def test_blocks_stay_sorted_and_packed(self):
        f = BulkTcf(num_blocks=16, seed=14)
        rng = np.random.default_rng(7)
        keys = rng.integers(0, 2 ** 60, 1500, dtype=np.uint64)
        f.insert_batch(keys)
        f.delete_batch(rng.choice(keys, 700, replace=False))
        f.validate()  # sortedness, front-packing, zero tails

    def test_delete_worker_determinism(self):
        keys = np.random.default_rng(8).integers(0, 2 ** 60, 6000, dtype=np.uint64)
        drop = keys[::2]
        tables = []
        for workers in (1, 6):
            f = BulkTcf(num_blocks=64, seed=15)
            f.insert_batch(keys)
            f.delete_batch(drop, workers=workers)
            tables.append((f._blocks.copy(), f._fill.copy()))
        assert np.array_equal(tables[0][0], tables[1][0])
        assert np.array_equal(tables[0][1], tables[1][1])

    def test_secondary_block_deletes_found(self):
        # force items into secondary/backing by overfilling a tiny filter,
        # then delete everything: every stored copy must be removable
        f = BulkTcf(num_blocks=4, backing_fraction=0.2, seed=16)
        keys = np.arange(560, dtype=np.uint64)
        failed = f.insert_batch(keys)
        stored = np.setdiff1d(keys, failed)
        removed = f.delete_batch(stored)
        assert removed.all()
        assert f.load_factor() == 0.0
        f.validate()


class TestValidate:
    def test_detects_unsorted_block(self):
        f = BulkTcf(num_blocks=4, seed=17)
        f.insert_batch(np.arange(200, dtype=np.uint64))
        b = int(np.argmax(f._fill))
        base = b * 128
        f._blocks[base], f._blocks[base + 1] = f._blocks[base + 1], f._blocks[base]
        if f._blocks[base] > f._blocks[base + 1]:  # swap actually unsorted it
            with pytest.raises(ValidationError):
                f.validate()

    def test_detects_fill_mismatch(self):
        f = BulkTcf(num_blocks=4, seed=18)
        f.insert_batch(np.arange(100, dtype=np.uint64))
        f._fill[0] += 1
        with pytest.raises(ValidationError):
            f.validate()
