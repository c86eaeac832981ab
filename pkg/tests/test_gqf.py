"""Counting-quotient-filter tests.

Two independent oracles do the heavy lifting here:

* an inverse of the 64-bit mixer lets tests craft keys whose fingerprints
  land on exact (quotient, remainder) pairs, so layout expectations can be
  written by hand;
* ``Gqf._derive_structure`` / ``validate`` recompute run intervals with
  global numpy rank/select, independent of the kernels' region-local
  arithmetic, and every mutation test cross-checks against them.
"""

import threading

import numpy as np
import pytest

from filterkit import CapacityError, ValidationError, hashing
from filterkit.gqf import Gqf, GqfParams

_INV1 = pow(0xBF58476D1CE4E5B9, -1, 2 ** 64)
_INV2 = pow(0x94D049BB133111EB, -1, 2 ** 64)
M = 2 ** 64 - 1


def _unshift(x, s):
    """Invert y = x ^ (x >> s)."""
    y = x
    for _ in range(64 // s + 1):
        y = x ^ (y >> s)
    return y


def _unmix64(x):
    x = _unshift(x, 31)
    x = (x * _INV2) & M
    x = _unshift(x, 27)
    x = (x * _INV1) & M
    return _unshift(x, 30)


def craft_key(fp, seed, bits):
    """A key whose `bits`-bit fingerprint under `seed` is exactly fp."""
    assert fp < 2 ** bits
    return _unmix64(fp) ^ seed


def craft_keys(filt, pairs):
    """Keys for (quotient, remainder) pairs under a filter's parameters."""
    p = filt.params
    return np.array(
        [craft_key((qt << p.r) | rem, p.seed, p.q + p.r) for qt, rem in pairs],
        dtype=np.uint64)


class TestKeyCrafting:
    def test_unmix_inverts_mix(self):
        xs = np.random.default_rng(0).integers(0, 2 ** 63, 300, dtype=np.uint64)
        for x in xs.tolist():
            assert _unmix64(hashing.mix64(x)) == x

    def test_crafted_key_hits_target(self):
        g = Gqf(q=10, r=8, seed=5)
        keys = craft_keys(g, [(17, 3), (1023, 255), (0, 0)])
        fps = [g.fingerprint_of(int(k)) for k in keys.tolist()]
        assert fps == [(17 << 8) | 3, (1023 << 8) | 255, 0]


class TestLayout:
    def test_run_is_sorted_remainders_from_quotient(self):
        g = Gqf(q=8, r=8, seed=1)
        g.insert_many(craft_keys(g, [(50, 9), (50, 3), (50, 200)]))
        assert g.find_run(50) == (50, 52)
        assert g._slots[50:53].tolist() == [3, 9, 200]
        g.validate()

    def test_collided_runs_shift_right_in_quotient_order(self):
        # quotients 5,6,7 with 2+1+1 items pack into slots 5..8
        g = Gqf(q=8, r=8, seed=2)
        g.insert_many(craft_keys(g, [(5, 10), (5, 20), (6, 30), (7, 40)]))
        assert g.find_run(5) == (5, 6)
        assert g.find_run(6) == (7, 7)
        assert g.find_run(7) == (8, 8)
        assert g._slots[5:9].tolist() == [10, 20, 30, 40]
        g.validate()

    def test_early_insert_shifts_later_runs(self):
        g = Gqf(q=8, r=8, seed=3)
        g.insert_many(craft_keys(g, [(5, 10), (6, 30)]))
        assert g.find_run(6) == (6, 6)
        # a second remainder at 5 displaces 6's run
        g.insert(int(craft_keys(g, [(5, 11)])[0]))
        assert g.find_run(5) == (5, 6)
        assert g.find_run(6) == (7, 7)
        g.validate()

    def test_find_run_absent_quotient(self):
        g = Gqf(q=8, r=8, seed=4)
        g.insert_many(craft_keys(g, [(5, 10)]))
        assert g.find_run(99) == (-1, -1)

    def test_find_run_matches_global_derivation(self):
        # differential: region-local rank/select vs whole-table numpy oracle
        g = Gqf(q=12, r=8, seed=5)
        rng = np.random.default_rng(2)
        g.insert_many(rng.integers(0, 2 ** 50, 3000, dtype=np.uint64))
        quotients, starts, ends = g._derive_structure()
        for qt, s, e in zip(quotients.tolist(), starts.tolist(), ends.tolist()):
            assert g.find_run(qt) == (s, e)
        g.validate()


class TestCounting:
    def test_count_accumulates_and_decrements(self):
        g = Gqf(q=8, r=8, seed=6)
        key = int(craft_keys(g, [(10, 7)])[0])
        for add in (1, 1, 298):
            g.insert(key, count=add)
        assert g.count(key) == 300
        assert g._slots[10:14].tolist() == [7, 4, 43, 7]  # counted form
        g.validate()
        assert g.delete(key, count=250)
        assert g.count(key) == 50
        g.validate()
        assert g.delete(key, count=50)
        assert g.count(key) == 0
        assert not g.query(key)
        g.validate()

    def test_count_never_underreports(self):
        g = Gqf(q=12, r=8, seed=7)
        rng = np.random.default_rng(3)
        keys = rng.integers(0, 2 ** 40, 500, dtype=np.uint64)
        reps = rng.integers(1, 60, 500, dtype=np.uint64)
        g.insert_many(keys, reps)
        truth = {}
        for k, c in zip(keys.tolist(), reps.tolist()):
            truth[k] = truth.get(k, 0) + c
        tk = np.fromiter(truth, dtype=np.uint64)
        got = g.count_many(tk)
        want = np.array([truth[int(k)] for k in tk.tolist()], dtype=np.uint64)
        assert (got >= want).all(), "counts must be one-sided (never under)"
        g.validate()

    def test_exact_counts_for_crafted_distinct_fingerprints(self):
        g = Gqf(q=10, r=8, seed=8)
        pairs = [(i * 37 % 1024, (i * 11) % 256) for i in range(80)]
        pairs = list(dict.fromkeys(pairs))
        keys = craft_keys(g, pairs)
        counts = np.arange(1, len(keys) + 1, dtype=np.uint64)
        g.insert_many(keys, counts)
        got = g.count_many(keys)
        assert got.tolist() == counts.tolist()
        g.validate()

    def test_mixed_count_groups_in_one_run(self):
        g = Gqf(q=8, r=8, seed=9)
        spec = [(0, 4), (3, 1), (7, 300), (9, 2), (255, 1000)]
        for rem, cnt in spec:
            g.insert(int(craft_keys(g, [(30, rem)])[0]), count=cnt)
        for rem, cnt in spec:
            assert g.count(int(craft_keys(g, [(30, rem)])[0])) == cnt
        g.validate()
        # delete middles, recheck neighbours
        assert g.delete(int(craft_keys(g, [(30, 7)])[0]), count=300)
        for rem, cnt in [(0, 4), (3, 1), (9, 2), (255, 1000)]:
            assert g.count(int(craft_keys(g, [(30, rem)])[0])) == cnt
        g.validate()


class TestDeletion:
    def test_delete_compacts_following_runs(self):
        g = Gqf(q=8, r=8, seed=10)
        g.insert_many(craft_keys(g, [(5, 1), (5, 2), (6, 3), (7, 4)]))
        assert g.find_run(7) == (8, 8)
        assert g.delete(int(craft_keys(g, [(5, 1)])[0]))
        # everything slides left one slot
        assert g.find_run(5) == (5, 5)
        assert g.find_run(6) == (6, 6)
        assert g.find_run(7) == (7, 7)
        g.validate()

    def test_delete_stops_at_canonical_runs(self):
        g = Gqf(q=8, r=8, seed=11)
        g.insert_many(craft_keys(g, [(5, 1), (6, 3), (20, 9)]))
        g.delete(int(craft_keys(g, [(5, 1)])[0]))
        assert g.find_run(20) == (20, 20)  # canonical run never moves
        g.validate()

    def test_delete_to_empty_leaves_zeroed_table(self):
        g = Gqf(q=10, r=8, seed=12)
        rng = np.random.default_rng(4)
        keys = rng.integers(0, 2 ** 45, 400, dtype=np.uint64)
        g.insert_many(keys)
        g.delete_many(np.unique(keys))
        assert g.occupied_slots == 0 and g.total_items == 0
        assert not g._slots.any()
        assert not g._occupieds.any() and not g._runends.any()
        assert not g._offsets.any()
        g.validate()

    def test_delete_absent_is_noop(self):
        g = Gqf(q=8, r=8, seed=13)
        g.insert_many(craft_keys(g, [(5, 1)]))
        before = g._slots.copy()
        assert not g.delete(int(craft_keys(g, [(5, 2)])[0]))       # same run
        assert not g.delete(int(craft_keys(g, [(77, 1)])[0]))      # no run
        assert np.array_equal(g._slots, before)
        g.validate()


class TestRegions:
    def test_spill_across_region_boundary(self):
        # park runs right below the 8192 boundary so they spill across it
        g = Gqf(q=14, r=8, seed=14)  # two quotient regions
        pairs = [(8190, rem) for rem in range(1, 60)] + [(8191, 7), (8195, 9)]
        keys = craft_keys(g, pairs)
        g.insert_many(keys)
        assert g._offsets[1] > 0
        got = g.count_many(keys)
        assert (got == 1).all()
        g.validate()
        # deleting the big run pulls the spill back
        g.delete_many(craft_keys(g, [(8190, rem) for rem in range(1, 60)]))
        assert g._offsets[1] == 0
        g.validate()

    def test_quotients_in_last_region_use_padding(self):
        g = Gqf(q=14, r=8, seed=15)
        top = g.params.logical_slots - 1
        pairs = [(top, rem) for rem in range(40)] + [(top - 1, 5)]
        g.insert_many(craft_keys(g, pairs))
        got = g.count_many(craft_keys(g, pairs))
        assert (got == 1).all()
        s, e = g.find_run(top)
        assert e >= g.params.logical_slots  # spilled into padding
        g.validate()

    def test_shift_bound_raises_capacity_error(self):
        # a single gigantic unary group cannot fit below the hard bound
        g = Gqf(q=13, r=8, seed=16, max_load=1.0)
        key = int(craft_keys(g, [(0, 0)])[0])
        with pytest.raises(CapacityError):
            g.insert(key, count=g.params.physical_slots + 1)
        g.validate()  # failed insert leaves a consistent table

    def test_load_ceiling_raises_capacity_error(self):
        g = Gqf(q=8, r=8, seed=17, max_load=0.5)
        with pytest.raises(CapacityError):
            g.insert_many(np.arange(300, dtype=np.uint64))
        g.validate()
        assert g.occupied_slots <= g.params.max_occupied + 1


class TestBulkOps:
    def test_bulk_equals_point_layout(self):
        rng = np.random.default_rng(5)
        keys = rng.integers(0, 2 ** 60, 15000, dtype=np.uint64)
        a = Gqf(q=15, r=8, seed=18)
        b = Gqf(q=15, r=8, seed=18)
        a.insert_many(keys)
        b.bulk_insert(keys, workers=4)
        assert np.array_equal(a._slots, b._slots)
        assert np.array_equal(a._occupieds, b._occupieds)
        assert np.array_equal(a._runends, b._runends)
        assert np.array_equal(a._offsets, b._offsets)

    def test_bulk_worker_count_invariant(self):
        keys = np.random.default_rng(6).integers(0, 2 ** 60, 10000, dtype=np.uint64)
        tables = []
        for w in (1, 2, 7):
            g = Gqf(q=15, r=8, seed=19)
            g.bulk_insert(keys, workers=w)
            tables.append(g._slots.copy())
            g.validate()
        assert np.array_equal(tables[0], tables[1])
        assert np.array_equal(tables[0], tables[2])

    def test_bulk_insert_with_counts_then_bulk_delete(self):
        g = Gqf(q=14, r=8, seed=20)
        rng = np.random.default_rng(7)
        keys = np.unique(rng.integers(0, 2 ** 55, 4000, dtype=np.uint64))
        counts = rng.integers(1, 100, len(keys), dtype=np.uint64)
        g.bulk_insert(keys, counts, workers=4)
        got = g.count_many(keys)
        assert (got >= counts).all()
        g.validate()
        flags = g.bulk_delete(keys, counts, workers=4)
        assert flags.all()
        assert g.total_items == 0
        g.validate()

    def test_bulk_delete_all_copies_by_default(self):
        g = Gqf(q=12, r=8, seed=21)
        keys = np.arange(500, dtype=np.uint64)
        g.bulk_insert(keys, np.full(500, 9, dtype=np.uint64))
        g.bulk_delete(keys)
        assert g.occupied_slots == 0
        assert not g._slots.any()
        g.validate()

    def test_interleaved_point_and_bulk(self):
        g = Gqf(q=13, r=8, seed=22)
        rng = np.random.default_rng(8)
        a = rng.integers(0, 2 ** 50, 1000, dtype=np.uint64)
        b = rng.integers(0, 2 ** 50, 1000, dtype=np.uint64)
        g.insert_many(a)
        g.bulk_insert(b)
        g.validate()
        ref = Gqf(q=13, r=8, seed=22)
        ref.insert_many(np.concatenate([a, b]))
        assert sorted(g.items()) == sorted(ref.items())
        assert np.array_equal(g._slots, ref._slots)  # canonical layout


class TestEnumerate:
    def test_items_match_inserted_fingerprint_multiset(self):
        g = Gqf(q=10, r=8, seed=23)
        pairs = [(3, 5), (3, 9), (500, 0), (1023, 255)]
        counts = [4, 1, 7, 2]
        for (qt, rem), c in zip(pairs, counts):
            g.insert(int(craft_keys(g, [(qt, rem)])[0]), count=c)
        want = sorted(((qt << 8) | rem, c) for (qt, rem), c in zip(pairs, counts))
        assert sorted(g.items()) == want
        assert sorted(g.enumerate_items()) == want

    def test_enumeration_invariant_under_insert_order(self):
        keys = np.random.default_rng(9).integers(0, 2 ** 50, 2000, dtype=np.uint64)
        a = Gqf(q=12, r=8, seed=24)
        b = Gqf(q=12, r=8, seed=24)
        a.insert_many(keys)
        b.insert_many(keys[::-1].copy())
        assert a.items() == b.items()

    def test_cluster_stats(self):
        g = Gqf(q=8, r=8, seed=25)
        g.insert_many(craft_keys(g, [(5, 1), (5, 2), (6, 3), (30, 1)]))
        st = g.cluster_stats()
        assert st["num_clusters"] == 2
        assert st["max_cluster"] == 3
        assert st["mean_cluster"] == 2.0


class TestConcurrency:
    def test_threaded_point_inserts_match_sequential(self):
        keys = np.random.default_rng(10).integers(0, 2 ** 60, 12000, dtype=np.uint64)
        g = Gqf(q=15, r=8, seed=26)
        chunks = np.array_split(keys, 8)
        threads = [threading.Thread(target=g.insert_many, args=(c,)) for c in chunks]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        ref = Gqf(q=15, r=8, seed=26)
        ref.insert_many(keys)
        # canonical layout: any completed insert order yields the same table
        assert np.array_equal(g._slots, ref._slots)
        assert np.array_equal(g._occupieds, ref._occupieds)
        assert np.array_equal(g._runends, ref._runends)
        assert g.total_items == len(keys)
        g.validate()

    def test_threaded_mixed_insert_delete_keeps_structure(self):
        g = Gqf(q=14, r=8, seed=27)
        rng = np.random.default_rng(11)
        stable = rng.integers(0, 2 ** 55, 2000, dtype=np.uint64)
        g.insert_many(stable)

        def churn(tid):
            keys = np.random.default_rng(100 + tid).integers(
                0, 2 ** 55, 600, dtype=np.uint64)
            for _ in range(2):
                g.insert_many(keys)
                g.delete_many(keys, np.ones(len(keys), dtype=np.uint64))

        threads = [threading.Thread(target=churn, args=(tid,)) for tid in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        got = g.count_many(stable)
        assert (got >= 1).all()
        g.validate()


class TestInstrumentation:
    def test_sorted_bulk_insert_does_no_shifting(self):
        g = Gqf(q=13, r=8, seed=28)
        keys = np.unique(np.random.default_rng(12).integers(
            0, 2 ** 50, 3000, dtype=np.uint64))
        g.bulk_insert(keys, workers=2)
        assert g.shifted_slots == 0, \
            "ascending application into an empty table must never shift"

    def test_random_point_inserts_do_shift(self):
        g = Gqf(q=13, r=8, seed=28)
        keys = np.random.default_rng(12).integers(0, 2 ** 50, 3000, dtype=np.uint64)
        g.insert_many(keys)
        assert g.shifted_slots > 0

    def test_size_bits_accounts_all_state(self):
        p = GqfParams(q=14, r=8)
        g = Gqf(p)
        expect = (p.physical_slots * p.r            # slot words
                  + 2 * p.physical_slots            # two metadata bits/slot
                  + p.num_regions * 32              # spill offsets
                  + p.num_regions * 512)            # one cache line per lock
        assert g.size_bits() == expect


class TestChurnFuzz:
    """Randomized insert/delete/count churn cross-checked against a dict.

    The dict oracle tracks exact per-key counts; the filter must never
    report less (collisions may only inflate).  validate() runs every 250
    steps so structural damage is caught near the operation that caused it.
    """

    @pytest.mark.parametrize("trial,q", [(0, 12), (1, 10)])
    def test_churn_against_dict_oracle(self, trial, q):
        rng = np.random.default_rng(900 + trial)
        g = Gqf(q=q, r=8, seed=trial)
        oracle = {}
        keyspace = rng.integers(0, 2 ** 48, 1 << (q - 1), dtype=np.uint64)
        for step in range(2500):
            k = int(keyspace[rng.integers(len(keyspace))])
            op = rng.random()
            try:
                if op < 0.55:
                    d = int(rng.choice([1, 1, 1, 2, 3, 7, 40, 300]))
                    g.insert(k, count=d)
                    oracle[k] = oracle.get(k, 0) + d
                elif op < 0.85:
                    d = int(rng.choice([1, 2, 5, 0]))
                    g.delete(k, count=(d if d else None))
                    if k in oracle:
                        if d == 0 or d >= oracle[k]:
                            oracle.pop(k)
                        else:
                            oracle[k] -= d
                else:
                    assert g.count(k) >= oracle.get(k, 0)
            except CapacityError:
                for dk in list(oracle)[: max(1, len(oracle) // 2)]:
                    g.delete(dk, count=None)
                    oracle.pop(dk)
            if step % 250 == 249:
                g.validate()
        g.validate()
        for k, want in oracle.items():
            assert g.count(k) >= want


class TestValidateDetects:
    def test_detects_slot_corruption(self):
        g = Gqf(q=8, r=8, seed=29)
        g.insert_many(craft_keys(g, [(5, 1), (5, 2)]))
        g._slots[6] = 0  # destroys sortedness/decoding of the run
        with pytest.raises(ValidationError):
            g.validate()

    def test_detects_offset_corruption(self):
        g = Gqf(q=14, r=8, seed=30)
        g.insert_many(craft_keys(g, [(8190, rem) for rem in range(1, 30)]))
        g._offsets[1] += 1
        with pytest.raises(ValidationError):
            g.validate()

    def test_detects_counter_drift(self):
        g = Gqf(q=8, r=8, seed=31)
        g.insert_many(craft_keys(g, [(5, 1)]))
        g._stats[1] += 3
        with pytest.raises(ValidationError):
            g.validate()
