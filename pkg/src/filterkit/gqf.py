"""Counting quotient filter with region locks and phased bulk operations.

Layout.  A fingerprint of q+r bits splits into a quotient (table position)
and an r-bit remainder.  All remainders sharing a quotient form a *run*,
stored in ascending order from the quotient's slot onward; runs that collide
shift right, never out of order (Robin-Hood displacement).  Two metadata bit
vectors recover structure: ``occupieds[x]`` marks quotient x non-empty and
never moves; ``runends[s]`` marks slot s as the last slot of some run and
shifts together with the data.  Counts are stored inline as variable-length
count groups (see :mod:`filterkit.countgroups`), so k copies of a key cost
O(log k / r) slots instead of k.

Regions.  Slots are split into 8192-slot regions, each with a lock and a
spill offset (how far runs from earlier regions intrude into this one).
Offsets make every operation region-local: finding a run scans only its own
region's occupieds plus the runends from the region start (adjusted by the
spill), never walking left of the region.  An operation on quotient region g
reads and writes only [region g start, region g+2 start); writes that would
cross that hard bound raise :class:`CapacityError` instead (the table stays
valid).  The physical table carries one extra region of padding slots past
2**q so runs near the top can spill.

Concurrency.  Point operations take locks g and g+1 (ascending, so two-lock
acquisition cannot deadlock).  Bulk operations instead sort the batch by
fingerprint, split it at region boundaries, and apply regions in two phases
-- all even regions in parallel, barrier, then all odd regions -- so any two
concurrent appliers are two regions apart and their [g, g+2) write windows
are disjoint; no locks are needed at all.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from ._backends import get_backend
from .countgroups import decode_run
from .errors import CapacityError, ValidationError
from .hashing import fingerprint_many, join_fingerprint
from ._pykernels import GQF_LOAD_CAPACITY, GQF_SHIFT_BOUND, REGION_BITS, REGION_SLOTS

__all__ = ["GqfParams", "Gqf"]


def _dtype_for(bits):
    return {8: np.uint8, 16: np.uint16, 32: np.uint32, 64: np.uint64}[bits]


@dataclass(frozen=True)
class GqfParams:
    """Geometry for a counting quotient filter."""

    q: int                    # 2**q logical slots / quotient bits
    r: int = 8                # remainder bits per slot
    seed: int = 0
    max_load: float = 0.95    # used-slot ceiling as a fraction of 2**q

    def __post_init__(self):
        if not 6 <= self.q <= 40:
            raise ValueError("q must be in [6, 40]")
        if self.r not in (8, 16, 32, 64):
            raise ValueError("r must be one of 8, 16, 32, 64")
        if self.q + self.r > 64:
            raise ValueError("q + r must be at most 64")
        if not 0.0 < self.max_load <= 1.0:
            raise ValueError("max_load must be in (0, 1]")

    @property
    def logical_slots(self):
        return 1 << self.q

    @property
    def padding_slots(self):
        """One region of spill headroom past the logical table."""
        return min(REGION_SLOTS, self.logical_slots)

    @property
    def physical_slots(self):
        return self.logical_slots + self.padding_slots

    @property
    def num_regions(self):
        return (self.physical_slots + REGION_SLOTS - 1) >> REGION_BITS

    @property
    def quotient_regions(self):
        """Regions that can own quotients (padding-only regions excluded)."""
        return (self.logical_slots + REGION_SLOTS - 1) >> REGION_BITS

    @property
    def max_occupied(self):
        return int(self.max_load * self.logical_slots)


class Gqf:
    """Concurrent counting quotient filter."""

    # stats array layout
    _OCCUPIED, _ITEMS, _DISTINCT = 0, 1, 2

    def __init__(self, params=None, *, backend="auto", **kwargs):
        if params is None:
            params = GqfParams(**kwargs)
        elif kwargs:
            raise TypeError("pass either params or keyword fields, not both")
        self.params = params
        self._kern = get_backend(backend)
        phys = params.physical_slots
        self._slots = np.zeros(phys, dtype=_dtype_for(params.r))
        self._occupieds = np.zeros(phys >> 6, dtype=np.uint64)
        self._runends = np.zeros(phys >> 6, dtype=np.uint64)
        self._offsets = np.zeros(params.num_regions, dtype=np.int32)
        self._stats = np.zeros(3, dtype=np.int64)
        self._locks = self._kern.make_region_locks(params.num_regions)
        self._shift_lock = threading.Lock()
        self._shifted_slots = 0

    @property
    def backend(self):
        return self._kern.NAME

    # -- derived views -------------------------------------------------------

    @property
    def occupied_slots(self):
        return int(self._stats[self._OCCUPIED])

    @property
    def total_items(self):
        return int(self._stats[self._ITEMS])

    @property
    def distinct_items(self):
        return int(self._stats[self._DISTINCT])

    @property
    def shifted_slots(self):
        """Cumulative slots moved by insert/delete shifting (instrumentation)."""
        return self._shifted_slots

    def load_factor(self):
        return self.occupied_slots / self.params.logical_slots

    def size_bits(self):
        """Bits held: slots, both metadata vectors, offsets, and the region
        locks at one cache line each."""
        return (self._slots.nbytes + self._occupieds.nbytes + self._runends.nbytes
                + self._offsets.nbytes) * 8 + self.params.num_regions * 512

    # -- hashing -------------------------------------------------------------

    def _fps(self, keys):
        keys = np.ascontiguousarray(keys, dtype=np.uint64)
        return fingerprint_many(keys, self.params.seed, self.params.q + self.params.r)

    def fingerprint_of(self, key):
        """The q+r-bit fingerprint this filter stores for a key."""
        return int(self._fps([key])[0])

    # -- point API (region-locked, thread-safe) -------------------------------

    def insert(self, key, count=1):
        """Add `count` copies of a key; raises CapacityError at the ceiling."""
        self.insert_many([key], [count])

    def insert_many(self, keys, counts=None, workers=1):
        """Point-locked batch insert; thread-safe, raises CapacityError."""
        fps = self._fps(keys)
        deltas = self._deltas(counts, len(fps))
        self._run_chunks(self._insert_chunk, fps, deltas, workers)

    def count(self, key):
        """Stored count for a key (0 when absent; collisions can inflate)."""
        return int(self.count_many([key])[0])

    def query(self, key):
        return self.count(key) > 0

    def count_many(self, keys, workers=1):
        fps = self._fps(keys)
        counts = np.empty(len(fps), dtype=np.uint64)

        def chunk(lo, hi):
            p = self.params
            self._kern.gqf_count_batch(
                self._slots, self._occupieds, self._runends, self._offsets,
                self._locks, p.q, p.r, True, fps[lo:hi], counts[lo:hi])

        self._run_plain_chunks(chunk, len(fps), workers)
        return counts

    def delete(self, key, count=1):
        """Remove up to `count` copies (all when None); True if the key was found."""
        if count is None:
            count = 2 ** 63
        return bool(self.delete_many([key], [count])[0])

    def delete_many(self, keys, counts=None, workers=1):
        fps = self._fps(keys)
        deltas = self._deltas(counts, len(fps), default=np.uint64(2 ** 63))
        found = np.empty(len(fps), dtype=np.uint8)

        def chunk(lo, hi):
            p = self.params
            shift_out = np.zeros(1, dtype=np.int64)
            self._kern.gqf_delete_batch(
                self._slots, self._occupieds, self._runends, self._offsets,
                self._stats, self._locks, p.q, p.r, True,
                fps[lo:hi], deltas[lo:hi], found[lo:hi], shift_out)
            self._note_shift(int(shift_out[0]))

        self._run_plain_chunks(chunk, len(fps), workers)
        return found.astype(bool)

    def _deltas(self, counts, n, default=np.uint64(1)):
        if counts is None:
            return np.full(n, default, dtype=np.uint64)
        counts = np.ascontiguousarray(counts, dtype=np.uint64)
        if len(counts) != n:
            raise ValueError("counts length does not match keys length")
        return counts

    def _note_shift(self, n):
        with self._shift_lock:
            self._shifted_slots += n

    def _insert_chunk(self, fps, deltas):
        p = self.params
        shift_out = np.zeros(1, dtype=np.int64)
        code, idx = self._kern.gqf_insert_batch(
            self._slots, self._occupieds, self._runends, self._offsets,
            self._stats, self._locks, p.q, p.r, p.max_occupied, True,
            fps, deltas, shift_out)
        self._note_shift(int(shift_out[0]))
        if code:
            raise CapacityError(self._capacity_msg(code))

    @staticmethod
    def _capacity_msg(code):
        if code == GQF_LOAD_CAPACITY:
            return "insert rejected: used slots reached the load ceiling"
        if code == GQF_SHIFT_BOUND:
            return "insert rejected: shift would cross the region hard bound"
        return "insert rejected (code %d)" % code

    def _run_chunks(self, fn, fps, deltas, workers):
        n = len(fps)
        if workers <= 1 or n < 2 * workers:
            fn(fps, deltas)
            return
        step = (n + workers - 1) // workers
        errs = []

        def run(lo, hi):
            try:
                fn(fps[lo:hi], deltas[lo:hi])
            except CapacityError as e:  # propagate after join
                errs.append(e)

        threads = [threading.Thread(target=run, args=(lo, min(lo + step, n)))
                   for lo in range(0, n, step)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errs:
            raise errs[0]

    def _run_plain_chunks(self, chunk, n, workers):
        if workers <= 1 or n < 2 * workers:
            chunk(0, n)
            return
        step = (n + workers - 1) // workers
        threads = [threading.Thread(target=chunk, args=(lo, min(lo + step, n)))
                   for lo in range(0, n, step)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    # -- bulk API (sorted batches, even-odd region phases, lock-free) ---------

    def _region_bounds(self, fps_sorted):
        """Batch split points at quotient-region boundaries."""
        p = self.params
        nrq = p.quotient_regions
        marks = np.arange(nrq + 1, dtype=np.uint64) << np.uint64(p.r + REGION_BITS)
        return np.searchsorted(fps_sorted, marks)

    def _bulk_apply(self, fps, deltas, workers, op):
        """Sort, split at region boundaries, apply even regions then odd."""
        p = self.params
        order = np.argsort(fps, kind="stable")
        fps = fps[order]
        deltas = deltas[order]
        bounds = self._region_bounds(fps)
        nrq = p.quotient_regions
        found_all = np.ones(len(fps), dtype=np.uint8)
        failures = []

        def apply_region(g):
            lo, hi = int(bounds[g]), int(bounds[g + 1])
            if lo >= hi:
                return
            shift_out = np.zeros(1, dtype=np.int64)
            if op == "insert":
                code, idx = self._kern.gqf_insert_batch(
                    self._slots, self._occupieds, self._runends, self._offsets,
                    self._stats, self._locks, p.q, p.r, p.max_occupied, False,
                    fps[lo:hi], deltas[lo:hi], shift_out)
                if code:
                    failures.append((code, g))
            else:
                # descending within the region: compaction after one delete
                # never moves slots an earlier-quotient delete will touch
                flags = np.empty(hi - lo, dtype=np.uint8)
                self._kern.gqf_delete_batch(
                    self._slots, self._occupieds, self._runends, self._offsets,
                    self._stats, self._locks, p.q, p.r, False,
                    fps[lo:hi][::-1].copy(), deltas[lo:hi][::-1].copy(),
                    flags, shift_out)
                found_all[lo:hi] = flags[::-1]
            self._note_shift(int(shift_out[0]))

        for parity in (0, 1):
            regions = [g for g in range(parity, nrq, 2) if bounds[g] < bounds[g + 1]]
            if workers <= 1 or len(regions) <= 1:
                for g in regions:
                    apply_region(g)
            else:
                buckets = [regions[w::workers] for w in range(workers)]

                def run(bucket):
                    for g in bucket:
                        apply_region(g)

                threads = [threading.Thread(target=run, args=(b,))
                           for b in buckets if b]
                for t in threads:
                    t.start()
                for t in threads:
                    t.join()  # barrier between phases
        if failures:
            raise CapacityError(self._capacity_msg(failures[0][0])
                                + " (bulk batch partially applied)")
        if op == "delete":
            inv = np.empty_like(order)
            inv[order] = np.arange(len(order))
            return found_all[inv].astype(bool)
        return None

    def bulk_insert(self, keys, counts=None, workers=4):
        """Phased lock-free batch insert of (key, count) pairs."""
        fps = self._fps(keys)
        if len(fps) == 0:
            return
        self._bulk_apply(fps, self._deltas(counts, len(fps)), workers, "insert")

    def bulk_delete(self, keys, counts=None, workers=4):
        """Phased lock-free batch delete; counts=None removes all copies.

        Returns per-key found flags (in the order given).
        """
        fps = self._fps(keys)
        if len(fps) == 0:
            return np.zeros(0, dtype=bool)
        deltas = self._deltas(counts, len(fps), default=np.uint64(2 ** 63))
        return self._bulk_apply(fps, deltas, workers, "delete")

    # -- enumeration and structure ---------------------------------------------

    def _derive_structure(self):
        """(quotients, run starts, run ends) from the metadata bit vectors.

        Pure-numpy rank/select over the global table; independent of the
        kernels' region-local arithmetic, which is what makes it useful as a
        cross-check in validate().
        """
        occ_bits = np.unpackbits(self._occupieds.view(np.uint8), bitorder="little")
        run_bits = np.unpackbits(self._runends.view(np.uint8), bitorder="little")
        quotients = np.flatnonzero(occ_bits).astype(np.int64)
        ends = np.flatnonzero(run_bits).astype(np.int64)
        if len(quotients) != len(ends):
            raise ValidationError("occupieds and runends set-bit counts differ")
        if len(quotients) == 0:
            return quotients, quotients, ends
        starts = np.maximum(quotients, np.concatenate(([0], ends[:-1] + 1)))
        return quotients, starts, ends

    def items(self):
        """All stored (fingerprint, count) pairs, fingerprint-ascending."""
        p = self.params
        out = []
        quotients, starts, ends = self._derive_structure()
        for quot, s, e in zip(quotients.tolist(), starts.tolist(), ends.tolist()):
            for rem, cnt in decode_run(self._slots, s, e, p.r):
                out.append((join_fingerprint(quot, rem, p.r), cnt))
        return out

    def enumerate_items(self):
        """Iterate stored (fingerprint, count) pairs without materializing."""
        p = self.params
        quotients, starts, ends = self._derive_structure()
        for quot, s, e in zip(quotients.tolist(), starts.tolist(), ends.tolist()):
            for rem, cnt in decode_run(self._slots, s, e, p.r):
                yield join_fingerprint(quot, rem, p.r), cnt

    def find_run(self, quotient):
        """Slot interval [start, end] of a quotient's run; (-1, -1) if absent."""
        return self._kern.gqf_find_run(
            self._occupieds, self._runends, self._offsets, self.params.q, quotient)

    def cluster_stats(self):
        """Max/mean/count of maximal contiguous used-slot spans."""
        _, starts, ends = self._derive_structure()
        if len(starts) == 0:
            return {"num_clusters": 0, "max_cluster": 0, "mean_cluster": 0.0}
        # a cluster break happens where a run starts after the previous end+1
        breaks = np.flatnonzero(starts[1:] > ends[:-1] + 1)
        c_starts = np.concatenate(([0], breaks + 1))
        c_ends = np.concatenate((breaks, [len(starts) - 1]))
        lengths = ends[c_ends] - starts[c_starts] + 1
        return {"num_clusters": int(len(lengths)),
                "max_cluster": int(lengths.max()),
                "mean_cluster": float(lengths.mean())}

    def validate(self):
        """Full structural check against the global-derivation oracle."""
        p = self.params
        quotients, starts, ends = self._derive_structure()
        phys = p.physical_slots
        if len(quotients):
            if int(quotients[-1]) >= p.logical_slots:
                raise ValidationError("occupied quotient beyond logical table")
            if int(ends[-1]) >= phys:
                raise ValidationError("run extends past physical table")
            if np.any(ends[1:] <= ends[:-1]):
                raise ValidationError("runends not strictly increasing")
            if np.any(starts > ends):
                raise ValidationError("run with negative length")
            if np.any(starts[1:] <= ends[:-1]):
                raise ValidationError("runs overlap")
            # region-local shift bound: a run never strays two regions out
            run_regions = ends >> REGION_BITS
            owner_regions = quotients >> REGION_BITS
            if np.any(run_regions > owner_regions + 1):
                raise ValidationError("run crossed its region hard bound")
        # spill offsets match a from-scratch computation
        for h in range(p.num_regions):
            b = h << REGION_BITS
            i = np.searchsorted(quotients, b)
            spill = 0
            if i > 0:
                spill = max(0, int(ends[i - 1]) - b + 1)
            if spill != int(self._offsets[h]):
                raise ValidationError(
                    "region %d offset %d != derived %d"
                    % (h, int(self._offsets[h]), spill))
        # used/free slot accounting and zero-fill of free slots
        used = np.zeros(phys, dtype=bool)
        for s, e in zip(starts.tolist(), ends.tolist()):
            used[s:e + 1] = True
        if int(used.sum()) != self.occupied_slots:
            raise ValidationError("used slots %d != occupied counter %d"
                                  % (int(used.sum()), self.occupied_slots))
        if np.any(self._slots[~used] != 0):
            raise ValidationError("free slots hold residual data")
        # decode every run: heads ascending, counts positive, totals match
        total = 0
        distinct = 0
        for quot, s, e in zip(quotients.tolist(), starts.tolist(), ends.tolist()):
            try:
                groups = decode_run(self._slots, s, e, p.r)
            except ValueError as err:
                raise ValidationError(
                    "run of quotient %d does not decode: %s" % (quot, err))
            rems = [g[0] for g in groups]
            if rems != sorted(set(rems)):
                raise ValidationError("run of quotient %d has unsorted groups" % quot)
            if any(c <= 0 for _, c in groups):
                raise ValidationError("run of quotient %d decoded count <= 0" % quot)
            total += sum(c for _, c in groups)
            distinct += len(groups)
        if total != self.total_items:
            raise ValidationError("decoded total %d != items counter %d"
                                  % (total, self.total_items))
        if distinct != self.distinct_items:
            raise ValidationError("decoded distinct %d != distinct counter %d"
                                  % (distinct, self.distinct_items))
