"""Two-choice filter, bulk API.

Blocks are wider here (128 tag-only slots spanning two cache lines) and each
block keeps its stored tags sorted and front-packed, so membership inside a
block is a binary search instead of a linear scan.  All mutation happens in
batches:

* insert: partition the batch by primary block (one sort plus a successor
  search per block boundary), apply the shortcut phase (top each primary
  block up to the cut line with a per-block merge), then route the leftovers
  two-choice by current load and merge again, grouped by destination block.
  Each merge rebuilds a block by zipping its sorted prefix with the sorted
  incoming words.  Routing is a single sequential pass over the batch, so the
  final table is a pure function of the batch regardless of worker count;
  workers parallelize the per-block merges, which touch disjoint blocks.
* delete: the same partition trick, in up-to-three passes (primary blocks,
  then secondary blocks for the misses, then the backing table), removing
  matched words and shifting each block's tail left -- blocks never hold
  interior holes.
* query: binary search both candidate blocks, read-only and chunk-parallel.

Keeping a block sorted makes slot positions unstable, which is why this API
is exclusive-batch rather than concurrent-point: two batches never run at
once, and readers only run between batches.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from ._backends import get_backend
from .errors import FilterFullError, ValidationError
from .hashing import EMPTY, TOMBSTONE, fingerprint_many, potc_pair_many, remap_tag_many
from .tcf import Placement

__all__ = ["BulkTcfParams", "BulkTcf"]


@dataclass(frozen=True)
class BulkTcfParams:
    """Geometry for a bulk two-choice filter (tag-only slot words)."""

    num_blocks: int
    block_slots: int = 128      # B
    tag_bits: int = 16          # w == f: the slot word is the tag
    seed: int = 0
    backing_fraction: float = 0.01
    probe_limit: int = 20
    shortcut_fraction: float = 0.75

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be positive")
        if self.block_slots < 2:
            raise ValueError("block_slots must be at least 2")
        if not 2 < self.tag_bits <= 32:
            raise ValueError("tag_bits must be in (2, 32]")
        if not 0.0 <= self.backing_fraction <= 1.0:
            raise ValueError("backing_fraction must be in [0, 1]")
        if not 0.0 < self.shortcut_fraction <= 1.0:
            raise ValueError("shortcut_fraction must be in (0, 1]")

    @property
    def main_slots(self):
        return self.num_blocks * self.block_slots

    @property
    def backing_slots(self):
        return int(round(self.main_slots * self.backing_fraction))

    @property
    def cut_slots(self):
        return math.ceil(self.shortcut_fraction * self.block_slots)


def _dtype_for(bits):
    for dt in (np.uint8, np.uint16, np.uint32):
        if bits <= np.dtype(dt).itemsize * 8:
            return dt
    raise ValueError("tag width over 32 bits")


def _split_ranges(nb, workers):
    """Contiguous block ranges, one per worker."""
    step = (nb + workers - 1) // workers
    return [(lo, min(lo + step, nb)) for lo in range(0, nb, step)]


class BulkTcf:
    """Two-choice filter driven by sorted batch operations."""

    def __init__(self, params=None, *, backend="auto", **kwargs):
        if params is None:
            params = BulkTcfParams(**kwargs)
        elif kwargs:
            raise TypeError("pass either params or keyword fields, not both")
        self.params = params
        self._kern = get_backend(backend)
        dt = _dtype_for(params.tag_bits)
        self._blocks = np.zeros(params.main_slots, dtype=dt)
        self._fill = np.zeros(params.num_blocks, dtype=np.uint32)
        self._backing = np.zeros(params.backing_slots, dtype=dt)
        self._counters = {"inserts_ok": 0, "inserts_backing": 0, "deletes_ok": 0}

    @property
    def backend(self):
        return self._kern.NAME

    # -- batch building blocks ---------------------------------------------

    def _fps(self, keys):
        keys = np.ascontiguousarray(keys, dtype=np.uint64)
        return fingerprint_many(keys, self.params.seed)

    def _words(self, fps):
        p = self.params
        return remap_tag_many(fps & np.uint64((1 << p.tag_bits) - 1))

    def partition(self, keys):
        """Sort a batch by (primary block, tag word).

        Returns (block_ids, words, bounds, order): sorted block ids and words,
        per-block boundary indices (bounds[b]..bounds[b+1] is block b's
        segment), and the argsort permutation into the original batch.
        """
        fps = self._fps(keys)
        return self._partition_fps(fps)

    def _partition_fps(self, fps):
        p = self.params
        words = self._words(fps)
        b1, _ = potc_pair_many(fps, p.num_blocks)
        combined = (b1 << np.uint64(32)) | words
        order = np.argsort(combined, kind="stable")
        combined = combined[order]
        bounds = np.searchsorted(
            combined, np.arange(p.num_blocks + 1, dtype=np.uint64) << np.uint64(32))
        return (combined >> np.uint64(32)).astype(np.int64), \
            combined & np.uint64((1 << 32) - 1), bounds.astype(np.int64), order

    def merge_block(self, block_index, words):
        """Merge sorted tag words into one block (public building block).

        Raises FilterFullError when the block cannot hold them.
        """
        p = self.params
        words = np.ascontiguousarray(np.sort(words), dtype=self._blocks.dtype)
        if int(self._fill[block_index]) + len(words) > p.block_slots:
            raise FilterFullError("block %d cannot take %d more words"
                                  % (block_index, len(words)))
        starts = np.zeros(p.num_blocks, dtype=np.int64)
        ends = np.zeros(p.num_blocks, dtype=np.int64)
        starts[block_index], ends[block_index] = 0, len(words)
        rc = self._kern.btcf_merge_lists(
            self._blocks, self._fill, p.block_slots, words, starts, ends,
            block_index, block_index + 1)
        if rc:
            raise FilterFullError("block %d overflow" % (rc - 1))

    def _run_ranged(self, fn, workers):
        """Run fn(b_lo, b_hi) over disjoint block ranges, maybe in threads."""
        nb = self.params.num_blocks
        if workers <= 1 or nb == 1:
            fn(0, nb)
            return
        threads = [threading.Thread(target=fn, args=rng)
                   for rng in _split_ranges(nb, workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    # -- batch operations ----------------------------------------------------

    def insert_batch(self, keys, workers=1):
        """Insert a batch; returns the (possibly empty) array of failed keys."""
        keys = np.ascontiguousarray(keys, dtype=np.uint64)
        if len(keys) == 0:
            return keys
        p = self.params
        fps = self._fps(keys)
        _, words, bounds, order = self._partition_fps(fps)
        words = words.astype(self._blocks.dtype)
        fps_sorted = fps[order]
        keys_sorted = keys[order]

        # phase 1: shortcut -- top up each primary block to the cut line
        seg_len = bounds[1:] - bounds[:-1]
        room = np.maximum(0, p.cut_slots - self._fill.astype(np.int64))
        take = np.minimum(seg_len, room)
        starts = bounds[:-1].copy()
        ends = starts + take
        overflow = []

        def merge_range(b_lo, b_hi):
            rc = self._kern.btcf_merge_lists(
                self._blocks, self._fill, p.block_slots, words,
                starts, ends, b_lo, b_hi)
            if rc:
                overflow.append(rc - 1)

        self._run_ranged(merge_range, workers)
        if overflow:
            raise AssertionError("shortcut phase overfilled block %d" % overflow[0])

        # phase 2: two-choice routing for the leftovers
        pos = np.arange(len(words), dtype=np.int64)
        seg_id = np.searchsorted(bounds, pos, side="right") - 1
        left = pos[pos >= ends[seg_id]]
        n_fail = 0
        failed_keys = keys[:0]
        if len(left):
            fps_left = fps_sorted[left]
            words_left = words[left]
            keys_left = keys_sorted[left]
            b1, b2 = potc_pair_many(fps_left, p.num_blocks)
            dest = np.empty(len(left), dtype=np.int64)
            self._kern.btcf_route(self._fill, p.block_slots,
                                  b1.astype(np.int64), b2.astype(np.int64), dest)
            # group by destination; segment 0 collects backing-table items
            combined = ((dest + 1).astype(np.uint64) << np.uint64(32)) | words_left
            order2 = np.argsort(combined, kind="stable")
            combined = combined[order2]
            words2 = (combined & np.uint64((1 << 32) - 1)).astype(self._blocks.dtype)
            bounds2 = np.searchsorted(
                combined,
                np.arange(p.num_blocks + 2, dtype=np.uint64) << np.uint64(32)
            ).astype(np.int64)
            starts2 = bounds2[1:-1]
            ends2 = bounds2[2:]

            def merge_range2(b_lo, b_hi):
                rc = self._kern.btcf_merge_lists(
                    self._blocks, self._fill, p.block_slots, words2,
                    starts2, ends2, b_lo, b_hi)
                if rc:
                    overflow.append(rc - 1)

            self._run_ranged(merge_range2, workers)
            if overflow:
                raise AssertionError("routing overfilled block %d" % overflow[0])

            n_backing = int(bounds2[1])
            if n_backing:
                fps_back = fps_left[order2[:n_backing]]
                codes = np.empty(n_backing, dtype=np.uint8)
                n_fail = self._kern.backing_insert_batch(
                    self._backing, p.probe_limit, p.tag_bits, fps_back, codes)
                self._counters["inserts_backing"] += n_backing - n_fail
                if n_fail:
                    failed_keys = keys_left[order2[:n_backing]][codes == Placement.FULL]
        self._counters["inserts_ok"] += len(keys) - n_fail
        return failed_keys

    def query_batch(self, keys, workers=1):
        """Approximate membership per key (read-only, chunk-parallel)."""
        keys = np.ascontiguousarray(keys, dtype=np.uint64)
        fps = self._fps(keys)
        found = np.empty(len(keys), dtype=np.uint8)
        p = self.params

        def run_chunk(lo, hi):
            self._kern.btcf_query_batch(
                self._blocks, self._fill, self._backing, p.block_slots,
                p.tag_bits, p.probe_limit, fps[lo:hi], found[lo:hi])

        if workers <= 1 or len(keys) < 2 * workers:
            run_chunk(0, len(keys))
        else:
            step = (len(keys) + workers - 1) // workers
            threads = [threading.Thread(target=run_chunk, args=(lo, min(lo + step, len(keys))))
                       for lo in range(0, len(keys), step)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        return found.astype(bool)

    def delete_batch(self, keys, workers=1):
        """Remove one stored copy per key; returns per-key success flags.

        Runs as up to three passes -- primary blocks, secondary blocks for
        the misses, backing table -- each pass grouped by block so workers
        touch disjoint blocks.
        """
        keys = np.ascontiguousarray(keys, dtype=np.uint64)
        p = self.params
        fps = self._fps(keys)
        words_all = self._words(fps)
        removed = np.zeros(len(keys), dtype=np.uint8)
        pending = np.arange(len(keys), dtype=np.int64)
        b1, b2 = potc_pair_many(fps, p.num_blocks)
        for choice in (b1, b2):
            if not len(pending):
                break
            blocks_of = choice[pending]
            combined = (blocks_of << np.uint64(32)) | words_all[pending]
            order = np.argsort(combined, kind="stable")
            combined = combined[order]
            words_sorted = (combined & np.uint64((1 << 32) - 1)).astype(self._blocks.dtype)
            bounds = np.searchsorted(
                combined, np.arange(p.num_blocks + 1, dtype=np.uint64) << np.uint64(32)
            ).astype(np.int64)
            hit = np.zeros(len(pending), dtype=np.uint8)

            def del_range(b_lo, b_hi, *, _w=words_sorted, _b=bounds, _h=hit):
                self._kern.btcf_delete_blocklocal(
                    self._blocks, self._fill, p.block_slots, _w,
                    _b[:-1], _b[1:], b_lo, b_hi, _h)

            self._run_ranged(del_range, workers)
            done = pending[order[hit.astype(bool)]]
            removed[done] = 1
            pending = pending[order[~hit.astype(bool)]]
        if len(pending) and len(self._backing):
            flags = np.empty(len(pending), dtype=np.uint8)
            self._kern.backing_delete_batch(
                self._backing, p.probe_limit, p.tag_bits, fps[pending], flags)
            removed[pending[flags.astype(bool)]] = 1
        self._counters["deletes_ok"] += int(removed.sum())
        return removed.astype(bool)

    # -- inspection ----------------------------------------------------------

    def occupancy(self, block_index):
        return int(self._fill[block_index])

    def load_factor(self):
        return float(self._fill.sum()) / self.params.main_slots

    def size_bits(self):
        return (self._blocks.nbytes + self._backing.nbytes) * 8 + self._fill.nbytes * 8

    @property
    def counters(self):
        return dict(self._counters)

    def items(self):
        """All stored (block_index, word) pairs; backing entries get -1."""
        p = self.params
        out = []
        for b in range(p.num_blocks):
            base = b * p.block_slots
            for i in range(int(self._fill[b])):
                out.append((b, int(self._blocks[base + i])))
        for w in self._backing[(self._backing != EMPTY) & (self._backing != TOMBSTONE)]:
            out.append((-1, int(w)))
        return out

    def validate(self):
        """Check the sorted-block invariants; raises ValidationError."""
        p = self.params
        for b in range(p.num_blocks):
            base = b * p.block_slots
            n = int(self._fill[b])
            if n > p.block_slots:
                raise ValidationError("block %d fill over capacity" % b)
            prefix = self._blocks[base:base + n]
            if len(prefix) and int(prefix.min()) < 2:
                raise ValidationError("block %d stores a reserved word" % b)
            if np.any(prefix[1:] < prefix[:-1]):
                raise ValidationError("block %d prefix not sorted" % b)
            if np.any(self._blocks[base + n:base + p.block_slots] != EMPTY):
                raise ValidationError("block %d tail not empty" % b)
        used = int(self._fill.sum())
        used += int(((self._backing != EMPTY) & (self._backing != TOMBSTONE)).sum())
        c = self._counters
        if used != c["inserts_ok"] - c["deletes_ok"]:
            raise ValidationError("stored words (%d) do not match inserts-deletes (%d)"
                                  % (used, c["inserts_ok"] - c["deletes_ok"]))
