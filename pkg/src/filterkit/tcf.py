"""Two-choice filter, point API.

Fixed-size blocks of packed (tag, value) slot words.  Each fingerprint hashes
to two candidate blocks; inserts go to the primary block outright while it is
under the shortcut cut line, otherwise to the less-full of the two candidates
(ties favour the primary).  Overflow lands in a small double-hashed backing
table.  Slot claims are single-word compare-and-swap operations, so point
inserts, queries and deletes from many threads need no filter-wide lock.

Deletes tombstone the slot; tombstones are reusable by later inserts and are
skipped by queries.  Queries match tags only, which is what makes the filter
approximate: a query can return a false positive, never a false negative.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from ._backends import get_backend
from .errors import FilterFullError, ValidationError
from .hashing import EMPTY, TOMBSTONE, fingerprint_many

__all__ = ["Placement", "TcfParams", "Tcf"]


class Placement(IntEnum):
    """Where an insert landed."""

    PRIMARY = 0
    SECONDARY = 1
    BACKING = 2
    FULL = 3


def _dtype_for(bits):
    for dt in (np.uint8, np.uint16, np.uint32, np.uint64):
        if bits <= np.dtype(dt).itemsize * 8:
            return dt
    raise ValueError("slot width over 64 bits")


@dataclass(frozen=True)
class TcfParams:
    """Geometry and hashing parameters for a two-choice filter."""

    num_blocks: int
    block_slots: int = 16       # B: slots per block
    tag_bits: int = 16          # f: tag bits per slot
    slot_bits: int = 16         # w: total bits per slot word
    seed: int = 0
    backing_fraction: float = 0.01   # backing slots / main slots; 0 disables
    probe_limit: int = 20
    shortcut_fraction: float = 0.75
    group_width: int = 1        # slot-claim scan stride (lanes per round)

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be positive")
        if self.block_slots < 1:
            raise ValueError("block_slots must be positive")
        if not 2 < self.tag_bits <= self.slot_bits:
            raise ValueError("need 2 < tag_bits <= slot_bits")
        if self.block_slots * self.slot_bits > 1024:
            raise ValueError("block exceeds 1024 bits (block_slots * slot_bits)")
        if not 1 <= self.group_width <= self.block_slots:
            raise ValueError("group_width must be in [1, block_slots]")
        if not 0.0 <= self.backing_fraction <= 1.0:
            raise ValueError("backing_fraction must be in [0, 1]")
        if not 0.0 < self.shortcut_fraction <= 1.0:
            raise ValueError("shortcut_fraction must be in (0, 1]")

    @property
    def value_bits(self):
        return self.slot_bits - self.tag_bits

    @property
    def main_slots(self):
        return self.num_blocks * self.block_slots

    @property
    def backing_slots(self):
        return int(round(self.main_slots * self.backing_fraction))

    @property
    def cut_slots(self):
        """Primary-block occupancy below which the shortcut path is taken."""
        return math.ceil(self.shortcut_fraction * self.block_slots)


class Tcf:
    """Concurrent two-choice filter with point (per-key) operations."""

    def __init__(self, params=None, *, backend="auto", **kwargs):
        if params is None:
            params = TcfParams(**kwargs)
        elif kwargs:
            raise TypeError("pass either params or keyword fields, not both")
        self.params = params
        self._kern = get_backend(backend)
        dt = _dtype_for(params.slot_bits)
        self._blocks = np.zeros(params.main_slots, dtype=dt)
        self._backing = np.zeros(params.backing_slots, dtype=dt)
        self._mutex = self._kern.make_mutex()
        self._stats_lock = threading.Lock()
        self._counters = {"inserts_ok": 0, "inserts_backing": 0, "deletes_ok": 0}

    @property
    def backend(self):
        return self._kern.NAME

    # -- helpers -----------------------------------------------------------

    def _fps(self, keys):
        keys = np.ascontiguousarray(keys, dtype=np.uint64)
        return fingerprint_many(keys, self.params.seed)

    def _check_values(self, values, n):
        if values is None:
            return np.zeros(n, dtype=np.uint64)
        values = np.ascontiguousarray(values, dtype=np.uint64)
        if len(values) != n:
            raise ValueError("values length does not match keys length")
        vb = self.params.value_bits
        if vb < 64 and len(values) and int(values.max()) >> vb:
            raise ValueError("value does not fit in %d bits" % vb)
        return values

    # -- point operations ----------------------------------------------------

    def insert(self, key, value=0):
        """Insert one key; returns its Placement or raises FilterFullError."""
        code = int(self.insert_many([key], [value])[0])
        if code == Placement.FULL:
            raise FilterFullError("no free slot in either block or backing table")
        return Placement(code)

    def insert_many(self, keys, values=None):
        """Insert a batch; returns a Placement code per key (no raise)."""
        fps = self._fps(keys)
        vals = self._check_values(values, len(fps))
        codes = np.empty(len(fps), dtype=np.uint8)
        p = self.params
        n_ok, n_back = self._kern.tcf_insert_batch(
            self._blocks, self._backing, p.block_slots, p.tag_bits,
            p.cut_slots, p.probe_limit, p.group_width, self._mutex,
            fps, vals, codes)
        with self._stats_lock:
            self._counters["inserts_ok"] += int(n_ok)
            self._counters["inserts_backing"] += int(n_back)
        return codes

    def query(self, key):
        """Approximate membership for one key (false positives possible)."""
        return bool(self.query_many([key])[0])

    def query_value(self, key):
        """(found, stored value) for one key."""
        found, values = self.query_values_many([key])
        return bool(found[0]), int(values[0])

    def query_many(self, keys):
        return self.query_values_many(keys)[0]

    def query_values_many(self, keys):
        fps = self._fps(keys)
        found = np.empty(len(fps), dtype=np.uint8)
        values = np.empty(len(fps), dtype=np.uint64)
        p = self.params
        self._kern.tcf_query_batch(
            self._blocks, self._backing, p.block_slots, p.tag_bits,
            p.probe_limit, p.group_width, self._mutex, fps, found, values)
        return found.astype(bool), values

    def delete(self, key):
        """Remove one stored copy of the key's tag; False when absent."""
        return bool(self.delete_many([key])[0])

    def delete_many(self, keys):
        fps = self._fps(keys)
        removed = np.empty(len(fps), dtype=np.uint8)
        p = self.params
        n = self._kern.tcf_delete_batch(
            self._blocks, self._backing, p.block_slots, p.tag_bits,
            p.probe_limit, p.group_width, self._mutex, fps, removed)
        with self._stats_lock:
            self._counters["deletes_ok"] += int(n)
        return removed.astype(bool)

    # -- inspection ----------------------------------------------------------

    def items(self):
        """All stored (block_index, tag, value) triples; backing entries get
        block_index -1.  Only meaningful while no writer is active."""
        p = self.params
        fmask = (1 << p.tag_bits) - 1
        out = []
        used = np.flatnonzero((self._blocks != EMPTY) & (self._blocks != TOMBSTONE))
        for i in used:
            w = int(self._blocks[i])
            out.append((int(i) // p.block_slots, w & fmask, w >> p.tag_bits))
        used = np.flatnonzero((self._backing != EMPTY) & (self._backing != TOMBSTONE))
        for i in used:
            w = int(self._backing[i])
            out.append((-1, w & fmask, w >> p.tag_bits))
        return out

    def occupancy(self, block_index):
        """Used slots in one block."""
        p = self.params
        blk = self._blocks[block_index * p.block_slots:(block_index + 1) * p.block_slots]
        return int(((blk != EMPTY) & (blk != TOMBSTONE)).sum())

    def load_factor(self):
        """Used main-table slots / main-table capacity."""
        used = ((self._blocks != EMPTY) & (self._blocks != TOMBSTONE)).sum()
        return float(used) / self.params.main_slots

    def size_bits(self):
        """Total bits allocated for slot storage (main + backing)."""
        return (self._blocks.nbytes + self._backing.nbytes) * 8

    @property
    def counters(self):
        with self._stats_lock:
            return dict(self._counters)

    def validate(self):
        """Check structural invariants; raises ValidationError.  Quiescent
        callers only (no concurrent writers)."""
        p = self.params
        fmask = (1 << p.tag_bits) - 1
        for name, arr in (("main", self._blocks), ("backing", self._backing)):
            used = arr[(arr != EMPTY) & (arr != TOMBSTONE)]
            if len(used) and int((used & fmask).min()) < 2:
                raise ValidationError(
                    "%s table holds a used slot with a reserved tag" % name)
        used_total = int(((self._blocks != EMPTY) & (self._blocks != TOMBSTONE)).sum())
        used_total += int(((self._backing != EMPTY) & (self._backing != TOMBSTONE)).sum())
        c = self.counters
        expect = c["inserts_ok"] - c["deletes_ok"]
        if used_total != expect:
            raise ValidationError(
                "stored slots (%d) do not match inserts-deletes (%d)"
                % (used_total, expect))
