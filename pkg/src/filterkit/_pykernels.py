"""Pure-Python kernel backend.

This module and ``_ckernels`` (the Cython extension) implement the same kernel
contract over the same numpy arrays; ``_backends`` picks one at import time.
This twin is the readable reference: compare-and-swap is emulated with a
per-filter mutex (a legal linearization of the compiled backend's real CAS)
and region locks are ``threading.Lock`` objects.  Everything here favours
clarity over speed.
"""

from __future__ import annotations

import threading

import numpy as np

from .countgroups import encode_group, parse_group
from .hashing import (
    EMPTY,
    TOMBSTONE,
    MASK64,
    _C_BACK_START,
    _C_BACK_STEP,
    _C_BLOCK1,
    _C_BLOCK2,
    mix64,
)

NAME = "py"

# tcf_insert result codes
P_PRIMARY = 0
P_SECONDARY = 1
P_BACKING = 2
P_FULL = 3

# gqf insert failure codes
GQF_OK = 0
GQF_LOAD_CAPACITY = 1
GQF_SHIFT_BOUND = 2

REGION_BITS = 13
REGION_SLOTS = 1 << REGION_BITS

_STATS_LOCK = threading.Lock()


def make_region_locks(n):
    """Region lock set for this backend: one Lock per region."""
    return [threading.Lock() for _ in range(n)]


def make_mutex():
    """Per-filter mutex used to linearize emulated CAS operations."""
    return threading.Lock()


# ---------------------------------------------------------------------------
# two-choice filter, point API
# ---------------------------------------------------------------------------


def _tag_word(fp, f):
    tag = fp & ((1 << f) - 1)
    return tag | 2 if tag < 2 else tag


def _cas(arr, idx, expected, new, mutex):
    """Atomic compare-and-swap on one slot word (mutex-linearized)."""
    with mutex:
        if int(arr[idx]) == expected:
            arr[idx] = new
            return True
        return False


def _count_used(blocks, base, B):
    n = 0
    for i in range(base, base + B):
        w = int(blocks[i])
        if w != EMPTY and w != TOMBSTONE:
            n += 1
    return n


def _block_insert(blocks, base, B, g, word, mutex):
    """Claim the first free slot of a block, scanning lane-strided rounds.

    Candidates inside a round are attempted in ascending lane (= slot) order,
    so the overall attempt order is plain ascending for every group width g.
    """
    for round_start in range(0, B, g):
        for lane in range(g):
            i = round_start + lane
            if i >= B:
                break
            w = int(blocks[base + i])
            if w == EMPTY or w == TOMBSTONE:
                if _cas(blocks, base + i, w, word, mutex):
                    return True
    return False


def _backing_insert(backing, probe_limit, fp, word, mutex):
    size = len(backing)
    if size == 0:
        return False
    start = mix64(fp ^ _C_BACK_START) % size
    step = (mix64(fp ^ _C_BACK_STEP) | 1) % size
    idx = start
    for _ in range(probe_limit):
        w = int(backing[idx])
        if w == EMPTY or w == TOMBSTONE:
            if _cas(backing, idx, w, word, mutex):
                return True
        idx = (idx + step) % size
    return False


def tcf_insert_batch(blocks, backing, B, f, cut_slots, probe_limit, group_width,
                     mutex, fps, values, codes):
    """Insert packed (tag, value) words; returns (inserted, backing_placed)."""
    num_blocks = len(blocks) // B
    n_ok = 0
    n_back = 0
    for k in range(len(fps)):
        fp = int(fps[k])
        word = (int(values[k]) << f) | _tag_word(fp, f)
        b1 = mix64(fp ^ _C_BLOCK1) % num_blocks
        b2 = mix64(fp ^ _C_BLOCK2) % num_blocks
        code = P_FULL
        if _count_used(blocks, b1 * B, B) < cut_slots and \
                _block_insert(blocks, b1 * B, B, group_width, word, mutex):
            code = P_PRIMARY
        else:
            o1 = _count_used(blocks, b1 * B, B)
            o2 = _count_used(blocks, b2 * B, B)
            first, second = (b1, b2) if o1 <= o2 else (b2, b1)
            if _block_insert(blocks, first * B, B, group_width, word, mutex):
                code = P_PRIMARY if first == b1 else P_SECONDARY
            elif _block_insert(blocks, second * B, B, group_width, word, mutex):
                code = P_PRIMARY if second == b1 else P_SECONDARY
            elif _backing_insert(backing, probe_limit, fp, word, mutex):
                code = P_BACKING
                n_back += 1
        if code != P_FULL:
            n_ok += 1
        codes[k] = code
    return n_ok, n_back


def _block_find(blocks, base, B, tag, f):
    fmask = (1 << f) - 1
    for i in range(base, base + B):
        w = int(blocks[i])
        if w != EMPTY and w != TOMBSTONE and (w & fmask) == tag:
            return i
    return -1


def tcf_query_batch(blocks, backing, B, f, probe_limit, group_width,
                    mutex, fps, found, values_out):
    """Tag-membership queries; fills found/values_out, returns hit count."""
    num_blocks = len(blocks) // B
    size = len(backing)
    fmask = (1 << f) - 1
    hits = 0
    for k in range(len(fps)):
        fp = int(fps[k])
        tag = _tag_word(fp, f)
        b1 = mix64(fp ^ _C_BLOCK1) % num_blocks
        b2 = mix64(fp ^ _C_BLOCK2) % num_blocks
        idx = _block_find(blocks, b1 * B, B, tag, f)
        if idx < 0:
            idx = _block_find(blocks, b2 * B, B, tag, f)
        hit = idx >= 0
        val = int(blocks[idx]) >> f if hit else 0
        if not hit and size:
            p = mix64(fp ^ _C_BACK_START) % size
            step = (mix64(fp ^ _C_BACK_STEP) | 1) % size
            for _ in range(probe_limit):
                w = int(backing[p])
                if w == EMPTY:
                    break
                if w != TOMBSTONE and (w & fmask) == tag:
                    hit = True
                    val = w >> f
                    break
                p = (p + step) % size
        if hit:
            hits += 1
            found[k] = 1
            values_out[k] = val
        else:
            found[k] = 0
            values_out[k] = 0
    return hits


def tcf_delete_batch(blocks, backing, B, f, probe_limit, group_width,
                     mutex, fps, removed):
    """Tombstone the first slot matching each tag; returns removal count."""
    num_blocks = len(blocks) // B
    size = len(backing)
    fmask = (1 << f) - 1
    n = 0
    for k in range(len(fps)):
        fp = int(fps[k])
        tag = _tag_word(fp, f)
        b1 = mix64(fp ^ _C_BLOCK1) % num_blocks
        b2 = mix64(fp ^ _C_BLOCK2) % num_blocks
        done = False
        for base in (b1 * B, b2 * B):
            i = base
            while i < base + B and not done:
                w = int(blocks[i])
                if w != EMPTY and w != TOMBSTONE and (w & fmask) == tag:
                    if _cas(blocks, i, w, TOMBSTONE, mutex):
                        done = True
                i += 1
            if done:
                break
        if not done and size:
            p = mix64(fp ^ _C_BACK_START) % size
            step = (mix64(fp ^ _C_BACK_STEP) | 1) % size
            for _ in range(probe_limit):
                w = int(backing[p])
                if w == EMPTY:
                    break
                if w != TOMBSTONE and (w & fmask) == tag and _cas(backing, p, w, TOMBSTONE, mutex):
                    done = True
                    break
                p = (p + step) % size
        removed[k] = 1 if done else 0
        n += done
    return n


# ---------------------------------------------------------------------------
# two-choice filter, bulk API (sorted blocks, exclusive access)
# ---------------------------------------------------------------------------


def btcf_merge_lists(blocks, fill, B, words, starts, ends, b_lo, b_hi):
    """Merge each block's sorted incoming word list into its sorted prefix.

    Returns 0, or 1 + block index on overflow (callers treat as invariant
    violation: routing never over-commits a block).
    """
    for b in range(b_lo, b_hi):
        lo, hi = int(starts[b]), int(ends[b])
        if lo >= hi:
            continue
        m = hi - lo
        base = b * B
        cur = int(fill[b])
        if cur + m > B:
            return 1 + b
        merged = np.sort(np.concatenate(
            [blocks[base:base + cur], words[lo:hi]]), kind="stable")
        blocks[base:base + cur + m] = merged
        fill[b] = cur + m
    return 0


def btcf_route(fill, B, b1s, b2s, dest):
    """Sequential two-choice routing for post-shortcut leftovers.

    Processes items in primary-block-sorted order, tracking committed load so
    no block is over-committed; dest -1 means both choices are full and the
    item goes to the backing table.  Single-threaded on purpose: the result
    must be a pure function of the batch, whatever the worker count.
    """
    pend = {}
    for k in range(len(b1s)):
        b1 = int(b1s[k])
        b2 = int(b2s[k])
        l1 = int(fill[b1]) + pend.get(b1, 0)
        l2 = int(fill[b2]) + pend.get(b2, 0)
        pick = b1 if l1 <= l2 else b2
        if (int(fill[pick]) + pend.get(pick, 0)) >= B:
            pick = b2 if pick == b1 else b1
            if (int(fill[pick]) + pend.get(pick, 0)) >= B:
                dest[k] = -1
                continue
        pend[pick] = pend.get(pick, 0) + 1
        dest[k] = pick


def backing_insert_batch(backing, probe_limit, f, fps, codes):
    """Backing-table inserts for bulk overflow items; returns failure count."""
    fails = 0
    for k in range(len(fps)):
        fp = int(fps[k])
        word = _tag_word(fp, f)
        if _backing_insert(backing, probe_limit, fp, word, _NULL_MUTEX):
            codes[k] = P_BACKING
        else:
            codes[k] = P_FULL
            fails += 1
    return fails


class _NullMutex:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


_NULL_MUTEX = _NullMutex()


def btcf_delete_blocklocal(blocks, fill, B, words, starts, ends, b_lo, b_hi, removed):
    """Remove one copy of each word from its assigned block only.

    Items are grouped per block (starts/ends index into the sorted word
    array); callers give each worker a disjoint block range, so this runs in
    parallel without slot races.  removed[k] flags success per sorted item.
    """
    n = 0
    for b in range(b_lo, b_hi):
        base = b * B
        for k in range(int(starts[b]), int(ends[b])):
            word = int(words[k])
            cur = int(fill[b])
            i = _block_bisect(blocks, base, cur, word)
            if i < cur and int(blocks[base + i]) == word:
                blocks[base + i:base + cur - 1] = blocks[base + i + 1:base + cur].copy()
                blocks[base + cur - 1] = EMPTY
                fill[b] = cur - 1
                removed[k] = 1
                n += 1
            else:
                removed[k] = 0
    return n


def backing_delete_batch(backing, probe_limit, f, fps, removed):
    """Backing-table deletes for bulk leftovers; returns removal count."""
    size = len(backing)
    fmask = (1 << f) - 1
    n = 0
    for k in range(len(fps)):
        fp = int(fps[k])
        word = _tag_word(fp, f)
        done = False
        if size:
            p = mix64(fp ^ _C_BACK_START) % size
            step = (mix64(fp ^ _C_BACK_STEP) | 1) % size
            for _ in range(probe_limit):
                w = int(backing[p])
                if w == EMPTY:
                    break
                if w != TOMBSTONE and (w & fmask) == word:
                    backing[p] = TOMBSTONE
                    done = True
                    break
                p = (p + step) % size
        removed[k] = 1 if done else 0
        n += done
    return n


def _block_bisect(blocks, base, n, word):
    """Index of first element >= word within the block's sorted prefix."""
    lo, hi = 0, n
    while lo < hi:
        mid = (lo + hi) // 2
        if int(blocks[base + mid]) < word:
            lo = mid + 1
        else:
            hi = mid
    return lo


def btcf_query_batch(blocks, fill, backing, B, f, probe_limit, fps, found):
    """Binary-search membership over sorted blocks; returns hit count."""
    num_blocks = len(blocks) // B
    size = len(backing)
    fmask = (1 << f) - 1
    hits = 0
    for k in range(len(fps)):
        fp = int(fps[k])
        word = _tag_word(fp, f)
        hit = False
        for b in (mix64(fp ^ _C_BLOCK1) % num_blocks, mix64(fp ^ _C_BLOCK2) % num_blocks):
            base = b * B
            n = int(fill[b])
            i = _block_bisect(blocks, base, n, word)
            if i < n and int(blocks[base + i]) == word:
                hit = True
                break
        if not hit and size:
            p = mix64(fp ^ _C_BACK_START) % size
            step = (mix64(fp ^ _C_BACK_STEP) | 1) % size
            for _ in range(probe_limit):
                w = int(backing[p])
                if w == EMPTY:
                    break
                if w != TOMBSTONE and (w & fmask) == word:
                    hit = True
                    break
                p = (p + step) % size
        if hit:
            found[k] = 1
            hits += 1
        else:
            found[k] = 0
    return hits


# ---------------------------------------------------------------------------
# counting quotient filter
# ---------------------------------------------------------------------------


def _get_bit(bv, i):
    return (int(bv[i >> 6]) >> (i & 63)) & 1


def _set_bit(bv, i, v):
    w = int(bv[i >> 6])
    m = 1 << (i & 63)
    bv[i >> 6] = (w | m) if v else (w & ~m) & MASK64


def _popcnt_range(bv, a, b):
    """Number of set bits at positions [a, b)."""
    if a >= b:
        return 0
    wa, wb = a >> 6, (b - 1) >> 6
    if wa == wb:
        w = int(bv[wa]) >> (a & 63)
        return (w & ((1 << (b - a)) - 1)).bit_count()
    n = (int(bv[wa]) >> (a & 63)).bit_count()
    for wi in range(wa + 1, wb):
        n += int(bv[wi]).bit_count()
    w = int(bv[wb])
    n += (w & ((1 << (((b - 1) & 63) + 1)) - 1)).bit_count()
    return n


def _select_after(bv, pos, k, hard):
    """Position of the k-th set bit strictly after pos, scanning below hard.

    Returns -2 when fewer than k set bits exist before hard (the caller's
    shift-bound / capacity backstop).  hard is a multiple of 64.
    """
    i = pos + 1
    if i < 0:
        i = 0
    while i < hard:
        w = int(bv[i >> 6]) >> (i & 63)
        c = w.bit_count()
        if c >= k:
            while True:
                low = w & -w
                k -= 1
                if k == 0:
                    return i + low.bit_length() - 1
                w ^= low
        k -= c
        i = (i | 63) + 1
    return -2


def _run_end_local(occ, run, offsets, x, hard):
    """End slot of the run of the last occupied quotient <= x (region-local).

    Uses the region's spill offset so no read leaves [region start, hard).
    Returns a value < x when slot x is unused; -2 when the runend scan hits
    the hard bound.
    """
    h = x >> REGION_BITS
    s_h = h << REGION_BITS
    k = _popcnt_range(occ, s_h, x + 1)
    base = s_h + int(offsets[h]) - 1
    if k == 0:
        return base
    return _select_after(run, base, k, hard)


def _first_empty(occ, run, offsets, pos, hard):
    """First unused slot at/after pos; -2 if none below hard."""
    x = pos
    while x < hard:
        e = _run_end_local(occ, run, offsets, x, hard)
        if e == -2:
            return -2
        if e < x:
            return x
        x = e + 1
    return -2


def _shift_right(slots, run, a, b, L):
    """Move slots and runend bits [a, b) up by L; clears the vacated window."""
    if b > a:
        slots[a + L:b + L] = slots[a:b].copy()
        for i in range(b - 1, a - 1, -1):
            _set_bit(run, i + L, _get_bit(run, i))
    for i in range(a, min(a + L, b + L)):
        _set_bit(run, i, 0)


def _open_gap(slots, occ, run, offsets, pos, L, hard):
    """Free the L slots [pos, pos+L) by shifting used slots right.

    Equivalent to L consecutive single-slot insertions: the next L empty
    slots e_1 < .. < e_L absorb the displacement, so the used segment before
    e_k moves right by L-k+1 and independent clusters beyond e_L never move.
    Collection happens before any mutation, so a capacity failure leaves the
    table untouched.  Returns (slots moved, furthest slot touched), or
    (-1, -1) when fewer than L empties exist below the hard bound.
    """
    empties = []
    x = pos
    for _ in range(L):
        e = _first_empty(occ, run, offsets, x, hard)
        if e < 0:
            return -1, -1
        empties.append(e)
        x = e + 1
    moved = 0
    lo = pos - 1
    for k in range(L, 0, -1):   # rightmost segment first: moves never collide
        a, b = (empties[k - 2] if k >= 2 else lo) + 1, empties[k - 1]
        if b > a:
            _shift_right(slots, run, a, b, L - k + 1)
            moved += b - a
    return moved, empties[-1]


def gqf_find_run(occ, run, offsets, q, quotient):
    """Slot interval [start, end] of a quotient's run; (-1, -1) when absent."""
    h = quotient >> REGION_BITS
    hard = min(len(run) << 6, (h + 2) << REGION_BITS)
    if not _get_bit(occ, quotient):
        return (-1, -1)
    s_h = h << REGION_BITS
    k = _popcnt_range(occ, s_h, quotient + 1)
    base = s_h + int(offsets[h]) - 1
    prev_end = base if k == 1 else _select_after(run, base, k - 1, hard)
    end = _select_after(run, base, k, hard)
    if prev_end == -2 or end == -2:
        raise RuntimeError("runend scan exceeded region bound (invariant violation)")
    return (max(quotient, prev_end + 1), end)


def _locate_group(slots, r, start, end, rem):
    """Find rem's group inside a run.

    Returns (group_start, group_end, count, splice_pos); group_start is -1
    when absent and splice_pos is where a new group should be placed.
    """
    i = start
    while i <= end:
        h, c, nx = parse_group(slots, i, end, r)
        if h == rem:
            return (i, nx - 1, c, -1)
        if h > rem:
            return (-1, -1, 0, i)
        i = nx
    return (-1, -1, 0, end + 1)


def _recompute_offset(slots, occ, run, offsets, h, phys):
    """offsets[h] := spill of runs from regions < h into region h."""
    b = h << REGION_BITS
    hard = min(phys, (h + 1) << REGION_BITS)
    e = _run_end_local(occ, run, offsets, b - 1, hard)
    if e == -2:
        raise RuntimeError("offset recompute exceeded region bound (invariant violation)")
    offsets[h] = max(0, e - b + 1)


def atomic_stats_add(stats, idx, d):
    with _STATS_LOCK:
        stats[idx] += d


def _gqf_insert_one(slots, occ, run, offsets, stats, q, r, max_occupied, fp, delta):
    """Insert `delta` copies of one fingerprint; returns (code, shifted)."""
    phys = len(slots)
    rmask = (1 << r) - 1
    quot = fp >> r
    rem = fp & rmask
    g = quot >> REGION_BITS
    hard = min(phys, (g + 2) << REGION_BITS)
    if int(stats[0]) >= max_occupied:
        return GQF_LOAD_CAPACITY, 0

    shifted = 0
    if not _get_bit(occ, quot):
        e = _run_end_local(occ, run, offsets, quot, hard)
        if e == -2:
            return GQF_SHIFT_BOUND, 0
        pos = max(quot, e + 1)
        words = encode_group(rem, delta, r)
        L = len(words)
        shifted, far = _open_gap(slots, occ, run, offsets, pos, L, hard)
        if shifted < 0:
            return GQF_SHIFT_BOUND, 0
        for i, w in enumerate(words):
            slots[pos + i] = w
        _set_bit(occ, quot, 1)
        _set_bit(run, pos + L - 1, 1)
        touched_end = far + 1
        atomic_stats_add(stats, 0, L)
        atomic_stats_add(stats, 1, delta)
        atomic_stats_add(stats, 2, 1)
    else:
        start, end = gqf_find_run(occ, run, offsets, q, quot)
        gs, ge, c, sp = _locate_group(slots, r, start, end, rem)
        if gs >= 0:
            words = encode_group(rem, c + delta, r)
            L_old = ge - gs + 1
            diff = len(words) - L_old
            if diff > 0:
                shifted, far = _open_gap(slots, occ, run, offsets, ge + 1, diff, hard)
                if shifted < 0:
                    return GQF_SHIFT_BOUND, 0
                if ge == end:
                    # group was last in run: its runend bit sat outside the
                    # shifted window, move it by hand
                    _set_bit(run, end, 0)
                    _set_bit(run, end + diff, 1)
                touched_end = far + 1
            else:
                touched_end = 0
            for i, w in enumerate(words):
                slots[gs + i] = w
            atomic_stats_add(stats, 0, diff)
            atomic_stats_add(stats, 1, delta)
        else:
            words = encode_group(rem, delta, r)
            L = len(words)
            shifted, far = _open_gap(slots, occ, run, offsets, sp, L, hard)
            if shifted < 0:
                return GQF_SHIFT_BOUND, 0
            for i, w in enumerate(words):
                slots[sp + i] = w
            if sp == end + 1:
                _set_bit(run, end, 0)
                _set_bit(run, end + L, 1)
            touched_end = far + 1
            atomic_stats_add(stats, 0, L)
            atomic_stats_add(stats, 1, delta)
            atomic_stats_add(stats, 2, 1)

    boundary = (g + 1) << REGION_BITS
    if boundary < phys and touched_end > boundary:
        _recompute_offset(slots, occ, run, offsets, g + 1, phys)
    return GQF_OK, shifted


def _remove_slots(slots, occ, run, quot, start, end, rs, re, hard):
    """Remove slots [rs, re] from quot's run, left-compacting the cluster.

    Subsequent runs move left until one lands on its canonical slot.  Freed
    slots are zeroed and their runend bits cleared.  Returns (slots moved,
    furthest old slot touched), or (-1, -1) when the walk would leave the
    locked window (invariant violation).
    """
    L = re - rs + 1
    run_emptied = L == (end - start + 1)
    shifted = 0
    tail = end - re
    if tail:
        slots[rs:rs + tail] = slots[re + 1:end + 1].copy()
        shifted += tail
    _set_bit(run, end, 0)
    if run_emptied:
        _set_bit(occ, quot, 0)
        write_pos = start
    else:
        _set_bit(run, end - L, 1)
        write_pos = end - L + 1
    prev_old_end = end
    last_old_end = end
    nq = quot
    while True:
        nq = _select_after(occ, nq, 1, hard)
        if nq < 0 or nq > prev_old_end + 1:
            # gap before the next occupied quotient: the cluster ends here
            break
        s2 = prev_old_end + 1
        e2 = _select_after(run, s2 - 1, 1, hard)
        if e2 == -2:
            return -1, -1
        new_s2 = max(nq, write_pos)
        if new_s2 == s2:
            break
        if new_s2 > write_pos:
            # run lands on its canonical slot, not flush against the previous
            # one: the positions skipped over are freed here and never touched
            # again, so clear them now
            slots[write_pos:new_s2] = 0
            for i in range(write_pos, new_s2):
                _set_bit(run, i, 0)
        n2 = e2 - s2 + 1
        slots[new_s2:new_s2 + n2] = slots[s2:s2 + n2].copy()
        _set_bit(run, e2, 0)
        _set_bit(run, new_s2 + n2 - 1, 1)
        shifted += n2
        write_pos = new_s2 + n2
        prev_old_end = e2
        last_old_end = e2
    if write_pos <= last_old_end:
        slots[write_pos:last_old_end + 1] = 0
        for i in range(write_pos, last_old_end + 1):
            _set_bit(run, i, 0)
    return shifted, last_old_end


def _gqf_delete_one(slots, occ, run, offsets, stats, q, r, fp, delta):
    """Remove up to `delta` copies of one fingerprint; (found, shifted)."""
    phys = len(slots)
    rmask = (1 << r) - 1
    quot = fp >> r
    rem = fp & rmask
    g = quot >> REGION_BITS
    hard = min(phys, (g + 2) << REGION_BITS)
    if not _get_bit(occ, quot):
        return 0, 0
    start, end = gqf_find_run(occ, run, offsets, q, quot)
    gs, ge, c, _sp = _locate_group(slots, r, start, end, rem)
    if gs < 0:
        return 0, 0
    take = min(delta, c)
    c2 = c - take
    if c2 > 0:
        words = encode_group(rem, c2, r)
        diff = (ge - gs + 1) - len(words)
        for i, w in enumerate(words):
            slots[gs + i] = w
        atomic_stats_add(stats, 1, -take)
        if diff == 0:
            return 1, 0
        rs, re = gs + len(words), ge
    else:
        atomic_stats_add(stats, 1, -take)
        atomic_stats_add(stats, 2, -1)
        rs, re = gs, ge
    shifted, last_old_end = _remove_slots(
        slots, occ, run, quot, start, end, rs, re, hard)
    if shifted < 0:
        raise RuntimeError("delete compaction exceeded region bound (invariant violation)")
    atomic_stats_add(stats, 0, -(re - rs + 1))
    boundary = (g + 1) << REGION_BITS
    if boundary < phys and last_old_end >= boundary:
        _recompute_offset(slots, occ, run, offsets, g + 1, phys)
    return 1, shifted


def _acquire_regions(locks, g, nr):
    g2 = min(g + 1, nr - 1)
    locks[g].acquire()
    if g2 != g:
        locks[g2].acquire()
    return g, g2


def _release_regions(locks, g, g2):
    if g2 != g:
        locks[g2].release()
    locks[g].release()


def gqf_insert_batch(slots, occ, run, offsets, stats, locks, q, r,
                     max_occupied, use_locks, fps, deltas, shift_out):
    """Insert a batch of fingerprints.

    Returns (code, fail_index): code 0 on success, else the first failing
    item's capacity code with its index.  shift_out[0] accumulates moved
    slots (shift-work instrumentation).
    """
    nr = len(locks) if use_locks else 0
    shifted_total = 0
    for k in range(len(fps)):
        fp = int(fps[k])
        delta = int(deltas[k])
        if use_locks:
            g = (fp >> r) >> REGION_BITS
            ga, gb = _acquire_regions(locks, g, nr)
            try:
                code, shifted = _gqf_insert_one(
                    slots, occ, run, offsets, stats, q, r, max_occupied, fp, delta)
            finally:
                _release_regions(locks, ga, gb)
        else:
            code, shifted = _gqf_insert_one(
                slots, occ, run, offsets, stats, q, r, max_occupied, fp, delta)
        if code != GQF_OK:
            shift_out[0] += shifted_total
            return code, k
        shifted_total += shifted
    shift_out[0] += shifted_total
    return GQF_OK, -1


def gqf_count_batch(slots, occ, run, offsets, locks, q, r, use_locks, fps, counts):
    """Exact-or-over count lookups for a batch of fingerprints."""
    nr = len(locks) if use_locks else 0
    rmask = (1 << r) - 1
    for k in range(len(fps)):
        fp = int(fps[k])
        quot = fp >> r
        rem = fp & rmask
        if use_locks:
            g = quot >> REGION_BITS
            ga, gb = _acquire_regions(locks, g, nr)
        try:
            if not _get_bit(occ, quot):
                counts[k] = 0
                continue
            start, end = gqf_find_run(occ, run, offsets, q, quot)
            gs, _ge, c, _sp = _locate_group(slots, r, start, end, rem)
            counts[k] = c if gs >= 0 else 0
        finally:
            if use_locks:
                _release_regions(locks, ga, gb)


def gqf_delete_batch(slots, occ, run, offsets, stats, locks, q, r,
                     use_locks, fps, deltas, found, shift_out):
    """Delete a batch; fills per-item found flags, accumulates shift work."""
    nr = len(locks) if use_locks else 0
    total = 0
    for k in range(len(fps)):
        fp = int(fps[k])
        delta = int(deltas[k])
        if use_locks:
            g = (fp >> r) >> REGION_BITS
            ga, gb = _acquire_regions(locks, g, nr)
            try:
                ok, shifted = _gqf_delete_one(slots, occ, run, offsets, stats, q, r, fp, delta)
            finally:
                _release_regions(locks, ga, gb)
        else:
            ok, shifted = _gqf_delete_one(slots, occ, run, offsets, stats, q, r, fp, delta)
        found[k] = ok
        total += shifted
    shift_out[0] += total
    return GQF_OK, -1
