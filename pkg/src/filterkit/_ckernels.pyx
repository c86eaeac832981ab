# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel backend.

This module and ``_pykernels`` implement the same kernel contract over the
same numpy arrays; ``_backends`` picks one at import time.  This twin is the
fast path: slot claims use real hardware compare-and-swap (so ``make_mutex``
returns ``None``), region locks are cache-line-spaced spinlock words, and the
batch loops run without the GIL so harness threads overlap for real.

Every function here must stay bit-for-bit equivalent to its pure-Python
counterpart for any sequential operation stream: the differential backend
tests compare raw table arrays across backends after identical workloads.
"""

import numpy as np

from libc.stdint cimport int32_t, int64_t, uint8_t, uint16_t, uint32_t, uint64_t
from libc.stdlib cimport calloc, free, malloc

cdef extern from *:
    """
    #include <stdint.h>

    static inline int fk_cas8(uint8_t *p, uint8_t e, uint8_t n)
    { return __sync_bool_compare_and_swap(p, e, n); }
    static inline int fk_cas16(uint16_t *p, uint16_t e, uint16_t n)
    { return __sync_bool_compare_and_swap(p, e, n); }
    static inline int fk_cas32(uint32_t *p, uint32_t e, uint32_t n)
    { return __sync_bool_compare_and_swap(p, e, n); }
    static inline int fk_cas64(uint64_t *p, uint64_t e, uint64_t n)
    { return __sync_bool_compare_and_swap(p, e, n); }
    static inline void fk_spin_lock(int32_t *p)
    { while (__sync_lock_test_and_set(p, 1)) { while (*(volatile int32_t *)p) ; } }
    static inline void fk_spin_unlock(int32_t *p)
    { __sync_lock_release(p); }
    static inline void fk_atomic_add64(int64_t *p, int64_t d)
    { (void)__sync_fetch_and_add(p, d); }
    static inline int fk_popcnt64(uint64_t x) { return __builtin_popcountll(x); }
    static inline int fk_ctz64(uint64_t x) { return __builtin_ctzll(x); }
    """
    int fk_cas8(uint8_t *p, uint8_t e, uint8_t n) nogil
    int fk_cas16(uint16_t *p, uint16_t e, uint16_t n) nogil
    int fk_cas32(uint32_t *p, uint32_t e, uint32_t n) nogil
    int fk_cas64(uint64_t *p, uint64_t e, uint64_t n) nogil
    void fk_spin_lock(int32_t *p) nogil
    void fk_spin_unlock(int32_t *p) nogil
    void fk_atomic_add64(int64_t *p, int64_t d) nogil
    int fk_popcnt64(uint64_t x) nogil
    int fk_ctz64(uint64_t x) nogil

NAME = "c"

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

cdef enum:
    _EMPTY = 0
    _TOMBSTONE = 1
    _P_PRIMARY = 0
    _P_SECONDARY = 1
    _P_BACKING = 2
    _P_FULL = 3
    _GQF_OK = 0
    _GQF_LOAD_CAPACITY = 1
    _GQF_SHIFT_BOUND = 2
    _INVARIANT = -9          # internal: invariant violation, caller raises
    _REGION_BITS = 13
    _REGION_SLOTS = 1 << 13
    # region spinlocks sit one per cache line so neighbours never false-share
    _LOCK_STRIDE = 16
    # workspace bound for _open_gap: a gap opens inside [pos, hard) and that
    # window spans at most two regions, so no insert collects more empties
    _EMPTIES_CAP = 2 * (1 << 13)

# derivation constants; values mirror filterkit.hashing
cdef uint64_t _C_BLOCK1 = 0x9E3779B97F4A7C15UL
cdef uint64_t _C_BLOCK2 = 0xC2B2AE3D27D4EB4FUL
cdef uint64_t _C_BACK_START = 0x165667B19E3779F9UL
cdef uint64_t _C_BACK_STEP = 0x27D4EB2F165667C5UL

ctypedef fused slot_t:
    uint8_t
    uint16_t
    uint32_t
    uint64_t


def make_region_locks(n):
    """Region lock set for this backend: spinlock words, one cache line apart."""
    return np.zeros(int(n) * _LOCK_STRIDE, dtype=np.int32)


def make_mutex():
    """This backend uses hardware CAS directly; there is no mutex to take."""
    return None


cdef inline uint64_t _mix64(uint64_t x) noexcept nogil:
    x ^= x >> 30
    x = x * <uint64_t>0xBF58476D1CE4E5B9UL
    x ^= x >> 27
    x = x * <uint64_t>0x94D049BB133111EBUL
    x ^= x >> 31
    return x


cdef inline bint _cas_slot(slot_t *p, slot_t expected, slot_t word) noexcept nogil:
    if slot_t is uint8_t:
        return fk_cas8(<uint8_t *> p, expected, word)
    elif slot_t is uint16_t:
        return fk_cas16(<uint16_t *> p, expected, word)
    elif slot_t is uint32_t:
        return fk_cas32(<uint32_t *> p, expected, word)
    else:
        return fk_cas64(<uint64_t *> p, expected, word)


# ---------------------------------------------------------------------------
# two-choice filter, point API
# ---------------------------------------------------------------------------


cdef inline uint64_t _tag_of(uint64_t fp, int f) noexcept nogil:
    cdef uint64_t tag = fp & ((<uint64_t> 1 << f) - 1)
    return tag | 2 if tag < 2 else tag


cdef inline int64_t _count_used(slot_t *blocks, int64_t base, int B) noexcept nogil:
    cdef int64_t n = 0
    cdef int i
    cdef uint64_t w
    for i in range(B):
        w = blocks[base + i]
        if w != _EMPTY and w != _TOMBSTONE:
            n += 1
    return n


cdef bint _block_insert(slot_t *blocks, int64_t base, int B, int g,
                        uint64_t word) noexcept nogil:
    """Claim the first free slot of a block, scanning lane-strided rounds.

    Candidates inside a round go in ascending lane (= slot) order, so the
    attempt order is plain ascending for every group width g.  A lost CAS
    race moves on to the next candidate, exactly like the pure backend.
    """
    cdef int round_start, lane, i
    cdef slot_t w
    round_start = 0
    while round_start < B:
        for lane in range(g):
            i = round_start + lane
            if i >= B:
                break
            w = blocks[base + i]
            if w == _EMPTY or w == _TOMBSTONE:
                if _cas_slot(&blocks[base + i], w, <slot_t> word):
                    return True
        round_start += g
    return False


cdef bint _backing_insert(slot_t *backing, int64_t size, int probe_limit,
                          uint64_t fp, uint64_t word) noexcept nogil:
    cdef uint64_t start, step, idx
    cdef int t
    cdef slot_t w
    if size == 0:
        return False
    start = _mix64(fp ^ _C_BACK_START) % <uint64_t> size
    step = (_mix64(fp ^ _C_BACK_STEP) | 1) % <uint64_t> size
    idx = start
    for t in range(probe_limit):
        w = backing[idx]
        if w == _EMPTY or w == _TOMBSTONE:
            if _cas_slot(&backing[idx], w, <slot_t> word):
                return True
        idx = (idx + step) % <uint64_t> size
    return False


def tcf_insert_batch(slot_t[::1] blocks, slot_t[::1] backing, int B, int f,
                     int cut_slots, int probe_limit, int group_width,
                     mutex, uint64_t[::1] fps, uint64_t[::1] values,
                     uint8_t[::1] codes):
    """Insert packed (tag, value) words; returns (inserted, backing_placed)."""
    cdef int64_t n = fps.shape[0]
    if n == 0:
        return 0, 0
    cdef slot_t *bp = &blocks[0]
    cdef int64_t bsize = backing.shape[0]
    cdef slot_t *kp = &backing[0] if bsize else NULL
    cdef int64_t num_blocks = blocks.shape[0] // B
    cdef int64_t n_ok = 0, n_back = 0
    cdef int64_t k, first, second, b1, b2, o1, o2
    cdef uint64_t fp, word
    cdef int code
    with nogil:
        for k in range(n):
            fp = fps[k]
            word = (values[k] << f) | _tag_of(fp, f)
            b1 = <int64_t> (_mix64(fp ^ _C_BLOCK1) % <uint64_t> num_blocks)
            b2 = <int64_t> (_mix64(fp ^ _C_BLOCK2) % <uint64_t> num_blocks)
            code = _P_FULL
            if _count_used(bp, b1 * B, B) < cut_slots and \
                    _block_insert(bp, b1 * B, B, group_width, word):
                code = _P_PRIMARY
            else:
                o1 = _count_used(bp, b1 * B, B)
                o2 = _count_used(bp, b2 * B, B)
                if o1 <= o2:
                    first = b1
                    second = b2
                else:
                    first = b2
                    second = b1
                if _block_insert(bp, first * B, B, group_width, word):
                    code = _P_PRIMARY if first == b1 else _P_SECONDARY
                elif _block_insert(bp, second * B, B, group_width, word):
                    code = _P_PRIMARY if second == b1 else _P_SECONDARY
                elif _backing_insert(kp, bsize, probe_limit, fp, word):
                    code = _P_BACKING
                    n_back += 1
            if code != _P_FULL:
                n_ok += 1
            codes[k] = <uint8_t> code
    return n_ok, n_back


cdef int64_t _block_find(slot_t *blocks, int64_t base, int B, uint64_t tag,
                         uint64_t fmask) noexcept nogil:
    cdef int i
    cdef uint64_t w
    for i in range(B):
        w = blocks[base + i]
        if w != _EMPTY and w != _TOMBSTONE and (w & fmask) == tag:
            return base + i
    return -1


def tcf_query_batch(slot_t[::1] blocks, slot_t[::1] backing, int B, int f,
                    int probe_limit, int group_width, mutex,
                    uint64_t[::1] fps, uint8_t[::1] found,
                    uint64_t[::1] values_out):
    """Tag-membership queries; fills found/values_out, returns hit count."""
    cdef int64_t n = fps.shape[0]
    if n == 0:
        return 0
    cdef slot_t *bp = &blocks[0]
    cdef int64_t size = backing.shape[0]
    cdef slot_t *kp = &backing[0] if size else NULL
    cdef int64_t num_blocks = blocks.shape[0] // B
    cdef uint64_t fmask = (<uint64_t> 1 << f) - 1
    cdef int64_t hits = 0
    cdef int64_t k, b1, b2, idx
    cdef uint64_t fp, tag, p, step, w, val
    cdef bint hit
    cdef int t
    with nogil:
        for k in range(n):
            fp = fps[k]
            tag = _tag_of(fp, f)
            b1 = <int64_t> (_mix64(fp ^ _C_BLOCK1) % <uint64_t> num_blocks)
            b2 = <int64_t> (_mix64(fp ^ _C_BLOCK2) % <uint64_t> num_blocks)
            idx = _block_find(bp, b1 * B, B, tag, fmask)
            if idx < 0:
                idx = _block_find(bp, b2 * B, B, tag, fmask)
            hit = idx >= 0
            val = (<uint64_t> bp[idx]) >> f if hit else 0
            if not hit and size:
                p = _mix64(fp ^ _C_BACK_START) % <uint64_t> size
                step = (_mix64(fp ^ _C_BACK_STEP) | 1) % <uint64_t> size
                for t in range(probe_limit):
                    w = kp[p]
                    if w == _EMPTY:
                        break
                    if w != _TOMBSTONE and (w & fmask) == tag:
                        hit = True
                        val = w >> f
                        break
                    p = (p + step) % <uint64_t> size
            if hit:
                hits += 1
                found[k] = 1
                values_out[k] = val
            else:
                found[k] = 0
                values_out[k] = 0
    return hits


def tcf_delete_batch(slot_t[::1] blocks, slot_t[::1] backing, int B, int f,
                     int probe_limit, int group_width, mutex,
                     uint64_t[::1] fps, uint8_t[::1] removed):
    """Tombstone the first slot matching each tag; returns removal count."""
    cdef int64_t nk = fps.shape[0]
    if nk == 0:
        return 0
    cdef slot_t *bp = &blocks[0]
    cdef int64_t size = backing.shape[0]
    cdef slot_t *kp = &backing[0] if size else NULL
    cdef int64_t num_blocks = blocks.shape[0] // B
    cdef uint64_t fmask = (<uint64_t> 1 << f) - 1
    cdef int64_t n = 0
    cdef int64_t k, b1, b2, base, i
    cdef uint64_t fp, tag, p, step
    cdef slot_t w
    cdef bint done
    cdef int which, t
    with nogil:
        for k in range(nk):
            fp = fps[k]
            tag = _tag_of(fp, f)
            b1 = <int64_t> (_mix64(fp ^ _C_BLOCK1) % <uint64_t> num_blocks)
            b2 = <int64_t> (_mix64(fp ^ _C_BLOCK2) % <uint64_t> num_blocks)
            done = False
            for which in range(2):
                base = (b1 if which == 0 else b2) * B
                i = base
                while i < base + B and not done:
                    w = bp[i]
                    if w != _EMPTY and w != _TOMBSTONE and \
                            ((<uint64_t> w) & fmask) == tag:
                        if _cas_slot(&bp[i], w, <slot_t> _TOMBSTONE):
                            done = True
                    i += 1
                if done:
                    break
            if not done and size:
                p = _mix64(fp ^ _C_BACK_START) % <uint64_t> size
                step = (_mix64(fp ^ _C_BACK_STEP) | 1) % <uint64_t> size
                for t in range(probe_limit):
                    w = kp[p]
                    if w == _EMPTY:
                        break
                    if w != _TOMBSTONE and ((<uint64_t> w) & fmask) == tag and \
                            _cas_slot(&kp[p], w, <slot_t> _TOMBSTONE):
                        done = True
                        break
                    p = (p + step) % <uint64_t> size
            removed[k] = 1 if done else 0
            if done:
                n += 1
    return n


# ---------------------------------------------------------------------------
# two-choice filter, bulk API (sorted blocks, exclusive access)
# ---------------------------------------------------------------------------


cdef void _merge_into_block(slot_t *blocks, int64_t base, int64_t cur,
                            slot_t *words, int64_t lo, int64_t hi) noexcept nogil:
    """Backward in-place merge of sorted words[lo:hi] into the sorted prefix."""
    cdef int64_t i = cur - 1
    cdef int64_t j = hi - 1
    cdef int64_t w = cur + (hi - lo) - 1
    while j >= lo:
        if i >= 0 and blocks[base + i] > words[j]:
            blocks[base + w] = blocks[base + i]
            i -= 1
        else:
            blocks[base + w] = words[j]
            j -= 1
        w -= 1


def btcf_merge_lists(slot_t[::1] blocks, uint32_t[::1] fill, int B,
                     slot_t[::1] words, int64_t[::1] starts, int64_t[::1] ends,
                     int64_t b_lo, int64_t b_hi):
    """Merge each block's sorted incoming word list into its sorted prefix.

    Returns 0, or 1 + block index on overflow (callers treat as invariant
    violation: routing never over-commits a block).
    """
    cdef slot_t *bp = &blocks[0]
    cdef slot_t *wp = &words[0] if words.shape[0] else NULL
    cdef int64_t b, lo, hi, m, base, cur
    cdef int64_t bad = 0
    with nogil:
        for b in range(b_lo, b_hi):
            lo = starts[b]
            hi = ends[b]
            if lo >= hi:
                continue
            m = hi - lo
            base = b * B
            cur = fill[b]
            if cur + m > B:
                bad = 1 + b
                break
            _merge_into_block(bp, base, cur, wp, lo, hi)
            fill[b] = <uint32_t> (cur + m)
    return bad


def btcf_route(uint32_t[::1] fill, int B, int64_t[::1] b1s, int64_t[::1] b2s,
               int64_t[::1] dest):
    """Sequential two-choice routing for post-shortcut leftovers.

    Processes items in primary-block-sorted order, tracking committed load so
    no block is over-committed; dest -1 means both choices are full and the
    item goes to the backing table.  Single-threaded on purpose: the result
    must be a pure function of the batch, whatever the worker count.
    """
    cdef int64_t n = b1s.shape[0]
    if n == 0:
        return
    cdef int64_t nb = fill.shape[0]
    cdef int64_t *pend = <int64_t *> calloc(nb, sizeof(int64_t))
    if pend == NULL:
        raise MemoryError()
    cdef int64_t k, b1, b2, pick, other
    try:
        with nogil:
            for k in range(n):
                b1 = b1s[k]
                b2 = b2s[k]
                if fill[b1] + pend[b1] <= fill[b2] + pend[b2]:
                    pick = b1
                    other = b2
                else:
                    pick = b2
                    other = b1
                if fill[pick] + pend[pick] >= B:
                    pick = other
                    if fill[pick] + pend[pick] >= B:
                        dest[k] = -1
                        continue
                pend[pick] += 1
                dest[k] = pick
    finally:
        free(pend)


def backing_insert_batch(slot_t[::1] backing, int probe_limit, int f,
                         uint64_t[::1] fps, uint8_t[::1] codes):
    """Backing-table inserts for bulk overflow items; returns failure count."""
    cdef int64_t n = fps.shape[0]
    if n == 0:
        return 0
    cdef int64_t size = backing.shape[0]
    cdef slot_t *kp = &backing[0] if size else NULL
    cdef int64_t fails = 0
    cdef int64_t k
    cdef uint64_t fp
    with nogil:
        for k in range(n):
            fp = fps[k]
            if _backing_insert(kp, size, probe_limit, fp, _tag_of(fp, f)):
                codes[k] = _P_BACKING
            else:
                codes[k] = _P_FULL
                fails += 1
    return fails


cdef int64_t _block_bisect(slot_t *blocks, int64_t base, int64_t n,
                           uint64_t word) noexcept nogil:
    """Index of first element >= word within the block's sorted prefix."""
    cdef int64_t lo = 0, hi = n, mid
    while lo < hi:
        mid = (lo + hi) // 2
        if blocks[base + mid] < word:
            lo = mid + 1
        else:
            hi = mid
    return lo


def btcf_delete_blocklocal(slot_t[::1] blocks, uint32_t[::1] fill, int B,
                           slot_t[::1] words, int64_t[::1] starts,
                           int64_t[::1] ends, int64_t b_lo, int64_t b_hi,
                           uint8_t[::1] removed):
    """Remove one copy of each word from its assigned block only.

    Items are grouped per block (starts/ends index into the sorted word
    array); callers give each worker a disjoint block range, so this runs in
    parallel without slot races.  removed[k] flags success per sorted item.
    """
    cdef slot_t *bp = &blocks[0]
    cdef int64_t n = 0
    cdef int64_t b, base, k, cur, i, t
    cdef uint64_t word
    with nogil:
        for b in range(b_lo, b_hi):
            base = b * B
            for k in range(starts[b], ends[b]):
                word = words[k]
                cur = fill[b]
                i = _block_bisect(bp, base, cur, word)
                if i < cur and bp[base + i] == <slot_t> word:
                    for t in range(i, cur - 1):
                        bp[base + t] = bp[base + t + 1]
                    bp[base + cur - 1] = _EMPTY
                    fill[b] = <uint32_t> (cur - 1)
                    removed[k] = 1
                    n += 1
                else:
                    removed[k] = 0
    return n


def backing_delete_batch(slot_t[::1] backing, int probe_limit, int f,
                         uint64_t[::1] fps, uint8_t[::1] removed):
    """Backing-table deletes for bulk leftovers; returns removal count."""
    cdef int64_t nk = fps.shape[0]
    if nk == 0:
        return 0
    cdef int64_t size = backing.shape[0]
    cdef slot_t *kp = &backing[0] if size else NULL
    cdef uint64_t fmask = (<uint64_t> 1 << f) - 1
    cdef int64_t n = 0
    cdef int64_t k
    cdef uint64_t fp, word, p, step, w
    cdef bint done
    cdef int t
    with nogil:
        for k in range(nk):
            fp = fps[k]
            word = _tag_of(fp, f)
            done = False
            if size:
                p = _mix64(fp ^ _C_BACK_START) % <uint64_t> size
                step = (_mix64(fp ^ _C_BACK_STEP) | 1) % <uint64_t> size
                for t in range(probe_limit):
                    w = kp[p]
                    if w == _EMPTY:
                        break
                    if w != _TOMBSTONE and (w & fmask) == word:
                        kp[p] = _TOMBSTONE
                        done = True
                        break
                    p = (p + step) % <uint64_t> size
            removed[k] = 1 if done else 0
            if done:
                n += 1
    return n


def btcf_query_batch(slot_t[::1] blocks, uint32_t[::1] fill,
                     slot_t[::1] backing, int B, int f, int probe_limit,
                     uint64_t[::1] fps, uint8_t[::1] found):
    """Binary-search membership over sorted blocks; returns hit count."""
    cdef int64_t nk = fps.shape[0]
    if nk == 0:
        return 0
    cdef slot_t *bp = &blocks[0]
    cdef int64_t size = backing.shape[0]
    cdef slot_t *kp = &backing[0] if size else NULL
    cdef int64_t num_blocks = blocks.shape[0] // B
    cdef uint64_t fmask = (<uint64_t> 1 << f) - 1
    cdef int64_t hits = 0
    cdef int64_t k, b, base, n, i
    cdef uint64_t fp, word, p, step, w
    cdef bint hit
    cdef int which, t
    with nogil:
        for k in range(nk):
            fp = fps[k]
            word = _tag_of(fp, f)
            hit = False
            for which in range(2):
                b = <int64_t> (_mix64(fp ^ (_C_BLOCK1 if which == 0 else _C_BLOCK2))
                               % <uint64_t> num_blocks)
                base = b * B
                n = fill[b]
                i = _block_bisect(bp, base, n, word)
                if i < n and bp[base + i] == <slot_t> word:
                    hit = True
                    break
            if not hit and size:
                p = _mix64(fp ^ _C_BACK_START) % <uint64_t> size
                step = (_mix64(fp ^ _C_BACK_STEP) | 1) % <uint64_t> size
                for t in range(probe_limit):
                    w = kp[p]
                    if w == _EMPTY:
                        break
                    if w != _TOMBSTONE and (w & fmask) == word:
                        hit = True
                        break
                    p = (p + step) % <uint64_t> size
            if hit:
                found[k] = 1
                hits += 1
            else:
                found[k] = 0
    return hits


# ---------------------------------------------------------------------------
# counting quotient filter
# ---------------------------------------------------------------------------


cdef inline int _get_bit(uint64_t *bv, int64_t i) noexcept nogil:
    return <int> ((bv[i >> 6] >> (i & 63)) & 1)


cdef inline void _set_bit(uint64_t *bv, int64_t i, int v) noexcept nogil:
    cdef uint64_t m = <uint64_t> 1 << (i & 63)
    if v:
        bv[i >> 6] |= m
    else:
        bv[i >> 6] &= ~m


cdef int64_t _popcnt_range(uint64_t *bv, int64_t a, int64_t b) noexcept nogil:
    """Number of set bits at positions [a, b)."""
    cdef int64_t wa, wb, n, wi
    cdef uint64_t w
    cdef int sh
    if a >= b:
        return 0
    wa = a >> 6
    wb = (b - 1) >> 6
    if wa == wb:
        w = bv[wa] >> (a & 63)
        if b - a < 64:
            w &= (<uint64_t> 1 << (b - a)) - 1
        return fk_popcnt64(w)
    n = fk_popcnt64(bv[wa] >> (a & 63))
    for wi in range(wa + 1, wb):
        n += fk_popcnt64(bv[wi])
    w = bv[wb]
    sh = <int> (((b - 1) & 63) + 1)
    if sh < 64:
        w &= (<uint64_t> 1 << sh) - 1
    return n + fk_popcnt64(w)


cdef int64_t _select_after(uint64_t *bv, int64_t pos, int64_t k,
                           int64_t hard) noexcept nogil:
    """Position of the k-th set bit strictly after pos, scanning below hard.

    Returns -2 when fewer than k set bits exist before hard (the caller's
    shift-bound / capacity backstop).  hard is a multiple of 64.
    """
    cdef int64_t i = pos + 1
    cdef int64_t c
    cdef uint64_t w
    if i < 0:
        i = 0
    while i < hard:
        w = bv[i >> 6] >> (i & 63)
        c = fk_popcnt64(w)
        if c >= k:
            while True:
                k -= 1
                if k == 0:
                    return i + fk_ctz64(w)
                w &= w - 1
        k -= c
        i = (i | 63) + 1
    return -2


cdef int64_t _run_end_local(uint64_t *occ, uint64_t *run, int32_t *offsets,
                            int64_t x, int64_t hard) noexcept nogil:
    """End slot of the run of the last occupied quotient <= x (region-local).

    Uses the region's spill offset so no read leaves [region start, hard).
    Returns a value < x when slot x is unused; -2 when the runend scan hits
    the hard bound.
    """
    cdef int64_t h = x >> _REGION_BITS
    cdef int64_t s_h = h << _REGION_BITS
    cdef int64_t k = _popcnt_range(occ, s_h, x + 1)
    cdef int64_t base = s_h + offsets[h] - 1
    if k == 0:
        return base
    return _select_after(run, base, k, hard)


cdef int64_t _first_empty(uint64_t *occ, uint64_t *run, int32_t *offsets,
                          int64_t pos, int64_t hard) noexcept nogil:
    """First unused slot at/after pos; -2 if none below hard."""
    cdef int64_t x = pos
    cdef int64_t e
    while x < hard:
        e = _run_end_local(occ, run, offsets, x, hard)
        if e == -2:
            return -2
        if e < x:
            return x
        x = e + 1
    return -2


cdef void _shift_right(slot_t *slots, uint64_t *run, int64_t a, int64_t b,
                       int64_t L) noexcept nogil:
    """Move slots and runend bits [a, b) up by L; clears the vacated window."""
    cdef int64_t i, stop
    if b > a:
        for i in range(b - 1, a - 1, -1):
            slots[i + L] = slots[i]
        for i in range(b - 1, a - 1, -1):
            _set_bit(run, i + L, _get_bit(run, i))
    stop = a + L
    if b + L < stop:
        stop = b + L
    for i in range(a, stop):
        _set_bit(run, i, 0)


cdef int64_t _open_gap(slot_t *slots, uint64_t *occ, uint64_t *run,
                       int32_t *offsets, int64_t pos, int64_t L, int64_t hard,
                       int64_t *empties, int64_t *far_out) noexcept nogil:
    """Free the L slots [pos, pos+L) by shifting used slots right.

    Equivalent to L consecutive single-slot insertions: the next L empty
    slots e_1 < .. < e_L absorb the displacement, so the used segment before
    e_k moves right by L-k+1 and independent clusters beyond e_L never move.
    Collection happens before any mutation, so a capacity failure leaves the
    table untouched.  Returns slots moved and writes the furthest slot
    touched to far_out, or returns -1 when fewer than L empties exist below
    the hard bound.  empties is caller-provided scratch of _EMPTIES_CAP
    entries; L can never exceed it because [pos, hard) spans at most that
    many slots.
    """
    cdef int64_t x = pos
    cdef int64_t e, t, moved, lo, k, a, b
    if L > _EMPTIES_CAP:
        return -1
    for t in range(L):
        e = _first_empty(occ, run, offsets, x, hard)
        if e < 0:
            return -1
        empties[t] = e
        x = e + 1
    moved = 0
    lo = pos - 1
    for k in range(L, 0, -1):   # rightmost segment first: moves never collide
        a = (empties[k - 2] if k >= 2 else lo) + 1
        b = empties[k - 1]
        if b > a:
            _shift_right(slots, run, a, b, L - k + 1)
            moved += b - a
    far_out[0] = empties[L - 1]
    return moved


cdef int _find_run_c(uint64_t *occ, uint64_t *run, int32_t *offsets,
                     int64_t phys, int64_t quotient, int64_t *start_out,
                     int64_t *end_out) noexcept nogil:
    """Run interval of a quotient; 0 with outputs set (absent -> -1/-1), or
    _INVARIANT when the runend scan exceeds the region bound."""
    cdef int64_t h = quotient >> _REGION_BITS
    cdef int64_t hard = (h + 2) << _REGION_BITS
    cdef int64_t s_h, k, base, prev_end, end
    if phys < hard:
        hard = phys
    if not _get_bit(occ, quotient):
        start_out[0] = -1
        end_out[0] = -1
        return 0
    s_h = h << _REGION_BITS
    k = _popcnt_range(occ, s_h, quotient + 1)
    base = s_h + offsets[h] - 1
    prev_end = base if k == 1 else _select_after(run, base, k - 1, hard)
    end = _select_after(run, base, k, hard)
    if prev_end == -2 or end == -2:
        return _INVARIANT
    start_out[0] = quotient if quotient > prev_end + 1 else prev_end + 1
    end_out[0] = end
    return 0


def gqf_find_run(uint64_t[::1] occ, uint64_t[::1] run, int32_t[::1] offsets,
                 int q, int64_t quotient):
    """Slot interval [start, end] of a quotient's run; (-1, -1) when absent."""
    cdef int64_t s, e
    if _find_run_c(&occ[0], &run[0], &offsets[0], run.shape[0] << 6,
                   quotient, &s, &e) == _INVARIANT:
        raise RuntimeError("runend scan exceeded region bound (invariant violation)")
    return (s, e)


cdef int _parse_group(slot_t *slots, int64_t i, int64_t end, int r,
                      uint64_t *rem_out, uint64_t *cnt_out,
                      int64_t *next_out) noexcept nogil:
    """Parse the count group at slot i of a run ending at end.

    Same encoding as filterkit.countgroups.parse_group; returns 0 or
    _INVARIANT for an unterminated counted form.
    """
    cdef uint64_t h = slots[i]
    cdef int64_t j
    cdef uint64_t v, d0, rest, scale, base, d
    if h == 0:
        j = i
        while j <= end and slots[j] == 0:
            j += 1
        rem_out[0] = 0
        cnt_out[0] = <uint64_t> (j - i)
        next_out[0] = j
        return 0
    if i == end:
        rem_out[0] = h
        cnt_out[0] = 1
        next_out[0] = i + 1
        return 0
    v = slots[i + 1]
    if v > h:
        rem_out[0] = h
        cnt_out[0] = 1
        next_out[0] = i + 1
        return 0
    if v == h:
        rem_out[0] = h
        cnt_out[0] = 2
        next_out[0] = i + 2
        return 0
    d0 = v
    j = i + 2
    rest = 0
    scale = 1
    base = (<uint64_t> 1 << r) - 1
    while True:
        if j > end:
            return _INVARIANT
        d = slots[j]
        if d == h:
            break
        rest += scale * (d - 1 if d > h else d)
        scale *= base
        j += 1
    rem_out[0] = h
    cnt_out[0] = d0 + h * rest + 2
    next_out[0] = j + 1
    return 0


cdef int _locate_group(slot_t *slots, int r, int64_t start, int64_t end,
                       uint64_t rem, int64_t *gs_out, int64_t *ge_out,
                       uint64_t *c_out, int64_t *sp_out) noexcept nogil:
    """Find rem's group inside a run.

    gs_out is -1 when absent and sp_out is where a new group should go.
    Returns 0, or _INVARIANT on a malformed group.
    """
    cdef int64_t i = start
    cdef uint64_t h, c
    cdef int64_t nx
    gs_out[0] = -1
    ge_out[0] = -1
    c_out[0] = 0
    sp_out[0] = -1
    while i <= end:
        if _parse_group(slots, i, end, r, &h, &c, &nx) == _INVARIANT:
            return _INVARIANT
        if h == rem:
            gs_out[0] = i
            ge_out[0] = nx - 1
            c_out[0] = c
            return 0
        if h > rem:
            sp_out[0] = i
            return 0
        i = nx
    sp_out[0] = end + 1
    return 0


cdef int _recompute_offset(uint64_t *occ, uint64_t *run, int32_t *offsets,
                           int64_t h, int64_t phys) noexcept nogil:
    """offsets[h] := spill of runs from regions < h into region h."""
    cdef int64_t b = h << _REGION_BITS
    cdef int64_t hard = (h + 1) << _REGION_BITS
    cdef int64_t e, off
    if phys < hard:
        hard = phys
    e = _run_end_local(occ, run, offsets, b - 1, hard)
    if e == -2:
        return _INVARIANT
    off = e - b + 1
    offsets[h] = <int32_t> (off if off > 0 else 0)
    return 0


cdef int64_t _encode_len(uint64_t rem, uint64_t count, int r) noexcept nogil:
    """Number of slots the count group for (rem, count) occupies."""
    cdef uint64_t v, base
    cdef int64_t n
    if rem == 0:
        return <int64_t> count
    if count == 1:
        return 1
    if count == 2:
        return 2
    v = (count - 2) / rem
    n = 3   # opening rem, d0, closing rem
    base = (<uint64_t> 1 << r) - 1
    while v:
        n += 1
        v /= base
    return n


cdef void _encode_into(slot_t *slots, int64_t pos, uint64_t rem,
                       uint64_t count, int r) noexcept nogil:
    """Write the count group for (rem, count) at pos; every slot is written."""
    cdef int64_t i
    cdef uint64_t v, base, d
    if rem == 0:
        for i in range(<int64_t> count):
            slots[pos + i] = 0
        return
    if count == 1:
        slots[pos] = <slot_t> rem
        return
    if count == 2:
        slots[pos] = <slot_t> rem
        slots[pos + 1] = <slot_t> rem
        return
    v = count - 2
    slots[pos] = <slot_t> rem
    slots[pos + 1] = <slot_t> (v % rem)
    v /= rem
    base = (<uint64_t> 1 << r) - 1
    i = pos + 2
    while v:
        d = v % base
        v /= base
        slots[i] = <slot_t> (d + 1 if d >= rem else d)
        i += 1
    slots[i] = <slot_t> rem


cdef int _gqf_insert_one(slot_t *slots, uint64_t *occ, uint64_t *run,
                         int32_t *offsets, int64_t *stats, int64_t phys,
                         int q, int r, int64_t max_occupied, uint64_t fp,
                         uint64_t delta, int64_t *empties,
                         int64_t *shifted_out) noexcept nogil:
    """Insert `delta` copies of one fingerprint; returns a GQF code."""
    cdef uint64_t rmask = (<uint64_t> 1 << r) - 1
    cdef int64_t quot = <int64_t> (fp >> r)
    cdef uint64_t rem = fp & rmask
    cdef int64_t g = quot >> _REGION_BITS
    cdef int64_t hard = (g + 2) << _REGION_BITS
    cdef int64_t shifted = 0, far = 0, touched_end = 0
    cdef int64_t e, pos, L, start, end, gs, ge, sp, L_old, diff, boundary
    cdef uint64_t c
    shifted_out[0] = 0
    if phys < hard:
        hard = phys
    if stats[0] >= max_occupied:
        return _GQF_LOAD_CAPACITY

    if not _get_bit(occ, quot):
        e = _run_end_local(occ, run, offsets, quot, hard)
        if e == -2:
            return _GQF_SHIFT_BOUND
        pos = quot if quot > e + 1 else e + 1
        L = _encode_len(rem, delta, r)
        shifted = _open_gap(slots, occ, run, offsets, pos, L, hard, empties, &far)
        if shifted < 0:
            return _GQF_SHIFT_BOUND
        _encode_into(slots, pos, rem, delta, r)
        _set_bit(occ, quot, 1)
        _set_bit(run, pos + L - 1, 1)
        touched_end = far + 1
        fk_atomic_add64(&stats[0], L)
        fk_atomic_add64(&stats[1], <int64_t> delta)
        fk_atomic_add64(&stats[2], 1)
    else:
        if _find_run_c(occ, run, offsets, phys, quot, &start, &end) == _INVARIANT:
            return _INVARIANT
        if _locate_group(slots, r, start, end, rem, &gs, &ge, &c, &sp) == _INVARIANT:
            return _INVARIANT
        if gs >= 0:
            L = _encode_len(rem, c + delta, r)
            L_old = ge - gs + 1
            diff = L - L_old
            if diff > 0:
                shifted = _open_gap(slots, occ, run, offsets, ge + 1, diff,
                                    hard, empties, &far)
                if shifted < 0:
                    return _GQF_SHIFT_BOUND
                if ge == end:
                    # group was last in run: its runend bit sat outside the
                    # shifted window, move it by hand
                    _set_bit(run, end, 0)
                    _set_bit(run, end + diff, 1)
                touched_end = far + 1
            else:
                touched_end = 0
            _encode_into(slots, gs, rem, c + delta, r)
            fk_atomic_add64(&stats[0], diff)
            fk_atomic_add64(&stats[1], <int64_t> delta)
        else:
            L = _encode_len(rem, delta, r)
            shifted = _open_gap(slots, occ, run, offsets, sp, L, hard,
                                empties, &far)
            if shifted < 0:
                return _GQF_SHIFT_BOUND
            _encode_into(slots, sp, rem, delta, r)
            if sp == end + 1:
                _set_bit(run, end, 0)
                _set_bit(run, end + L, 1)
            touched_end = far + 1
            fk_atomic_add64(&stats[0], L)
            fk_atomic_add64(&stats[1], <int64_t> delta)
            fk_atomic_add64(&stats[2], 1)

    boundary = (g + 1) << _REGION_BITS
    if boundary < phys and touched_end > boundary:
        if _recompute_offset(occ, run, offsets, g + 1, phys) == _INVARIANT:
            return _INVARIANT
    shifted_out[0] = shifted
    return _GQF_OK


cdef int _remove_slots(slot_t *slots, uint64_t *occ, uint64_t *run,
                       int64_t quot, int64_t start, int64_t end, int64_t rs,
                       int64_t re, int64_t hard, int64_t *shift_out,
                       int64_t *last_out) noexcept nogil:
    """Remove slots [rs, re] from quot's run, left-compacting the cluster.

    Subsequent runs move left until one lands on its canonical slot.  Freed
    slots are zeroed and their runend bits cleared.  Writes (slots moved,
    furthest old slot touched), or returns _INVARIANT when the walk would
    leave the locked window.
    """
    cdef int64_t L = re - rs + 1
    cdef bint run_emptied = L == (end - start + 1)
    cdef int64_t shifted = 0
    cdef int64_t tail = end - re
    cdef int64_t i, write_pos, prev_old_end, last_old_end, nq, s2, e2, new_s2, n2
    if tail:
        for i in range(tail):
            slots[rs + i] = slots[re + 1 + i]
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
            return _INVARIANT
        new_s2 = nq if nq > write_pos else write_pos
        if new_s2 == s2:
            break
        if new_s2 > write_pos:
            # run lands on its canonical slot, not flush against the previous
            # one: the positions skipped over are freed here and never touched
            # again, so clear them now
            for i in range(write_pos, new_s2):
                slots[i] = 0
                _set_bit(run, i, 0)
        n2 = e2 - s2 + 1
        for i in range(n2):
            slots[new_s2 + i] = slots[s2 + i]
        _set_bit(run, e2, 0)
        _set_bit(run, new_s2 + n2 - 1, 1)
        shifted += n2
        write_pos = new_s2 + n2
        prev_old_end = e2
        last_old_end = e2
    if write_pos <= last_old_end:
        for i in range(write_pos, last_old_end + 1):
            slots[i] = 0
            _set_bit(run, i, 0)
    shift_out[0] = shifted
    last_out[0] = last_old_end
    return 0


cdef int _gqf_delete_one(slot_t *slots, uint64_t *occ, uint64_t *run,
                         int32_t *offsets, int64_t *stats, int64_t phys,
                         int q, int r, uint64_t fp, uint64_t delta,
                         int *found_out, int64_t *shifted_out) noexcept nogil:
    """Remove up to `delta` copies of one fingerprint."""
    cdef uint64_t rmask = (<uint64_t> 1 << r) - 1
    cdef int64_t quot = <int64_t> (fp >> r)
    cdef uint64_t rem = fp & rmask
    cdef int64_t g = quot >> _REGION_BITS
    cdef int64_t hard = (g + 2) << _REGION_BITS
    cdef int64_t start, end, gs, ge, sp, rs, re, diff, L2, boundary
    cdef int64_t shifted, last_old_end
    cdef uint64_t c, take, c2
    found_out[0] = 0
    shifted_out[0] = 0
    if phys < hard:
        hard = phys
    if not _get_bit(occ, quot):
        return _GQF_OK
    if _find_run_c(occ, run, offsets, phys, quot, &start, &end) == _INVARIANT:
        return _INVARIANT
    if _locate_group(slots, r, start, end, rem, &gs, &ge, &c, &sp) == _INVARIANT:
        return _INVARIANT
    if gs < 0:
        return _GQF_OK
    take = delta if delta < c else c
    c2 = c - take
    if c2 > 0:
        L2 = _encode_len(rem, c2, r)
        diff = (ge - gs + 1) - L2
        _encode_into(slots, gs, rem, c2, r)
        fk_atomic_add64(&stats[1], -<int64_t> take)
        if diff == 0:
            found_out[0] = 1
            return _GQF_OK
        rs = gs + L2
        re = ge
    else:
        fk_atomic_add64(&stats[1], -<int64_t> take)
        fk_atomic_add64(&stats[2], -1)
        rs = gs
        re = ge
    if _remove_slots(slots, occ, run, quot, start, end, rs, re, hard,
                     &shifted, &last_old_end) == _INVARIANT:
        return _INVARIANT
    fk_atomic_add64(&stats[0], -(re - rs + 1))
    boundary = (g + 1) << _REGION_BITS
    if boundary < phys and last_old_end >= boundary:
        if _recompute_offset(occ, run, offsets, g + 1, phys) == _INVARIANT:
            return _INVARIANT
    found_out[0] = 1
    shifted_out[0] = shifted
    return _GQF_OK


def gqf_insert_batch(slot_t[::1] slots, uint64_t[::1] occ, uint64_t[::1] run,
                     int32_t[::1] offsets, int64_t[::1] stats,
                     int32_t[::1] locks, int q, int r, int64_t max_occupied,
                     bint use_locks, uint64_t[::1] fps, uint64_t[::1] deltas,
                     int64_t[::1] shift_out):
    """Insert a batch of fingerprints.

    Returns (code, fail_index): code 0 on success, else the first failing
    item's capacity code with its index.  shift_out[0] accumulates moved
    slots (shift-work instrumentation).
    """
    cdef int64_t n = fps.shape[0]
    if n == 0:
        return GQF_OK, -1
    cdef slot_t *sl = &slots[0]
    cdef uint64_t *op = &occ[0]
    cdef uint64_t *rp = &run[0]
    cdef int32_t *fo = &offsets[0]
    cdef int64_t *st = &stats[0]
    cdef int32_t *lk = &locks[0]
    cdef int64_t nr = locks.shape[0] // _LOCK_STRIDE
    cdef int64_t phys = slots.shape[0]
    cdef int64_t *empties = <int64_t *> malloc(_EMPTIES_CAP * sizeof(int64_t))
    if empties == NULL:
        raise MemoryError()
    cdef int64_t k, g, g2, total = 0, fail_idx = -1, shifted_one = 0
    cdef int code = _GQF_OK
    with nogil:
        for k in range(n):
            if use_locks:
                g = (<int64_t> (fps[k] >> r)) >> _REGION_BITS
                g2 = g + 1 if g + 1 < nr - 1 else nr - 1
                fk_spin_lock(&lk[g * _LOCK_STRIDE])
                if g2 != g:
                    fk_spin_lock(&lk[g2 * _LOCK_STRIDE])
                code = _gqf_insert_one(sl, op, rp, fo, st, phys, q, r,
                                       max_occupied, fps[k], deltas[k],
                                       empties, &shifted_one)
                if g2 != g:
                    fk_spin_unlock(&lk[g2 * _LOCK_STRIDE])
                fk_spin_unlock(&lk[g * _LOCK_STRIDE])
            else:
                code = _gqf_insert_one(sl, op, rp, fo, st, phys, q, r,
                                       max_occupied, fps[k], deltas[k],
                                       empties, &shifted_one)
            if code != _GQF_OK:
                fail_idx = k
                break
            total += shifted_one
    free(empties)
    if code == _INVARIANT:
        raise RuntimeError("runend scan exceeded region bound (invariant violation)")
    shift_out[0] += total
    if code != _GQF_OK:
        return code, fail_idx
    return GQF_OK, -1


def gqf_count_batch(slot_t[::1] slots, uint64_t[::1] occ, uint64_t[::1] run,
                    int32_t[::1] offsets, int32_t[::1] locks, int q, int r,
                    bint use_locks, uint64_t[::1] fps, uint64_t[::1] counts):
    """Exact-or-over count lookups for a batch of fingerprints."""
    cdef int64_t n = fps.shape[0]
    if n == 0:
        return
    cdef slot_t *sl = &slots[0]
    cdef uint64_t *op = &occ[0]
    cdef uint64_t *rp = &run[0]
    cdef int32_t *fo = &offsets[0]
    cdef int32_t *lk = &locks[0]
    cdef int64_t nr = locks.shape[0] // _LOCK_STRIDE
    cdef int64_t phys = slots.shape[0]
    cdef uint64_t rmask = (<uint64_t> 1 << r) - 1
    cdef int64_t k, quot, g, g2, start, end, gs, ge, sp
    cdef uint64_t fp, rem, c
    cdef int code = _GQF_OK
    with nogil:
        for k in range(n):
            fp = fps[k]
            quot = <int64_t> (fp >> r)
            rem = fp & rmask
            g = quot >> _REGION_BITS
            g2 = g + 1 if g + 1 < nr - 1 else nr - 1
            if use_locks:
                fk_spin_lock(&lk[g * _LOCK_STRIDE])
                if g2 != g:
                    fk_spin_lock(&lk[g2 * _LOCK_STRIDE])
            if not _get_bit(op, quot):
                counts[k] = 0
            else:
                code = _find_run_c(op, rp, fo, phys, quot, &start, &end)
                if code == _GQF_OK:
                    code = _locate_group(sl, r, start, end, rem,
                                         &gs, &ge, &c, &sp)
                if code == _GQF_OK:
                    counts[k] = c if gs >= 0 else 0
            if use_locks:
                if g2 != g:
                    fk_spin_unlock(&lk[g2 * _LOCK_STRIDE])
                fk_spin_unlock(&lk[g * _LOCK_STRIDE])
            if code != _GQF_OK:
                break
    if code == _INVARIANT:
        raise RuntimeError("runend scan exceeded region bound (invariant violation)")


def gqf_delete_batch(slot_t[::1] slots, uint64_t[::1] occ, uint64_t[::1] run,
                     int32_t[::1] offsets, int64_t[::1] stats,
                     int32_t[::1] locks, int q, int r, bint use_locks,
                     uint64_t[::1] fps, uint64_t[::1] deltas,
                     uint8_t[::1] found, int64_t[::1] shift_out):
    """Delete a batch; fills per-item found flags, accumulates shift work."""
    cdef int64_t n = fps.shape[0]
    if n == 0:
        return GQF_OK, -1
    cdef slot_t *sl = &slots[0]
    cdef uint64_t *op = &occ[0]
    cdef uint64_t *rp = &run[0]
    cdef int32_t *fo = &offsets[0]
    cdef int64_t *st = &stats[0]
    cdef int32_t *lk = &locks[0]
    cdef int64_t nr = locks.shape[0] // _LOCK_STRIDE
    cdef int64_t phys = slots.shape[0]
    cdef int64_t k, g, g2, total = 0, shifted_one = 0
    cdef int ok = 0
    cdef int code = _GQF_OK
    with nogil:
        for k in range(n):
            if use_locks:
                g = (<int64_t> (fps[k] >> r)) >> _REGION_BITS
                g2 = g + 1 if g + 1 < nr - 1 else nr - 1
                fk_spin_lock(&lk[g * _LOCK_STRIDE])
                if g2 != g:
                    fk_spin_lock(&lk[g2 * _LOCK_STRIDE])
                code = _gqf_delete_one(sl, op, rp, fo, st, phys, q, r,
                                       fps[k], deltas[k], &ok, &shifted_one)
                if g2 != g:
                    fk_spin_unlock(&lk[g2 * _LOCK_STRIDE])
                fk_spin_unlock(&lk[g * _LOCK_STRIDE])
            else:
                code = _gqf_delete_one(sl, op, rp, fo, st, phys, q, r,
                                       fps[k], deltas[k], &ok, &shifted_one)
            if code != _GQF_OK:
                break
            found[k] = <uint8_t> ok
            total += shifted_one
    if code == _INVARIANT:
        raise RuntimeError("delete compaction exceeded region bound (invariant violation)")
    shift_out[0] += total
    return GQF_OK, -1
