"""Fingerprinting and slot-word helpers shared by every filter in the package.

All filters hash 64-bit integer keys through one fixed avalanche mixer and
derive everything else (block choices, quotient/remainder splits, backing-table
probe schedules, stored tags) from the resulting fingerprint.  Keeping the
derivations in one module means the point and bulk code paths can never
disagree about where a key lives.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

# Sentinel slot words.  A stored word never equals either of these.
EMPTY = 0
TOMBSTONE = 1

# Derivation constants: distinct odd 64-bit constants xored into the
# fingerprint before re-mixing, one per derived stream.
_C_BLOCK1 = 0x9E3779B97F4A7C15
_C_BLOCK2 = 0xC2B2AE3D27D4EB4F
_C_BACK_START = 0x165667B19E3779F9
_C_BACK_STEP = 0x27D4EB2F165667C5


def mix64(x: int) -> int:
    """One 64-bit avalanche round (xorshift-multiply finalizer)."""
    x &= MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & MASK64
    x ^= x >> 31
    return x


def mix64_many(arr: np.ndarray) -> np.ndarray:
    """Vectorized :func:`mix64` over a uint64 array."""
    x = np.ascontiguousarray(arr, dtype=np.uint64).copy()
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


def fingerprint(key: int, seed: int = 0, bits: int = 64) -> int:
    """Hash a 64-bit key into a ``bits``-wide fingerprint.

    Args:
        key: integer key (taken mod 2^64).
        seed: stream selector; different seeds give independent fingerprints.
        bits: output width, 1..64.

    Returns:
        The low ``bits`` bits of the mixed value.
    """
    if not 1 <= bits <= 64:
        raise ValueError(f"fingerprint width must be 1..64, got {bits}")
    return mix64((key ^ seed) & MASK64) & ((1 << bits) - 1) if bits < 64 else mix64((key ^ seed) & MASK64)


def fingerprint_many(keys: np.ndarray, seed: int = 0, bits: int = 64) -> np.ndarray:
    """Vectorized :func:`fingerprint` returning a uint64 array."""
    if not 1 <= bits <= 64:
        raise ValueError(f"fingerprint width must be 1..64, got {bits}")
    fp = mix64_many(np.asarray(keys, dtype=np.uint64) ^ np.uint64(seed & MASK64))
    if bits < 64:
        fp &= np.uint64((1 << bits) - 1)
    return fp


def split_fingerprint(fp: int, q: int, r: int) -> tuple[int, int]:
    """Split a (q+r)-bit fingerprint into (quotient, remainder).

    The quotient is the top q bits, the remainder the low r bits; the split is
    lossless: ``(quotient << r) | remainder == fp``.
    """
    if q + r > 64:
        raise ValueError(f"q + r must be <= 64, got {q}+{r}")
    return (fp >> r) & ((1 << q) - 1), fp & ((1 << r) - 1)


def join_fingerprint(quotient: int, remainder: int, r: int) -> int:
    """Inverse of :func:`split_fingerprint`."""
    return (quotient << r) | remainder


def potc_pair(fp: int, num_blocks: int) -> tuple[int, int]:
    """Derive the two candidate block indices for a fingerprint.

    Both choices come from independent re-mixes of the fingerprint; they may
    coincide (that degenerate case is tolerated by the insert logic).
    """
    return mix64(fp ^ _C_BLOCK1) % num_blocks, mix64(fp ^ _C_BLOCK2) % num_blocks


def potc_pair_many(fps: np.ndarray, num_blocks: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`potc_pair`."""
    fps = np.asarray(fps, dtype=np.uint64)
    b1 = mix64_many(fps ^ np.uint64(_C_BLOCK1)) % np.uint64(num_blocks)
    b2 = mix64_many(fps ^ np.uint64(_C_BLOCK2)) % np.uint64(num_blocks)
    return b1, b2


def backing_schedule(fp: int, size: int) -> tuple[int, int]:
    """Double-hashing probe schedule for the backing table.

    Returns (start, step) with step forced odd; probe i visits
    ``(start + i*step) % size``.
    """
    start = mix64(fp ^ _C_BACK_START) % size
    step = (mix64(fp ^ _C_BACK_STEP) | 1) % size
    return start, step


def remap_tag(tag: int) -> int:
    """Remap tags that would collide with sentinel words.

    Tags 0 and 1 have bit 1 forced (0 -> 2, 1 -> 3) so a packed slot word can
    never equal EMPTY or TOMBSTONE.  Applied identically at insert and query
    time; costs 2 of the 2^f tag values.
    """
    return tag | 2 if tag < 2 else tag


def remap_tag_many(tags: np.ndarray) -> np.ndarray:
    """Vectorized :func:`remap_tag`."""
    return np.where(tags < 2, tags | np.uint64(2), tags).astype(np.uint64)


def pack_slot(tag: int, value: int, f: int, w: int) -> int:
    """Pack a (tag, value) pair into one w-bit slot word.

    The tag occupies the low f bits (after sentinel remap), the value the
    remaining w - f bits.

    Raises:
        ValueError: if the tag is wider than f bits or the value wider than
            w - f bits.
    """
    if tag >> f:
        raise ValueError(f"tag {tag:#x} wider than {f} bits")
    if value >> (w - f):
        raise ValueError(f"value {value:#x} wider than {w - f} bits")
    return (value << f) | remap_tag(tag)


def unpack_slot(word: int, f: int) -> tuple[int, int]:
    """Split a slot word back into (remapped tag, value)."""
    return word & ((1 << f) - 1), word >> f
