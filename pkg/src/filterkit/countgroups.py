"""Variable-length count groups: run-slot encoding of (remainder, count).

A run in the counting quotient filter stores one group per distinct
remainder, in ascending remainder order.  Each group is a sequence of r-bit
slot words:

* count 1                -> ``[rem]``
* count 2                -> ``[rem, rem]``
* count >= 3, rem >= 1   -> ``[rem, d0, d1.., rem]`` where the payload digits
  encode ``V = count - 2`` in a mixed radix: ``d0 = V % rem`` (always below
  rem, so it can never be mistaken for the closing delimiter) and the
  remaining little-endian digits encode ``V // rem`` in base ``2**r - 1``,
  each stored as ``d + 1`` when ``d >= rem`` so no payload word equals rem.
* rem == 0               -> ``[0] * count`` (unary; zero payload digits are
  indistinguishable from a zero delimiter, so runs of remainder 0 spend one
  slot per copy).

Decoding is local: at a group head ``h``, the next word being greater starts
a new group, equal means a pair (or unary continuation for ``h == 0``), and
smaller opens a counted form that runs to the closing ``h``.
"""

from __future__ import annotations

__all__ = ["encode_group", "encoded_length", "parse_group", "decode_run"]


def encode_group(rem, count, r):
    """Slot words for a group of `count` copies of remainder `rem`."""
    if count <= 0:
        raise ValueError("count must be positive")
    if not 0 <= rem < (1 << r):
        raise ValueError("remainder out of range for r=%d" % r)
    if rem == 0:
        return [0] * count
    if count == 1:
        return [rem]
    if count == 2:
        return [rem, rem]
    v = count - 2
    digits = [v % rem]
    v //= rem
    base = (1 << r) - 1
    while v:
        digits.append(v % base)
        v //= base
    words = [rem, digits[0]]
    for d in digits[1:]:
        words.append(d + 1 if d >= rem else d)
    words.append(rem)
    return words


def encoded_length(rem, count, r):
    """Number of slots `encode_group` would emit (O(log count) arithmetic)."""
    if count <= 0:
        raise ValueError("count must be positive")
    if rem == 0 or count <= 2:
        return count if rem == 0 else (1 if count == 1 else 2)
    v = (count - 2) // rem
    n = 3  # opening rem, d0, closing rem
    base = (1 << r) - 1
    while v:
        n += 1
        v //= base
    return n


def parse_group(slots, i, end, r):
    """Parse the group starting at slot index i of a run ending at `end`.

    `slots` is any integer-indexable sequence of slot words.  Returns
    (remainder, count, next_index).
    """
    h = int(slots[i])
    if h == 0:
        j = i
        while j <= end and int(slots[j]) == 0:
            j += 1
        return 0, j - i, j
    if i == end:
        return h, 1, i + 1
    v = int(slots[i + 1])
    if v > h:
        return h, 1, i + 1
    if v == h:
        return h, 2, i + 2
    d0 = v
    j = i + 2
    rest = 0
    scale = 1
    base = (1 << r) - 1
    while True:
        if j > end:
            raise ValueError("unterminated count group at slot %d" % i)
        d = int(slots[j])
        if d == h:
            break
        rest += scale * (d - 1 if d > h else d)
        scale *= base
        j += 1
    return h, d0 + h * rest + 2, j + 1


def decode_run(slots, start, end, r):
    """All (remainder, count) groups of the run occupying [start, end]."""
    out = []
    i = start
    while i <= end:
        rem, count, i = parse_group(slots, i, end, r)
        out.append((rem, count))
    return out
