"""Workload generation and false-positive measurement for the benchmark CLI.

Key streams are the 64-bit mixer applied to seeded counter windows: the mixer
is a bijection, so a window of distinct counters yields exactly-distinct keys,
and two windows with different random bases collide with negligible
probability.  Draw counts, shuffles, and Zipf uniforms come from numpy's
seeded PCG64 generator; the specific generator does not matter because every
emitted key is re-mixed.
"""

from dataclasses import dataclass

import numpy as np

from .hashing import MASK64, mix64, mix64_many

_TAG_UNIFORM = 0x5851F42D4C957F2D
_TAG_BASES = 0x14057B7EF767814F
_TAG_ZIPF = 0x27BB2EE687B0B0FD
_TAG_FPR = 0xB504F32D4F2D8C21


def counter_stream(seed, tag, n):
    """n distinct 64-bit keys: mixed counters from a (seed, tag) window."""
    base = mix64((seed ^ tag) & MASK64)
    return mix64_many((base + np.arange(n, dtype=np.uint64)) & np.uint64(MASK64))


@dataclass(frozen=True)
class WorkloadSpec:
    """A reproducible key stream: same spec -> identical stream."""

    dist: str                  # uniform | ur_count | zipf | kmer
    n: int = 0                 # uniform: keys; ur_count: distinct bases; zipf: draws
    seed: int = 0
    zipf_s: float = 1.5
    count_max: int = 100       # ur_count: counts drawn from Uniform{1..count_max}
    kmer_k: int = 28
    kmer_file: str = None
    universe: int = None       # zipf ranks span [1, universe]; defaults to n

    def __post_init__(self):
        if self.dist not in ("uniform", "ur_count", "zipf", "kmer"):
            raise ValueError("unknown distribution %r" % (self.dist,))
        if self.dist != "kmer" and self.n < 1:
            raise ValueError("n must be positive")
        if self.dist == "zipf":
            if self.zipf_s <= 0:
                raise ValueError("zipf_s must be positive")
            if (self.universe or self.n) < 1:
                raise ValueError("universe must be positive")
        if self.dist == "ur_count" and self.count_max < 1:
            raise ValueError("count_max must be positive")
        if self.dist == "kmer":
            if not self.kmer_file:
                raise ValueError("kmer distribution needs kmer_file")
            if not 1 <= self.kmer_k <= 32:
                raise ValueError("kmer_k must be in [1, 32] (2-bit packed in 64 bits)")


def gen_keys(spec):
    """Materialize the spec's key stream as a uint64 array."""
    if spec.dist == "uniform":
        return counter_stream(spec.seed, _TAG_UNIFORM, spec.n)
    if spec.dist == "ur_count":
        bases = counter_stream(spec.seed, _TAG_BASES, spec.n)
        rng = np.random.default_rng(mix64((spec.seed ^ _TAG_BASES) & MASK64))
        counts = rng.integers(1, spec.count_max + 1, spec.n)
        stream = np.repeat(bases, counts)
        rng.shuffle(stream)
        return stream
    if spec.dist == "zipf":
        universe = spec.universe or spec.n
        rng = np.random.default_rng(mix64((spec.seed ^ _TAG_ZIPF) & MASK64))
        ranks = zipf_bounded(rng, spec.zipf_s, universe, spec.n)
        base = mix64((spec.seed ^ _TAG_ZIPF ^ 0xA5A5A5A5A5A5A5A5) & MASK64)
        return mix64_many((np.uint64(base) + ranks.astype(np.uint64)) & np.uint64(MASK64))
    return kmer_windows(spec.kmer_file, spec.kmer_k)


# -- bounded Zipf by rejection inversion ------------------------------------
#
# Hormann & Derflinger's rejection-inversion sampler: invert the integral of
# the hat function h(x) = x^-s and accept with the exact mass.  Acceptance is
# near 1, so the vectorized retry loop converges in a couple of rounds.

def _h_integral(x, s):
    # integral of t^-s from 1 to x, written as expm1 for stability near s=1
    logx = np.log(x)
    t = (1.0 - s) * logx
    small = np.abs(t) < 1e-8
    ratio = np.where(small, 1.0 + t / 2.0, np.expm1(t) / np.where(t == 0, 1.0, t))
    return ratio * logx


def _h_integral_inverse(x, s):
    t = x * (1.0 - s)
    t = np.maximum(t, -1.0)
    small = np.abs(t) < 1e-8
    ratio = np.where(small, 1.0 - t / 2.0, np.log1p(t) / np.where(t == 0, 1.0, t))
    return np.exp(ratio * x)


def zipf_bounded(rng, s, universe, n):
    """n ranks from [1, universe] with P(rank k) proportional to k^-s."""
    lo = _h_integral(np.array(1.5), s) - 1.0
    hi = _h_integral(np.array(universe + 0.5), s)
    s0 = 2.0 - float(_h_integral_inverse(
        _h_integral(np.array(2.5), s) - 2.0 ** -s, s))
    out = np.empty(n, dtype=np.int64)
    todo = np.arange(n)
    while len(todo):
        u = hi + rng.random(len(todo)) * (lo - hi)
        x = _h_integral_inverse(u, s)
        k = np.clip(np.floor(x + 0.5).astype(np.int64), 1, universe)
        accept = (k - x <= s0) | (u >= _h_integral(k + 0.5, s) - np.power(k, -s))
        out[todo[accept]] = k[accept]
        todo = todo[~accept]
    return out


# -- k-mer extraction --------------------------------------------------------

_BASE_CODE = np.full(256, -1, dtype=np.int8)
for _i, _b in enumerate(b"ACGT"):
    _BASE_CODE[_b] = _i
    _BASE_CODE[_b + 32] = _i      # lowercase

_KMER_CHUNK = 1 << 20


def _windows_of(codes, k, out):
    """Append the 2-bit packed values of all valid k-windows of one read."""
    m = len(codes) - k + 1
    if m <= 0:
        return
    bad = np.concatenate(([0], np.cumsum(codes < 0)))
    weights = (np.uint64(1) << (np.uint64(2) * np.arange(k - 1, -1, -1, dtype=np.uint64)))
    for lo in range(0, m, _KMER_CHUNK):
        hi = min(lo + _KMER_CHUNK, m)
        win = np.lib.stride_tricks.sliding_window_view(codes[lo:hi + k - 1], k)
        vals = (win.astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64)
        valid = (bad[lo + k:hi + k] - bad[lo:hi]) == 0
        out.append(vals[valid])


def kmer_windows(path, k):
    """All overlapping k-length windows of the sequences in a FASTA/FASTQ file.

    Header lines ('>' or '@') and quality lines (the line after '+') are
    skipped; windows containing a non-ACGT character are dropped; windows
    never span record boundaries.  Raises ValueError when no read is at
    least k bases long.
    """
    if not 1 <= k <= 32:
        raise ValueError("k must be in [1, 32]")
    chunks = []
    parts = []
    longest = 0

    def flush():
        nonlocal longest
        if parts:
            codes = _BASE_CODE[np.frombuffer(
                b"".join(parts), dtype=np.uint8)]
            longest = max(longest, len(codes))
            _windows_of(codes, k, chunks)
            parts.clear()

    with open(path, "rb") as fh:
        skip_next = False
        for line in fh:
            line = line.rstrip(b"\r\n")
            if skip_next:
                skip_next = False
                continue
            if not line:
                continue
            if line[:1] in (b">", b"@"):
                flush()
                continue
            if line[:1] == b"+":
                skip_next = True
                continue
            parts.append(line)
    flush()
    if not chunks or not any(len(c) for c in chunks):
        raise ValueError(
            "no %d-mer fits any read in %s (longest read: %d bases)"
            % (k, path, longest))
    return np.concatenate(chunks)


# -- false-positive measurement ----------------------------------------------

def contains_many(filt, keys):
    """Membership vector via whichever batch probe the filter exposes."""
    if hasattr(filt, "count_many"):
        return filt.count_many(keys) >= 1
    if hasattr(filt, "query_batch"):
        return filt.query_batch(keys)
    return filt.query_many(keys)


def measure_fpr(filt, m, seed):
    """Positive fraction over m keys from a stream disjoint from gen_keys'."""
    fresh = counter_stream(seed, _TAG_FPR, m)
    return float(contains_many(filt, fresh).sum()) / m
