#!/usr/bin/env python3
"""Throughput comparison between the compiled and pure-Python kernel backends.

Runs the hot path of each filter on both backends over identical key streams
and reports ops/second plus the compiled-over-pure speedup.  Inserts build a
fresh filter per repeat; queries run against the filled filter.  The best of
the repeats is reported to damp scheduler noise.

Usage:
    python benchmarks/compare_backends.py [--log-slots N] [--load F]
                                          [--repeats K] [--seed S]
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from filterkit import BulkTcf, Gqf, Tcf, available_backends
from filterkit.workloads import counter_stream


def _best(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_point_tcf(backend, keys, log_slots, repeats):
    num_blocks = (1 << log_slots) // 16

    def build():
        filt = Tcf(num_blocks=num_blocks, backend=backend)
        filt.insert_many(keys)
        return filt

    insert_s = _best(build, repeats)
    filt = build()
    query_s = _best(lambda: filt.query_many(keys), repeats)
    return insert_s, query_s


def bench_bulk_tcf(backend, keys, log_slots, repeats):
    num_blocks = (1 << log_slots) // 128

    def build():
        filt = BulkTcf(num_blocks=num_blocks, backend=backend)
        filt.insert_batch(keys)
        return filt

    insert_s = _best(build, repeats)
    filt = build()
    query_s = _best(lambda: filt.query_batch(keys), repeats)
    return insert_s, query_s


def bench_gqf(backend, keys, log_slots, repeats):
    def build():
        filt = Gqf(q=log_slots, r=8, backend=backend)
        filt.insert_many(keys)
        return filt

    insert_s = _best(build, repeats)
    filt = build()
    count_s = _best(lambda: filt.count_many(keys), repeats)
    return insert_s, count_s


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--log-slots", type=int, default=18,
                    help="log2 of slots per filter (default 18)")
    ap.add_argument("--load", type=float, default=0.85,
                    help="fill fraction for the key stream (default 0.85)")
    ap.add_argument("--repeats", type=int, default=3,
                    help="repeats per measurement, best kept (default 3)")
    ap.add_argument("--seed", type=int, default=1,
                    help="key stream seed (default 1)")
    args = ap.parse_args(argv)

    backends = available_backends()
    if "c" not in backends:
        print("compiled backend not available on this install; nothing to compare",
              file=sys.stderr)
        return 1

    n = int((1 << args.log_slots) * args.load)
    keys = counter_stream(args.seed, 0, n)
    cases = [
        ("tcf point", bench_point_tcf, ("insert", "query")),
        ("tcf bulk", bench_bulk_tcf, ("insert", "query")),
        ("gqf", bench_gqf, ("insert", "count")),
    ]

    print("keys per run: %d (2^%d slots at %.0f%% load), best of %d repeats"
          % (n, args.log_slots, 100 * args.load, args.repeats))
    print()
    header = "%-12s %-8s %14s %14s %9s" % (
        "filter", "op", "py ops/s", "c ops/s", "speedup")
    print(header)
    print("-" * len(header))
    for name, fn, ops in cases:
        py_times = fn("py", keys, args.log_slots, args.repeats)
        c_times = fn("c", keys, args.log_slots, args.repeats)
        for op, py_s, c_s in zip(ops, py_times, c_times):
            print("%-12s %-8s %14s %14s %8.1fx" % (
                name, op,
                format(int(n / py_s), ","), format(int(n / c_s), ","),
                py_s / c_s))
    return 0


if __name__ == "__main__":
    sys.exit(main())
