"""Benchmark and validation CLI.

Builds one of the filters, drives a workload against it (insert / query /
fpr / delete / count / fill-to-failure), and appends one CSV row per repeat.
Every run ends with a full structure-validation pass; a violation is a hard
failure (exit code 2).  Threading follows each filter's contract: point APIs
are driven by threads this module spawns over key-range slices, bulk APIs get
one exclusive call per batch with the filter's internal workers.

    python -m filterkit.bench --filter gqf --op insert --log-slots 18 \
        --dist zipf --mode mapreduce --threads 4 --csv runs.csv
"""

import argparse
import csv
import statistics
import sys
import threading
import time
from dataclasses import dataclass, fields

import numpy as np

from .errors import CapacityError, FilterFullError, ValidationError
from .gqf import Gqf, GqfParams
from .tcf import Placement, Tcf, TcfParams
from .tcf_bulk import BulkTcf, BulkTcfParams
from .workloads import WorkloadSpec, contains_many, gen_keys, measure_fpr

FPR_QUERIES = 1_000_000
FILL_CHUNK = 4096


class ParameterError(ValueError):
    """Bad flag combination or workload input; maps to exit code 1."""


@dataclass
class MetricsRecord:
    """One benchmark observation; one CSV row."""

    filter: str
    api: str
    op: str
    log_slots: int
    load_factor: float
    threads: int
    dist: str
    seed: int
    wall_seconds: float
    ops_per_sec: float
    fpr: float = None            # empty CSV cell when not measured
    bits_per_item: float = None


CSV_FIELDS = [f.name for f in fields(MetricsRecord)]


@dataclass
class BenchConfig:
    filter_id: str
    op: str
    api: str = None              # inferred from filter_id when omitted
    log_slots: int = 16
    load: float = 0.9
    threads: int = 1
    dist: str = "uniform"
    zipf_s: float = 1.5
    kmer_file: str = None
    k: int = 28
    seed: int = 0
    batches: int = 1
    mode: str = "naive"
    no_backing: bool = False
    group_width: int = 1
    csv: str = None
    repeats: int = 3


# -- filter drivers -----------------------------------------------------------
#
# One thin adapter per filter gives run() a uniform surface: capacity,
# build(), fill/query/delete drivers honoring the threading contract, and
# live-item accounting for bits-per-item.

def _run_threads(fn, keys, threads):
    """Slice `keys` across `threads` OS threads, each running fn(slice)."""
    if threads <= 1:
        fn(keys)
        return
    cuts = np.linspace(0, len(keys), threads + 1).astype(np.int64)
    ts = [threading.Thread(target=fn, args=(keys[cuts[i]:cuts[i + 1]],))
          for i in range(threads)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()


class _PointTcfDriver:
    filter_id = "tcf"
    api = "point"

    def __init__(self, cfg):
        block_slots = 16
        if (1 << cfg.log_slots) % block_slots:
            raise ParameterError("--log-slots must cover whole 16-slot blocks")
        self.params = TcfParams(
            num_blocks=(1 << cfg.log_slots) // block_slots,
            backing_fraction=0.0 if cfg.no_backing else 0.01,
            group_width=cfg.group_width,
            seed=cfg.seed)
        self.capacity = self.params.main_slots
        self.filt = None

    def build(self):
        self.filt = Tcf(self.params)

    def insert(self, keys, threads, batches):
        codes_out = []
        lock = threading.Lock()

        def work(sl):
            codes = self.filt.insert_many(sl)
            with lock:
                codes_out.append(codes)
        _run_threads(work, keys, threads)
        full = sum(int((c == Placement.FULL).sum()) for c in codes_out)
        if full:
            raise FilterFullError("%d inserts found no slot" % full)

    def insert_until_full(self, keys):
        """Insert until the first failed placement; items placed before it."""
        done = 0
        for lo in range(0, len(keys), FILL_CHUNK):
            codes = self.filt.insert_many(keys[lo:lo + FILL_CHUNK])
            bad = np.flatnonzero(codes == Placement.FULL)
            if len(bad):
                return done + int((codes[:bad[0]] != Placement.FULL).sum())
            done += len(codes)
        return done

    def query(self, keys, threads):
        _run_threads(self.filt.query_many, keys, threads)

    def delete(self, keys, threads):
        _run_threads(self.filt.delete_many, keys, threads)

    def live_items(self):
        c = self.filt.counters
        return c["inserts_ok"] - c["deletes_ok"]

    def load_factor(self):
        return self.filt.load_factor()


class _BulkTcfDriver:
    filter_id = "tcf-bulk"
    api = "bulk"

    def __init__(self, cfg):
        block_slots = 128
        if (1 << cfg.log_slots) % block_slots:
            raise ParameterError("--log-slots must cover whole 128-slot blocks")
        self.params = BulkTcfParams(
            num_blocks=(1 << cfg.log_slots) // block_slots,
            backing_fraction=0.0 if cfg.no_backing else 0.01,
            seed=cfg.seed)
        self.capacity = self.params.main_slots
        self.filt = None

    def build(self):
        self.filt = BulkTcf(self.params)

    def insert(self, keys, threads, batches):
        for part in np.array_split(keys, batches):
            failed = self.filt.insert_batch(part, workers=threads)
            if len(failed):
                raise FilterFullError("%d inserts found no slot" % len(failed))

    def insert_until_full(self, keys):
        done = 0
        for lo in range(0, len(keys), FILL_CHUNK):
            part = keys[lo:lo + FILL_CHUNK]
            failed = self.filt.insert_batch(part)
            done += len(part) - len(failed)
            if len(failed):
                return done
        return done

    def query(self, keys, threads):
        self.filt.query_batch(keys, workers=threads)

    def delete(self, keys, threads):
        self.filt.delete_batch(keys, workers=threads)

    def live_items(self):
        c = self.filt.counters
        return c["inserts_ok"] - c["deletes_ok"]

    def load_factor(self):
        return self.filt.load_factor()


class _GqfDriver:
    filter_id = "gqf"

    def __init__(self, cfg, api):
        self.api = api
        self.mode = cfg.mode
        self.params = GqfParams(q=cfg.log_slots, r=8, seed=cfg.seed)
        self.capacity = self.params.logical_slots
        self.filt = None

    def build(self):
        self.filt = Gqf(self.params)

    def insert(self, keys, threads, batches):
        if self.mode == "mapreduce":
            # aggregation is part of the measured insertion algorithm
            uniq, counts = np.unique(keys, return_counts=True)
            self.filt.bulk_insert(uniq, counts.astype(np.uint64), workers=threads)
        elif self.api == "bulk":
            for part in np.array_split(keys, batches):
                self.filt.bulk_insert(part, workers=threads)
        else:
            _run_threads(self.filt.insert_many, keys, threads)

    def insert_until_full(self, keys):
        done = 0
        for lo in range(0, len(keys), FILL_CHUNK):
            part = keys[lo:lo + FILL_CHUNK]
            try:
                if self.api == "bulk":
                    self.filt.bulk_insert(part)
                else:
                    self.filt.insert_many(part)
            except CapacityError:
                return self.filt.distinct_items
            done += len(part)
        return done

    def query(self, keys, threads):
        if self.api == "bulk":
            self.filt.count_many(keys, workers=threads)
        else:
            _run_threads(self.filt.count_many, keys, threads)

    def count(self, keys, threads):
        self.query(keys, threads)

    def delete(self, keys, threads):
        ones = np.ones(len(keys), dtype=np.uint64)
        if self.api == "bulk":
            self.filt.bulk_delete(keys, ones, workers=threads)
        else:
            def work(sl):
                self.filt.delete_many(sl, np.ones(len(sl), dtype=np.uint64))
            _run_threads(work, keys, threads)

    def live_items(self):
        return self.filt.distinct_items

    def load_factor(self):
        return self.filt.load_factor()


def _make_driver(cfg):
    api = cfg.api
    if cfg.filter_id == "tcf":
        if api not in (None, "point"):
            raise ParameterError("--filter tcf is the point API; "
                                 "use --filter tcf-bulk for the bulk variant")
        return _PointTcfDriver(cfg)
    if cfg.filter_id == "tcf-bulk":
        if api not in (None, "bulk"):
            raise ParameterError("--filter tcf-bulk only has a bulk API")
        return _BulkTcfDriver(cfg)
    if cfg.filter_id == "gqf":
        return _GqfDriver(cfg, api or "point")
    raise ParameterError("unknown filter %r" % (cfg.filter_id,))


# -- workload sizing ----------------------------------------------------------

def _dataset(cfg, capacity):
    """Key stream targeting cfg.load of the filter's slot capacity."""
    target = max(1, int(cfg.load * capacity))
    if cfg.dist == "uniform":
        spec = WorkloadSpec("uniform", n=target, seed=cfg.seed)
    elif cfg.dist == "ur_count":
        # counted groups average ~3.4 slots/base at r=8, counts 1..100
        spec = WorkloadSpec("ur_count", n=max(1, target // 4), seed=cfg.seed)
    elif cfg.dist == "zipf":
        spec = WorkloadSpec("zipf", n=target, seed=cfg.seed, zipf_s=cfg.zipf_s)
    elif cfg.dist == "kmer":
        spec = WorkloadSpec("kmer", kmer_file=cfg.kmer_file, kmer_k=cfg.k)
    else:
        raise ParameterError("unknown distribution %r" % (cfg.dist,))
    try:
        keys = gen_keys(spec)
    except (OSError, ValueError) as err:
        raise ParameterError(str(err))
    if cfg.dist == "kmer" and len(keys) > target:
        keys = keys[:target]
    return keys


# -- the harness ----------------------------------------------------------

def _one_run(cfg, driver, keys):
    """Build, drive one timed repetition, validate; returns a MetricsRecord."""
    driver.build()
    op = cfg.op
    fpr = None

    if op == "insert":
        t0 = time.perf_counter()
        driver.insert(keys, cfg.threads, cfg.batches)
        wall = time.perf_counter() - t0
        ops = len(keys)
    elif op == "fill-to-failure":
        t0 = time.perf_counter()
        ops = driver.insert_until_full(keys)
        wall = time.perf_counter() - t0
        # achieved load = items placed before the first failure; the filter's
        # final occupancy also counts later keys from the failing chunk
        achieved = ops / driver.capacity
    elif op in ("query", "count", "fpr", "delete"):
        driver.insert(keys, cfg.threads, cfg.batches)
        if op == "query":
            t0 = time.perf_counter()
            driver.query(keys, cfg.threads)
            wall = time.perf_counter() - t0
            ops = len(keys)
        elif op == "count":
            if not hasattr(driver, "count"):
                raise ParameterError("--op count requires --filter gqf")
            t0 = time.perf_counter()
            driver.count(keys, cfg.threads)
            wall = time.perf_counter() - t0
            ops = len(keys)
        elif op == "fpr":
            t0 = time.perf_counter()
            fpr = measure_fpr(driver.filt, FPR_QUERIES, cfg.seed + 1)
            wall = time.perf_counter() - t0
            ops = FPR_QUERIES
        else:
            half = np.unique(keys)[::2]
            t0 = time.perf_counter()
            driver.delete(half, cfg.threads)
            wall = time.perf_counter() - t0
            ops = len(half)
    else:
        raise ParameterError("unknown op %r" % (op,))

    driver.filt.validate()
    items = driver.live_items()
    if op != "fill-to-failure":
        achieved = driver.load_factor()
    return MetricsRecord(
        filter=driver.filter_id,
        api=driver.api,
        op=op,
        log_slots=cfg.log_slots,
        load_factor=round(achieved, 6),
        threads=cfg.threads,
        dist=cfg.dist,
        seed=cfg.seed,
        wall_seconds=round(wall, 6),
        ops_per_sec=round(ops / wall, 3) if wall > 0 else float("inf"),
        fpr=fpr,
        bits_per_item=(round(driver.filt.size_bits() / items, 4) if items else None),
    )


def run(cfg):
    """Execute a benchmark config; returns one MetricsRecord per repeat."""
    if not 0.0 < cfg.load <= 1.0:
        raise ParameterError("--load must be in (0, 1]")
    if cfg.threads < 1 or cfg.batches < 1 or cfg.repeats < 1:
        raise ParameterError("--threads, --batches, --repeats must be positive")
    if cfg.dist == "kmer" and not cfg.kmer_file:
        raise ParameterError("--dist kmer requires --kmer-file")
    if cfg.mode not in ("naive", "mapreduce"):
        raise ParameterError("--mode must be naive or mapreduce")
    if cfg.mode == "mapreduce" and cfg.filter_id != "gqf":
        raise ParameterError("--mode mapreduce applies to --filter gqf only")
    if cfg.no_backing and cfg.filter_id == "gqf":
        raise ParameterError("--no-backing applies to the two-choice filters")

    driver = _make_driver(cfg)
    if cfg.op == "fill-to-failure":
        n = int(driver.capacity * 1.05) + FILL_CHUNK
        keys = gen_keys(WorkloadSpec("uniform", n=n, seed=cfg.seed))
    else:
        keys = _dataset(cfg, driver.capacity)
    return [_one_run(cfg, driver, keys) for _ in range(cfg.repeats)]


# -- CSV ------------------------------------------------------------------

def write_csv(path, records):
    """Append records; the header is written only when the file is new."""
    try:
        need_header = not open(path, "r", encoding="utf-8").readline()
    except FileNotFoundError:
        need_header = True
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if need_header:
            w.writeheader()
        for rec in records:
            row = {k: ("" if v is None else v) for k, v in vars(rec).items()}
            w.writerow(row)


def read_csv(path):
    """Parse a results file back into typed MetricsRecords."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(MetricsRecord(
                filter=row["filter"], api=row["api"], op=row["op"],
                log_slots=int(row["log_slots"]),
                load_factor=float(row["load_factor"]),
                threads=int(row["threads"]), dist=row["dist"],
                seed=int(row["seed"]),
                wall_seconds=float(row["wall_seconds"]),
                ops_per_sec=float(row["ops_per_sec"]),
                fpr=float(row["fpr"]) if row["fpr"] else None,
                bits_per_item=(float(row["bits_per_item"])
                               if row["bits_per_item"] else None)))
    return out


# -- CLI ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):          # argparse defaults to exit code 2
        self.exit(1, "%s: error: %s\n" % (self.prog, message))


def _build_parser():
    p = _Parser(prog="filterkit-bench", description=__doc__.split("\n")[0])
    p.add_argument("--filter", required=True, choices=["tcf", "tcf-bulk", "gqf"])
    p.add_argument("--api", choices=["point", "bulk"])
    p.add_argument("--op", required=True,
                   choices=["insert", "query", "fpr", "delete", "count",
                            "fill-to-failure"])
    p.add_argument("--log-slots", type=int, default=16)
    p.add_argument("--load", type=float, default=0.9)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--dist", default="uniform",
                   choices=["uniform", "ur-count", "zipf", "kmer"])
    p.add_argument("--zipf-s", type=float, default=1.5)
    p.add_argument("--kmer-file")
    p.add_argument("--k", type=int, default=28)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batches", type=int, default=1)
    p.add_argument("--mode", default="naive", choices=["naive", "mapreduce"])
    p.add_argument("--no-backing", action="store_true")
    p.add_argument("--group-width", type=int, default=1)
    p.add_argument("--csv")
    p.add_argument("--repeats", type=int, default=3)
    return p


def main(argv=None):
    args = _build_parser().parse_args(argv)
    cfg = BenchConfig(
        filter_id=args.filter, api=args.api, op=args.op,
        log_slots=args.log_slots, load=args.load, threads=args.threads,
        dist=args.dist.replace("-", "_"), zipf_s=args.zipf_s,
        kmer_file=args.kmer_file, k=args.k, seed=args.seed,
        batches=args.batches, mode=args.mode, no_backing=args.no_backing,
        group_width=args.group_width, csv=args.csv, repeats=args.repeats)
    try:
        records = run(cfg)
    except ParameterError as err:
        print("parameter error: %s" % err, file=sys.stderr)
        return 1
    except ValidationError as err:
        print("INVARIANT VIOLATION: %s" % err, file=sys.stderr)
        return 2
    if cfg.csv:
        write_csv(cfg.csv, records)
    med = statistics.median(r.ops_per_sec for r in records)
    r0 = records[0]
    print("%s/%s %s: median %.0f ops/s over %d runs, load %.3f%s%s"
          % (r0.filter, r0.api, r0.op, med, len(records), r0.load_factor,
             (", fpr %.6f" % r0.fpr) if r0.fpr is not None else "",
             (", %.2f bits/item" % r0.bits_per_item)
             if r0.bits_per_item is not None else ""))
    return 0


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
