"""Workload generator tests.

Oracles: analytic Zipf mass (partial zeta sums), chi-square uniformity for
draw counts, and hand-packed 2-bit window values for the k-mer parser.
"""

import numpy as np
import pytest

from filterkit import Tcf, TcfParams
from filterkit.workloads import (WorkloadSpec, counter_stream, gen_keys,
                                 kmer_windows, measure_fpr, zipf_bounded)


class TestStreams:
    def test_same_spec_same_stream(self):
        for spec in (WorkloadSpec("uniform", n=5000, seed=3),
                     WorkloadSpec("ur_count", n=500, seed=3),
                     WorkloadSpec("zipf", n=5000, seed=3)):
            a, b = gen_keys(spec), gen_keys(spec)
            assert a.tobytes() == b.tobytes()

    def test_different_seeds_differ(self):
        a = gen_keys(WorkloadSpec("uniform", n=1000, seed=1))
        b = gen_keys(WorkloadSpec("uniform", n=1000, seed=2))
        assert len(np.intersect1d(a, b)) == 0

    def test_uniform_stream_is_distinct(self):
        # the key mixer is a bijection over counters, so exactly distinct
        keys = gen_keys(WorkloadSpec("uniform", n=200000, seed=7))
        assert len(np.unique(keys)) == len(keys)

    def test_rejects_bad_specs(self):
        with pytest.raises(ValueError):
            WorkloadSpec("geometric", n=10)
        with pytest.raises(ValueError):
            WorkloadSpec("uniform", n=0)
        with pytest.raises(ValueError):
            WorkloadSpec("zipf", n=10, zipf_s=0.0)
        with pytest.raises(ValueError):
            WorkloadSpec("kmer")  # no file
        with pytest.raises(ValueError):
            WorkloadSpec("kmer", kmer_file="x.fa", kmer_k=33)


class TestUrCount:
    def test_stream_length_and_count_range(self):
        spec = WorkloadSpec("ur_count", n=10 ** 4, seed=11)
        stream = gen_keys(spec)
        assert 10 ** 4 <= len(stream) <= 10 ** 6
        bases, counts = np.unique(stream, return_counts=True)
        assert len(bases) == 10 ** 4
        assert counts.min() >= 1 and counts.max() <= 100

    def test_counts_uniform_chi_square(self):
        stats = pytest.importorskip("scipy.stats")
        stream = gen_keys(WorkloadSpec("ur_count", n=10 ** 4, seed=12))
        _, counts = np.unique(stream, return_counts=True)
        hist = np.bincount(counts, minlength=101)[1:101]
        _, p = stats.chisquare(hist)
        assert p > 1e-4, "per-base counts should be uniform on 1..100"


class TestZipf:
    def test_top_rank_mass_matches_zeta(self):
        universe, n, s = 10 ** 4, 10 ** 6, 1.5
        rng = np.random.default_rng(40)
        ranks = zipf_bounded(rng, s, universe, n)
        zeta = np.sum(np.arange(1, universe + 1, dtype=np.float64) ** -s)
        got = float((ranks == 1).sum()) / n
        assert abs(got - 1 / zeta) / (1 / zeta) < 0.05

    def test_rank_support_is_bounded(self):
        ranks = zipf_bounded(np.random.default_rng(41), 1.5, 50, 20000)
        assert ranks.min() >= 1 and ranks.max() <= 50
        assert len(np.unique(ranks)) > 25  # tail is still reachable

    def test_exponent_one_is_handled(self):
        n, universe = 200000, 1000
        ranks = zipf_bounded(np.random.default_rng(42), 1.0, universe, n)
        harmonic = np.sum(1.0 / np.arange(1, universe + 1))
        got = float((ranks == 1).sum()) / n
        assert abs(got - 1 / harmonic) / (1 / harmonic) < 0.05

    def test_keys_are_remixed_ranks(self):
        keys = gen_keys(WorkloadSpec("zipf", n=30000, seed=5))
        vals, counts = np.unique(keys, return_counts=True)
        # heavy head survives the key remap; keys themselves look 64-bit
        assert counts.max() > 30000 * 0.25
        assert vals.max() > 2 ** 60


class TestKmer:
    def _write(self, tmp_path, name, text):
        p = tmp_path / name
        p.write_text(text)
        return str(p)

    def test_exact_windows_fasta(self, tmp_path):
        # ACGTACGTGG: 7 windows of 4; values packed 2 bits/base, A=0..T=3
        path = self._write(tmp_path, "t.fa", ">r1\nACGTACGT\nGG\n")
        w = kmer_windows(path, 4)
        assert len(w) == 7
        assert w[0] == (0 << 6) | (1 << 4) | (2 << 2) | 3     # ACGT
        assert w[4] == w[0]                                   # ACGT again
        assert w[6] == (2 << 6) | (3 << 4) | (2 << 2) | 2     # GTGG

    def test_windows_cross_line_not_record_boundaries(self, tmp_path):
        path = self._write(tmp_path, "t.fa", ">a\nACG\nTAC\n>b\nGGGG\n")
        w = kmer_windows(path, 4)
        # record a: ACGTAC -> 3 windows; record b: GGGG -> 1 window; none span
        assert len(w) == 4
        assert w[3] == (2 << 6) | (2 << 4) | (2 << 2) | 2

    def test_n_windows_dropped(self, tmp_path):
        path = self._write(tmp_path, "t.fa", ">r\nAANGTACG\n")
        w = kmer_windows(path, 4)
        # windows containing N vanish: only GTAC and TACG remain
        assert len(w) == 2
        assert w[0] == (2 << 6) | (3 << 4) | (0 << 2) | 1

    def test_fastq_quality_lines_skipped(self, tmp_path):
        # quality line deliberately starts with '@' to catch naive parsers
        path = self._write(tmp_path, "t.fq",
                           "@r1\nACGTA\n+\n@@@@@\n@r2\nTTTT\n+r2\nIIII\n")
        w = kmer_windows(path, 4)
        assert len(w) == 3
        assert w[2] == 0b11111111

    def test_lowercase_accepted(self, tmp_path):
        path = self._write(tmp_path, "t.fa", ">r\nacgt\n")
        assert kmer_windows(path, 4)[0] == (0 << 6) | (1 << 4) | (2 << 2) | 3

    def test_k_longer_than_reads_errors(self, tmp_path):
        path = self._write(tmp_path, "t.fa", ">r\nACGTACGT\n")
        with pytest.raises(ValueError):
            kmer_windows(path, 20)

    def test_unreadable_file_errors(self, tmp_path):
        with pytest.raises(OSError):
            kmer_windows(str(tmp_path / "absent.fa"), 4)


class TestMeasureFpr:
    def test_empty_filter_reports_zero(self):
        t = Tcf(TcfParams(num_blocks=64, seed=1))
        assert measure_fpr(t, 20000, seed=9) == 0.0

    def test_query_stream_disjoint_from_insert_stream(self):
        ins = gen_keys(WorkloadSpec("uniform", n=100000, seed=4))
        qry = counter_stream(4, 0xB504F32D4F2D8C21, 100000)
        assert len(np.intersect1d(ins, qry)) == 0

    def test_filled_filter_fpr_under_formula_bound(self):
        t = Tcf(TcfParams(num_blocks=1024, seed=2))
        keys = gen_keys(WorkloadSpec("uniform", n=int(0.9 * 1024 * 16), seed=2))
        t.insert_many(keys)
        fpr = measure_fpr(t, 200000, seed=3)
        assert fpr <= 2 * 16 / 2 ** 16 * 1.6  # 2B/2^f with sampling slack
