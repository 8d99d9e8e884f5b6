"""Query throughput and memory of orthoplanes as the plane count K grows."""
import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import codebook


@dataclass
class BenchRow:
    kind: str
    K: int
    N: int
    C: int
    bytes: int
    ns_per_query: float


def time_query(rep, x, repeats=3):
    """Best-of-``repeats`` wall time of one :func:`codebook.query` call, in ns per point."""
    codebook.query(rep, x[:16])  # compile / warm caches
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        codebook.query(rep, x)
        best = min(best, time.perf_counter() - t0)
    return 1e9 * best / len(x)


def run_bench(Ks=(1, 4, 8, 12), N=64, C=8, n_points=1_000_000, seed=0, repeats=3, include_triplane=True):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, (n_points, 3))
    rows = []
    with threadpool_limits(limits=1):
        if include_triplane:
            tp = codebook.make_representation("triplane", N, C, rng=rng)
            rows.append(BenchRow("triplane", 1, N, C, codebook.nbytes_f32(tp), time_query(tp, x, repeats)))
        for K in Ks:
            rep = codebook.make_representation("orthoplanes", N, C, K=K, rng=rng)
            rows.append(BenchRow("orthoplanes", K, N, C, rep.features.astype(np.float32).nbytes,
                                 time_query(rep, x, repeats)))
    return rows


def format_rows(rows):
    head = f"{'kind':<12}{'K':>4}{'N':>6}{'C':>4}{'bytes':>12}{'ns/query':>11}"
    return [head] + [f"{r.kind:<12}{r.K:>4}{r.N:>6}{r.C:>4}{r.bytes:>12}{r.ns_per_query:>11.1f}" for r in rows]


def rows_as_dicts(rows):
    return [asdict(r) for r in rows]
