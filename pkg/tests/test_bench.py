import numpy as np

from orthoplanes import bench, codebook


def test_rows_report_exact_feature_bytes():
    rows = bench.run_bench(Ks=(1, 2, 3), N=8, C=3, n_points=2000, repeats=1)
    assert [r.kind for r in rows] == ["triplane", "orthoplanes", "orthoplanes", "orthoplanes"]
    assert rows[0].bytes == 3 * 8 * 8 * 3 * 4
    for r in rows[1:]:
        assert r.bytes == 3 * r.K * 8 * 8 * 3 * 4
        assert r.ns_per_query > 0


def test_nbytes_matches_float32_storage():
    rng = np.random.default_rng(0)
    for kind, K in (("voxel", 1), ("triplane", 1), ("orthoplanes", 5)):
        rep = codebook.make_representation(kind, 6, 2, K=K, rng=rng)
        assert codebook.nbytes_f32(rep) == rep.features.astype(np.float32).nbytes


def test_time_query_is_positive_and_format_is_aligned():
    rep = codebook.make_representation("orthoplanes", 8, 2, K=2, rng=np.random.default_rng(0))
    x = np.random.default_rng(1).uniform(-1, 1, (500, 3))
    assert bench.time_query(rep, x, repeats=2) > 0
    rows = bench.run_bench(Ks=(2,), N=8, C=2, n_points=100, repeats=1, include_triplane=False)
    lines = bench.format_rows(rows)
    assert len(lines) == 2 and len(set(map(len, lines))) == 1
    assert bench.rows_as_dicts(rows)[0]["K"] == 2
