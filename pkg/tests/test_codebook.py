import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthoplanes import codebook
from orthoplanes._validation import InvalidInputError
from orthoplanes.codebook import PlaneGroupSet, TriPlane, VoxelGrid

from oracles import orthoplanes_at, triplane_at, voxel_at


def _points(rng, n):
    # mostly inside the box, some outside to exercise clamping, some on nodes
    x = rng.uniform(-1.2, 1.2, (n, 3))
    x[0] = [-1.0, 1.0, 0.0]
    return x


def test_location_embedding_values():
    assert codebook.linear_location_embedding(1, 4) == -1.0
    assert codebook.linear_location_embedding(3, 4) == 0.0
    assert codebook.linear_location_embedding(1, 1) == -1.0
    with pytest.raises(InvalidInputError):
        codebook.linear_location_embedding(5, 4)


def test_frequency_encoding_layout():
    e = codebook.frequency_encode(0.25, L=2)
    assert e.shape == (4,)
    np.testing.assert_allclose(e, [np.sin(np.pi / 4), np.cos(np.pi / 4), 1.0, 0.0], atol=1e-15)
    assert codebook.frequency_encode(np.zeros((5, 2))).shape == (5, 2, 8)


def test_voxel_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        N, C = rng.integers(2, 6), rng.integers(1, 4)
        F = rng.normal(size=(N, N, N, C))
        x = _points(rng, 5)
        ref = np.array([voxel_at(F, p) for p in x])
        np.testing.assert_allclose(codebook.query_voxel(VoxelGrid(F), x), ref, rtol=0, atol=1e-12)


def test_triplane_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(200):
        N, C = rng.integers(2, 7), rng.integers(1, 4)
        F = rng.normal(size=(3, N, N, C))
        x = _points(rng, 5)
        ref = np.array([triplane_at(F, p) for p in x])
        np.testing.assert_allclose(codebook.query_triplane(TriPlane(F), x), ref, rtol=0, atol=1e-12)


def test_orthoplanes_matches_loop_oracle_with_custom_anchors():
    rng = np.random.default_rng(3)
    for _ in range(200):
        N, C, K = rng.integers(2, 6), rng.integers(1, 4), rng.integers(1, 6)
        F = rng.normal(size=(3, K, N, N, C))
        anchors = np.sort(rng.uniform(-1, 1, (3, K)), axis=1)
        x = _points(rng, 5)
        ref = np.array([orthoplanes_at(F, anchors, p) for p in x])
        got = codebook.query_orthoplanes(PlaneGroupSet(F, anchors), x)
        np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_plane_axis_convention():
    # a single hot texel on the xy plane at node (x index N-1, y index 0)
    N = 5
    F = np.zeros((3, N, N, 1))
    F[2, N - 1, 0, 0] = 1.0
    z = np.linspace(-1, 1, 7)
    x = np.stack([np.ones(7), -np.ones(7), z], axis=1)
    np.testing.assert_array_equal(codebook.query(TriPlane(F), x)[:, 0], 1.0)
    assert TriPlane(F).xy is not None and np.shares_memory(TriPlane(F).xy, TriPlane(F).features)


def test_orthoplanes_hits_plane_exactly_at_its_anchor():
    rng = np.random.default_rng(4)
    K, N = 4, 6
    F = rng.normal(size=(3, K, N, N, 2))
    F[:2] = 0  # keep only the xy group
    for k, zk in enumerate(codebook.default_anchors(K)):
        p = np.array([[0.3, -0.2, zk]])
        xy_only = np.zeros((3, N, N, 2))
        xy_only[2] = F[2, k]
        np.testing.assert_allclose(codebook.query(PlaneGroupSet(F), p), codebook.query(TriPlane(xy_only), p),
                                   atol=1e-12)


def test_default_anchors_leave_top_plane_short_of_the_box():
    a = codebook.default_anchors(4)
    np.testing.assert_allclose(a, [-1.0, -0.5, 0.0, 0.5])


def test_k1_reduces_to_triplane():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        N, C = rng.integers(2, 6), rng.integers(1, 4)
        tp = TriPlane(rng.normal(size=(3, N, N, C)))
        x = rng.uniform(-1.3, 1.3, (3, 3))
        ops = codebook.as_orthoplanes(tp, anchors=rng.uniform(-1, 1))
        np.testing.assert_allclose(codebook.query(ops, x), codebook.query(tp, x), rtol=0, atol=1e-12)


def test_linearity_in_features():
    rng = np.random.default_rng(6)
    F1, F2 = rng.normal(size=(2, 3, 3, 5, 5, 2))
    x = rng.uniform(-1, 1, (20, 3))
    a, b = 0.7, -1.3
    lhs = codebook.query(PlaneGroupSet(a * F1 + b * F2), x)
    rhs = a * codebook.query(PlaneGroupSet(F1), x) + b * codebook.query(PlaneGroupSet(F2), x)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_constant_field_is_reproduced():
    # partition of unity: a constant plane set queries to 3 * constant
    F = np.full((3, 4, 6, 6, 2), 0.25)
    x = np.random.default_rng(7).uniform(-2, 2, (50, 3))
    np.testing.assert_allclose(codebook.query(PlaneGroupSet(F), x), 0.75, atol=1e-14)


def test_backprop_features_is_adjoint_of_query():
    # <query(F, x), g> == <F, backprop(g)> for every representation
    rng = np.random.default_rng(8)
    reps = [codebook.make_representation(k, 5, 3, K=3, rng=rng, dtype=np.float64)
            for k in ("voxel", "triplane", "orthoplanes")]
    x = rng.uniform(-1.1, 1.1, (40, 3))
    g = rng.normal(size=(40, 3))
    for rep in reps:
        gf, _ = codebook.backprop_query(rep, x, g, need_coords=False)
        np.testing.assert_allclose(np.sum(codebook.query(rep, x) * g), np.sum(rep.features * gf), rtol=1e-12)


def test_coordinate_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    for kind in ("voxel", "triplane", "orthoplanes"):
        rep = codebook.make_representation(kind, 5, 3, K=3, rng=rng, dtype=np.float64)
        x = rng.uniform(-0.9, 0.9, (30, 3))
        g = rng.normal(size=(30, 3))
        _, gx = codebook.backprop_query(rep, x, g)
        h = 1e-7
        fd = np.zeros_like(x)
        for d in range(3):
            e = np.zeros(3)
            e[d] = h
            fd[:, d] = np.sum((codebook.query(rep, x + e) - codebook.query(rep, x - e)) * g, axis=1) / (2 * h)
        np.testing.assert_allclose(gx, fd, atol=1e-6)
        J = codebook.feature_jacobian(rep, x)
        np.testing.assert_allclose(np.einsum("pcd,pc->pd", J, g), gx, atol=1e-12)


def test_clamped_axes_get_zero_coordinate_gradient():
    rep = codebook.make_representation("orthoplanes", 4, 2, K=2, rng=0, dtype=np.float64)
    x = np.array([[1.5, 0.2, -0.1], [0.1, -3.0, 0.3]])
    _, gx = codebook.backprop_query(rep, x, np.ones((2, 2)))
    assert gx[0, 0] == 0.0 and gx[1, 1] == 0.0


def test_param_count_and_matched_budget():
    tp = codebook.make_representation("triplane", 64, 32)
    ops = codebook.make_representation("orthoplanes", 64, 8, K=4)
    assert codebook.param_count(tp) == codebook.param_count(ops) == 3 * 4 * 64 ** 2 * 8
    assert codebook.nbytes_f32(ops) == ops.features.nbytes
    assert codebook.param_count(codebook.make_representation("voxel", 8, 2)) == 8 ** 3 * 2


@pytest.mark.parametrize("bad", [np.zeros((3, 4, 5, 2)), np.zeros((2, 4, 4, 2)), np.zeros((3, 1, 1, 2))])
def test_triplane_rejects_bad_shapes(bad):
    with pytest.raises(InvalidInputError):
        TriPlane(bad)


def test_orthoplanes_rejects_unsorted_anchors():
    with pytest.raises(InvalidInputError):
        PlaneGroupSet(np.zeros((3, 2, 4, 4, 1)), np.array([[0.5, 0.0]] * 3))
    with pytest.raises(InvalidInputError):
        PlaneGroupSet(np.zeros((3, 2, 4, 4, 1)), np.array([[-2.0, 0.0]] * 3))


def test_query_rejects_nonfinite_points():
    rep = codebook.make_representation("triplane", 4, 1)
    with pytest.raises(InvalidInputError):
        codebook.query(rep, np.array([[0.0, np.nan, 0.0]]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 2 ** 31))
def test_orthoplanes_bounded_by_texel_extremes(K, N, seed):
    # interpolation is a convex combination per group
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(3, K, N, N, 1))
    x = rng.uniform(-1.5, 1.5, (16, 3))
    q = codebook.query(PlaneGroupSet(F), x)[:, 0]
    lo = sum(F[g].min() for g in range(3))
    hi = sum(F[g].max() for g in range(3))
    assert np.all(q >= lo - 1e-12) and np.all(q <= hi + 1e-12)
