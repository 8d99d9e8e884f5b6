"""Lookup-based scene representations: dense voxels, tri-planes and orthoplanes.

All three store features on regular grids spanning the normalized scene box
[-1, 1]^3, with grid nodes at ``-1 + 2 i / (N - 1)`` (corner-aligned).
Queries clamp coordinates to the box before interpolating.

Orthoplanes hold three groups of K parallel planes. Group ``g`` is stacked
along axis ``g`` and each of its planes is indexed by the remaining two axes
in cyclic order, so group 0 holds yz-planes, group 1 zx-planes and group 2
xy-planes. A tri-plane uses the same plane order and is exactly the K = 1
case.
"""

import numpy as np

from . import _kernels
from ._validation import InvalidInputError, check_points

VOXEL, TRIPLANE, ORTHOPLANES = 0, 1, 2
KIND_NAMES = {VOXEL: "voxel", TRIPLANE: "triplane", ORTHOPLANES: "orthoplanes"}


def linear_location_embedding(k, K):
    """Position of plane ``k`` (1-based) among ``K`` planes: -1 + 2 (k - 1) / K."""
    if K < 1 or not 1 <= k <= K:
        raise InvalidInputError(f"plane index k={k} outside 1..{K}")
    return -1.0 + 2.0 * (k - 1) / K


def frequency_encode(l, L=4):
    """Interleaved ``[sin(2^j pi l), cos(2^j pi l)]`` for ``j = 0 .. L-1``.

    ``l`` may be a scalar or an array; the encoding is appended as a last axis
    of length ``2 L``.
    """
    if L < 1:
        raise InvalidInputError("octave count L must be >= 1")
    l = np.asarray(l, dtype=np.float64)
    arg = np.pi * l[..., None] * 2.0 ** np.arange(L)
    out = np.empty(l.shape + (2 * L,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


class VoxelGrid:
    """Dense N^3 grid with C channels, stored as ``features[ix, iy, iz, c]``."""

    kind = VOXEL

    def __init__(self, features):
        features = np.asarray(features)
        if features.ndim != 4 or len(set(features.shape[:3])) != 1:
            raise InvalidInputError(f"voxel features must be (N, N, N, C), got {features.shape}")
        if features.shape[0] < 2 or features.shape[3] < 1:
            raise InvalidInputError("voxel grid needs N >= 2 and C >= 1")
        self.features = np.ascontiguousarray(features)

    @property
    def N(self):
        return self.features.shape[0]

    @property
    def C(self):
        return self.features.shape[-1]

    def _corners(self, x, derivs):
        return _kernels.voxel_corners(x, self.N, derivs)


_TRIPLANE_ANCHORS = np.zeros((3, 1))


class TriPlane:
    """Three axis-aligned planes ``features[g, i, j, c]``.

    Plane ``g`` is perpendicular to axis ``g``: planes 0, 1, 2 are the yz, zx
    and xy planes. The query is ``F_xy(x, y) + F_yz(y, z) + F_zx(z, x)``.
    """

    kind = TRIPLANE

    def __init__(self, features):
        features = np.asarray(features)
        if features.ndim != 4 or features.shape[0] != 3 or features.shape[1] != features.shape[2]:
            raise InvalidInputError(f"tri-plane features must be (3, N, N, C), got {features.shape}")
        if features.shape[1] < 2 or features.shape[3] < 1:
            raise InvalidInputError("tri-plane needs N >= 2 and C >= 1")
        self.features = np.ascontiguousarray(features)

    @property
    def N(self):
        return self.features.shape[1]

    @property
    def C(self):
        return self.features.shape[-1]

    @property
    def yz(self):
        return self.features[0]

    @property
    def zx(self):
        return self.features[1]

    @property
    def xy(self):
        return self.features[2]

    def _corners(self, x, derivs):
        return _kernels.plane_corners(x, _TRIPLANE_ANCHORS, self.N, derivs)


class PlaneGroupSet:
    """Orthoplanes: three orthogonal groups of K parallel feature planes.

    Parameters
    ----------
    features : ndarray, shape (3, K, N, N, C)
        ``features[g, k]`` is the k-th plane of the group stacked along axis g.
    anchors : ndarray, shape (3, K), optional
        Strictly increasing plane positions along each group's axis. Defaults
        to the linear location embedding ``-1 + 2 (k - 1) / K``.
    """

    kind = ORTHOPLANES

    def __init__(self, features, anchors=None):
        features = np.asarray(features)
        if features.ndim != 5 or features.shape[0] != 3 or features.shape[2] != features.shape[3]:
            raise InvalidInputError(f"orthoplane features must be (3, K, N, N, C), got {features.shape}")
        _, K, N, _, C = features.shape
        if K < 1 or N < 2 or C < 1:
            raise InvalidInputError("orthoplanes need K >= 1, N >= 2, C >= 1")
        if anchors is None:
            anchors = np.tile(default_anchors(K), (3, 1))
        anchors = np.array(anchors, dtype=np.float64)
        if anchors.ndim == 1:
            anchors = np.tile(anchors, (3, 1))
        if anchors.shape != (3, K):
            raise InvalidInputError(f"anchors must have shape (3, {K}), got {anchors.shape}")
        if not np.all(np.isfinite(anchors)) or np.any(np.abs(anchors) > 1):
            raise InvalidInputError("anchors must lie within [-1, 1]")
        if K > 1 and np.any(np.diff(anchors, axis=1) <= 0):
            raise InvalidInputError("anchors must be strictly increasing")
        self.features = np.ascontiguousarray(features)
        self.anchors = anchors

    @property
    def K(self):
        return self.features.shape[1]

    @property
    def N(self):
        return self.features.shape[2]

    @property
    def C(self):
        return self.features.shape[-1]

    def _corners(self, x, derivs):
        return _kernels.plane_corners(x, self.anchors, self.N, derivs)


def default_anchors(K):
    return np.array([linear_location_embedding(k, K) for k in range(1, K + 1)])


def _table(rep):
    return rep.features.reshape(-1, rep.C)


def query(rep, x):
    """Aggregated feature at each point of ``x`` (P, 3); returns (P, C)."""
    x = check_points(x)
    idx, w, _ = rep._corners(x, derivs=False)
    table = _table(rep)
    return _kernels.gather(table, idx, w.astype(table.dtype))


def query_voxel(vg, x):
    return query(vg, x)


def query_triplane(tp, x):
    return query(tp, x)


def query_orthoplanes(ops, x):
    return query(ops, x)


def backprop_query(rep, x, grad_out, grad_features=None, need_coords=True):
    """Reverse pass of :func:`query`.

    Adds ``dL/d(features)`` into ``grad_features`` (allocated when omitted)
    and returns it together with ``dL/dx`` of shape (P, 3), or ``None`` for
    the latter when ``need_coords`` is false. Coordinates outside the scene
    box receive zero gradient along the clamped axes.
    """
    x = check_points(x)
    table = _table(rep)
    grad_out = np.ascontiguousarray(grad_out, dtype=table.dtype)
    if grad_out.shape != (len(x), rep.C):
        raise InvalidInputError(f"grad_out must have shape ({len(x)}, {rep.C}), got {grad_out.shape}")
    if not np.all(np.isfinite(grad_out)):
        raise InvalidInputError("grad_out contains non-finite values")
    if grad_features is None:
        grad_features = np.zeros_like(rep.features)
    idx, w, dw = rep._corners(x, derivs=need_coords)
    _kernels.scatter_add(grad_features.reshape(-1, rep.C), idx, w.astype(table.dtype), grad_out)
    grad_x = None
    if need_coords:
        proj = _kernels.gather_dot(table, idx, grad_out)
        grad_x = np.einsum("pm,pmd->pd", proj, dw)
    return grad_features, grad_x


def feature_jacobian(rep, x):
    """d(feature)/dx at each point, shape (P, C, 3)."""
    x = check_points(x)
    idx, _, dw = rep._corners(x, derivs=True)
    texels = _table(rep)[idx]
    return np.einsum("pmc,pmd->pcd", texels, dw)


def param_count(rep):
    """Number of stored feature values: N^3 C, 3 N^2 C or 3 K N^2 C."""
    if rep.kind == VOXEL:
        return rep.N ** 3 * rep.C
    if rep.kind == TRIPLANE:
        return 3 * rep.N ** 2 * rep.C
    return 3 * rep.K * rep.N ** 2 * rep.C


def nbytes_f32(rep):
    """Storage footprint of the features at 4 bytes per value."""
    return 4 * param_count(rep)


def make_representation(kind, N, C, K=1, rng=None, scale=0.1, dtype=np.float32, anchors=None):
    """Allocate a representation with features drawn from Normal(0, scale)."""
    rng = np.random.default_rng(rng)
    if kind in ("voxel", VOXEL):
        return VoxelGrid(rng.normal(0.0, scale, (N, N, N, C)).astype(dtype))
    if kind in ("triplane", TRIPLANE):
        return TriPlane(rng.normal(0.0, scale, (3, N, N, C)).astype(dtype))
    if kind in ("orthoplanes", ORTHOPLANES):
        return PlaneGroupSet(rng.normal(0.0, scale, (3, K, N, N, C)).astype(dtype), anchors)
    raise InvalidInputError(f"unknown representation kind {kind!r}")


def as_orthoplanes(tp, anchors=0.0):
    """View a tri-plane as a K = 1 plane-group set."""
    return PlaneGroupSet(tp.features[:, None], np.full((3, 1), anchors))


def replace_features(rep, features):
    """Same representation type and anchors, new feature array."""
    if rep.kind == ORTHOPLANES:
        return PlaneGroupSet(features, rep.anchors)
    return type(rep)(features)


def describe(rep):
    kind = KIND_NAMES[rep.kind]
    if rep.kind == ORTHOPLANES:
        return f"{kind}(K={rep.K}, N={rep.N}, C={rep.C})"
    return f"{kind}(N={rep.N}, C={rep.C})"


