"""Articulated canonical space: skinning inversion, template SDF and deformation.

A :class:`Skeleton` is a joint tree with capsule bones and a template surface
given as vertices with per-joint blend weights. Each bone is driven by the
joint it starts from. A :class:`Pose` rotates every joint about its rest
position and moves the root rigidly; cumulative transforms compose from
parent to child.
"""
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import codebook
from ._validation import DegenerateBlendError, InvalidInputError, check_points
from .decoder import DELTA_SDF, DecoderOutput, sdf_to_density
from .field import NeuralField
from .scenes import capsule_sdf


@dataclass
class Skeleton:
    names: list
    parents: np.ndarray  # (J,), root is -1
    rest: np.ndarray  # (J, 3)
    bones: list  # (from_joint, to_joint, radius)
    vertices: np.ndarray = None  # (V, 3)
    weights: np.ndarray = None  # (V, J)

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.rest = np.asarray(self.rest, dtype=np.float64)
        J = len(self.names)
        if self.parents.shape != (J,) or self.rest.shape != (J, 3):
            raise InvalidInputError("joint arrays disagree on the joint count")
        if J == 0 or self.parents[0] != -1 or np.any(self.parents[1:] < 0):
            raise InvalidInputError("joint 0 must be the only root")
        if np.any(self.parents[1:] >= np.arange(1, J)):
            raise InvalidInputError("every parent must be listed before its children")
        for a, b, r in self.bones:
            if not (0 <= a < J and 0 <= b < J) or not r > 0:
                raise InvalidInputError(f"invalid bone ({a}, {b}, {r})")
        if self.vertices is None:
            self.vertices, self.weights = template_surface(self)
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.vertices), J):
            raise InvalidInputError("blend weights must have shape (V, J)")
        if np.any(self.weights < 0) or np.abs(self.weights.sum(axis=1) - 1).max() > 1e-9:
            raise InvalidInputError("blend weights must be non-negative and sum to 1 per vertex")

    @property
    def n_joints(self):
        return len(self.names)

    def to_json(self):
        return {
            "joints": [{"name": n, "parent": None if p < 0 else self.names[p], "position": list(map(float, x))}
                       for n, p, x in zip(self.names, self.parents, self.rest)],
            "bones": [{"from": self.names[a], "to": self.names[b], "radius": float(r)} for a, b, r in self.bones],
            "vertices": self.vertices.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_json(cls, meta):
        try:
            names = [j["name"] for j in meta["joints"]]
            index = {n: i for i, n in enumerate(names)}
            parents = [-1 if j["parent"] is None else index[j["parent"]] for j in meta["joints"]]
            rest = [j["position"] for j in meta["joints"]]
            bones = [(index[b["from"]], index[b["to"]], float(b["radius"])) for b in meta["bones"]]
        except KeyError as e:
            raise InvalidInputError(f"skeleton description missing or unknown key {e}") from None
        return cls(names, parents, rest, bones, meta.get("vertices"), meta.get("weights"))


def load_skeleton(path=None):
    """Read a skeleton description; the bundled stick figure when ``path`` is None."""
    if path is None:
        text = resources.files("orthoplanes").joinpath("data/stick_figure.json").read_text()
    else:
        text = Path(path).read_text()
    return Skeleton.from_json(json.loads(text))


def stick_figure():
    """Five-bone figure: spine, two arms, two legs (slightly asymmetric)."""
    names = ["pelvis", "chest", "l_shoulder", "l_hand", "r_shoulder", "r_hand",
             "l_hip", "l_foot", "r_hip", "r_foot"]
    parents = [-1, 0, 1, 2, 1, 4, 0, 6, 0, 8]
    rest = [(0.0, 0.0, 0.0), (0.0, 0.0, 0.40), (0.06, 0.0, 0.38), (0.50, 0.0, 0.30),
            (-0.06, 0.0, 0.38), (-0.45, 0.05, 0.20), (0.10, 0.0, -0.05), (0.15, 0.0, -0.62),
            (-0.10, 0.0, -0.05), (-0.16, 0.03, -0.60)]
    bones = [(0, 1, 0.10), (2, 3, 0.05), (4, 5, 0.05), (6, 7, 0.06), (8, 9, 0.06)]
    return Skeleton(names, parents, rest, bones)


def template_surface(skel, per_bone=48, temperature=0.005):
    """Surface vertices of the capsule union with distance-softmax blend weights."""
    verts = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for a, b, r in skel.bones:
        pa, pb = skel.rest[a], skel.rest[b]
        axis = (pb - pa) / np.linalg.norm(pb - pa)
        helper = np.array([1.0, 0, 0]) if abs(axis[0]) < 0.9 else np.array([0, 1.0, 0])
        u = np.cross(axis, helper)
        u /= np.linalg.norm(u)
        v = np.cross(axis, u)
        for i in range(per_bone):
            h = (i + 0.5) / per_bone
            ang = i * golden
            verts.append(pa + h * (pb - pa) + r * (np.cos(ang) * u + np.sin(ang) * v))
        verts.append(pa - r * axis)
        verts.append(pb + r * axis)
    verts = np.array(verts)
    sdf = template_sdf(verts, skel)
    verts = verts[sdf > -1e-9]
    d2 = np.stack([capsule_sdf(verts, skel.rest[a], skel.rest[b], 0.0) ** 2 for a, b, _ in skel.bones], -1)
    logits = -(d2 - d2.min(axis=1, keepdims=True)) / temperature
    soft = np.exp(logits)
    soft /= soft.sum(axis=1, keepdims=True)
    weights = np.zeros((len(verts), skel.n_joints))
    for k, (a, _, _) in enumerate(skel.bones):
        weights[:, a] += soft[:, k]
    weights /= weights.sum(axis=1, keepdims=True)
    return verts, weights


def rotation(axis, angle):
    """Rotation matrix about ``axis`` by ``angle`` radians (Rodrigues)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


@dataclass
class Pose:
    rotations: np.ndarray  # (J, 3, 3), joint 0 is the root rotation
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        R = self.rotations
        if R.ndim != 3 or R.shape[1:] != (3, 3):
            raise InvalidInputError("pose rotations must have shape (J, 3, 3)")
        err = np.abs(np.einsum("jki,jkl->jil", R, R) - np.eye(3)).max() if len(R) else 0.0
        if err > 1e-9 or np.any(np.linalg.det(R) < 0):
            raise InvalidInputError("pose rotations must be orthonormal with det 1")

    @classmethod
    def identity(cls, n_joints):
        return cls(np.tile(np.eye(3), (n_joints, 1, 1)))

    @classmethod
    def root_only(cls, n_joints, R, t=(0.0, 0.0, 0.0)):
        rots = np.tile(np.eye(3), (n_joints, 1, 1))
        rots[0] = R
        return cls(rots, np.asarray(t, dtype=np.float64))


def _rigid(R, pivot, t=None):
    m = np.eye(4)
    m[:3, :3] = R
    m[:3, 3] = pivot - R @ pivot + (0 if t is None else t)
    return m


def forward_kinematics(skel, pose):
    """Cumulative joint transforms (J, 4, 4) and posed template vertices (V, 3)."""
    if len(pose.rotations) != skel.n_joints:
        raise InvalidInputError("pose and skeleton disagree on the joint count")
    G = np.empty((skel.n_joints, 4, 4))
    for j in range(skel.n_joints):
        local = _rigid(pose.rotations[j], skel.rest[j], pose.translation if j == 0 else None)
        G[j] = local if j == 0 else G[skel.parents[j]] @ local
    blended = np.einsum("vj,jab->vab", skel.weights, G)
    verts_h = np.concatenate([skel.vertices, np.ones((len(skel.vertices), 1))], axis=1)
    posed = np.einsum("vab,vb->va", blended, verts_h)[:, :3]
    return G, posed


@dataclass
class WarpConfig:
    d_r: float = 0.1
    alpha_d: float = 0.0
    hook: object = None  # (x_c, pose, latent) -> offsets with norm <= 1
    frequency: float = 6.0

    def __post_init__(self):
        if not self.d_r > 0:
            raise InvalidInputError("d_r must be positive")
        if not self.alpha_d >= 0:
            raise InvalidInputError("alpha_d must be non-negative")


class PosedSkeleton:
    """Per-pose precomputation for repeated inverse skinning queries."""

    def __init__(self, skel, pose):
        self.skel = skel
        self.pose = pose
        self.G, self.posed = forward_kinematics(skel, pose)
        blended = np.einsum("vj,jab->vab", skel.weights, self.G)
        det = np.linalg.det(blended[:, :3, :3])
        self.degenerate = np.abs(det) < 1e-8
        safe = blended.copy()
        safe[self.degenerate] = np.eye(4)
        self.inv_blend = np.linalg.inv(safe)
        self.inv_root = np.linalg.inv(self.G[0])

    def nearest(self, x, chunk=8192):
        idx = np.empty(len(x), dtype=np.int64)
        dist = np.empty(len(x))
        vv = np.einsum("vi,vi->v", self.posed, self.posed)
        for s in range(0, len(x), chunk):
            xs = x[s:s + chunk]
            d2 = np.einsum("pi,pi->p", xs, xs)[:, None] - 2 * xs @ self.posed.T + vv
            k = np.argmin(d2, axis=1)
            idx[s:s + chunk] = k
            dist[s:s + chunk] = np.linalg.norm(xs - self.posed[k], axis=1)
        return idx, dist

    def inverse(self, x, d_r):
        """Canonical points and the mask of points handled by blended skinning."""
        x = check_points(x)
        k, dist = self.nearest(x)
        near = dist <= d_r
        bad = near & self.degenerate[k]
        if np.any(bad):
            p = x[np.argmax(bad)]
            raise DegenerateBlendError(f"blended transform is singular near point {p.tolist()}", point=p)
        xh = np.concatenate([x, np.ones((len(x), 1))], axis=1)
        lbs = np.einsum("pab,pb->pa", self.inv_blend[k], xh)[:, :3]
        rigid = xh @ self.inv_root.T
        return np.where(near[:, None], lbs, rigid[:, :3]), near


def inverse_lbs(x, skel, pose, d_r=0.1):
    """Map observation-space points to canonical space.

    Points within ``d_r`` of the posed template use the inverse of the blended
    transform of their nearest posed vertex; all others only undo the root.
    """
    return PosedSkeleton(skel, pose).inverse(x, d_r)[0]


def template_sdf(x_c, skel):
    """Exact signed distance to the union of bone capsules (negative inside)."""
    x_c = np.asarray(x_c, dtype=np.float64)
    d = [capsule_sdf(x_c, skel.rest[a], skel.rest[b], r) for a, b, r in skel.bones]
    return np.min(np.stack(d, axis=-1), axis=-1)


def template_sdf_grad(x_c, skel):
    x_c = np.asarray(x_c, dtype=np.float64)
    d = np.stack([capsule_sdf(x_c, skel.rest[a], skel.rest[b], r) for a, b, r in skel.bones], axis=-1)
    k = np.argmin(d, axis=-1)
    A = np.array([skel.rest[a] for a, _, _ in skel.bones])[k]
    B = np.array([skel.rest[b] for _, b, _ in skel.bones])[k]
    ab = B - A
    h = np.clip(np.einsum("pi,pi->p", x_c - A, ab) / np.einsum("pi,pi->p", ab, ab), 0, 1)
    v = x_c - A - h[:, None] * ab
    n = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def pose_phase(pose, latent=None):
    """Three bounded phases summarizing the pose and appearance latent."""
    cos_angles = np.clip((np.trace(pose.rotations, axis1=1, axis2=2) - 1) / 2, -1, 1)
    angles = np.arccos(cos_angles)
    base = np.array([angles.sum(), (angles * np.arange(1, len(angles) + 1)).sum(), np.abs(pose.translation).sum()])
    if latent is not None:
        lat = np.asarray(latent, dtype=np.float64).ravel()
        base = base + np.array([lat[i::3].sum() for i in range(3)])
    return base


_MIX = np.array([[0.8, -0.5, 0.3], [0.2, 0.9, -0.6], [-0.7, 0.4, 0.6]])


def default_hook(x_c, pose, latent=None, frequency=6.0):
    """Smooth sinusoidal offsets; every component is at most 1/sqrt(3) in magnitude."""
    phase = pose_phase(pose, latent)
    return np.sin(frequency * (np.asarray(x_c) @ _MIX.T) + phase) / np.sqrt(3.0)


def apply_deformation(x_c, pose, latent=None, cfg=None):
    """``x* = x_c + alpha_d * hook(x_c, pose, latent)``."""
    cfg = cfg or WarpConfig()
    x_c = np.asarray(x_c, dtype=np.float64)
    if cfg.alpha_d == 0:
        return x_c.copy()
    if cfg.hook is None:
        off = default_hook(x_c, pose, latent, cfg.frequency)
    else:
        off = np.asarray(cfg.hook(x_c, pose, latent), dtype=np.float64)
    return x_c + cfg.alpha_d * off


class WarpedField:
    """Observation-space field backed by a canonical delta-SDF field.

    Points are mapped to canonical space by :func:`inverse_lbs`, deformed, and
    then looked up; the base distance ``d0`` is the template SDF at the skinned
    (undeformed) canonical point.
    """

    def __init__(self, canonical, skel, pose, cfg=None, latent=None):
        if not canonical.sdf_mode:
            raise InvalidInputError("the canonical field must use a delta-SDF decoder")
        self.canonical = canonical
        self.skel = skel
        self.pose = pose
        self.cfg = cfg or WarpConfig()
        self.latent = latent
        self.posed = PosedSkeleton(skel, pose)

    @property
    def decoder(self):
        return self.canonical.decoder

    @property
    def rep(self):
        return self.canonical.rep

    sdf_mode = True

    def params(self):
        return self.canonical.params()

    def zero_grads(self):
        return self.canonical.zero_grads()

    def warp(self, x):
        x_c, _ = self.posed.inverse(x, self.cfg.d_r)
        return x_c, apply_deformation(x_c, self.pose, self.latent, self.cfg)

    def forward(self, x, return_cache=False):
        x_c, x_star = self.warp(x)
        return self.canonical.forward(x_star, d0=template_sdf(x_c, self.skel), return_cache=return_cache)

    def backward(self, cache, grad_rgb, grad_sigma, grads=None, need_coords=False, extra_scalar_grad=None):
        return self.canonical.backward(cache, grad_rgb, grad_sigma, grads, need_coords, extra_scalar_grad)


def canonical_query(x_obs, pose, rep, decoder, skel, cfg=None, latent=None):
    """Observation-space point to (color, density) through the canonical codebook."""
    if decoder.mode != DELTA_SDF:
        raise InvalidInputError("canonical queries need a delta-SDF decoder")
    cfg = cfg or WarpConfig()
    x_c = inverse_lbs(x_obs, skel, pose, cfg.d_r)
    x_star = apply_deformation(x_c, pose, latent, cfg)
    out = decoder.forward(codebook.query(rep, x_star))
    sigma = sdf_to_density(template_sdf(x_c, skel), out.scalar, decoder.alpha)
    return DecoderOutput(out.color, sigma)


def template_field(rep, decoder, skel):
    """Canonical field whose base distance is the template SDF."""
    return NeuralField(rep, decoder, sdf=lambda x: template_sdf(x, skel), sdf_grad=lambda x: template_sdf_grad(x, skel))
