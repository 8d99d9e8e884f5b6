"""Analytic ground-truth scenes, an exact oracle renderer and NeRF-synthetic I/O.

Scenes are unions of constant-density, constant-color convex primitives.
Along any ray such a medium is piecewise constant, so the oracle splits each
ray at the uniform sample grid *and* at every primitive boundary and
composites the resulting segments; the quadrature is then exact up to
rounding and independent of the learnable pipeline.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import formats
from ._validation import DatasetError, InvalidInputError
from .renderer import Camera, clip_to_box, composite, generate_rays


@dataclass
class Primitive:
    """Sphere (``radius``), capsule (segment ``a``-``b`` plus ``radius``) or box (``half_size``)."""

    kind: str
    color: tuple
    sigma: float
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.0
    a: tuple = None
    b: tuple = None
    half_size: tuple = None

    def __post_init__(self):
        if self.kind not in ("sphere", "capsule", "box"):
            raise InvalidInputError(f"unknown primitive kind {self.kind!r}")
        if not self.sigma > 0:
            raise InvalidInputError("primitive density must be positive")
        c = np.asarray(self.color, dtype=np.float64)
        if c.shape != (3,) or np.any(c < 0) or np.any(c > 1):
            raise InvalidInputError("primitive color must be RGB in [0, 1]")
        vals = [self.center, self.radius, self.a, self.b, self.half_size]
        if not all(np.all(np.isfinite(np.asarray(v, dtype=np.float64))) for v in vals if v is not None):
            raise InvalidInputError("primitive parameters must be finite")

    def sdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "sphere":
            return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius
        if self.kind == "capsule":
            return capsule_sdf(x, np.asarray(self.a), np.asarray(self.b), self.radius)
        q = np.abs(x - np.asarray(self.center)) - np.asarray(self.half_size)
        return np.linalg.norm(np.maximum(q, 0), axis=-1) + np.minimum(q.max(axis=-1), 0)

    def ray_interval(self, o, d):
        """Entry/exit depths along unit-direction rays; ``t_in > t_out`` on a miss."""
        if self.kind == "sphere":
            return _ray_sphere(o, d, np.asarray(self.center), self.radius)
        if self.kind == "box":
            lo = np.asarray(self.center) - np.asarray(self.half_size)
            hi = np.asarray(self.center) + np.asarray(self.half_size)
            return _ray_slab(o, d, lo, hi)
        # a capsule is convex, so its chord is the hull of its pieces' chords
        a, b = np.asarray(self.a), np.asarray(self.b)
        pieces = [_ray_sphere(o, d, a, self.radius), _ray_sphere(o, d, b, self.radius),
                  _ray_cylinder(o, d, a, b, self.radius)]
        t_in = np.full(len(o), np.inf)
        t_out = np.full(len(o), -np.inf)
        for lo, hi in pieces:
            hit = lo <= hi
            t_in = np.where(hit, np.minimum(t_in, lo), t_in)
            t_out = np.where(hit, np.maximum(t_out, hi), t_out)
        return t_in, t_out


def capsule_sdf(x, a, b, r):
    ab = b - a
    h = np.clip(((x - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(x - a - h[..., None] * ab, axis=-1) - r


def _ray_sphere(o, d, c, r):
    oc = o - c
    b = np.einsum("ij,ij->i", oc, d)
    disc = b * b - (np.einsum("ij,ij->i", oc, oc) - r * r)
    s = np.sqrt(np.maximum(disc, 0.0))
    miss = disc <= 0
    return np.where(miss, np.inf, -b - s), np.where(miss, -np.inf, -b + s)


def _ray_slab(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    return np.minimum(t1, t2).max(axis=-1), np.maximum(t1, t2).min(axis=-1)


def _ray_cylinder(o, d, a, b, r):
    """Finite cylinder between the planes through ``a`` and ``b``."""
    axis = (b - a) / np.linalg.norm(b - a)
    length = np.linalg.norm(b - a)
    oa = o - a
    d_par = d @ axis
    o_par = oa @ axis
    d_perp = d - d_par[:, None] * axis
    o_perp = oa - o_par[:, None] * axis
    A = np.einsum("ij,ij->i", d_perp, d_perp)
    B = np.einsum("ij,ij->i", o_perp, d_perp)
    Cq = np.einsum("ij,ij->i", o_perp, o_perp) - r * r
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = B * B - A * Cq
        s = np.sqrt(np.maximum(disc, 0.0))
        lo = np.where(A > 0, (-B - s) / A, np.where(Cq <= 0, -np.inf, np.inf))
        hi = np.where(A > 0, (-B + s) / A, np.where(Cq <= 0, np.inf, -np.inf))
        lo = np.where((A > 0) & (disc <= 0), np.inf, lo)
        hi = np.where((A > 0) & (disc <= 0), -np.inf, hi)
        p0 = -o_par / d_par
        p1 = (length - o_par) / d_par
    inside_slab = (o_par >= 0) & (o_par <= length)
    s_lo = np.where(d_par == 0, np.where(inside_slab, -np.inf, np.inf), np.minimum(p0, p1))
    s_hi = np.where(d_par == 0, np.where(inside_slab, np.inf, -np.inf), np.maximum(p0, p1))
    return np.maximum(lo, s_lo), np.minimum(hi, s_hi)


@dataclass
class AnalyticScene:
    primitives: list = field(default_factory=list)
    background: tuple = (1.0, 1.0, 1.0)

    def sdf_matrix(self, x):
        return np.stack([p.sdf(x) for p in self.primitives], axis=-1)


def eval_scene(scene, x):
    """Color and density at points ``x`` (P, 3).

    Inside any primitive the density is that of the primitive with the
    smallest signed distance, whose color also wins; outside, density is 0 and
    the color is that of the nearest primitive.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if not scene.primitives:
        return np.tile(np.asarray(scene.background, dtype=np.float64), (len(x), 1)), np.zeros(len(x))
    d = scene.sdf_matrix(x)
    win = np.argmin(d, axis=-1)
    colors = np.array([p.color for p in scene.primitives], dtype=np.float64)
    sig = np.array([p.sigma for p in scene.primitives], dtype=np.float64)
    inside = np.take_along_axis(d, win[:, None], axis=-1)[:, 0] <= 0
    return colors[win], np.where(inside, sig[win], 0.0)


def blobs_scene(sigma=50.0):
    """Seven separated spheres with no symmetry plane."""
    specs = [
        ((-0.45, -0.30, -0.20), 0.30, (0.90, 0.20, 0.15)),
        ((0.38, -0.42, 0.05), 0.22, (0.15, 0.65, 0.25)),
        ((0.05, 0.42, -0.35), 0.25, (0.20, 0.30, 0.90)),
        ((0.52, 0.30, 0.42), 0.15, (0.95, 0.80, 0.10)),
        ((-0.38, 0.32, 0.47), 0.18, (0.70, 0.20, 0.75)),
        ((0.10, -0.05, 0.55), 0.10, (0.10, 0.75, 0.80)),
        ((-0.05, -0.62, 0.50), 0.12, (0.95, 0.50, 0.05)),
    ]
    prims = [Primitive("sphere", color=col, sigma=sigma, center=c, radius=r) for c, r, col in specs]
    return AnalyticScene(prims, background=(1.0, 1.0, 1.0))


def oracle_render_rays(scene, origins, directions, t_near, t_far, n_samples=512):
    """Exact compositing of piecewise-constant media along each ray."""
    R = len(origins)
    edges = t_near[:, None] + (t_far - t_near)[:, None] * (np.arange(n_samples + 1) / n_samples)
    cuts = [edges]
    for p in scene.primitives:
        lo, hi = p.ray_interval(origins, directions)
        for t in (lo, hi):
            cuts.append(np.clip(np.where(np.isfinite(t), t, t_near), t_near, t_far)[:, None])
    t = np.sort(np.concatenate(cuts, axis=1), axis=1)
    mids = 0.5 * (t[:, 1:] + t[:, :-1])
    deltas = np.diff(t, axis=1)
    pts = origins[:, None, :] + mids[..., None] * directions[:, None, :]
    rgb, sigma = eval_scene(scene, pts.reshape(-1, 3))
    color, _, _ = composite(rgb.reshape(R, -1, 3), sigma.reshape(R, -1), deltas, scene.background)
    return color


def oracle_render(scene, cam, n_samples=512, chunk=2048):
    batch = generate_rays(cam)
    out = [oracle_render_rays(scene, batch.origins[s:s + chunk], batch.directions[s:s + chunk],
                              batch.t_near[s:s + chunk], batch.t_far[s:s + chunk], n_samples)
           for s in range(0, len(batch.origins), chunk)]
    return np.concatenate(out).reshape(cam.height, cam.width, 3)


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """Camera-to-world matrix for a camera at ``position`` looking at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    z = position - np.asarray(target)
    z /= np.linalg.norm(z)
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross((0.0, 1.0, 0.0), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, z, position
    return m


def orbit_poses(n, rng, radius=4.0, elevation=(-20.0, 50.0)):
    """``n`` cameras on a sphere: uniform azimuth, elevation uniform in degrees."""
    az = rng.uniform(0.0, 2 * np.pi, n)
    el = np.radians(rng.uniform(*elevation, n))
    pos = radius * np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
    return [look_at(p) for p in pos]


@dataclass
class Frame:
    file_path: str
    transform_matrix: np.ndarray


@dataclass
class DatasetManifest:
    camera_angle_x: float
    frames: list
    split: str = "train"
    root: Path = None
    width: int = None
    height: int = None

    def cameras(self, near=0.1, far=10.0):
        return [Camera(f.transform_matrix, self.camera_angle_x, self.width, self.height, near, far)
                for f in self.frames]

    def image_path(self, frame):
        return _resolve_image(self.root, frame.file_path)

    def load_images(self, background=(1.0, 1.0, 1.0)):
        """(V, H, W, 3) float images; the f32 raw sidecar is preferred when present."""
        out = []
        for f in self.frames:
            path = self.image_path(f)
            raw = path.with_suffix(".raw")
            out.append(formats.read_raw(raw).astype(np.float64) if raw.exists() else formats.read_png(path, background))
        return np.stack(out)

    def to_json(self):
        return {
            "camera_angle_x": float(self.camera_angle_x),
            "frames": [{"file_path": f.file_path, "transform_matrix": np.asarray(f.transform_matrix).tolist()}
                       for f in self.frames],
        }


def bake_dataset(scene, n_train, n_test, resolution, seed=0, out_dir=None, fov_x=0.69,
                 radius=4.0, n_samples=512):
    """Render train/test views of ``scene`` with the oracle renderer.

    Returns ``{"train": (manifest, images), "test": (manifest, images)}``.
    With ``out_dir`` the NeRF-synthetic layout is written: ``transforms_<split>.json``
    plus ``<split>/r_<i>.png`` and a ``.raw`` float sidecar per image.
    """
    if n_train < 1 or n_test < 0 or resolution < 1:
        raise InvalidInputError("need at least one training view and a positive resolution")
    root = Path(out_dir) if out_dir is not None else None
    streams = np.random.SeedSequence(seed).spawn(2)
    result = {}
    for split, n, ss in (("train", n_train, streams[0]), ("test", n_test, streams[1])):
        poses = orbit_poses(n, np.random.default_rng(ss), radius)
        frames, images = [], []
        for i, m in enumerate(poses):
            cam = Camera(m, fov_x, resolution, resolution)
            images.append(oracle_render(scene, cam, n_samples))
            frames.append(Frame(f"./{split}/r_{i}", m))
        manifest = DatasetManifest(fov_x, frames, split, root, resolution, resolution)
        images = np.stack(images) if images else np.zeros((0, resolution, resolution, 3))
        if root is not None:
            (root / split).mkdir(parents=True, exist_ok=True)
            for f, img in zip(frames, images):
                stem = root / f.file_path
                formats.write_png(stem.with_suffix(".png"), img)
                formats.write_raw(stem.with_suffix(".raw"), img)
            (root / f"transforms_{split}.json").write_text(json.dumps(manifest.to_json(), indent=2))
        result[split] = (manifest, images)
    return result


def _resolve_image(root, file_path):
    p = Path(root) / file_path if root is not None else Path(file_path)
    if p.suffix.lower() == ".png" and p.exists():
        return p
    cand = p.with_name(p.name + ".png") if p.suffix.lower() != ".png" else p
    return cand


def load_dataset(path, split="train", scale=1.0):
    """Parse a NeRF-synthetic ``transforms_<split>.json`` (or a direct manifest path).

    ``scale`` multiplies camera positions, for fitting scenes larger than the
    unit box.
    """
    path = Path(path)
    manifest_path = path / f"transforms_{split}.json" if path.is_dir() else path
    root = manifest_path.parent
    try:
        meta = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as e:
        raise DatasetError(f"{manifest_path}: invalid JSON ({e})") from None
    for key in ("camera_angle_x", "frames"):
        if key not in meta:
            raise DatasetError(f"{manifest_path}: missing field '{key}'")
    frames, size = [], None
    for i, fr in enumerate(meta["frames"]):
        for key in ("file_path", "transform_matrix"):
            if key not in fr:
                raise DatasetError(f"{manifest_path}: frame {i} missing field '{key}'")
        m = np.asarray(fr["transform_matrix"], dtype=np.float64)
        if m.shape != (4, 4) or not np.all(np.isfinite(m)):
            raise DatasetError(f"{manifest_path}: frame {i} transform_matrix is not a finite 4x4 matrix")
        R = m[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-4 or np.linalg.det(R) < 0:
            raise DatasetError(f"{manifest_path}: frame {i} transform_matrix is not rigid")
        m = m.copy()
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-12:
            m[:3, :3] = _orthonormalize(R)
        m[:3, 3] *= scale
        img = _resolve_image(root, fr["file_path"])
        if not img.exists():
            raise DatasetError(f"{manifest_path}: frame {i} image not found: {img}")
        with Image.open(img) as im:
            if size is None:
                size = im.size
            elif im.size != size:
                raise DatasetError(f"{manifest_path}: frame {i} resolution {im.size} differs from {size}")
        frames.append(Frame(fr["file_path"], m))
    width, height = size if size else (None, None)
    return DatasetManifest(float(meta["camera_angle_x"]), frames, split, root, width, height)


def _orthonormalize(R):
    u, _, vt = np.linalg.svd(R)
    return u @ vt
