"""Pinhole rays, stratified/importance sampling and emission-absorption compositing.

Cameras follow the NeRF-synthetic convention: ``c2w`` maps camera to world,
the camera looks down its local -z axis with +y up. Rays are clipped to the
scene box [-1, 1]^3 and intersected with [near, far].
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._validation import InvalidInputError

SCENE_BOUND = 1.0


@dataclass
class Camera:
    c2w: np.ndarray
    fov_x: float
    width: int
    height: int
    near: float = 0.1
    far: float = 10.0

    def __post_init__(self):
        c2w = np.asarray(self.c2w, dtype=np.float64)
        if c2w.shape == (4, 4):
            c2w = c2w[:3]
        if c2w.shape != (3, 4) or not np.all(np.isfinite(c2w)):
            raise InvalidInputError("camera-to-world must be a finite 3x4 or 4x4 matrix")
        R = c2w[:, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise InvalidInputError("camera rotation is not orthonormal")
        if not 0 < self.near < self.far:
            raise InvalidInputError("camera needs 0 < near < far")
        if not 0 < self.fov_x < np.pi:
            raise InvalidInputError("field of view must be in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError("image size must be positive")
        self.c2w = c2w

    @property
    def focal(self):
        return 0.5 * self.width / np.tan(0.5 * self.fov_x)


@dataclass
class SamplingConfig:
    n_coarse: int = 64
    n_fine: int = 64
    importance: bool = True
    perturb: bool = True
    background: tuple = (1.0, 1.0, 1.0)

    @property
    def n_samples(self):
        return self.n_coarse + (self.n_fine if self.importance else 0)


@dataclass
class RayBatch:
    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3), unit length
    t_near: np.ndarray = None  # (R,)
    t_far: np.ndarray = None
    t: np.ndarray = None  # (R, S) ascending sample depths
    deltas: np.ndarray = None  # (R, S)

    @property
    def points(self):
        return self.origins[:, None, :] + self.t[..., None] * self.directions[:, None, :]


def generate_rays(cam, pixels=None):
    """One ray per pixel centre. ``pixels`` is an (R, 2) array of (row, col)."""
    if pixels is None:
        rows, cols = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
        rows, cols = rows.ravel(), cols.ravel()
    else:
        pixels = np.asarray(pixels)
        rows, cols = pixels[:, 0], pixels[:, 1]
    d_cam = np.stack([
        (cols + 0.5 - 0.5 * cam.width) / cam.focal,
        -(rows + 0.5 - 0.5 * cam.height) / cam.focal,
        -np.ones(len(rows)),
    ], axis=-1)
    d = d_cam @ cam.c2w[:, :3].T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(cam.c2w[:, 3], d.shape).copy()
    batch = RayBatch(o, d)
    batch.t_near, batch.t_far = clip_to_box(o, d, cam.near, cam.far)
    return batch


def clip_to_box(origins, directions, near, far, bound=SCENE_BOUND):
    """Slab intersection of rays with the scene box, limited to [near, far].

    Rays that miss get ``t_near == t_far`` so every interval has zero length.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        a = (-bound - origins) * inv
        b = (bound - origins) * inv
    lo = np.nanmax(np.where(np.isnan(a), -np.inf, np.minimum(a, b)), axis=-1)
    hi = np.nanmin(np.where(np.isnan(a), np.inf, np.maximum(a, b)), axis=-1)
    t0 = np.maximum(lo, near)
    t1 = np.minimum(hi, far)
    t1 = np.maximum(t1, t0)
    return t0, t1


def stratified_sample(t_near, t_far, n, rng=None, perturb=True):
    """One depth per equal-width bin of [t_near, t_far]; bin midpoints if not perturbed."""
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    if perturb:
        u = np.random.default_rng(rng).random(t_near.shape + (n,))
    else:
        u = np.full(t_near.shape + (n,), 0.5)
    k = np.arange(n)
    return t_near[..., None] + (t_far - t_near)[..., None] * (k + u) / n


def importance_sample(t_near, t_far, coarse_weights, n_fine, rng=None, perturb=True):
    """Inverse-transform samples from the piecewise-constant pdf over the coarse bins.

    Bin ``i`` is the i-th of ``n`` equal strata of [t_near, t_far] and carries
    probability proportional to ``coarse_weights[:, i]``. Rays whose weights
    are all zero fall back to the uniform pdf.
    """
    w = np.asarray(coarse_weights, dtype=np.float64)
    R, n = w.shape
    w = np.maximum(w, 0.0)
    total = w.sum(axis=1, keepdims=True)
    pdf = np.where(total > 0, w / np.where(total > 0, total, 1.0), 1.0 / n)
    cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    if perturb:
        u = np.random.default_rng(rng).random((R, n_fine))
    else:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (R, n_fine))
    # one global searchsorted: offset each ray's cdf so rows never interleave
    offset = 2.0 * np.arange(R)[:, None]
    pos = np.searchsorted((cdf + offset).ravel(), (u + offset).ravel(), side="right").reshape(R, n_fine)
    i = np.clip(pos - np.arange(R)[:, None] * (n + 1) - 1, 0, n - 1)
    c0 = np.take_along_axis(cdf, i, axis=1)
    p = np.take_along_axis(pdf, i, axis=1)
    frac = np.where(p > 0, (u - c0) / np.where(p > 0, p, 1.0), 0.5)
    frac = np.clip(frac, 0.0, 1.0)
    width = (np.asarray(t_far) - np.asarray(t_near))[:, None] / n
    return np.asarray(t_near)[:, None] + (i + frac) * width


def interval_lengths(t, t_near, t_far):
    """``t[i+1] - t[i]``; the last interval is ``(t_far - t_near) / S``."""
    S = t.shape[-1]
    last = ((np.asarray(t_far) - np.asarray(t_near)) / S)[..., None]
    return np.concatenate([np.diff(t, axis=-1), last], axis=-1)


def composite(rgb, sigma, deltas, background, check=True):
    """Emission-absorption quadrature along each ray.

    Parameters
    ----------
    rgb : (R, S, 3) colors, sigma : (R, S) densities, deltas : (R, S) lengths.

    Returns
    -------
    color : (R, 3), weights : (R, S), t_end : (R,) residual transmittance.
    ``weights.sum(-1) + t_end == 1`` up to rounding.
    """
    if check and (np.any(sigma < 0) or np.any(deltas < 0)):
        raise InvalidInputError("densities and interval lengths must be non-negative")
    tau = sigma * deltas
    acc = np.cumsum(tau, axis=-1)
    trans = np.exp(-(acc - tau))
    alpha = -np.expm1(-tau)
    weights = trans * alpha
    t_end = np.exp(-acc[..., -1]) if tau.shape[-1] else np.ones(tau.shape[:-1])
    bg = np.asarray(background, dtype=np.float64)
    color = np.einsum("rs,rsc->rc", weights, rgb) + t_end[:, None] * bg
    return color, weights, t_end


def composite_ray(samples, background):
    """Composite a single ray given ``(color, sigma, delta)`` triples."""
    if len(samples) == 0:
        return np.asarray(background, dtype=np.float64), np.zeros(0)
    rgb = np.array([s[0] for s in samples], dtype=np.float64)[None]
    sigma = np.array([s[1] for s in samples], dtype=np.float64)[None]
    delta = np.array([s[2] for s in samples], dtype=np.float64)[None]
    color, w, _ = composite(rgb, sigma, delta, background)
    return color[0], w[0]


def composite_backward(rgb, sigma, deltas, weights, t_end, background, grad_color):
    """Gradients of :func:`composite` w.r.t. ``rgb`` and ``sigma``."""
    g_rgb = weights[..., None] * grad_color[:, None, :]
    a = np.einsum("rsc,rc->rs", rgb, grad_color)
    b = grad_color @ np.asarray(background, dtype=np.float64)
    wa = weights * a
    # suffix[k] = sum_{i>k} w_i a_i + t_end b
    suffix = np.cumsum(wa[:, ::-1], axis=1)[:, ::-1] - wa + (t_end * b)[:, None]
    trans_next = np.exp(-np.cumsum(sigma * deltas, axis=-1))
    g_tau = trans_next * a - suffix
    return g_rgb, g_tau * deltas


def sample_rays(batch, field_fn, cfg, rng=None):
    """Fill ``batch.t`` / ``batch.deltas``; ``field_fn(points) -> (rgb, sigma)`` feeds the coarse pass."""
    rng = np.random.default_rng(rng)
    t = stratified_sample(batch.t_near, batch.t_far, cfg.n_coarse, rng, cfg.perturb)
    if cfg.importance and cfg.n_fine > 0:
        deltas = interval_lengths(t, batch.t_near, batch.t_far)
        pts = batch.origins[:, None, :] + t[..., None] * batch.directions[:, None, :]
        rgb, sigma = field_fn(pts.reshape(-1, 3))
        R = len(t)
        _, w, _ = composite(rgb.reshape(R, -1, 3), sigma.reshape(R, -1), deltas, cfg.background)
        fine = importance_sample(batch.t_near, batch.t_far, w, cfg.n_fine, rng, cfg.perturb)
        t = np.sort(np.concatenate([t, fine], axis=1), axis=1)
    batch.t = t
    batch.deltas = interval_lengths(t, batch.t_near, batch.t_far)
    return batch


def render_rays(field, batch, cfg, rng=None, return_cache=False):
    """Sample, evaluate and composite a ray batch through a field."""
    batch = sample_rays(batch, field.forward, cfg, rng)
    R, S = batch.t.shape
    rgb, sigma, fcache = field.forward(batch.points.reshape(-1, 3), return_cache=True)
    rgb = rgb.astype(np.float64).reshape(R, S, 3)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(R, S)
    color, weights, t_end = composite(rgb, sigma, batch.deltas, cfg.background)
    if return_cache:
        return color, (batch, fcache, rgb, sigma, weights, t_end, cfg.background)
    return color


def render_backward(field, cache, grad_color, grads=None, extra_scalar_grad=None):
    """Reverse of :func:`render_rays`: gradients w.r.t. all field parameters."""
    batch, fcache, rgb, sigma, weights, t_end, bg = cache
    g_rgb, g_sigma = composite_backward(rgb, sigma, batch.deltas, weights, t_end, bg, grad_color)
    dt = field.decoder.dtype
    grads, _ = field.backward(fcache, g_rgb.reshape(-1, 3).astype(dt), g_sigma.ravel().astype(dt), grads,
                              extra_scalar_grad=extra_scalar_grad)
    return grads


def render_image(cam, field, cfg=None, seed=0, chunk=4096, threads=1):
    """Render a full image; returns an (H, W, 3) array.

    Rays are processed in fixed-size chunks, each with its own random stream
    spawned from ``seed``, so the result does not depend on ``threads``.
    """
    cfg = cfg or SamplingConfig(perturb=False)
    batch = generate_rays(cam)
    R = len(batch.origins)
    starts = range(0, R, chunk)
    seeds = np.random.SeedSequence(seed).spawn(len(starts))

    def work(k):
        s = starts[k]
        sub = RayBatch(batch.origins[s:s + chunk], batch.directions[s:s + chunk],
                       batch.t_near[s:s + chunk], batch.t_far[s:s + chunk])
        return render_rays(field, sub, cfg, np.random.default_rng(seeds[k]))

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(work, range(len(starts))))
    else:
        parts = [work(k) for k in range(len(starts))]
    return np.concatenate(parts).reshape(cam.height, cam.width, 3)
