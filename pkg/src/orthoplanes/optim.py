"""Losses, regularizers, PSNR, Adam and the single-scene fitting loop."""
import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from ._validation import InvalidInputError, NumericalError
from .renderer import RayBatch, SamplingConfig, generate_rays, render_backward, render_rays

# Random streams derived from the run seed; every consumer keys its own.
STREAM_INIT, STREAM_BATCH, STREAM_SAMPLING, STREAM_EVAL, STREAM_EIKONAL = range(5)


def stream(seed, *key):
    """Independent generator for ``(seed, *key)``."""
    return np.random.default_rng([seed, *key])


def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidInputError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def psnr(mse):
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    if not mse > 0:
        raise InvalidInputError("PSNR needs a positive MSE")
    return -10.0 * math.log10(mse)


def eikonal_loss(points, sdf_gradients):
    """Mean of ``(|grad d| - 1)^2``; ``points`` only fix the sample count."""
    g = np.asarray(sdf_gradients, dtype=np.float64).reshape(-1, 3)
    if len(g) != len(np.asarray(points).reshape(-1, 3)):
        raise InvalidInputError("one gradient per point is required")
    if len(g) == 0:
        return 0.0
    return float(np.mean((np.linalg.norm(g, axis=-1) - 1.0) ** 2))


def offset_weights(d0s, k, d_r):
    """``exp(-d0^2 / k)`` within ``d_r`` of the template, 1 elsewhere."""
    if not k > 0:
        raise InvalidInputError("offset sharpness k must be positive")
    d0s = np.asarray(d0s, dtype=np.float64)
    return np.where(np.abs(d0s) <= d_r, np.exp(-(d0s ** 2) / k), 1.0)


def offset_loss(d0s, delta_ds, k, d_r):
    """Weighted mean of squared SDF offsets."""
    w = offset_weights(d0s, k, d_r)
    dd = np.asarray(delta_ds, dtype=np.float64)
    return float(np.mean(w * dd ** 2)) if dd.size else 0.0


def offset_loss_grad(d0s, delta_ds, k, d_r, count=None):
    """d(offset_loss)/d(delta_d); ``count`` overrides the averaging denominator."""
    dd = np.asarray(delta_ds, dtype=np.float64)
    n = dd.size if count is None else count
    return 2.0 * offset_weights(d0s, k, d_r) * dd / n


def deform_loss(offsets):
    o = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
    return float(np.mean(np.sum(o ** 2, axis=-1))) if len(o) else 0.0


@dataclass
class AdamState:
    lr: dict
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr_for(self, name):
        if isinstance(self.lr, dict):
            return self.lr.get(name, self.lr.get("default", 1e-3))
        return self.lr


def adam_step(state, params, grads, lr_scale=1.0):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        step = (lr_scale * state.lr_for(name) / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p -= step.astype(p.dtype, copy=False)
    return params


@dataclass
class LossReport:
    step: int
    mse: float
    psnr: float
    eikonal: float = 0.0
    offset: float = 0.0
    deform: float = 0.0
    total: float = 0.0

    FIELDS = ("step", "mse", "psnr", "eikonal", "offset", "deform", "total")


@dataclass
class RayData:
    """Flattened training rays with their target colors."""

    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    colors: np.ndarray
    n_views: int = 1

    def __len__(self):
        return len(self.origins)

    @classmethod
    def from_views(cls, cameras, images):
        parts = [generate_rays(c) for c in cameras]
        cols = np.concatenate([np.asarray(im, dtype=np.float64).reshape(-1, 3) for im in images])
        return cls(np.concatenate([p.origins for p in parts]), np.concatenate([p.directions for p in parts]),
                   np.concatenate([p.t_near for p in parts]), np.concatenate([p.t_far for p in parts]),
                   cols, len(parts))

    def subset(self, idx):
        return RayData(self.origins[idx], self.directions[idx], self.t_near[idx], self.t_far[idx],
                       self.colors[idx], self.n_views)


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_rays: int = 4096
    chunk_rays: int = 1024
    lr_features: float = 1e-2
    lr_decoder: float = 1e-3
    lr_final_scale: float = 0.1  # exponential decay reaches this factor at the last step
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    seed: int = 0
    threads: int = 1
    log_every: int = 10
    eval_every: int = 0
    lambda_deform: float = 0.5
    lambda_offset: float = 1.0
    lambda_eikonal: float = 0.01
    offset_k: float = 0.01
    offset_d_r: float = 0.1
    eikonal_points: int = 0


@dataclass
class TrainState:
    field: object
    adam: AdamState
    trace: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LossReport.FIELDS)
            for r in self.trace:
                w.writerow([r.step] + [repr(float(getattr(r, k))) for k in LossReport.FIELDS[1:]])


def learning_rates(fld, cfg):
    return {name: (cfg.lr_features if name == "features" else cfg.lr_decoder) for name in fld.params()}


def _chunk_pass(fld, data, cfg, rng, n_batch, n_samples_total):
    """Forward + backward for one chunk of rays; returns (grads, squared error, offset sum)."""
    batch = RayBatch(data.origins, data.directions, data.t_near, data.t_far)
    color, cache = render_rays(fld, batch, cfg.sampling, rng, return_cache=True)
    diff = color - data.colors
    if not np.all(np.isfinite(diff)):
        raise NumericalError("non-finite rendered color or target")
    grad_color = diff * (2.0 / (3 * n_batch))
    extra, off = None, 0.0
    if fld.sdf_mode and cfg.lambda_offset > 0:
        _, _, d0, scalar = cache[1]
        off = float(np.sum(offset_weights(d0, cfg.offset_k, cfg.offset_d_r) * np.asarray(scalar, np.float64) ** 2))
        extra = cfg.lambda_offset * offset_loss_grad(d0, scalar, cfg.offset_k, cfg.offset_d_r, n_samples_total)
    grads = render_backward(fld, cache, grad_color, extra_scalar_grad=extra)
    return grads, float(np.sum(diff ** 2)), off


def train_sso(data, fld, cfg, eval_data=None, callback=None, state=None):
    """Fit ``fld`` to the rays in ``data`` by minimizing photometric MSE.

    Each step draws ``cfg.batch_rays`` rays, splits them into fixed chunks
    that are processed independently (optionally on ``cfg.threads`` workers)
    and sums chunk gradients in chunk order, so the trajectory is identical
    for any thread count. Raises :class:`NumericalError` on a non-finite loss.
    """
    params = fld.params()
    if state is None:
        state = TrainState(fld, AdamState(learning_rates(fld, cfg)))
    batch_rng = stream(cfg.seed, STREAM_BATCH)
    n = len(data)
    B = min(cfg.batch_rays, n)
    starts = list(range(0, B, cfg.chunk_rays))
    n_samples_total = B * cfg.sampling.n_samples
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        with threadpool_limits(limits=1):
            for step in range(1, cfg.steps + 1):
                idx = batch_rng.integers(0, n, B)
                chunk = data.subset(idx)

                def work(k, chunk=chunk, step=step):
                    s = starts[k]
                    sub = chunk.subset(slice(s, s + cfg.chunk_rays))
                    rng = stream(cfg.seed, STREAM_SAMPLING, step, k)
                    return _chunk_pass(fld, sub, cfg, rng, B, n_samples_total)

                results = list(pool.map(work, range(len(starts)))) if pool else [work(k) for k in range(len(starts))]
                grads, sq, off = results[0]
                for g, s_, o in results[1:]:
                    for name in grads:
                        grads[name] += g[name]
                    sq += s_
                    off += o
                mse = sq / (3 * B)
                offset = off / n_samples_total if fld.sdf_mode else 0.0
                eik = 0.0
                if fld.sdf_mode and cfg.eikonal_points > 0 and cfg.lambda_eikonal > 0:
                    pts = stream(cfg.seed, STREAM_EIKONAL, step).uniform(-1, 1, (cfg.eikonal_points, 3))
                    eik = fld.eikonal_backward(pts, cfg.lambda_eikonal, grads)
                total = mse + cfg.lambda_offset * offset + cfg.lambda_eikonal * eik
                if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise NumericalError(f"non-finite loss at step {step}")
                frac = (step - 1) / max(cfg.steps - 1, 1)
                adam_step(state.adam, params, grads, cfg.lr_final_scale ** frac)
                if step % cfg.log_every == 0 or step == cfg.steps:
                    report = LossReport(step, mse, psnr(mse) if mse > 0 else float("inf"),
                                        eikonal=eik, offset=offset, deform=0.0, total=total)
                    state.trace.append(report)
                    if callback:
                        callback(report)
                if eval_data is not None and cfg.eval_every and step % cfg.eval_every == 0 and step != cfg.steps:
                    state.evals.append((step, *evaluate(fld, eval_data, cfg)))
    finally:
        if pool:
            pool.shutdown()
    if eval_data is not None:
        state.evals.append((cfg.steps, *evaluate(fld, eval_data, cfg)))
    return state


def predict_rays(fld, data, sampling, seed=0, chunk=4096):
    """Deterministic render of every ray in ``data``."""
    cfg = SamplingConfig(sampling.n_coarse, sampling.n_fine, sampling.importance, False, sampling.background)
    out = []
    for k, s in enumerate(range(0, len(data), chunk)):
        batch = RayBatch(data.origins[s:s + chunk], data.directions[s:s + chunk],
                         data.t_near[s:s + chunk], data.t_far[s:s + chunk])
        out.append(render_rays(fld, batch, cfg, stream(seed, STREAM_EVAL, k)))
    return np.concatenate(out) if out else np.zeros((0, 3))


def evaluate(fld, data, cfg):
    """Mean per-view PSNR over ``data``; returns (mean_psnr, per_view_psnrs)."""
    with threadpool_limits(limits=1):
        pred = predict_rays(fld, data, cfg.sampling, cfg.seed)
    per_view = [psnr(max(mse_loss(p, t), 1e-20))
                for p, t in zip(np.array_split(pred, data.n_views), np.array_split(data.colors, data.n_views))]
    return float(np.mean(per_view)), per_view


def report_dict(r):
    return asdict(r)
