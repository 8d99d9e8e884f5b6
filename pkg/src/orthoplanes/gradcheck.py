"""Finite-difference verification of every hand-written reverse pass.

Each parameter class is checked on many small random instances. A scalar
probe loss ``L = sum(r * output)`` with a fixed random cotangent ``r`` is
differentiated analytically and by central differences, and the two are
compared with the normwise relative error ``max|a - r| / max|r|`` over the
probed entries.

Two precisions are supported. ``"high"`` runs the model and the reference
in float64. ``"standard"`` computes the analytic gradient with float32
parameters (the training dtype) against a float64 reference, so the error
floor is float32 round-off.
"""
from dataclasses import dataclass, field

import numpy as np

from . import codebook
from .decoder import DELTA_SDF, DENSITY, MlpDecoder
from .field import NeuralField
from .renderer import RayBatch, SamplingConfig, clip_to_box, render_backward, render_rays

CLASSES = ("plane_features", "voxel_features", "decoder", "log_alpha", "coords")
TOLERANCE = {"standard": 1e-4, "high": 1e-6}
_STEP = 1e-6  # coordinates: interpolation has kinks at grid nodes, keep the stencil narrow
_PARAM_STEP = 1e-3


@dataclass
class ClassReport:
    name: str
    errors: list = field(default_factory=list)

    @property
    def worst(self):
        return max(self.errors) if self.errors else float("nan")


@dataclass
class GradCheckReport:
    precision: str
    tolerance: float
    classes: dict

    @property
    def passed(self):
        return all(c.worst < self.tolerance for c in self.classes.values())

    def lines(self):
        out = [f"{'class':<16}{'instances':>10}{'worst_rel_err':>16}  status"]
        for c in self.classes.values():
            ok = "ok" if c.worst < self.tolerance else "FAIL"
            out.append(f"{c.name:<16}{len(c.errors):>10}{c.worst:>16.3e}  {ok}")
        return out


def rel_error(analytic, reference):
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    scale = np.abs(reference).max()
    if scale == 0:
        return float(np.abs(analytic).max())
    return float(np.abs(analytic - reference).max() / scale)


def _rays(rng, n):
    o = rng.normal(size=(n, 3))
    o *= 2.5 / np.linalg.norm(o, axis=1, keepdims=True)
    target = rng.uniform(-0.5, 0.5, (n, 3))
    d = target - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t0, t1 = clip_to_box(o, d, 0.1, 10.0)
    return RayBatch(o, d, t0, t1)


def _model(kind, rng, mode):
    K = int(rng.integers(2, 4)) if kind == "orthoplanes" else 1
    N = int(rng.integers(3, 6))
    C = int(rng.integers(2, 5))
    rep = codebook.make_representation(kind, N, C, K=K, rng=rng, scale=0.5, dtype=np.float64)
    dec = MlpDecoder.create(C, hidden=(8, 8), mode=mode, rng=rng, dtype=np.float64, alpha=0.3)
    sdf = (lambda x: np.linalg.norm(x, axis=-1) - 0.5) if mode == DELTA_SDF else None
    return NeuralField(rep, dec, sdf=sdf)


def _cast(fld, dtype):
    rep = codebook.replace_features(fld.rep, fld.rep.features.astype(dtype))
    d = fld.decoder
    dec = MlpDecoder([w.astype(dtype) for w in d.weights], [b.astype(dtype) for b in d.biases],
                     d.mode, d.log_alpha.copy())
    return NeuralField(rep, dec, sdf=fld.sdf)


_CFG = SamplingConfig(n_coarse=8, n_fine=0, importance=False, perturb=False, background=(0.2, 0.5, 0.8))


def _render_loss(fld, batch, r):
    return float(np.sum(render_rays(fld, batch, _CFG) * r))


def _render_grads(fld, batch, r):
    _, cache = render_rays(fld, batch, _CFG, return_cache=True)
    return render_backward(fld, cache, r)


def _probe(n_total, rng, preferred, n_probe=10):
    """Entries to difference: half from ``preferred`` (touched texels), half uniform."""
    picks = list(rng.integers(0, n_total, n_probe // 2))
    if len(preferred):
        picks += list(rng.choice(preferred, n_probe - len(picks)))
    return np.unique(picks)


def _param_instance(cls, rng, precision, fault):
    kind = {"plane_features": rng.choice(["triplane", "orthoplanes"]), "voxel_features": "voxel"}.get(cls)
    kind = kind or rng.choice(["triplane", "orthoplanes", "voxel"])
    mode = DELTA_SDF if cls == "log_alpha" or (cls == "decoder" and rng.random() < 0.5) else DENSITY
    ref = _model(str(kind), rng, mode)
    batch = _rays(rng, 6)
    r = rng.normal(size=(6, 3))
    test = ref if precision == "high" else _cast(ref, np.float32)
    grads = _render_grads(test, batch, r)
    if fault == cls:
        for k in grads:
            grads[k] = -grads[k]
    params = ref.params()
    names = {"plane_features": ["features"], "voxel_features": ["features"], "log_alpha": ["log_alpha"],
             "decoder": [k for k in params if k[0] in "Wb"]}[cls]
    a, fd = [], []
    for name in names:
        flat = params[name].reshape(-1)
        touched = np.flatnonzero(grads[name].reshape(-1)) if name == "features" else np.arange(flat.size)
        for i in _probe(flat.size, rng, touched):
            old = flat[i]
            vals = []
            for k in (2, 1, -1, -2):
                flat[i] = old + k * _PARAM_STEP
                vals.append(_render_loss(ref, batch, r))
            flat[i] = old
            # fourth-order central stencil; the loss is smooth in every parameter
            fd.append((-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * _PARAM_STEP))
            a.append(grads[name].reshape(-1)[i])
    return rel_error(a, fd)


def _coords_instance(rng, precision, fault):
    ref = _model(str(rng.choice(["triplane", "orthoplanes", "voxel"])), rng, DENSITY)
    x = rng.uniform(-0.95, 0.95, (16, 3))
    rc = rng.normal(size=(16, 3))
    rs = rng.normal(size=16)

    def loss(pts):
        rgb, sigma = ref.forward(pts)
        return float(np.sum(rgb * rc) + np.sum(sigma * rs))

    test = ref if precision == "high" else _cast(ref, np.float32)
    _, _, cache = test.forward(x, return_cache=True)
    dt = test.decoder.dtype
    _, gx = test.backward(cache, rc.astype(dt), rs.astype(dt), need_coords=True)
    if fault == "coords":
        gx = -gx
    fd = np.zeros_like(x)
    for p in range(len(x)):
        for d in range(3):
            xp, xm = x.copy(), x.copy()
            xp[p, d] += _STEP
            xm[p, d] -= _STEP
            fd[p, d] = (loss(xp) - loss(xm)) / (2 * _STEP)
    return rel_error(gx, fd)


def run_gradcheck(precision="high", instances=20, seed=0, classes=CLASSES, fault=None):
    """Check every class on ``instances`` random models; returns a :class:`GradCheckReport`.

    ``fault`` names a class whose analytic gradient is deliberately negated,
    which must make the check fail.
    """
    if precision not in TOLERANCE:
        raise ValueError(f"precision must be one of {sorted(TOLERANCE)}")
    reports = {}
    for ci, cls in enumerate(classes):
        if cls not in CLASSES:
            raise ValueError(f"unknown gradient class {cls!r}")
        rep = ClassReport(cls)
        for i in range(instances):
            rng = np.random.default_rng([seed, ci, i])
            if cls == "coords":
                rep.errors.append(_coords_instance(rng, precision, fault))
            else:
                rep.errors.append(_param_instance(cls, rng, precision, fault))
        reports[cls] = rep
    return GradCheckReport(precision, TOLERANCE[precision], reports)
