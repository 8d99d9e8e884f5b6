"""Codebook + decoder composed into a radiance field with a reverse pass."""
import numpy as np

from . import _kernels, codebook
from .decoder import DELTA_SDF, sdf_to_density, sdf_to_density_backward


class NeuralField:
    """Maps points to (rgb, sigma) via ``decoder(query(rep, x))``.

    In ``delta_sdf`` decoder mode the scalar head is an offset added to a base
    signed distance ``d0``; ``sdf`` supplies it (points -> (P,) array) unless
    the caller passes ``d0`` explicitly. Without either, ``d0 = 0``.
    """

    def __init__(self, rep, decoder, sdf=None, sdf_grad=None):
        if decoder.in_features != rep.C:
            raise ValueError(f"decoder expects {decoder.in_features} features, representation has {rep.C}")
        self.rep = rep
        self.decoder = decoder
        self.sdf = sdf
        self.sdf_grad = sdf_grad

    @property
    def sdf_mode(self):
        return self.decoder.mode == DELTA_SDF

    def params(self):
        return {"features": self.rep.features, **self.decoder.params()}

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params().items()}

    def base_sdf(self, x, d0=None):
        if d0 is not None:
            return np.asarray(d0, dtype=np.float64)
        if self.sdf is None:
            return np.zeros(len(x))
        return np.asarray(self.sdf(x), dtype=np.float64)

    def forward(self, x, d0=None, return_cache=False):
        feats = codebook.query(self.rep, x)
        out, dcache = self.decoder.forward(feats, return_cache=True)
        if self.sdf_mode:
            d0 = self.base_sdf(x, d0)
            sigma = sdf_to_density(d0, out.scalar, self.decoder.alpha)
        else:
            sigma = out.scalar
        if return_cache:
            return out.color, sigma, (x, dcache, d0, out.scalar)
        return out.color, sigma

    def sdf_value(self, x, d0=None):
        """``d0 + delta_d`` at each point (delta-SDF mode)."""
        feats = codebook.query(self.rep, x)
        return self.base_sdf(x, d0) + self.decoder.forward(feats).scalar

    def backward(self, cache, grad_rgb, grad_sigma, grads=None, need_coords=False, extra_scalar_grad=None):
        """Accumulate parameter gradients; optionally return dL/dx through the lookup.

        ``extra_scalar_grad`` is added to the gradient of the decoder's scalar
        head (the SDF offset in delta-SDF mode), e.g. from a regularizer.
        """
        x, dcache, d0, scalar = cache
        if grads is None:
            grads = self.zero_grads()
        if self.sdf_mode:
            g_scalar, g_log_alpha = sdf_to_density_backward(d0, scalar, self.decoder.alpha, grad_sigma)
            grads["log_alpha"] += g_log_alpha.sum()
        else:
            g_scalar = grad_sigma
        if extra_scalar_grad is not None:
            g_scalar = g_scalar + extra_scalar_grad
        _, g_feat = self.decoder.backward(dcache, grad_rgb, g_scalar, grads)
        _, g_x = codebook.backprop_query(self.rep, x, g_feat, grads["features"], need_coords=need_coords)
        return grads, g_x

    def base_sdf_grad(self, x):
        if self.sdf is None:
            return np.zeros((len(x), 3))
        if self.sdf_grad is not None:
            return np.asarray(self.sdf_grad(x), dtype=np.float64)
        h = 1e-5
        eye = np.eye(3) * h
        return np.stack([(self.sdf(x + e) - self.sdf(x - e)) / (2 * h) for e in eye], axis=-1)

    def sdf_gradient(self, x):
        """Spatial gradient of ``d0 + delta_d`` at each point, shape (P, 3)."""
        x = np.asarray(x, dtype=np.float64)
        feats = codebook.query(self.rep, x)
        u, _ = self.decoder.scalar_input_grad(feats)
        J = codebook.feature_jacobian(self.rep, x)
        return self.base_sdf_grad(x) + np.einsum("pcd,pc->pd", J, u)

    def eikonal_backward(self, x, weight, grads):
        """Add ``weight * mean((|grad d| - 1)^2)`` gradients into ``grads``; return the loss.

        Differentiates through the spatial gradient itself: the feature
        Jacobian depends linearly on the texels and the decoder's input
        gradient depends on its weights and on the looked-up features.
        """
        x = np.asarray(x, dtype=np.float64)
        P = len(x)
        rep, dec = self.rep, self.decoder
        feats = codebook.query(rep, x)
        u, cache = dec.scalar_input_grad(feats)
        idx, w, dw = rep._corners(x, derivs=True)
        table = rep.features.reshape(-1, rep.C)
        J = np.einsum("pmc,pmd->pcd", table[idx], dw)
        g = self.base_sdf_grad(x) + np.einsum("pcd,pc->pd", J, u)
        norm = np.linalg.norm(g, axis=-1)
        loss = float(np.mean((norm - 1.0) ** 2))
        r = weight * (2.0 / P) * ((norm - 1.0) / np.where(norm > 0, norm, 1.0))[:, None] * g
        v = np.einsum("pcd,pd->pc", J, r)
        f_bar = dec.directional_backward(cache, v, grads)
        gt = grads["features"].reshape(-1, rep.C)
        _kernels.scatter_add(gt, idx, w.astype(table.dtype), np.ascontiguousarray(f_bar, dtype=table.dtype))
        jw = np.einsum("pmd,pd->pm", dw, r).astype(table.dtype)
        _kernels.scatter_add(gt, idx, jw, np.ascontiguousarray(u, dtype=table.dtype))
        return loss
