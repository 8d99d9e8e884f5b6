"""Small fully-connected decoder from aggregated features to color and density.

The decoder sees only the interpolated feature vector; nothing point-wise
(positions, encodings) is concatenated to its input. Hidden layers use
softplus, the first three outputs go through a sigmoid to give color and the
fourth output is either a density pre-activation or an SDF offset.
"""
from dataclasses import dataclass

import numpy as np

from ._validation import InvalidInputError

DENSITY, DELTA_SDF = "density", "delta_sdf"
MODES = (DENSITY, DELTA_SDF)


# exp/log1p/tanh vectorize in numpy where logaddexp does not; in-place
# updates avoid page-faulting fresh temporaries on large batches.
def softplus(z):
    e = np.abs(z)
    np.negative(e, out=e)
    np.exp(e, out=e)
    np.log1p(e, out=e)
    e += np.maximum(z, 0)
    return e


def sigmoid(z):
    t = np.multiply(z, 0.5)
    np.tanh(t, out=t)
    t *= 0.5
    t += 0.5
    return t


@dataclass
class DecoderOutput:
    color: np.ndarray  # (P, 3) in (0, 1)
    scalar: np.ndarray  # (P,) density >= 0, or SDF offset


class MlpDecoder:
    """Fully-connected decoder with layer sizes ``sizes`` (input first).

    The last layer must have 4 outputs. In ``delta_sdf`` mode the decoder also
    owns ``log_alpha``, the log of the sharpness used by :func:`sdf_to_density`.
    """

    def __init__(self, weights, biases, mode=DENSITY, log_alpha=np.log(0.1)):
        if mode not in MODES:
            raise InvalidInputError(f"decoder mode must be one of {MODES}, got {mode!r}")
        if len(weights) != len(biases) or not weights:
            raise InvalidInputError("need one bias per weight matrix")
        for i, (W, b) in enumerate(zip(weights, biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise InvalidInputError(f"layer {i}: weight {W.shape} does not match bias {b.shape}")
            if i and W.shape[0] != weights[i - 1].shape[1]:
                raise InvalidInputError(f"layer {i}: input size {W.shape[0]} != {weights[i - 1].shape[1]}")
        if weights[-1].shape[1] != 4:
            raise InvalidInputError("the output layer must have 4 units (rgb + scalar)")
        self.weights = [np.ascontiguousarray(W) for W in weights]
        self.biases = [np.ascontiguousarray(b) for b in biases]
        self.mode = mode
        self.log_alpha = np.array(log_alpha, dtype=np.float64).reshape(1)

    @classmethod
    def create(cls, in_features, hidden=(64, 64), mode=DENSITY, rng=None, dtype=np.float32, alpha=0.1):
        """He-style normal initialization, zero biases."""
        rng = np.random.default_rng(rng)
        sizes = [in_features, *hidden, 4]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)).astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        return cls(weights, biases, mode=mode, log_alpha=np.log(alpha))

    @property
    def in_features(self):
        return self.weights[0].shape[0]

    @property
    def sizes(self):
        return [self.in_features] + [W.shape[1] for W in self.weights]

    @property
    def alpha(self):
        return float(np.exp(self.log_alpha[0]))

    @property
    def dtype(self):
        return self.weights[0].dtype

    def params(self):
        """Named views of every learnable array."""
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        if self.mode == DELTA_SDF:
            out["log_alpha"] = self.log_alpha
        return out

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params().items()}

    def forward(self, f, return_cache=False):
        f = np.asarray(f)
        if f.ndim != 2 or f.shape[1] != self.in_features:
            raise InvalidInputError(f"feature shape {f.shape} does not match decoder input {self.in_features}")
        h = f.astype(self.dtype, copy=False)
        acts, slopes = [h], []
        n = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W
            z += b
            if i < n - 1:
                h = softplus(z)
                acts.append(h)
                slopes.append(sigmoid(z))
            else:
                h = z
        raw = h
        color = sigmoid(raw[:, :3])
        scalar = softplus(raw[:, 3]) if self.mode == DENSITY else raw[:, 3].copy()
        out = DecoderOutput(color, scalar)
        if return_cache:
            return out, (acts, slopes, raw, color)
        return out

    def backward(self, cache, grad_color, grad_scalar, grads=None, need_input=True):
        """Reverse pass. Accumulates into ``grads`` and returns (grads, dL/df)."""
        acts, slopes, raw, color = cache
        if grads is None:
            grads = self.zero_grads()
        g = np.empty_like(raw)
        g[:, :3] = grad_color * color * (1.0 - color)
        if self.mode == DENSITY:
            g[:, 3] = grad_scalar * sigmoid(raw[:, 3])
        else:
            g[:, 3] = grad_scalar
        for i in range(len(self.weights) - 1, -1, -1):
            grads[f"W{i}"] += acts[i].T @ g
            grads[f"b{i}"] += g.sum(axis=0)
            if i == 0 and not need_input:
                return grads, None
            g = g @ self.weights[i].T
            if i > 0:
                g *= slopes[i - 1]
        return grads, g

    def scalar_input_grad(self, f):
        """d(raw scalar head)/d(input) at each row of ``f``; returns (u, cache)."""
        _, cache = self.forward(f, return_cache=True)
        acts, slopes, raw, _ = cache
        g = np.zeros_like(raw)
        g[:, 3] = 1.0
        for i in range(len(self.weights) - 1, -1, -1):
            g = g @ self.weights[i].T
            if i > 0:
                g *= slopes[i - 1]
        return g, cache

    def directional_backward(self, cache, v, grads):
        """Reverse pass of ``Q = sum_p u(f_p) . v_p`` with ``u`` from :meth:`scalar_input_grad`.

        Accumulates dQ/d(weights, biases) into ``grads`` and returns dQ/df.
        ``v`` is held constant.
        """
        acts, slopes, raw, _ = cache
        n = len(self.weights)
        v = np.asarray(v, dtype=self.dtype)
        # tangent pass along v (biases carry no tangent)
        tz = []
        ta = [v]
        for i in range(n):
            z_dot = ta[-1] @ self.weights[i]
            tz.append(z_dot)
            if i < n - 1:
                ta.append(slopes[i] * z_dot)
        tz_bar = np.zeros_like(raw)
        tz_bar[:, 3] = 1.0
        z_bar = np.zeros_like(raw)
        for i in range(n - 1, -1, -1):
            grads[f"W{i}"] += ta[i].T @ tz_bar + acts[i].T @ z_bar
            grads[f"b{i}"] += z_bar.sum(axis=0)
            ta_bar = tz_bar @ self.weights[i].T
            a_bar = z_bar @ self.weights[i].T
            if i == 0:
                return a_bar
            s = slopes[i - 1]
            tz_bar = ta_bar * s
            z_bar = a_bar * s + ta_bar * tz[i - 1] * s * (1.0 - s)

    def copy(self):
        return MlpDecoder([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                          self.mode, float(self.log_alpha[0]))


def decode_forward(d, f):
    return d.forward(f)


def _expit(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0, e) / (1.0 + e)


def sdf_to_density(d0, delta_d, alpha):
    """Density from a signed distance: ``sigmoid(-(d0 + delta_d) / alpha) / alpha``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(~(alpha > 0)):
        raise InvalidInputError("alpha must be positive")
    return _expit(-(np.asarray(d0) + np.asarray(delta_d)) / alpha) / alpha


def sdf_to_density_backward(d0, delta_d, alpha, grad_out):
    """Gradients of :func:`sdf_to_density` w.r.t. ``delta_d`` and ``log(alpha)``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(~(alpha > 0)):
        raise InvalidInputError("alpha must be positive")
    d = np.asarray(d0) + np.asarray(delta_d)
    s = _expit(-d / alpha)
    g_delta = -grad_out * s * (1.0 - s) / alpha ** 2
    g_log_alpha = grad_out * (s / alpha) * ((1.0 - s) * d / alpha - 1.0)
    return g_delta, g_log_alpha
