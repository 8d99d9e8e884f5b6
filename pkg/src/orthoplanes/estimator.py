"""scikit-learn style wrapper: rays in, colours out.

``X`` holds one ray per row, either ``(ox, oy, oz, dx, dy, dz)`` or the same
followed by ``(t_near, t_far)``. Six-column rays are clipped to the scene
box. ``y`` holds the target RGB in [0, 1]. ``score`` reports PSNR in dB
rather than R^2, since that is the figure of merit for radiance fields.
"""
import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import codebook, formats
from .decoder import MlpDecoder
from .field import NeuralField
from .optim import RayData, TrainConfig, mse_loss, predict_rays, psnr, train_sso
from .renderer import SamplingConfig, clip_to_box


def rays_from_array(X, near=0.0, far=np.inf):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] not in (6, 8):
        raise ValueError(f"rays must have 6 or 8 columns, got shape {X.shape}")
    if not np.all(np.isfinite(X[:, :6])):
        raise ValueError("ray origins/directions must be finite")
    o = X[:, :3].copy()
    d = X[:, 3:6] / np.linalg.norm(X[:, 3:6], axis=1, keepdims=True)
    if X.shape[1] == 8:
        t0, t1 = X[:, 6].copy(), X[:, 7].copy()
    else:
        t0, t1 = clip_to_box(o, d, near, far)
    return o, d, t0, t1


class OrthoplanesRegressor(RegressorMixin, BaseEstimator):
    """Fit a plane-based radiance field to posed rays.

    Parameters mirror :class:`~orthoplanes.optim.TrainConfig` plus the
    representation shape. ``representation`` is ``"orthoplanes"``,
    ``"triplane"`` or ``"voxel"``; ``K`` only applies to orthoplanes.
    """

    def __init__(self, representation="orthoplanes", N=64, C=8, K=4, hidden=(64, 64), steps=3000,
                 batch_rays=4096, chunk_rays=1024, lr_features=1e-2, lr_decoder=1e-3, lr_final_scale=0.1,
                 n_coarse=64, n_fine=64, background=(1.0, 1.0, 1.0), seed=0, threads=1):
        self.representation = representation
        self.N = N
        self.C = C
        self.K = K
        self.hidden = hidden
        self.steps = steps
        self.batch_rays = batch_rays
        self.chunk_rays = chunk_rays
        self.lr_features = lr_features
        self.lr_decoder = lr_decoder
        self.lr_final_scale = lr_final_scale
        self.n_coarse = n_coarse
        self.n_fine = n_fine
        self.background = background
        self.seed = seed
        self.threads = threads

    def _sampling(self):
        return SamplingConfig(self.n_coarse, self.n_fine, importance=self.n_fine > 0,
                              background=tuple(self.background))

    def _train_config(self):
        return TrainConfig(steps=self.steps, batch_rays=self.batch_rays, chunk_rays=self.chunk_rays,
                           lr_features=self.lr_features, lr_decoder=self.lr_decoder,
                           lr_final_scale=self.lr_final_scale, sampling=self._sampling(), seed=self.seed,
                           threads=self.threads, log_every=max(1, self.steps // 100))

    def _init_field(self):
        rng = np.random.default_rng([self.seed, 0])
        K = self.K if self.representation == "orthoplanes" else 1
        rep = codebook.make_representation(self.representation, self.N, self.C, K=K, rng=rng)
        return NeuralField(rep, MlpDecoder.create(self.C, tuple(self.hidden), rng=rng))

    def fit(self, X, y):
        o, d, t0, t1 = rays_from_array(X)
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (len(o), 3):
            raise ValueError(f"targets must have shape ({len(o)}, 3), got {y.shape}")
        self.field_ = self._init_field()
        self.state_ = train_sso(RayData(o, d, t0, t1, y, 1), self.field_, self._train_config())
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "field_")
        o, d, t0, t1 = rays_from_array(X)
        data = RayData(o, d, t0, t1, np.zeros((len(o), 3)), 1)
        return predict_rays(self.field_, data, self._sampling(), self.seed)

    def score(self, X, y, sample_weight=None):
        """PSNR (dB) of the predictions against ``y``."""
        m = mse_loss(self.predict(X), y)
        return psnr(m) if m > 0 else float("inf")

    @property
    def loss_trace_(self):
        check_is_fitted(self, "state_")
        return self.state_.trace

    def save(self, path):
        check_is_fitted(self, "field_")
        formats.save_checkpoint(path, self.field_.rep, self.field_.decoder)
