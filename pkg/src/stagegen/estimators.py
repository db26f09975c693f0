"""scikit-learn style wrappers over the preprocessing, both GAN stages and the embedder.

Images cross this boundary as arrays: uint8 pixels shaped (n, H, W) or
(n, H, W, C), or float model-range tensors shaped (n, 1, H, W).
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import imageops
from .dataset import PairedImages
from .metrics import fid_score, fit_embedder
from .models import ModelSpec
from .training import (
    TrainConfig,
    generator_from_checkpoint,
    sample_edges,
    train_stage1_arrays,
    train_stage2_arrays,
    translate,
)


def check_pixels(X, channels: Optional[int] = None) -> np.ndarray:
    """Validate a uint8 image stack and return it as (n, H, W, C)."""
    X = np.asarray(X)
    if X.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {X.dtype}")
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4 or X.shape[0] == 0:
        raise ValueError(f"expected a non-empty (n, H, W[, C]) stack, got shape {X.shape}")
    if channels is not None and X.shape[-1] != channels:
        raise ValueError(f"expected {channels} channel(s), got {X.shape[-1]}")
    return X


def check_images(X, side: Optional[int] = None) -> np.ndarray:
    """Validate single-channel images and return float32 model-range (n, 1, H, W).

    uint8 input is mapped to [-1, 1]; float input must already lie there.
    """
    X = np.asarray(X)
    if X.dtype == np.uint8:
        X = check_pixels(X, channels=1)
        X = imageops.array_to_model_range(X[..., 0])[:, None]
    else:
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 3:
            X = X[:, None]
        if X.ndim != 4 or X.shape[1] != 1 or X.shape[0] == 0:
            raise ValueError(f"expected a non-empty (n, 1, H, W) stack, got shape {X.shape}")
        if not np.isfinite(X).all() or X.min() < -1 or X.max() > 1:
            raise ValueError("float images must be finite and inside [-1, 1]")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    if side is not None and X.shape[2] != side:
        raise ValueError(f"expected {side}x{side} images, got {X.shape[2]}x{X.shape[3]}")
    return np.ascontiguousarray(X, dtype=np.float32)


class GrayscaleTransformer(TransformerMixin, BaseEstimator):
    """RGB uint8 (n, H, W, 3) -> luma uint8 (n, H, W)."""

    def fit(self, X, y=None):
        check_pixels(X, channels=3)
        return self

    def transform(self, X):
        X = check_pixels(X, channels=3)
        return np.stack([imageops.to_grayscale(imageops.ImageBuffer(x)).plane for x in X])


class SobelEdgeTransformer(TransformerMixin, BaseEstimator):
    """Grayscale uint8 (n, H, W) -> Sobel magnitude uint8 (n, H, W)."""

    def fit(self, X, y=None):
        check_pixels(X, channels=1)
        return self

    def transform(self, X):
        X = check_pixels(X, channels=1)
        return np.stack([imageops.sobel_edges(imageops.ImageBuffer(x)).plane for x in X])


class _TrainedGenerator(BaseEstimator):
    stage = 0

    def _config(self, side: int) -> TrainConfig:
        spec = ModelSpec(image_side=side, latent_dim=self.latent_dim,
                         base_feature_maps_g=self.base_feature_maps_g,
                         base_feature_maps_d=self.base_feature_maps_d, **self._extra_spec())
        return TrainConfig(stage=self.stage, steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                           seed=self.random_state, model=spec, **self._extra_config())

    def _extra_spec(self) -> dict:
        return {}

    def _extra_config(self) -> dict:
        return {}

    def _store(self, ckpt, log):
        self.checkpoint_ = ckpt
        self.loss_log_ = log
        self.generator_, self.model_spec_, _ = generator_from_checkpoint(ckpt)
        self.n_features_in_ = self.model_spec_.image_side ** 2
        return self


class EdgeGAN(_TrainedGenerator):
    """Stage 1: a DCGAN that learns to draw edge maps from noise.

    ``fit`` trains on edge images; ``sample`` draws new ones in model range.
    """

    stage = 1

    def __init__(self, steps: int = 300, batch_size: int = 64, lr: float = 2e-4, latent_dim: int = 100,
                 base_feature_maps_g: Optional[int] = None, base_feature_maps_d: Optional[int] = None,
                 random_state: int = 0):
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.latent_dim = latent_dim
        self.base_feature_maps_g = base_feature_maps_g
        self.base_feature_maps_d = base_feature_maps_d
        self.random_state = random_state

    def fit(self, X, y=None):
        edges = check_images(X)
        data = PairedImages([str(i) for i in range(len(edges))], edges, edges)
        return self._store(*train_stage1_arrays(self._config(edges.shape[-1]), data))

    def sample(self, n: int, random_state: int = 0) -> np.ndarray:
        check_is_fitted(self, "generator_")
        return sample_edges(self.generator_, self.model_spec_, n, np.random.default_rng(random_state))


class EdgeToGrayTranslator(TransformerMixin, _TrainedGenerator):
    """Stage 2: a conditional ResNet generator mapping edge maps to grayscale faces."""

    stage = 2

    def __init__(self, steps: Optional[int] = None, epochs: int = 1, batch_size: int = 1, lr: float = 2e-4,
                 lambda_l1: float = 100.0, resnet_blocks: int = 6, latent_dim: int = 100,
                 base_feature_maps_g: Optional[int] = None, base_feature_maps_d: Optional[int] = None,
                 dropout: bool = False, random_state: int = 0):
        self.steps = steps
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lambda_l1 = lambda_l1
        self.resnet_blocks = resnet_blocks
        self.latent_dim = latent_dim
        self.base_feature_maps_g = base_feature_maps_g
        self.base_feature_maps_d = base_feature_maps_d
        self.dropout = dropout
        self.random_state = random_state

    def _extra_spec(self):
        return {"resnet_blocks": self.resnet_blocks, "dropout_enabled": self.dropout}

    def _extra_config(self):
        return {"epochs": self.epochs, "lambda_l1": self.lambda_l1}

    def fit(self, X, y):
        edges = check_images(X)
        grays = check_images(y, side=edges.shape[-1])
        if len(grays) != len(edges):
            raise ValueError(f"X has {len(edges)} images but y has {len(grays)}")
        data = PairedImages([str(i) for i in range(len(edges))], edges, grays)
        return self._store(*train_stage2_arrays(self._config(edges.shape[-1]), data))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "generator_")
        return translate(self.generator_, self.model_spec_, check_images(X, self.model_spec_.image_side))

    def transform(self, X) -> np.ndarray:
        return self.predict(X)


class FrechetEmbedder(TransformerMixin, BaseEstimator):
    """Autoencoder embedding used for Fréchet distances between image sets.

    ``score(X, Y)`` returns the negated distance so that higher is better.
    """

    def __init__(self, dim: int = 64, steps: int = 600, batch_size: int = 32, lr: float = 1e-3,
                 eps_reg: float = 1e-6, random_state: int = 0):
        self.dim = dim
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.eps_reg = eps_reg
        self.random_state = random_state

    def fit(self, X, y=None):
        images = check_images(X)
        data = PairedImages([str(i) for i in range(len(images))], images, images)
        self.embedder_ = fit_embedder(data, self.dim, self.random_state, "gray", self.steps, self.batch_size,
                                      self.lr)
        self.n_features_in_ = images.shape[-1] ** 2
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "embedder_")
        return self.embedder_.embed(check_images(X, self.embedder_.image_side))

    def frechet_distance(self, X, Y) -> float:
        check_is_fitted(self, "embedder_")
        side = self.embedder_.image_side
        return fid_score(self.embedder_, check_images(X, side), check_images(Y, side), self.eps_reg).fid

    def score(self, X, Y) -> float:
        return -self.frechet_distance(X, Y)
