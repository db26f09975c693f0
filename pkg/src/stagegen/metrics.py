"""Fréchet distance evaluation and the conditional-generator contraction probe.

All linear algebra here runs in float64. The embedding network is a small
convolutional autoencoder trained on real images; its scores are only
comparable with other scores computed with the same embedder.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Union

import numpy as np

from . import ndtensor as nd
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .dataset import DatasetManifest, PairedImages, batch_order, load_split
from .models import INIT_STD, Network
from .ndtensor import Adam, Tensor, no_grad

DEFAULT_EPS_REG = 1e-6
SYMMETRY_TOL = 1e-9


class InsufficientSamplesError(ValueError):
    pass


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"cov must be {d}x{d}, got {self.cov.shape}")
        if self.n < 2:
            raise ValueError("GaussianStats needs n >= 2")
        _check_symmetric(self.cov, "cov")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _check_symmetric(m: np.ndarray, what: str) -> None:
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if np.abs(m - m.T).max(initial=0.0) > SYMMETRY_TOL * scale:
        raise ValueError(f"{what} is not symmetric within {SYMMETRY_TOL:g}")


def gaussian_stats(embeddings) -> GaussianStats:
    """Sample mean and unbiased covariance of an (n, d) embedding matrix."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("embeddings must be (n, d)")
    n = x.shape[0]
    if n < 2:
        raise InsufficientSamplesError("need at least 2 embeddings")
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / (n - 1)
    return GaussianStats(mu, (cov + cov.T) / 2, n)


class GaussianAccumulator:
    """Streaming mean/covariance using pairwise (Chan et al.) merging."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))

    def update(self, batch) -> "GaussianAccumulator":
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        nb = x.shape[0]
        if nb == 0:
            return self
        mb = x.mean(axis=0)
        cb = x - mb
        m2b = cb.T @ cb
        n = self.n + nb
        delta = mb - self.mean
        self.m2 = self.m2 + m2b + np.outer(delta, delta) * (self.n * nb / n)
        self.mean = self.mean + delta * (nb / n)
        self.n = n
        return self

    def stats(self) -> GaussianStats:
        if self.n < 2:
            raise InsufficientSamplesError("need at least 2 embeddings")
        cov = self.m2 / (self.n - 1)
        return GaussianStats(self.mean.copy(), (cov + cov.T) / 2, self.n)


def matrix_sqrt_psd(m) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; negative eigenvalues clamp to 0."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("matrix_sqrt_psd needs a square matrix")
    _check_symmetric(m, "matrix")
    sym = (m + m.T) / 2
    vals, vecs = np.linalg.eigh(sym)
    root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    return (root + root.T) / 2


def frechet_distance(a: GaussianStats, b: GaussianStats, eps_reg: float = DEFAULT_EPS_REG) -> float:
    """Squared 2-Wasserstein distance between two Gaussians.

    ``|mu_a - mu_b|^2 + tr(S_a) + tr(S_b) - 2 tr((S_a^1/2 S_b S_a^1/2)^1/2)`` with
    ``eps_reg`` added to both covariance diagonals. The cross term equals the
    nuclear norm of ``S_b^1/2 S_a^1/2``; taking it from singular values keeps
    the result symmetric in its arguments even for singular covariances.
    Tiny negative results are clamped to 0.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    eye = np.eye(a.dim) * eps_reg
    sa, sb = a.cov + eye, b.cov + eye
    cross = np.linalg.svd(matrix_sqrt_psd(sb) @ matrix_sqrt_psd(sa), compute_uv=False).sum()
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * cross)
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# embedder
# ---------------------------------------------------------------------------

def _embedder_widths(side: int) -> list:
    n_down = int(math.log2(side // 4))
    return [min(16 * 2 ** i, 128) for i in range(n_down)]


def _init_embedder(side: int, dim: int, rng: np.random.Generator) -> Network:
    net = Network()

    def w(name, shape, std=INIT_STD):
        net.params[name] = Tensor(rng.normal(0, std, size=shape).astype(np.float32), requires_grad=True)

    def b(name, n):
        net.params[name] = Tensor(np.zeros(n, np.float32), requires_grad=True)

    widths = _embedder_widths(side)
    cin = 1
    for i, c in enumerate(widths):
        w(f"enc{i}.weight", (c, cin, 4, 4), std=math.sqrt(2.0 / (cin * 16)))
        b(f"enc{i}.bias", c)
        cin = c
    flat = widths[-1] * 16
    w("embed.weight", (dim, flat), std=math.sqrt(1.0 / flat))
    b("embed.bias", dim)
    w("expand.weight", (flat, dim), std=math.sqrt(1.0 / dim))
    b("expand.bias", flat)
    rev = widths[::-1] + [1]
    for i in range(len(widths)):
        w(f"dec{i}.weight", (rev[i], rev[i + 1], 4, 4), std=math.sqrt(2.0 / (rev[i] * 4)))
        b(f"dec{i}.bias", rev[i + 1])
    return net


def _encode(x: Tensor, net: Network) -> Tensor:
    i = 0
    while f"enc{i}.weight" in net.params:
        x = nd.leaky_relu(nd.conv2d(x, net[f"enc{i}.weight"], net[f"enc{i}.bias"], stride=2, padding=1))
        i += 1
    x = nd.reshape(x, (x.shape[0], -1))
    return nd.linear(x, net["embed.weight"], net["embed.bias"])


def _decode(z: Tensor, net: Network) -> Tensor:
    x = nd.linear(z, net["expand.weight"], net["expand.bias"])
    c = net["dec0.weight"].shape[0]
    x = nd.leaky_relu(nd.reshape(x, (z.shape[0], c, 4, 4)))
    i = 0
    while f"dec{i}.weight" in net.params:
        x = nd.conv_transpose2d(x, net[f"dec{i}.weight"], net[f"dec{i}.bias"], stride=2, padding=1)
        i += 1
        x = nd.leaky_relu(x) if f"dec{i}.weight" in net.params else nd.tanh(x)
    return x


class Embedder:
    """Encoder half of a convolutional autoencoder; maps N x 1 x H x W images to N x d."""

    def __init__(self, net: Network, dim: int, image_side: int, info: Optional[dict] = None):
        self.net = net
        self.dim = dim
        self.image_side = image_side
        self.info = dict(info or {})

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.net.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.net.params[name].data, dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    def embed(self, images, chunk: int = 64) -> np.ndarray:
        images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1:] != (1, self.image_side, self.image_side):
            raise ValueError(f"embed expects N x 1 x {self.image_side} x {self.image_side}, got {images.shape}")
        out = []
        with no_grad():
            for start in range(0, len(images), chunk):
                out.append(_encode(Tensor(images[start:start + chunk]), self.net).data)
        return np.concatenate(out).astype(np.float64) if out else np.zeros((0, self.dim))

    def reconstruct(self, images) -> np.ndarray:
        with no_grad():
            return _decode(_encode(Tensor(np.asarray(images, dtype=np.float32)), self.net), self.net).data

    def to_checkpoint(self) -> Checkpoint:
        meta = {"kind": "embedder", "dim": self.dim, "image_side": self.image_side,
                "fingerprint": self.fingerprint, **self.info}
        return Checkpoint({k: t.data.copy() for k, t in self.net.params.items()}, meta)

    def save(self, path):
        return save_checkpoint(self.to_checkpoint(), path)

    @classmethod
    def from_checkpoint(cls, ckpt: Union[Checkpoint, str]) -> "Embedder":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        meta = dict(ckpt.meta)
        if meta.pop("kind", None) != "embedder":
            raise CheckpointError("checkpoint does not hold an embedder")
        stored = meta.pop("fingerprint", None)
        emb = cls(Network.from_arrays(ckpt.tensors), int(meta.pop("dim")), int(meta.pop("image_side")), meta)
        if stored is not None and stored != emb.fingerprint:
            raise CheckpointError("embedder fingerprint mismatch")
        return emb


def _recon_l1(emb: Embedder, images: np.ndarray) -> float:
    total = 0.0
    for start in range(0, len(images), 64):
        part = images[start:start + 64]
        total += float(np.abs(emb.reconstruct(part) - part).sum())
    return total / images.size


def fit_embedder(data: Union[DatasetManifest, PairedImages], dim: int = 64, seed: int = 0,
                 modality: str = "gray", steps: int = 600, batch_size: int = 32,
                 lr: float = 1e-3, eval_data: Optional[PairedImages] = None) -> Embedder:
    """Train the autoencoder on real images of one modality ("gray" or "edge").

    Given a manifest, trains on its train split and reports reconstruction L1
    on the eval split (falling back to the train split when eval is empty).
    The L1 before and after training is kept in ``Embedder.info``.
    """
    if modality not in ("gray", "edge"):
        raise ValueError("modality must be 'gray' or 'edge'")
    if isinstance(data, DatasetManifest):
        train = load_split(data, "train")
        if eval_data is None and data.split("eval"):
            eval_data = load_split(data, "eval")
    else:
        train = data
    pick = (lambda p: p.grays) if modality == "gray" else (lambda p: p.edges)
    images = pick(train)
    held_out = pick(eval_data) if eval_data is not None else images
    side = images.shape[-1]
    net = _init_embedder(side, dim, np.random.default_rng([seed, 7]))
    emb = Embedder(net, dim, side)
    start_l1 = _recon_l1(emb, held_out)
    opt = Adam(net.params, lr=lr, beta1=0.9, beta2=0.999)
    step, epoch = 0, 0
    while step < steps:
        for index in batch_order(len(images), batch_size, seed, epoch):
            if step >= steps:
                break
            x = Tensor(images[index])
            opt.zero_grad()
            nd.l1_loss(_decode(_encode(x, net), net), x.data).backward()
            opt.step()
            step += 1
        epoch += 1
    emb.info = {"modality": modality, "seed": seed, "steps": steps, "n_train": len(images),
                "eval_l1_start": start_l1, "eval_l1_final": _recon_l1(emb, held_out)}
    return emb


@dataclass
class FIDReport:
    fid: float
    n_real: int
    n_fake: int
    embed_dim: int
    eps_reg: float
    embedder_fingerprint: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def fid_score(embedder: Embedder, real_images, fake_images, eps_reg: float = DEFAULT_EPS_REG) -> FIDReport:
    """Fréchet distance between embedded real and generated image sets."""
    need = embedder.dim + 1
    n_real, n_fake = len(real_images), len(fake_images)
    if n_real < need or n_fake < need:
        raise InsufficientSamplesError(
            f"fid_score needs at least {need} images per set (embed dim {embedder.dim} + 1); "
            f"got {n_real} real, {n_fake} generated")
    a = gaussian_stats(embedder.embed(real_images))
    b = gaussian_stats(embedder.embed(fake_images))
    return FIDReport(frechet_distance(a, b, eps_reg), n_real, n_fake, embedder.dim, eps_reg,
                     embedder.fingerprint)


# ---------------------------------------------------------------------------
# contraction probe
# ---------------------------------------------------------------------------

def contraction_probe(f: Union[Callable[[np.ndarray], np.ndarray], Checkpoint, str],
                      edge_samples, perturb_sigma: float, n_pairs: int, seed: int = 0) -> Dict:
    """Measure r = |f(x+h) - f(x)| / |h| for Gaussian perturbations h.

    ``f`` is a stage-2 checkpoint (or its path), run in eval mode, or any
    callable on N x 1 x H x W float arrays. Norms are Euclidean over pixels.
    Returns the fraction of pairs with r < 1 and summary statistics of r.
    """
    if perturb_sigma <= 0:
        raise ValueError("perturb_sigma must be positive")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if not callable(f):
        from .training import generator_from_checkpoint, translate

        g2, spec, stage = generator_from_checkpoint(f)
        if stage != 2:
            raise ValueError("contraction_probe needs a stage-2 checkpoint")
        z_rng = np.random.default_rng([seed, 1])
        state = z_rng.bit_generator.state

        def f(x):
            # the same z2 for x and x+h keeps the latent out of the ratio
            z_rng.bit_generator.state = state
            return translate(g2, spec, x, z_rng)

    x_all = np.asarray(edge_samples.data if isinstance(edge_samples, Tensor) else edge_samples, dtype=np.float32)
    rng = np.random.default_rng(seed)
    ratios = np.empty(n_pairs)
    for k in range(n_pairs):
        x = x_all[int(rng.integers(len(x_all)))][None]
        h = (rng.standard_normal(x.shape) * perturb_sigma).astype(np.float32)
        fx = np.asarray(f(x), dtype=np.float64)
        fxh = np.asarray(f(x + h), dtype=np.float64)
        ratios[k] = np.linalg.norm(fxh - fx) / np.linalg.norm(h.astype(np.float64))
    return {
        "fraction_contractive": float(np.mean(ratios < 1.0)),
        "mean_ratio": float(ratios.mean()),
        "median_ratio": float(np.median(ratios)),
        "min_ratio": float(ratios.min()),
        "max_ratio": float(ratios.max()),
        "n_pairs": n_pairs,
        "perturb_sigma": perturb_sigma,
        "seed": seed,
    }
