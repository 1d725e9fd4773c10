"""FID via pluggable feature extractors, and binary IoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionMismatch, InsufficientSamples, InvalidMask, NumericalFailure, SizeMismatch

FID_FOOTNOTE = (
    "Note: FID is not a reliable score for safety-critical use; the feature "
    "extractor is a biased estimator and its features are not normally distributed."
)
EIG_CLAMP = 1e-8


@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @property
    def dim(self):
        return self.mu.shape[0]


def gaussian_stats(features):
    """Sample mean and unbiased (n - 1) covariance of a stack of feature vectors."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[None, :]
    n = feats.shape[0]
    if n < 2:
        raise InsufficientSamples(f"need at least 2 feature vectors, got {n}", n=n)
    mu = feats.mean(axis=0)
    centred = feats - mu
    sigma = centred.T @ centred / (n - 1)
    sigma = 0.5 * (sigma + sigma.T)
    return FeatureStats(mu, sigma, n)


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def trace_sqrt_product(sigma_a, sigma_b):
    """``Tr((sigma_a sigma_b)^(1/2))`` through the symmetric form ``A^(1/2) B A^(1/2)``.

    That matrix is similar to ``sigma_a sigma_b`` and symmetric PSD, so its
    eigenvalues come from ``eigh``.  Eigenvalues down to ``-1e-8`` (relative to
    the spectrum's scale) are rounding noise and clamped to zero.
    """
    root_a = _psd_sqrt(sigma_a)
    inner = root_a @ sigma_b @ root_a
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.size and vals.min() < -EIG_CLAMP * scale:
        raise NumericalFailure(f"covariance product has eigenvalue {vals.min():.3e}", eigenvalue=float(vals.min()))
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def frechet_distance(a, b):
    if a.dim != b.dim:
        raise DimensionMismatch(f"feature dims differ: {a.dim} vs {b.dim}", dims=(a.dim, b.dim))
    diff = a.mu - b.mu
    tr = np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * trace_sqrt_product(a.sigma, b.sigma)
    return max(float(diff @ diff + tr), 0.0)


def embed_all(images, extractor):
    return np.stack([extractor.embed(img) for img in images])


def fid(real_images, synth_images, extractor):
    real_images = list(real_images)
    synth_images = list(synth_images)
    for name, group in (("real", real_images), ("synthetic", synth_images)):
        if len(group) < 2:
            raise InsufficientSamples(f"{name} set needs at least 2 images, got {len(group)}", n=len(group))
    return frechet_distance(
        gaussian_stats(embed_all(real_images, extractor)),
        gaussian_stats(embed_all(synth_images, extractor)),
    )


def _as_binary(mask):
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return mask
    values = np.unique(mask)
    if not np.all(np.isin(values, (0, 1))):
        raise InvalidMask(f"mask must be binary, found values {values[:5].tolist()}")
    return mask.astype(bool)


def iou(y, y_pred):
    """``|Y & Y_p| / |Y | Y_p|``; two empty masks score 1.0."""
    y = _as_binary(y)
    y_pred = _as_binary(y_pred)
    if y.shape != y_pred.shape:
        raise SizeMismatch(f"mask shapes differ: {y.shape} vs {y_pred.shape}")
    union = np.count_nonzero(y | y_pred)
    if union == 0:
        return 1.0
    return np.count_nonzero(y & y_pred) / union


def mean_iou(ys, preds):
    return float(np.mean([iou(y, p) for y, p in zip(ys, preds)]))


class IdentityFeatures:
    """Flattened pixels scaled to [0, 1]; useful for analytic checks."""

    deterministic = True
    extractor_id = "identity-pixels"

    def __init__(self, dim=None):
        self.dim = dim

    def embed(self, image):
        return np.asarray(image, dtype=np.float64).ravel() / 255.0


class DeskExtractor:
    """Frozen random convolutional embedder, a CPU stand-in for Inception features.

    Weights are drawn from ``numpy.random.default_rng(seed)`` and the forward
    pass runs in float64, so embeddings are identical across processes.
    """

    deterministic = True
    dim = 256
    input_size = 64
    widths = (3, 16, 32, 64)

    def __init__(self, seed=0):
        self.seed = seed
        self.extractor_id = f"desk-conv-d256-s{seed}"
        rng = np.random.default_rng(seed)
        self.weights = []
        for cin, cout in zip(self.widths[:-1], self.widths[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), (cout, cin, 3, 3))
            b = rng.normal(0.0, 0.05, cout)
            self.weights.append((torch.from_numpy(w), torch.from_numpy(b)))

    @torch.no_grad()
    def embed(self, image):
        x = torch.from_numpy(np.asarray(image, dtype=np.float64) / 255.0)
        x = x.permute(2, 0, 1)[None].contiguous()
        x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        for w, b in self.weights:
            x = F.relu(F.conv2d(x, w, b, stride=2, padding=1))
        x = F.adaptive_avg_pool2d(x, 2)
        return x.reshape(-1).numpy().copy()


def make_desk_extractor(seed=0):
    return DeskExtractor(seed)
