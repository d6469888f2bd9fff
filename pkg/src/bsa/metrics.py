"""Frechet distance and kernel MMD between feature clouds."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import ArgumentError, NumericError, ShapeError

EIG_CLAMP = 1e-8


@dataclass
class FeatureCloud:
    features: np.ndarray
    source: str = "real"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be (n, d), got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise NumericError(f"non-finite {self.source} features")


@dataclass
class EvalReport:
    fid: float
    kmmd: float
    n_real: int
    n_gen: int
    extractor_id: str = "toy-extractor/penultimate"
    bandwidth: float = float("nan")
    bandwidth_rule: str = "median-pooled"
    kmmd_estimator: str = "biased-sqrt"
    truncation_tau: Optional[float] = None
    seed: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def _as_array(x):
    if isinstance(x, FeatureCloud):
        return x.features
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite features")
    return arr


def _psd_sqrt(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    w = np.where(w < EIG_CLAMP * max(w.max(), 0.0), 0.0, w)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_moments(mu1, sigma1, mu2, sigma2) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))``.

    The trace of the square root is taken as ``Tr((A S2 A)^(1/2))`` with
    ``A = S1^(1/2)``, a symmetric form sharing the eigenvalues of ``S1 S2``.
    Eigenvalues below ``1e-8`` times the largest are treated as zero.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    s1, s2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (mu1.size, mu1.size):
        raise ShapeError("mean/covariance shapes do not agree")
    a = _psd_sqrt(s1)
    w = np.linalg.eigvalsh((a @ s2 @ a + (a @ s2 @ a).T) / 2)
    top = max(w.max(), 0.0)
    w = np.where(w < EIG_CLAMP * top, 0.0, w)
    tr_sqrt = np.sqrt(w).sum()
    value = float(((mu1 - mu2) ** 2).sum() + np.trace(s1) + np.trace(s2) - 2 * tr_sqrt)
    return max(value, 0.0)


def fid(real, gen) -> float:
    """Frechet distance between Gaussians fitted to two feature clouds."""
    x, y = _as_array(real), _as_array(gen)
    if len(x) < 2 or len(y) < 2:
        raise ArgumentError("fid needs at least two samples per cloud")
    if x.shape[1] != y.shape[1]:
        raise ShapeError("feature dimensions differ")
    return frechet_from_moments(
        x.mean(0), np.cov(x, rowvar=False), y.mean(0), np.cov(y, rowvar=False)
    )


def median_bandwidth(*clouds) -> float:
    """Median pairwise Euclidean distance of the pooled sample.

    Falls back to the mean distance when the median is zero, and to 1 when
    every point coincides.
    """
    pooled = np.concatenate([_as_array(c) for c in clouds])
    if len(pooled) < 2:
        return 1.0
    d = pdist(pooled)
    med = float(np.median(d))
    if med > 0:
        return med
    mean = float(d.mean())
    return mean if mean > 0 else 1.0


def gaussian_kernel(a, b, bandwidth: float):
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * bandwidth**2))


def kmmd(real, gen, bandwidth: Optional[float] = None) -> float:
    """Square root of the biased Gaussian-kernel MMD^2 estimate (diagonals included)."""
    x, y = _as_array(real), _as_array(gen)
    if len(x) == 0 or len(y) == 0:
        raise ArgumentError("kmmd needs non-empty clouds")
    if x.shape[1] != y.shape[1]:
        raise ShapeError("feature dimensions differ")
    if bandwidth is None:
        bandwidth = median_bandwidth(x, y)
    if not bandwidth > 0:
        raise ArgumentError(f"bandwidth must be > 0, got {bandwidth}")
    kxx = gaussian_kernel(x, x, bandwidth).mean()
    kyy = gaussian_kernel(y, y, bandwidth).mean()
    kxy = gaussian_kernel(x, y, bandwidth).mean()
    return float(np.sqrt(max(kxx + kyy - 2.0 * kxy, 0.0)))


def embed_images(extractor, images_signed: np.ndarray) -> np.ndarray:
    return extractor.embed_numpy(np.asarray(images_signed, dtype=np.float32))


def evaluate(
    generator,
    real_set,
    sampler_config,
    n_gen: int = 2000,
    extractor=None,
    bandwidth: Optional[float] = None,
    class_index: Optional[int] = None,
) -> EvalReport:
    """Compare ``n_gen`` truncated-latent samples against ``real_set``.

    ``class_index`` selects a conditional row for plain generators; adapted
    generators use their own base class when it is omitted. ``bandwidth`` of
    ``None`` applies the pooled median rule.
    """
    from .sampling import generate, sample_truncated

    if n_gen < 2:
        raise ArgumentError("n_gen must be >= 2")
    if extractor is None:
        raise ArgumentError("evaluate needs a trained extractor")
    z = sample_truncated(sampler_config, n_gen, generator.spec.latent_dim)
    if class_index is None and not hasattr(generator, "base_class"):
        class_index = 0
    fake = generate(generator, z, class_index)
    real_feats = embed_images(extractor, real_set.to_signed())
    gen_feats = embed_images(extractor, fake)
    rule = "median-pooled" if bandwidth is None else "fixed"
    bw = median_bandwidth(real_feats, gen_feats) if bandwidth is None else float(bandwidth)
    return EvalReport(
        fid=fid(real_feats, gen_feats),
        kmmd=kmmd(real_feats, gen_feats, bw),
        n_real=len(real_feats),
        n_gen=n_gen,
        bandwidth=bw,
        bandwidth_rule=rule,
        truncation_tau=sampler_config.truncation_tau,
        seed=sampler_config.seed,
    )
