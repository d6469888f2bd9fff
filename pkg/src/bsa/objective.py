"""Reconstruction objective: pixel L1, perceptual, latent Chamfer and stat penalties.

Every term is summed over the images of a batch. Generated and target images
are compared in the generator's [-1, 1] range.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np
import torch

from .errors import ArgumentError, ConfigurationError, NumericError, ShapeError

PERCEPTUAL_NORMS = ("l1", "l2")
ADAPTIVE_TARGET = 0.1


@dataclass
class LossConfig:
    """Weights of the four loss terms.

    ``lambda_c`` is either one weight for every extractor tap or a
    ``{tap: weight}`` map (taps not listed are unused). With
    ``adaptive_lambda_c`` each tap's weight is reset every step so that its
    weighted term equals 0.1. ``anchor_count`` of ``None`` means
    ``max(4 * dataset_size, 256)``.
    """

    lambda_c: Union[float, dict] = 0.001
    adaptive_lambda_c: bool = False
    lambda_z: float = 0.2
    lambda_gb: float = 0.01
    anchor_count: Optional[int] = None
    noise_sigma: float = 0.03
    perceptual_norm: str = "l1"

    def validate(self, batch_size: Optional[int] = None):
        weights = self.lambda_c.values() if isinstance(self.lambda_c, dict) else [self.lambda_c]
        if any(w < 0 for w in weights) or self.lambda_z < 0 or self.lambda_gb < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be non-negative")
        if self.perceptual_norm not in PERCEPTUAL_NORMS:
            raise ConfigurationError(f"perceptual_norm must be one of {PERCEPTUAL_NORMS}")
        if self.anchor_count is not None:
            if self.anchor_count < 1:
                raise ConfigurationError("anchor_count must be >= 1")
            if batch_size is not None and self.anchor_count < batch_size:
                raise ConfigurationError("anchor_count must be >= batch size")

    def tap_weights(self, tap_names) -> dict:
        if isinstance(self.lambda_c, dict):
            unknown = set(self.lambda_c) - set(tap_names)
            if unknown:
                raise ConfigurationError(f"unknown perceptual taps {sorted(unknown)}")
            return dict(self.lambda_c)
        return {t: float(self.lambda_c) for t in tap_names}

    def anchors_for(self, dataset_size: int) -> int:
        if self.anchor_count is not None:
            return self.anchor_count
        return max(4 * dataset_size, 256)

    def to_dict(self):
        return asdict(self)


@dataclass
class LossReport:
    total: float
    pixel_l1: float
    perceptual: float
    latent_reg: float
    stats_reg: float
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        d = {
            "total": self.total,
            "pixel_l1": self.pixel_l1,
            "perceptual": self.perceptual,
            "latent_reg": self.latent_reg,
            "stats_reg": self.stats_reg,
        }
        d.update(self.extras)
        return d


def pixel_l1(batch_x: torch.Tensor, batch_g: torch.Tensor) -> torch.Tensor:
    """Sum over images of the per-image mean absolute difference."""
    if batch_x.shape != batch_g.shape:
        raise ShapeError(f"pixel_l1 shape mismatch: {tuple(batch_x.shape)} vs {tuple(batch_g.shape)}")
    return (batch_x - batch_g).abs().flatten(1).mean(1).sum()


def _feature_distance(fx, fg, norm):
    diff = (fx - fg).flatten(1)
    chw = diff.shape[1]
    if norm == "l1":
        return diff.abs().sum(1) / chw
    return diff.pow(2).sum(1).sqrt() / chw


def perceptual(
    batch_x,
    batch_g,
    extractor,
    config: LossConfig,
    target_taps: Optional[dict] = None,
    details: Optional[dict] = None,
) -> torch.Tensor:
    """Weighted sum over taps and images of normalized feature distances.

    ``target_taps`` may carry precomputed extractor features of ``batch_x``.
    ``details`` (if given) receives the per-tap weight actually used and the
    weighted per-tap term.
    """
    weights = config.tap_weights(extractor.tap_names)
    taps = [t for t, w in weights.items() if w > 0 or config.adaptive_lambda_c]
    if not taps:
        return batch_g.new_zeros(())
    if target_taps is None:
        with torch.no_grad():
            target_taps = extractor.taps(batch_x, taps)
    gen_taps = extractor.taps(batch_g, taps)
    total = batch_g.new_zeros(())
    for t in taps:
        raw = _feature_distance(target_taps[t], gen_taps[t], config.perceptual_norm).sum()
        if config.adaptive_lambda_c:
            denom = raw.detach().item()
            w = ADAPTIVE_TARGET / denom if denom > 0 else 0.0
        else:
            w = weights[t]
        term = w * raw
        if details is not None:
            details[t] = {"weight": float(w), "term": float(term.detach())}
        total = total + term
    return total


def latent_reg(batch_z: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Bidirectional nearest-neighbor (Chamfer) squared distance, per dimension.

    First sum: each anchor to its nearest batch latent. Second sum: each batch
    latent to its nearest anchor. Both divided by the latent dimension.
    """
    if anchors.shape[0] == 0:
        raise ArgumentError("anchor set is empty")
    if batch_z.shape[0] == 0:
        raise ArgumentError("latent batch is empty")
    if batch_z.shape[1] != anchors.shape[1]:
        raise ShapeError("latent and anchor dimensions differ")
    d = batch_z.shape[1]
    d2 = (batch_z[:, None, :] - anchors[None, :, :]).pow(2).sum(-1)
    return (d2.min(0).values.sum() + d2.min(1).values.sum()) / d


def stats_reg(params) -> torch.Tensor:
    """Sum over layers of (|gamma - 1|^2 + |beta|^2) / channels.

    ``params`` is ``{layer: (gamma, beta)}`` of tensors, an ``AdaptedGenerator``
    or a ``StatParamSet``.
    """
    if hasattr(params, "stat_tensors"):
        params = params.stat_tensors()
    elif hasattr(params, "tensors"):
        params = params.tensors()
    total = None
    for g, b in params.values():
        term = ((g - 1).pow(2).sum() + b.pow(2).sum()) / g.numel()
        total = term if total is None else total + term
    return torch.zeros(()) if total is None else total


def draw_noise_and_anchors(rng: np.random.Generator, batch: int, dim: int, k: int, sigma: float):
    """Per-step random draws: latent noise first, then fresh standard-normal anchors."""
    eps = rng.standard_normal((batch, dim)) * sigma
    anchors = rng.standard_normal((k, dim))
    return eps, anchors


def _check(name, value):
    if not math.isfinite(float(value)):
        raise NumericError(f"loss term {name} is not finite ({float(value)})")


def total_loss(
    indices,
    generator,
    bank,
    targets: torch.Tensor,
    extractor,
    config: LossConfig,
    rng: Optional[np.random.Generator] = None,
    labels: Optional[torch.Tensor] = None,
    stats=None,
    target_taps: Optional[dict] = None,
    eps: Optional[torch.Tensor] = None,
    anchors: Optional[torch.Tensor] = None,
):
    """Evaluate the full objective on one batch.

    Args:
        indices: dataset rows in the batch.
        generator: callable ``(z, y)`` returning images in [-1, 1].
        bank: ``LatentBank`` holding one latent per dataset image.
        targets: (N, C, H, W) target images in [-1, 1] for the whole dataset.
        extractor: ``FeatureExtractor`` for the perceptual term.
        config: loss weights.
        rng: numpy generator for the noise and anchors; ignored for whichever
            of ``eps``/``anchors`` is passed explicitly.
        labels: per-image class labels (N,), or ``None`` for the generator's
            default class.
        stats: ``{layer: (gamma, beta)}`` for the stat penalty; defaults to the
            generator's own adaptation parameters when it has any.
        target_taps: precomputed extractor taps of ``targets``.

    Returns:
        ``(loss, report)`` where ``loss`` is a differentiable scalar tensor.
    """
    idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
    z = bank.z[idx]
    b, d = z.shape
    k = config.anchors_for(len(bank))
    if eps is None or anchors is None:
        if rng is None:
            raise ArgumentError("rng is required unless eps and anchors are given")
        e_np, a_np = draw_noise_and_anchors(rng, b, d, k, config.noise_sigma)
        eps = torch.from_numpy(e_np).to(z.dtype) if eps is None else eps
        anchors = torch.from_numpy(a_np).to(z.dtype) if anchors is None else anchors
    y = None if labels is None else labels[idx]
    gen = generator(z + eps, y) if y is not None else generator(z + eps)
    x = targets[idx]
    l_pix = pixel_l1(x, gen)
    tt = None if target_taps is None else {t: v[idx] for t, v in target_taps.items()}
    details = {}
    l_per = perceptual(x, gen, extractor, config, tt, details)
    l_lat = latent_reg(z, anchors)
    if stats is None and hasattr(generator, "stat_tensors"):
        stats = generator.stat_tensors()
    l_st = stats_reg(stats) if stats else gen.new_zeros(())
    for name, v in (("pixel_l1", l_pix), ("perceptual", l_per), ("latent_reg", l_lat), ("stats_reg", l_st)):
        _check(name, v.detach())
    loss = l_pix + l_per + config.lambda_z * l_lat + config.lambda_gb * l_st
    report = LossReport(
        total=float(loss.detach()),
        pixel_l1=float(l_pix.detach()),
        perceptual=float(l_per.detach()),
        latent_reg=float(config.lambda_z * l_lat.detach()),
        stats_reg=float(config.lambda_gb * l_st.detach()),
    )
    return loss, report
