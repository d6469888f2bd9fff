"""Latent bank, truncated-normal sampling, interpolation and domain morphing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .adaptation import AdaptedGenerator, StatParamSet
from .errors import ArgumentError, ShapeError


class LatentBank:
    """One trainable latent per training image, all starting at zero.

    Rows are updated with their own Adam moments and step counters, so a row
    that is not in the current batch is left untouched.
    """

    def __init__(self, n: int, dim: int, betas=(0.9, 0.999), eps: float = 1e-8):
        if n < 1 or dim < 1:
            raise ArgumentError("latent bank needs n >= 1 and dim >= 1")
        self.z = torch.zeros(n, dim, requires_grad=True)
        self.m = torch.zeros(n, dim)
        self.v = torch.zeros(n, dim)
        self.t = torch.zeros(n, dtype=torch.long)
        self.betas = betas
        self.eps = eps

    def __len__(self):
        return self.z.shape[0]

    @property
    def dim(self):
        return self.z.shape[1]

    def zero_grad(self):
        self.z.grad = None

    @torch.no_grad()
    def step(self, indices, lr: float):
        """Adam update of the given rows from ``z.grad``."""
        if self.z.grad is None or lr == 0:
            return
        idx = torch.as_tensor(np.unique(np.asarray(indices)), dtype=torch.long)
        b1, b2 = self.betas
        g = self.z.grad[idx]
        self.t[idx] += 1
        t = self.t[idx].to(g.dtype)[:, None]
        self.m[idx] = b1 * self.m[idx] + (1 - b1) * g
        self.v[idx] = b2 * self.v[idx] + (1 - b2) * g * g
        m_hat = self.m[idx] / (1 - b1**t)
        v_hat = self.v[idx] / (1 - b2**t)
        self.z[idx] -= lr * m_hat / (v_hat.sqrt() + self.eps)

    def latents(self) -> np.ndarray:
        return self.z.detach().numpy().copy()

    def state_arrays(self) -> dict:
        return {
            "z": self.latents(),
            "adam_m": self.m.numpy().copy(),
            "adam_v": self.v.numpy().copy(),
            "adam_t": self.t.numpy().copy(),
        }

    @classmethod
    def from_arrays(cls, arrays: dict) -> "LatentBank":
        z = np.asarray(arrays["z"], dtype=np.float32)
        bank = cls(*z.shape)
        with torch.no_grad():
            bank.z.copy_(torch.from_numpy(z))
            if "adam_m" in arrays:
                bank.m.copy_(torch.from_numpy(np.asarray(arrays["adam_m"])))
                bank.v.copy_(torch.from_numpy(np.asarray(arrays["adam_v"])))
                bank.t.copy_(torch.from_numpy(np.asarray(arrays["adam_t"])))
        return bank


@dataclass(frozen=True)
class SamplerConfig:
    truncation_tau: float = 0.3
    seed: int = 0


def sample_truncated(config: SamplerConfig, n: int, d: int) -> np.ndarray:
    """Standard-normal draws with every component redrawn until ``|x| <= tau``."""
    tau = config.truncation_tau
    if not tau > 0:
        raise ArgumentError(f"truncation tau must be > 0, got {tau}")
    if n < 1 or d < 1:
        raise ArgumentError("n and d must be >= 1")
    rng = np.random.default_rng(config.seed)
    x = rng.standard_normal((n, d))
    bad = np.abs(x) > tau
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > tau
    return x.astype(np.float32)


def interpolation_weights(steps: int) -> np.ndarray:
    if steps < 2:
        raise ArgumentError("steps must be >= 2")
    return np.array([i / (steps - 1) for i in range(steps)])


def interpolate_latents(z_a, z_b, steps: int) -> np.ndarray:
    """``(1 - a) * z_a + a * z_b`` for ``a`` evenly spaced over [0, 1]."""
    z_a = np.asarray(z_a)
    z_b = np.asarray(z_b)
    if z_a.shape != z_b.shape:
        raise ShapeError(f"latent shapes differ: {z_a.shape} vs {z_b.shape}")
    dtype = np.result_type(z_a, z_b)
    out = [_lerp(z_a, z_b, a).astype(dtype) for a in interpolation_weights(steps).tolist()]
    return np.stack(out)


def _lerp(a, b, alpha):
    # Components that agree are passed through so equal endpoints stay exact.
    mixed = (1 - alpha) * a + alpha * b
    if torch.is_tensor(a):
        return torch.where(a == b, a, mixed)
    return np.where(a == b, a, mixed)


@torch.no_grad()
def morph(
    adapted: AdaptedGenerator,
    source_stats: StatParamSet,
    target_stats: StatParamSet,
    source_class: int,
    z_a,
    z_b,
    steps: int,
) -> np.ndarray:
    """Frames sliding from a source class to the adapted domain.

    At weight ``a`` the adaptation scales/shifts, the conditional batch-norm
    rows (``source_class`` towards the adapted generator's ``base_class``) and
    the latent are all ``(1 - a) * start + a * end``. Frames are generated one
    at a time so each matches a direct single-image run bit for bit.

    Returns:
        (steps, C, H, W) array in [-1, 1].
    """
    source_stats.check_registry(adapted.layers)
    target_stats.check_registry(adapted.layers)
    src_aff = adapted.class_affine(source_class)
    tgt_aff = adapted.class_affine(adapted.base_class)
    src_st, tgt_st = source_stats.tensors(), target_stats.tensors()
    za = torch.as_tensor(np.asarray(z_a, dtype=np.float32)).reshape(1, -1)
    zb = torch.as_tensor(np.asarray(z_b, dtype=np.float32)).reshape(1, -1)
    frames = []
    for alpha in interpolation_weights(steps):
        alpha = float(alpha)
        affine = {
            k: (_lerp(src_aff[k][0], tgt_aff[k][0], alpha)[None], _lerp(src_aff[k][1], tgt_aff[k][1], alpha)[None])
            for k in src_aff
        }
        stats = {
            k: (_lerp(src_st[k][0], tgt_st[k][0], alpha), _lerp(src_st[k][1], tgt_st[k][1], alpha))
            for k in src_st
        }
        z = _lerp(za, zb, alpha)
        frames.append(adapted(z, 0, stats=stats, class_affine=affine)[0].numpy())
    return np.stack(frames)


@torch.no_grad()
def generate(adapted, z, y=None, batch_size: int = 250) -> np.ndarray:
    """Run a generator over many latents; returns images in [-1, 1]."""
    z = np.asarray(z, dtype=np.float32)
    outs = []
    for start in range(0, len(z), batch_size):
        zt = torch.from_numpy(np.ascontiguousarray(z[start : start + batch_size]))
        out = adapted(zt) if y is None else adapted(zt, y)
        outs.append(out.numpy())
    return np.concatenate(outs)
