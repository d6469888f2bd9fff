"""Filter-selection identity, activation rates vs. scale/shift, class-statistics geometry."""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError

UNDEFINED = None


def verify_filter_identity(weight, x, gamma, beta, padding: int = 1) -> float:
    """Max |conv(x; W) * gamma + beta - conv(x; gamma_i W_i, bias=beta)|.

    Scaling output channel i after a convolution equals convolving with the
    i-th filter scaled by gamma_i; the shift becomes that filter's bias (a
    constant added to every output of the filter). Both paths run in float64
    so the result measures the identity, not float32 summation order.
    """
    weight = torch.as_tensor(weight).double()
    x = torch.as_tensor(x).double()
    gamma = torch.as_tensor(gamma).double()
    beta = torch.as_tensor(beta).double()
    c_out = weight.shape[0]
    if weight.ndim != 4 or x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"incompatible conv weight {tuple(weight.shape)} and input {tuple(x.shape)}")
    if gamma.shape != (c_out,) or beta.shape != (c_out,):
        raise ShapeError(f"gamma/beta must have shape ({c_out},)")
    with torch.no_grad():
        after = F.conv2d(x, weight, padding=padding) * gamma[None, :, None, None] + beta[None, :, None, None]
        folded = F.conv2d(x, weight * gamma[:, None, None, None], bias=beta, padding=padding)
    return float((after - folded).abs().max())


def _pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return UNDEFINED
    return float(np.corrcoef(a, b)[0, 1])


def effective_affine(adapted, layer: str, class_index: int):
    """Per-channel (gamma, beta) acting on the normalized activations of ``layer``.

    Combines the conditional batch-norm row of ``class_index`` with the
    adaptation scale/shift: ``(g_c * g_a, b_c * g_a + b_a)``.
    """
    stats = adapted.stat_tensors() if hasattr(adapted, "stat_tensors") else {}
    base = adapted.base if hasattr(adapted, "base") else adapted
    norms = base.norm_layers()
    c = base.adaptable_layers[layer]
    g_a, b_a = stats.get(layer, (torch.ones(c), torch.zeros(c)))
    if layer in norms:
        g_c = norms[layer].gamma[class_index]
        b_c = norms[layer].beta[class_index]
    else:
        g_c, b_c = torch.ones(c), torch.zeros(c)
    return (g_c * g_a).detach().numpy(), (b_c * g_a + b_a).detach().numpy()


def activation_rates(outputs: torch.Tensor) -> np.ndarray:
    """Fraction of strictly positive values per channel of a (B, C, H, W) tensor."""
    return (outputs > 0).double().mean(dim=(0, 2, 3)).numpy()


@torch.no_grad()
def activation_correlation(generator, probe_latents, class_index: int = 0) -> dict:
    """Per adaptable layer: activation rate of each filter and its correlation with gamma/beta.

    The rate counts strictly positive values of the layer output (what the
    following ReLU lets through) over the probe batch. Correlations are
    ``None`` when either side is constant.
    """
    z = torch.as_tensor(np.asarray(probe_latents, dtype=np.float32))
    trace = {}
    base = generator.base if hasattr(generator, "base") else generator
    if hasattr(generator, "stat_tensors"):
        generator(z, class_index, trace=trace)
    else:
        base.eval()
        base(z, class_index, trace=trace)
    report = {}
    for layer, (_, out) in trace.items():
        rates = activation_rates(out)
        gamma, beta = effective_affine(generator, layer, class_index)
        report[layer] = {
            "rate": rates.tolist(),
            "gamma": gamma.tolist(),
            "beta": beta.tolist(),
            "corr_rate_gamma": _pearson(rates, gamma),
            "corr_rate_beta": _pearson(rates, beta),
        }
    return report


def export_class_stats(generator) -> dict[str, np.ndarray]:
    """Per conditional layer, a (num_classes, 2 * channels) matrix of [gamma | beta] rows."""
    base = generator.base if hasattr(generator, "base") else generator
    return {
        name: np.concatenate([bn.gamma.detach().numpy(), bn.beta.detach().numpy()], axis=1).copy()
        for name, bn in base.norm_layers().items()
    }


def import_class_stats(generator, stats: dict):
    base = generator.base if hasattr(generator, "base") else generator
    with torch.no_grad():
        for name, bn in base.norm_layers().items():
            m = np.asarray(stats[name], dtype=np.float32)
            c = bn.num_features
            if m.shape != (bn.gamma.shape[0], 2 * c):
                raise ShapeError(f"layer {name}: expected {(bn.gamma.shape[0], 2 * c)}, got {m.shape}")
            bn.gamma.copy_(torch.from_numpy(m[:, :c]))
            bn.beta.copy_(torch.from_numpy(m[:, c:]))


def stack_class_stats(stats: dict) -> np.ndarray:
    """Concatenate every layer's matrix column-wise (layer order as given)."""
    return np.concatenate([stats[k] for k in stats], axis=1)


def embed_class_stats(matrix, dims: int = 2) -> np.ndarray:
    """Principal-component coordinates of each row; signs fixed so each axis's largest |loading| is positive."""
    m = np.asarray(matrix, dtype=np.float64)
    centered = m - m.mean(0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    k = min(dims, vt.shape[0])
    vt = vt[:k]
    for i in range(k):
        j = np.argmax(np.abs(vt[i]))
        if vt[i, j] < 0:
            vt[i] = -vt[i]
    coords = centered @ vt.T
    if k < dims:
        coords = np.pad(coords, ((0, 0), (0, dims - k)))
    return coords


def nearest_neighbor_purity(matrix, categories) -> Optional[float]:
    """Fraction of rows whose nearest other row (Euclidean) has the same category."""
    m = np.asarray(matrix, dtype=np.float64)
    cats = np.asarray(categories)
    if len(m) < 2:
        return UNDEFINED
    if len(cats) != len(m):
        raise ShapeError("one category per row required")
    d = ((m[:, None, :] - m[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    nn = d.argmin(1)
    return float(np.mean(cats[nn] == cats))
