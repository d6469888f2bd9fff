"""Toy class-conditional generator, feature extractor, and their pretraining."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datasets import ImageSet
from .errors import ConfigurationError, TrainingError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GeneratorSpec:
    latent_dim: int = 64
    num_classes: int = 10
    base_channels: int = 16
    num_blocks: int = 3
    image_size: int = 32
    image_channels: int = 3

    def validate(self):
        if self.latent_dim < 1:
            raise ConfigurationError("latent_dim must be >= 1")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        if self.num_blocks < 1 or self.base_channels < 1 or self.image_channels < 1:
            raise ConfigurationError("num_blocks, base_channels, image_channels must be >= 1")
        if self.image_size != 4 * 2**self.num_blocks:
            raise ConfigurationError(
                f"image_size {self.image_size} inconsistent with {self.num_blocks} blocks "
                f"(expected {4 * 2 ** self.num_blocks})"
            )

    def channels(self, level: int) -> int:
        """Channel count of the feature map at resolution 4 * 2**level."""
        return self.base_channels * 2 ** max(self.num_blocks - 1 - level, 0)

    def to_dict(self):
        return asdict(self)


class ConditionalBatchNorm2d(nn.Module):
    """Batch norm without its own affine, followed by a per-class scale and shift."""

    def __init__(self, num_features: int, num_classes: int):
        super().__init__()
        self.num_features = num_features
        self.bn = nn.BatchNorm2d(num_features, affine=False)
        self.gamma = nn.Parameter(torch.ones(num_classes, num_features))
        self.beta = nn.Parameter(torch.zeros(num_classes, num_features))

    def forward(self, x, y, affine=None):
        h = self.bn(x)
        if affine is None:
            g, b = self.gamma[y], self.beta[y]
        else:
            g, b = affine
        return h * g[:, :, None, None] + b[:, :, None, None]


class GeneratorBlock(nn.Module):
    """Pre-activation upsampling residual block."""

    def __init__(self, in_ch: int, out_ch: int, num_classes: int):
        super().__init__()
        self.bn1 = ConditionalBatchNorm2d(in_ch, num_classes)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.bn2 = ConditionalBatchNorm2d(out_ch, num_classes)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1)


class GeneratorModel(nn.Module):
    """Linear projection to 4x4, ``num_blocks`` upsampling blocks, conv + tanh.

    Hidden layers that accept a scale/shift are listed in ``adaptable_layers``;
    the output convolution is excluded. ``forward`` optionally takes

    * ``adapt``: ``{layer: (gamma, beta)}`` channel vectors applied after the
      layer's output as ``h * gamma + beta``;
    * ``class_affine``: ``{layer: (gamma, beta)}`` of shape (B, C) replacing the
      per-class rows of a conditional batch norm;
    * ``trace``: a dict that receives ``{layer: (before, after)}`` around the
      adaptation step.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        c0 = spec.channels(0)
        self.fc = nn.Linear(spec.latent_dim, c0 * 16)
        self.blocks = nn.ModuleList(
            GeneratorBlock(spec.channels(i), spec.channels(i + 1), spec.num_classes)
            for i in range(spec.num_blocks)
        )
        c_last = spec.channels(spec.num_blocks)
        self.out_bn = ConditionalBatchNorm2d(c_last, spec.num_classes)
        self.out_conv = nn.Conv2d(c_last, spec.image_channels, 3, padding=1)
        self.diversity = spec.num_classes

    @property
    def adaptable_layers(self) -> dict[str, int]:
        layers = {"fc": self.spec.channels(0)}
        for i, blk in enumerate(self.blocks):
            layers[f"block{i}.bn1"] = blk.bn1.num_features
            layers[f"block{i}.bn2"] = blk.bn2.num_features
        layers["out_bn"] = self.out_bn.num_features
        return layers

    def norm_layers(self) -> dict[str, ConditionalBatchNorm2d]:
        layers = {}
        for i, blk in enumerate(self.blocks):
            layers[f"block{i}.bn1"] = blk.bn1
            layers[f"block{i}.bn2"] = blk.bn2
        layers["out_bn"] = self.out_bn
        return layers

    def _adapt(self, name, h, adapt, trace):
        if adapt is not None and name in adapt:
            g, b = adapt[name]
            out = h * g[None, :, None, None] + b[None, :, None, None]
        else:
            out = h
        if trace is not None:
            trace[name] = (h, out)
        return out

    def _norm(self, name, bn, h, y, adapt, class_affine, trace):
        affine = None if class_affine is None else class_affine.get(name)
        return self._adapt(name, bn(h, y, affine), adapt, trace)

    def forward(self, z, y, adapt=None, class_affine=None, trace=None):
        if not torch.is_tensor(y):
            y = torch.full((z.shape[0],), int(y), dtype=torch.long)
        h = self.fc(z).view(z.shape[0], -1, 4, 4)
        h = self._adapt("fc", h, adapt, trace)
        for i, blk in enumerate(self.blocks):
            x = h
            h = self._norm(f"block{i}.bn1", blk.bn1, h, y, adapt, class_affine, trace)
            h = F.interpolate(F.relu(h), scale_factor=2, mode="nearest")
            h = blk.conv1(h)
            h = self._norm(f"block{i}.bn2", blk.bn2, h, y, adapt, class_affine, trace)
            h = blk.conv2(F.relu(h))
            h = h + blk.shortcut(F.interpolate(x, scale_factor=2, mode="nearest"))
        h = self._norm("out_bn", self.out_bn, h, y, adapt, class_affine, trace)
        return torch.tanh(self.out_conv(F.relu(h)))

    def kernel_names(self) -> list[str]:
        """Parameters other than the per-class conditional affines."""
        return [n for n, _ in self.named_parameters() if not n.endswith((".gamma", ".beta"))]

    def first_layer_names(self) -> list[str]:
        return ["fc.weight", "fc.bias"]

    def last_layer_names(self) -> list[str]:
        """The last block and everything after it."""
        last = f"blocks.{self.spec.num_blocks - 1}."
        return [
            n
            for n, _ in self.named_parameters()
            if n.startswith((last, "out_bn.", "out_conv."))
        ]


def build_generator(spec: GeneratorSpec, init_seed: int = 0) -> GeneratorModel:
    """Randomly initialized generator; class scales start at 1 and shifts at 0."""
    spec.validate()
    gen = torch.Generator().manual_seed(init_seed)
    model = GeneratorModel(spec)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(".gamma"):
                p.fill_(1.0)
            elif name.endswith(".beta") or name.endswith(".bias"):
                p.zero_()
            else:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen) * np.sqrt(2.0 / fan_in))
    model.eval()
    return model


def running_stats(model: nn.Module) -> dict[str, torch.Tensor]:
    return {n: b for n, b in model.named_buffers() if n.endswith(("running_mean", "running_var"))}


@torch.no_grad()
def calibrate_running_stats(model: GeneratorModel, z, y, batch_size: int = 100):
    """Replace running statistics with exact averages over the given inputs."""
    for bn in model.norm_layers().values():
        bn.bn.reset_running_stats()
        bn.bn.momentum = None
    model.train()
    for start in range(0, z.shape[0], batch_size):
        model(z[start : start + batch_size], y[start : start + batch_size])
    model.eval()
    for bn in model.norm_layers().values():
        bn.bn.momentum = 0.1


TAP_NAMES = ("conv1", "conv2", "conv3", "conv4")


class FeatureExtractor(nn.Module):
    """Small convolutional classifier with named tap points.

    Inputs are images in [-1, 1]. Taps are post-ReLU maps of each conv layer;
    ``embed`` returns the global-average-pooled output of the last conv, which
    also feeds the classification head.
    """

    tap_names = TAP_NAMES
    gram_layer = "conv2"

    def __init__(self, num_classes: int, image_channels: int = 3, image_size: int = 32, width: int = 16):
        super().__init__()
        if image_size < 8:
            raise ConfigurationError("extractor needs image_size >= 8")
        self.num_classes = num_classes
        self.image_channels = image_channels
        self.image_size = image_size
        self.width = width
        self.conv1 = nn.Conv2d(image_channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.conv3 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.conv4 = nn.Conv2d(2 * width, 4 * width, 3, padding=1)
        self.head = nn.Linear(4 * width, num_classes)
        self.heldout_accuracy: Optional[float] = None
        with torch.no_grad():
            probe = torch.zeros(1, image_channels, image_size, image_size)
            self.tap_shapes = {k: tuple(v.shape[1:]) for k, v in self.taps(probe).items()}
        self.eval()

    @property
    def feature_dim(self) -> int:
        return 4 * self.width

    def taps(self, x, names=None) -> dict[str, torch.Tensor]:
        names = self.tap_names if names is None else tuple(names)
        unknown = set(names) - set(self.tap_names)
        if unknown:
            raise ConfigurationError(f"unknown extractor taps {sorted(unknown)}")
        out = {}
        h = F.relu(self.conv1(x))
        out["conv1"] = h
        h = F.relu(self.conv2(h))
        out["conv2"] = h
        h = F.relu(self.conv3(F.avg_pool2d(h, 2)))
        out["conv3"] = h
        h = F.relu(self.conv4(F.avg_pool2d(h, 2)))
        out["conv4"] = h
        return {k: out[k] for k in names}

    def embed(self, x):
        return self.taps(x, ["conv4"])["conv4"].mean(dim=(2, 3))

    def forward(self, x):
        return self.head(self.embed(x))

    @torch.no_grad()
    def tap_numpy(self, images: np.ndarray, layer: str, batch_size: int = 256) -> np.ndarray:
        outs = []
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(images[start : start + batch_size]))
            outs.append(self.taps(x, [layer])[layer].numpy())
        return np.concatenate(outs)

    @torch.no_grad()
    def embed_numpy(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Penultimate features for (N, C, H, W) images in [-1, 1]."""
        outs = []
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(images[start : start + batch_size]))
            outs.append(self.embed(x).double().numpy())
        return np.concatenate(outs)


def build_extractor(num_classes: int, image_channels=3, image_size=32, width=16, init_seed=0):
    torch.manual_seed(init_seed)
    return FeatureExtractor(num_classes, image_channels, image_size, width)


def pretrain_extractor(extractor: FeatureExtractor, source: ImageSet, config) -> FeatureExtractor:
    """Train the classifier on labeled ``source`` images.

    Ten percent of the images (at least one) are held out; the held-out
    accuracy is stored on ``extractor.heldout_accuracy``. ``config`` is a
    ``TrainConfig``; ``lr_stats`` is the Adam learning rate for all weights.
    """
    if source.labels is None:
        raise ConfigurationError("extractor pretraining needs labeled images")
    rng = np.random.default_rng(config.seed)
    n = len(source)
    perm = rng.permutation(n)
    n_hold = max(1, n // 10) if n > 1 else 0
    hold, train = perm[:n_hold], perm[n_hold:]
    if len(train) == 0:
        train = perm
    x_all = torch.from_numpy(source.to_signed())
    y_all = torch.from_numpy(source.labels)
    torch.manual_seed(config.seed)
    opt = torch.optim.Adam(extractor.parameters(), lr=config.lr_stats)
    extractor.train()
    batch = min(config.batch_size, len(train))
    pos, order = len(train), None
    for it in range(config.iterations):
        if pos + batch > len(train):
            order, pos = train[rng.permutation(len(train))], 0
        idx = torch.from_numpy(order[pos : pos + batch])
        pos += batch
        x = x_all[idx]
        # Random flips keep the tiny classifier from memorizing positions.
        if rng.random() < 0.5:
            x = x.flip(3)
        loss = F.cross_entropy(extractor(x), y_all[idx])
        if not torch.isfinite(loss):
            raise TrainingError(f"extractor loss diverged at iteration {it}", it)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if config.log_every and it % config.log_every == 0:
            logger.info("extractor it=%d loss=%.4f", it, loss.item())
    extractor.eval()
    if len(hold):
        with torch.no_grad():
            pred = extractor(x_all[torch.from_numpy(hold)]).argmax(1)
        acc = (pred == y_all[torch.from_numpy(hold)]).double().mean().item()
    else:
        acc = 1.0
    extractor.heldout_accuracy = float(acc)
    return extractor


def pretrain_source(
    model: GeneratorModel,
    extractor: FeatureExtractor,
    source: ImageSet,
    config,
    loss_config=None,
    log: Optional[list] = None,
) -> GeneratorModel:
    """Fit every generator parameter to ``source`` by joint latent optimization.

    Uses the same reconstruction objective as adaptation, with batch statistics
    in training mode. Running statistics are recomputed over the final latents
    before returning, so the checkpoint carries statistics that match the data.
    """
    from .trainer import fit_source  # late import: trainer depends on this module

    if source.labels is None or source.num_classes > model.spec.num_classes:
        raise ConfigurationError("source labels must cover the generator's classes")
    if config.iterations == 0:
        return model
    fit_source(model, extractor, source, config, loss_config, log)
    model.diversity = int(len(np.unique(source.labels)))
    return model
