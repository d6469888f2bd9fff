"""Channelwise scale/shift adaptation of a frozen generator, and freezing policies."""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, ShapeError
from .nets import GeneratorModel


class AdaptationMode(str, enum.Enum):
    BSA = "bsa"
    UPDATE_ALL = "update_all"
    UPDATE_FIRST = "update_first"
    UPDATE_LAST = "update_last"

    @classmethod
    def parse(cls, value) -> "AdaptationMode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"updateall": "update_all", "updatefirst": "update_first", "updatelast": "update_last"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ConfigurationError(
                f"unknown adaptation mode {value!r}; expected one of {[m.value for m in cls]}"
            ) from None


@dataclass(frozen=True)
class StatParamSet:
    """Immutable snapshot of per-layer adaptation scales and shifts.

    ``layers`` maps layer name to channel count; ``gamma``/``beta`` map layer
    name to float32 vectors of that length.
    """

    layers: dict
    gamma: dict
    beta: dict

    def __post_init__(self):
        for name, c in self.layers.items():
            for vec in (self.gamma[name], self.beta[name]):
                if np.shape(vec) != (c,):
                    raise ShapeError(f"layer {name}: expected ({c},), got {np.shape(vec)}")
                if not np.all(np.isfinite(vec)):
                    raise ShapeError(f"layer {name}: non-finite adaptation parameters")

    @classmethod
    def identity(cls, layers: dict) -> "StatParamSet":
        layers = dict(layers)
        return cls(
            layers,
            {k: np.ones(c, np.float32) for k, c in layers.items()},
            {k: np.zeros(c, np.float32) for k, c in layers.items()},
        )

    def check_registry(self, layers: dict):
        if dict(self.layers) != dict(layers):
            raise ShapeError(
                f"stat registry mismatch: snapshot {dict(self.layers)} vs generator {dict(layers)}"
            )

    def tensors(self) -> dict:
        return {
            k: (torch.from_numpy(self.gamma[k].copy()), torch.from_numpy(self.beta[k].copy()))
            for k in self.layers
        }


def _key(layer: str) -> str:
    return layer.replace(".", "_")


class AdaptedGenerator(nn.Module):
    """A generator whose hidden layers are followed by ``h * gamma + beta``.

    The wrapped base model always runs with fixed running statistics (eval
    mode). Scales start at 1 and shifts at 0, so a fresh wrapper reproduces the
    base model exactly. Generation defaults to ``base_class``, the conditional
    batch-norm row the adaptation is built on.
    """

    def __init__(
        self,
        base: GeneratorModel,
        mode: AdaptationMode = AdaptationMode.BSA,
        base_class: int = 0,
        adapt_projection: bool = True,
        first_linear_lr: float = 0.0,
    ):
        super().__init__()
        if not 0 <= base_class < base.spec.num_classes:
            raise ConfigurationError(f"base_class {base_class} out of range")
        self.base = base
        self.mode = AdaptationMode.parse(mode)
        self.base_class = int(base_class)
        self.adapt_projection = adapt_projection
        self.first_linear_lr = float(first_linear_lr)
        self.layers = {
            k: c for k, c in base.adaptable_layers.items() if adapt_projection or k != "fc"
        }
        self.gamma = nn.ParameterDict({_key(k): nn.Parameter(torch.ones(c)) for k, c in self.layers.items()})
        self.beta = nn.ParameterDict({_key(k): nn.Parameter(torch.zeros(c)) for k, c in self.layers.items()})
        self.base.eval()
        self._apply_policy()

    @property
    def spec(self):
        return self.base.spec

    def train(self, mode: bool = True):
        # Running statistics stay fixed whatever the caller asks for.
        super().train(mode)
        self.base.eval()
        return self

    def stat_tensors(self) -> dict:
        return {k: (self.gamma[_key(k)], self.beta[_key(k)]) for k in self.layers}

    def forward(self, z, y=None, stats=None, class_affine=None, trace=None):
        if y is None:
            y = self.base_class
        adapt = self.stat_tensors() if stats is None else stats
        return self.base(z, y, adapt, class_affine, trace)

    def named_registry(self) -> dict[str, nn.Parameter]:
        """Every parameter under a stable name: ``adapt.<layer>.gamma|beta`` or base names."""
        reg = {}
        for k in self.layers:
            reg[f"adapt.{k}.gamma"] = self.gamma[_key(k)]
            reg[f"adapt.{k}.beta"] = self.beta[_key(k)]
        for n, p in self.base.named_parameters():
            reg[n] = p
        return reg

    def _trainable_names(self) -> list[str]:
        base = self.base
        if self.mode is AdaptationMode.BSA:
            names = [n for n in self.named_registry() if n.startswith("adapt.")]
            if self.first_linear_lr > 0:
                names += base.first_layer_names()
            return names
        if self.mode is AdaptationMode.UPDATE_FIRST:
            return base.first_layer_names()
        if self.mode is AdaptationMode.UPDATE_LAST:
            return base.last_layer_names()
        return [n for n, _ in base.named_parameters()]

    def _apply_policy(self):
        trainable = set(self._trainable_names())
        for n, p in self.named_registry().items():
            p.requires_grad_(n in trainable)

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        names = self._trainable_names()
        reg = self.named_registry()
        return {n: reg[n] for n in names}

    def frozen_parameters(self) -> dict[str, nn.Parameter]:
        trainable = set(self._trainable_names())
        return {n: p for n, p in self.named_registry().items() if n not in trainable}

    def class_affine(self, class_index: int) -> dict:
        """Conditional batch-norm (gamma, beta) rows of one class, per layer."""
        return {
            k: (bn.gamma[class_index].detach().clone(), bn.beta[class_index].detach().clone())
            for k, bn in self.base.norm_layers().items()
        }


def wrap_generator(
    model: GeneratorModel,
    mode="bsa",
    base_class: int = 0,
    adapt_projection: bool = True,
    first_linear_lr: float = 0.0,
    copy_base: bool = True,
) -> AdaptedGenerator:
    """Wrap ``model`` for adaptation under ``mode``.

    The base model is deep-copied by default so modes that update kernels never
    touch the caller's source generator.
    """
    mode = AdaptationMode.parse(mode)
    base = copy.deepcopy(model) if copy_base else model
    return AdaptedGenerator(base, mode, base_class, adapt_projection, first_linear_lr)


def trainable_parameters(adapted: AdaptedGenerator) -> dict[str, tuple]:
    """Name -> shape of every parameter the mode optimizes (latents excluded)."""
    return {n: tuple(p.shape) for n, p in adapted.trainable_parameters().items()}


def export_stat_params(adapted: AdaptedGenerator) -> StatParamSet:
    return StatParamSet(
        dict(adapted.layers),
        {k: g.detach().numpy().copy() for k, (g, _) in adapted.stat_tensors().items()},
        {k: b.detach().numpy().copy() for k, (_, b) in adapted.stat_tensors().items()},
    )


def import_stat_params(adapted: AdaptedGenerator, snapshot: StatParamSet):
    """Overwrite the adaptation scales/shifts; kernels are left alone."""
    snapshot.check_registry(adapted.layers)
    with torch.no_grad():
        for k, (g, b) in adapted.stat_tensors().items():
            g.copy_(torch.from_numpy(snapshot.gamma[k]))
            b.copy_(torch.from_numpy(snapshot.beta[k]))


def parameter_digest(params: dict) -> str:
    """SHA-256 over names and raw bytes, for bit-exact freeze checks."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(params):
        t = params[name]
        arr = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def frozen_state(adapted: AdaptedGenerator) -> dict:
    """Frozen parameters plus every running statistic of the base model."""
    state = dict(adapted.frozen_parameters())
    for n, b in adapted.base.named_buffers():
        if n.endswith(("running_mean", "running_var")):
            state[f"buffer.{n}"] = b
    return state
