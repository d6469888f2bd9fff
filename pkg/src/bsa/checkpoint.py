"""Checkpoint container: a zip of named arrays plus a JSON metadata record.

Layout (``numpy.savez`` archive, no pickled objects):

``__meta__``
    uint8 bytes of a JSON object with at least ``format`` (``"bsa-checkpoint"``),
    ``version`` and ``kind``, one of ``generator``, ``extractor``, ``adapted``,
    ``stats``, ``latents`` or ``train_state``.
``<name>``
    one array per parameter or buffer, named as in the module's state dict.
    Adaptation parameters are stored as ``adapt.<layer>.gamma`` and
    ``adapt.<layer>.beta``; adapted checkpoints prefix base-model entries
    with ``base.``.
"""

from __future__ import annotations

import json
import os
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, ConfigurationError

FORMAT = "bsa-checkpoint"
VERSION = 1
META_KEY = "__meta__"


def save_arrays(path, meta: dict, arrays: dict):
    """Atomically write ``arrays`` and ``meta`` to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": FORMAT, "version": VERSION, **meta}
    payload = {k: np.array(v, order="C") for k, v in arrays.items()}
    if META_KEY in payload:
        raise CheckpointError(f"array name {META_KEY!r} is reserved")
    payload[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if META_KEY not in arrays:
        raise CheckpointError(f"{path} has no metadata record")
    try:
        meta = json.loads(arrays.pop(META_KEY).tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata in {path}") from exc
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"{path} has version {meta.get('version')}, expected {VERSION}")
    return meta, arrays


def _state_arrays(module, prefix=""):
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def _load_state(module, arrays, prefix=""):
    expected = module.state_dict()
    state = {}
    for k, v in expected.items():
        key = prefix + k
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing array {key}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(v.shape):
            raise ConfigurationError(f"array {key} has shape {arr.shape}, model expects {tuple(v.shape)}")
        state[k] = torch.from_numpy(arr.copy())
    module.load_state_dict(state)


def stats_arrays(snapshot) -> dict:
    arrays = {}
    for k in snapshot.layers:
        arrays[f"adapt.{k}.gamma"] = snapshot.gamma[k]
        arrays[f"adapt.{k}.beta"] = snapshot.beta[k]
    return arrays


def stats_from_arrays(layers: dict, arrays: dict):
    from .adaptation import StatParamSet

    try:
        return StatParamSet(
            dict(layers),
            {k: np.asarray(arrays[f"adapt.{k}.gamma"], np.float32) for k in layers},
            {k: np.asarray(arrays[f"adapt.{k}.beta"], np.float32) for k in layers},
        )
    except KeyError as exc:
        raise CheckpointError(f"stats checkpoint is missing {exc}") from exc


def model_meta(model) -> tuple[dict, dict]:
    """Metadata and arrays describing a generator, extractor, adapted generator or stats."""
    from .adaptation import AdaptedGenerator, StatParamSet
    from .nets import FeatureExtractor, GeneratorModel

    if isinstance(model, GeneratorModel):
        meta = {
            "kind": "generator",
            "spec": model.spec.to_dict(),
            "num_classes": model.spec.num_classes,
            "diversity": int(model.diversity),
        }
        return meta, _state_arrays(model)
    if isinstance(model, AdaptedGenerator):
        meta = {
            "kind": "adapted",
            "spec": model.spec.to_dict(),
            "num_classes": model.spec.num_classes,
            "diversity": int(model.base.diversity),
            "mode": model.mode.value,
            "base_class": model.base_class,
            "adapt_projection": model.adapt_projection,
            "first_linear_lr": model.first_linear_lr,
            "layers": model.layers,
        }
        arrays = _state_arrays(model.base, "base.")
        for k, (g, b) in model.stat_tensors().items():
            arrays[f"adapt.{k}.gamma"] = g.detach().numpy().copy()
            arrays[f"adapt.{k}.beta"] = b.detach().numpy().copy()
        return meta, arrays
    if isinstance(model, FeatureExtractor):
        meta = {
            "kind": "extractor",
            "num_classes": model.num_classes,
            "image_channels": model.image_channels,
            "image_size": model.image_size,
            "width": model.width,
            "tap_names": list(model.tap_names),
            "tap_shapes": {k: list(v) for k, v in model.tap_shapes.items()},
            "heldout_accuracy": model.heldout_accuracy,
        }
        return meta, _state_arrays(model)
    if isinstance(model, StatParamSet):
        meta = {"kind": "stats", "stats_only": True, "layers": dict(model.layers)}
        return meta, stats_arrays(model)
    raise TypeError(f"cannot checkpoint object of type {type(model).__name__}")


def save_checkpoint(model, path, **extra_meta):
    meta, arrays = model_meta(model)
    meta.update(extra_meta)
    save_arrays(path, meta, arrays)


def load_checkpoint(path, expected_spec=None):
    """Rebuild the object stored at ``path``.

    ``expected_spec`` (a ``GeneratorSpec``) makes generator-bearing checkpoints
    of a different architecture raise ``ConfigurationError``.
    """
    from .adaptation import AdaptedGenerator
    from .nets import FeatureExtractor, GeneratorModel, GeneratorSpec

    meta, arrays = load_arrays(path)
    kind = meta.get("kind")
    if kind in ("generator", "adapted"):
        spec = GeneratorSpec(**meta["spec"])
        if expected_spec is not None and spec != expected_spec:
            raise ConfigurationError(f"checkpoint spec {spec} does not match expected {expected_spec}")
        base = GeneratorModel(spec)
        base.diversity = meta.get("diversity", spec.num_classes)
        if kind == "generator":
            _load_state(base, arrays)
            base.eval()
            return base
        _load_state(base, arrays, "base.")
        adapted = AdaptedGenerator(
            base,
            meta["mode"],
            meta["base_class"],
            meta["adapt_projection"],
            meta.get("first_linear_lr", 0.0),
        )
        from .adaptation import import_stat_params

        import_stat_params(adapted, stats_from_arrays(meta["layers"], arrays))
        return adapted
    if kind == "extractor":
        ext = FeatureExtractor(meta["num_classes"], meta["image_channels"], meta["image_size"], meta["width"])
        _load_state(ext, arrays)
        ext.heldout_accuracy = meta.get("heldout_accuracy")
        ext.eval()
        return ext
    if kind == "stats":
        return stats_from_arrays(meta["layers"], arrays)
    if kind == "latents":
        from .sampling import LatentBank

        return LatentBank.from_arrays(arrays)
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


def file_digest(path) -> str:
    """sha256 of a checkpoint file's bytes, used to identify an extractor in reports."""
    import hashlib

    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_meta(path) -> dict:
    return load_arrays(path)[0]


def save_latents(bank, path, **extra_meta):
    save_arrays(path, {"kind": "latents", **extra_meta}, bank.state_arrays())
