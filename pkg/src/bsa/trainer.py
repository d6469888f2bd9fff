"""Joint optimization of generator parameters and a per-image latent bank."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .adaptation import AdaptationMode, AdaptedGenerator, wrap_generator
from .datasets import ImageSet, subsample
from .errors import ArgumentError, ConfigurationError, DataError, NumericError, TrainingError
from .objective import LossConfig, total_loss
from .sampling import LatentBank

logger = logging.getLogger(__name__)

# Adam learning rates by dataset size for the stats/latent groups.
LR_TABLE = ((25, 0.1), (50, 0.06), (100, 0.03))
LR_LARGE = 0.02


@dataclass
class TrainConfig:
    """Optimization settings.

    ``lr_stats`` drives the adaptation scales/shifts (and, during source
    pretraining, every generator parameter). ``lr_kernels`` drives kernels in
    the ablation modes that update them. ``log_every`` controls how often a
    record is written to the JSON-lines file; the in-memory log keeps every
    iteration.
    """

    iterations: int = 3000
    batch_size: int = 25
    lr_stats: float = 0.1
    lr_latents: float = 0.1
    lr_first_linear: float = 0.0
    lr_kernels: float = 1e-3
    dataset_size_hint: int = 25
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0
    schedule: str = "constant"

    def validate(self):
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        for name in ("lr_stats", "lr_latents", "lr_first_linear", "lr_kernels"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigurationError("schedule must be 'constant' or 'cosine'")

    def to_dict(self):
        return asdict(self)


def learning_rate_for_size(dataset_size: int) -> float:
    for limit, lr in LR_TABLE:
        if dataset_size <= limit:
            return lr
    return LR_LARGE


def default_config(dataset_size: int, mode="bsa") -> TrainConfig:
    if dataset_size < 1:
        raise ArgumentError("dataset_size must be >= 1")
    AdaptationMode.parse(mode)
    lr = learning_rate_for_size(dataset_size)
    return TrainConfig(
        iterations=3000,
        batch_size=min(25, dataset_size),
        lr_stats=lr,
        lr_latents=lr,
        dataset_size_hint=dataset_size,
    )


class EpochSampler:
    """Batches drawn from a fresh random permutation per epoch; last partial batch kept."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self.order = np.empty(0, np.int64)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos >= len(self.order):
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        batch = self.order[self.pos : self.pos + self.batch_size]
        self.pos += len(batch)
        return batch


def _lr_factor(config: TrainConfig, it: int) -> float:
    if config.schedule == "cosine" and config.iterations > 0:
        return 0.5 * (1 + math.cos(math.pi * it / config.iterations))
    return 1.0


class _Loop:
    """State of one latent-optimization run, resumable at any iteration."""

    def __init__(self, generator, named_groups, bank, targets, labels, extractor, loss_config, config):
        self.generator = generator
        self.named_groups = named_groups  # list of (lr, {name: param})
        self.bank = bank
        self.targets = targets
        self.labels = labels
        self.extractor = extractor
        self.loss_config = loss_config
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.sampler = EpochSampler(len(bank), min(config.batch_size, len(bank)), self.rng)
        groups = [{"params": list(p.values()), "lr": lr} for lr, p in named_groups if p]
        self.optimizer = torch.optim.Adam(groups) if groups else None
        self.base_lrs = [g["lr"] for g in groups]
        self.iteration = 0
        with torch.no_grad():
            self.target_taps = extractor.taps(targets, _used_taps(extractor, loss_config))

    def named_params(self):
        out = {}
        for _, group in self.named_groups:
            out.update(group)
        return out

    def step(self) -> dict:
        cfg = self.config
        factor = _lr_factor(cfg, self.iteration)
        if self.optimizer is not None:
            for g, lr in zip(self.optimizer.param_groups, self.base_lrs):
                g["lr"] = lr * factor
        idx = self.sampler.next()
        try:
            loss, report = total_loss(
                idx,
                self.generator,
                self.bank,
                self.targets,
                self.extractor,
                self.loss_config,
                self.rng,
                labels=self.labels,
                target_taps=self.target_taps,
            )
        except NumericError as exc:
            raise TrainingError(f"iteration {self.iteration}: {exc}", self.iteration) from exc
        if self.optimizer is not None:
            self.optimizer.zero_grad(set_to_none=True)
        self.bank.zero_grad()
        loss.backward()
        if self.optimizer is not None:
            self.optimizer.step()
        self.bank.step(idx, cfg.lr_latents * factor)
        record = {"iteration": self.iteration, **report.to_dict()}
        self.iteration += 1
        return record

    # resumable state ---------------------------------------------------
    def state(self) -> tuple[dict, dict]:
        arrays = {f"param.{n}": p.detach().numpy().copy() for n, p in self.named_params().items()}
        for k, v in self.bank.state_arrays().items():
            arrays[f"bank.{k}"] = v
        if self.optimizer is not None:
            pid = {id(p): n for n, p in self.named_params().items()}
            for p, st in self.optimizer.state.items():
                for key, val in st.items():
                    arrays[f"adam.{pid[id(p)]}.{key}"] = val.detach().numpy().copy()
        arrays["sampler.order"] = self.sampler.order
        meta = {
            "iteration": self.iteration,
            "sampler_pos": self.sampler.pos,
            "rng_state": self.rng.bit_generator.state,
        }
        return meta, arrays

    def restore(self, meta: dict, arrays: dict):
        with torch.no_grad():
            for n, p in self.named_params().items():
                p.copy_(torch.from_numpy(arrays[f"param.{n}"]))
        bank = LatentBank.from_arrays({k[5:]: v for k, v in arrays.items() if k.startswith("bank.")})
        with torch.no_grad():
            self.bank.z.copy_(bank.z)
        self.bank.m, self.bank.v, self.bank.t = bank.m, bank.v, bank.t
        if self.optimizer is not None:
            for n, p in self.named_params().items():
                prefix = f"adam.{n}."
                st = {k[len(prefix) :]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}
                if st:
                    self.optimizer.state[p] = st
        self.sampler.order = arrays["sampler.order"].astype(np.int64)
        self.sampler.pos = int(meta["sampler_pos"])
        self.rng.bit_generator.state = meta["rng_state"]
        self.iteration = int(meta["iteration"])


def _check_extractor(spec, extractor):
    ext = (getattr(extractor, "image_channels", None), getattr(extractor, "image_size", None))
    if ext != (spec.image_channels, spec.image_size):
        raise ConfigurationError(
            f"extractor expects {ext[0]}x{ext[1]}px images, generator makes {spec.image_channels}x{spec.image_size}px"
        )


def _used_taps(extractor, loss_config: LossConfig):
    weights = loss_config.tap_weights(extractor.tap_names)
    return [t for t, w in weights.items() if w > 0 or loss_config.adaptive_lambda_c]


def _write_log(fh, record):
    fh.write(json.dumps(record, sort_keys=True) + "\n")


class AdaptResult(NamedTuple):
    adapted: AdaptedGenerator
    bank: LatentBank
    log: list


def _param_groups(adapted: AdaptedGenerator, config: TrainConfig):
    trainable = adapted.trainable_parameters()
    stats = {n: p for n, p in trainable.items() if n.startswith("adapt.")}
    rest = {n: p for n, p in trainable.items() if not n.startswith("adapt.")}
    if adapted.mode is AdaptationMode.BSA:
        return [(config.lr_stats, stats), (config.lr_first_linear, rest)]
    return [(config.lr_kernels, rest)]


def save_train_state(loop: _Loop, adapted: AdaptedGenerator, path, extra: Optional[dict] = None):
    meta, arrays = loop.state()
    model_meta, model_arrays = ckpt.model_meta(adapted)
    arrays.update({f"model.{k}": v for k, v in model_arrays.items()})
    meta = {
        **meta,
        "kind": "train_state",
        "model": model_meta,
        "train_config": loop.config.to_dict(),
        "loss_config": loop.loss_config.to_dict(),
        **(extra or {}),
    }
    ckpt.save_arrays(path, meta, arrays)


def adapt(
    model,
    extractor,
    target: ImageSet,
    mode="bsa",
    loss_config: Optional[LossConfig] = None,
    train_config: Optional[TrainConfig] = None,
    base_class: int = 0,
    adapt_projection: bool = True,
    log_path=None,
    checkpoint_dir=None,
    resume_from=None,
    stop_after: Optional[int] = None,
) -> AdaptResult:
    """Fit a wrapped copy of ``model`` and a zero-initialized latent bank to ``target``.

    Args:
        model: pretrained ``GeneratorModel`` (left untouched).
        extractor: frozen ``FeatureExtractor`` for the perceptual term.
        target: target images.
        mode: which parameters train besides the latents.
        loss_config, train_config: defaults follow the dataset size.
        base_class: conditional batch-norm row the adaptation builds on.
        log_path: optional JSON-lines file receiving every ``log_every``-th record.
        checkpoint_dir: where periodic and divergence snapshots go.
        resume_from: a train-state file written by a previous call.
        stop_after: stop once this many total iterations are done (for
            interrupting a run; the final snapshot is always written when a
            ``checkpoint_dir`` is given).

    Returns:
        ``(adapted, bank, log)``; ``log`` holds one record per iteration run by
        this call.
    """
    if target is None or len(target) == 0:
        raise DataError("target set is empty")
    mode = AdaptationMode.parse(mode)
    train_config = train_config or default_config(len(target), mode)
    train_config.validate()
    loss_config = loss_config or LossConfig()
    loss_config.validate(min(train_config.batch_size, len(target)))
    if tuple(target.shape) != (model.spec.image_channels, model.spec.image_size, model.spec.image_size):
        raise ConfigurationError(f"target images {target.shape} do not match generator spec {model.spec}")
    _check_extractor(model.spec, extractor)
    adapted = wrap_generator(model, mode, base_class, adapt_projection, train_config.lr_first_linear)
    bank = LatentBank(len(target), model.spec.latent_dim)
    targets = torch.from_numpy(target.to_signed())
    loop = _Loop(adapted, _param_groups(adapted, train_config), bank, targets, None, extractor, loss_config, train_config)
    if resume_from is not None:
        meta, arrays = ckpt.load_arrays(resume_from)
        if meta.get("kind") != "train_state":
            raise ConfigurationError(f"{resume_from} is not a training state")
        loop.restore(meta, arrays)
    end = train_config.iterations if stop_after is None else min(stop_after, train_config.iterations)
    log = []
    fh = open(log_path, "a" if resume_from else "w") if log_path else None
    try:
        while loop.iteration < end:
            try:
                record = loop.step()
            except TrainingError:
                if checkpoint_dir is not None:
                    save_train_state(loop, adapted, Path(checkpoint_dir) / f"diverged_{loop.iteration:06d}.npz")
                raise
            log.append(record)
            if fh and train_config.log_every and record["iteration"] % train_config.log_every == 0:
                _write_log(fh, record)
            if (
                checkpoint_dir is not None
                and train_config.checkpoint_every
                and loop.iteration % train_config.checkpoint_every == 0
            ):
                save_train_state(loop, adapted, Path(checkpoint_dir) / f"state_{loop.iteration:06d}.npz")
    finally:
        if fh:
            fh.close()
    if checkpoint_dir is not None and stop_after is not None:
        save_train_state(loop, adapted, Path(checkpoint_dir) / f"state_{loop.iteration:06d}.npz")
    adapted.zero_grad(set_to_none=True)
    bank.zero_grad()
    return AdaptResult(adapted, bank, log)


def fit_source(model, extractor, source: ImageSet, config: TrainConfig, loss_config=None, log=None):
    """Pretrain every generator parameter on labeled ``source`` (batch-stat mode)."""
    loss_config = loss_config or LossConfig(lambda_gb=0.0)
    config.validate()
    bank = LatentBank(len(source), model.spec.latent_dim)
    targets = torch.from_numpy(source.to_signed())
    labels = torch.from_numpy(source.labels)
    for p in model.parameters():
        p.requires_grad_(True)
    named = dict(model.named_parameters())
    loop = _Loop(model, [(config.lr_stats, named)], bank, targets, labels, extractor, loss_config, config)
    model.train()
    for _ in range(config.iterations):
        record = loop.step()
        if log is not None:
            log.append(record)
        if config.log_every and record["iteration"] % config.log_every == 0:
            logger.info("pretrain it=%d total=%.4f l1=%.4f", record["iteration"], record["total"], record["pixel_l1"])
    from .nets import calibrate_running_stats

    calibrate_running_stats(model, bank.z.detach(), labels)
    model.zero_grad(set_to_none=True)
    for name, buf in model.named_buffers():
        if buf.is_floating_point() and not torch.all(torch.isfinite(buf)):
            raise TrainingError(f"non-finite running statistic {name}", config.iterations)
    model.eval()
    model.source_latents = bank.latents()
    return model


@torch.no_grad()
def reconstruction_l1(generator, latents, target: ImageSet, y=None) -> float:
    """Mean over images of the per-image mean |x - G(z)| in the [-1, 1] range."""
    z = torch.as_tensor(np.asarray(latents, dtype=np.float32))
    gen = generator(z) if y is None else generator(z, y)
    x = torch.from_numpy(target.to_signed())
    return float((x - gen).abs().flatten(1).mean(1).mean())


def smoothed(values: Sequence[float], window: int = 100) -> float:
    """Mean of the last ``window`` values."""
    vals = list(values)[-window:]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class SweepRow:
    size: int
    mode: str
    fid: float
    kmmd: float
    iterations: int
    seed: int
    train_l1: float
    initial_l1: float


SWEEP_HEADER = ("size", "mode", "fid", "kmmd", "iterations", "seed")


def _sweep_task(
    size, mode, pool, model, extractor, loss_config, train_config, seed, real_set, sampler, n_gen, bandwidth, base_class, iterations
):
    from .metrics import evaluate

    target = subsample(pool, size, seed)
    cfg = replace(train_config or default_config(size, mode), dataset_size_hint=size, seed=seed)
    if iterations is not None:
        cfg = replace(cfg, iterations=iterations)
    cfg = replace(cfg, batch_size=min(cfg.batch_size, size))
    adapted, bank, _ = adapt(model, extractor, target, mode, loss_config, cfg, base_class)
    initial = reconstruction_l1(wrap_generator(model, "bsa", base_class), np.zeros_like(bank.latents()), target)
    final = reconstruction_l1(adapted, bank.latents(), target)
    report = evaluate(adapted, real_set if real_set is not None else pool, sampler, n_gen, extractor, bandwidth=bandwidth)
    return SweepRow(size, AdaptationMode.parse(mode).value, report.fid, report.kmmd, cfg.iterations, seed, final, initial)


def run_size_sweep(
    pool: ImageSet,
    sizes: Sequence[int],
    model,
    extractor,
    modes=("bsa", "update_all"),
    loss_config: Optional[LossConfig] = None,
    train_config: Optional[TrainConfig] = None,
    seed: int = 0,
    real_set: Optional[ImageSet] = None,
    sampler=None,
    n_gen: int = 2000,
    bandwidth: Optional[float] = None,
    csv_path=None,
    jobs: int = 1,
    base_class: int = 0,
    iterations: Optional[int] = None,
) -> list[SweepRow]:
    """Adapt and evaluate once per (size, mode); subsets are fixed by ``seed``.

    ``train_config`` (if given) replaces the per-size defaults except for the
    seed and hint; ``iterations`` overrides only the iteration count. Rows
    are ordered size-major. With ``jobs > 1`` the runs are
    spread across processes; each run's randomness depends only on ``seed``.
    """
    from .sampling import SamplerConfig

    for s in sizes:
        if s > len(pool) or s < 1:
            raise ArgumentError(f"sweep size {s} exceeds pool of {len(pool)}")
    sampler = sampler or SamplerConfig(0.3, seed)
    tasks = [(s, m) for s in sizes for m in modes]
    args = (pool, model, extractor, loss_config, train_config, seed, real_set, sampler, n_gen, bandwidth, base_class, iterations)
    if jobs > 1:
        from joblib import Parallel, delayed

        rows = Parallel(n_jobs=jobs)(delayed(_sweep_task)(s, m, *args) for s, m in tasks)
    else:
        rows = [_sweep_task(s, m, *args) for s, m in tasks]
    if csv_path is not None:
        write_sweep_csv(rows, csv_path)
    return rows


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([r.size, r.mode, repr(r.fid), repr(r.kmmd), r.iterations, r.seed])
