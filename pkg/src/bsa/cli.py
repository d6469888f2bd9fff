"""Command-line entry point: ``bsa <command> [flags]``.

Every command writes into ``<output-dir>/<command>-<timestamp>-<seed>/`` and
starts by saving the fully resolved configuration there as ``config.txt``.
That file uses the same flat ``key = value`` format accepted by ``--config``,
so a run can be repeated with ``--config <run>/config.txt``. Flags given on
the command line override values from the file.

Exit codes: 0 on success, 1 on runtime or data errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import checkpoint as ckpt
from .errors import BSAError

logger = logging.getLogger("bsa")

BOOL_TRUE = {"1", "true", "yes", "on"}
BOOL_FALSE = {"0", "false", "no", "off"}


class UsageError(Exception):
    pass


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` (or ``key value``) lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, value = line.split("=", 1)
        else:
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = parts
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def write_config_file(path, values: dict):
    lines = [f"{k} = {'' if v is None else v}" for k, v in sorted(values.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def _csv_ints(text: str) -> list[int]:
    return [int(t) for t in str(text).split(",") if t.strip()]


def _csv_strs(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).lower()
    if t in BOOL_TRUE:
        return True
    if t in BOOL_FALSE:
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


# -- argument groups shared by several commands ------------------------------


def _common(p):
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--output-dir", default="runs", help="parent directory for run folders (default: runs)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default: 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def _loss_flags(p):
    g = p.add_argument_group("loss")
    g.add_argument("--lambda-c", type=float, default=0.001, help="perceptual weight per tap")
    g.add_argument("--adaptive-lambda", type=_bool, default=False, help="reweight every tap to contribute 0.1 at each step")
    g.add_argument("--lambda-z", type=float, default=0.2, help="latent Chamfer weight")
    g.add_argument("--lambda-gb", type=float, default=0.01, help="scale/shift penalty weight")
    g.add_argument("--anchors", type=int, default=None, help="anchor count (default: max(4N, 256))")
    g.add_argument("--noise-sigma", type=float, default=0.03)
    g.add_argument("--perceptual-norm", choices=("l1", "l2"), default="l1")


def _train_flags(p, iterations=3000):
    g = p.add_argument_group("training")
    g.add_argument("--iterations", type=int, default=iterations)
    g.add_argument("--batch-size", type=int, default=None, help="default: min(25, N)")
    g.add_argument("--lr", type=float, default=None, help="stats learning rate (default: by dataset size)")
    g.add_argument("--lr-latents", type=float, default=None, help="default: same as --lr")
    g.add_argument("--lr-first-linear", type=float, default=0.0)
    g.add_argument("--lr-kernels", type=float, default=1e-3, help="kernel rate in the ablation modes")
    g.add_argument("--schedule", choices=("constant", "cosine"), default="constant")
    g.add_argument("--log-every", type=int, default=100)


def _corpus_flags(p, classes=10, style="shapes"):
    g = p.add_argument_group("corpus")
    g.add_argument("--classes", type=int, default=classes)
    g.add_argument("--per-class", type=int, default=100)
    g.add_argument("--image-size", type=int, default=32, choices=(16, 32, 64))
    g.add_argument("--style", choices=("shapes", "shapes-alt-style"), default=style)
    g.add_argument("--corpus-seed", type=int, default=None, help="default: --seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsa", description="Few-shot generator adaptation via per-channel scale/shift")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("corpus", help="render a toy shape corpus to an image folder")
    _common(p)
    _corpus_flags(p)

    p = sub.add_parser("pretrain", help="train a source generator (and extractor) on a toy corpus")
    _common(p)
    _corpus_flags(p)
    g = p.add_argument_group("generator")
    g.add_argument("--latent-dim", type=int, default=64)
    g.add_argument("--base-channels", type=int, default=16)
    g.add_argument("--num-classes", type=int, default=None, help="conditional rows (default: --classes)")
    g.add_argument("--random-init", type=_bool, default=False, help="skip training; calibrate statistics only")
    g.add_argument("--extractor", help="reuse this extractor checkpoint instead of training one")
    g.add_argument("--extractor-iterations", type=int, default=600)
    g.add_argument("--extractor-lr", type=float, default=2e-3)
    g = p.add_argument_group("training")
    g.add_argument("--iterations", type=int, default=1500)
    g.add_argument("--batch-size", type=int, default=50)
    g.add_argument("--lr", type=float, default=2e-3)
    g.add_argument("--lr-latents", type=float, default=0.05)
    g.add_argument("--log-every", type=int, default=100)
    g.add_argument("--lambda-c", type=float, default=0.001)
    g.add_argument("--lambda-z", type=float, default=0.2)
    g.add_argument("--noise-sigma", type=float, default=0.03)

    p = sub.add_parser("adapt", help="adapt a pretrained generator to a folder of target images")
    _common(p)
    p.add_argument("--source", help="generator checkpoint (required)")
    p.add_argument("--extractor", help="extractor checkpoint (required)")
    p.add_argument("--target", help="folder of target images (required)")
    p.add_argument("--mode", default="bsa", choices=("bsa", "update_all", "update_first", "update_last"))
    p.add_argument("--base-class", type=int, default=0)
    p.add_argument("--adapt-projection", type=_bool, default=True)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", help="train-state file from an interrupted run")
    _train_flags(p)
    _loss_flags(p)

    p = sub.add_parser("sample", help="grid of truncated-latent samples")
    _common(p)
    p.add_argument("--checkpoint", help="generator or adapted checkpoint (required)")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--class-index", type=int, default=0, help="row used for plain generators")

    p = sub.add_parser("interpolate", help="frames along a straight line between two latents")
    _common(p)
    p.add_argument("--checkpoint", help="generator or adapted checkpoint (required)")
    p.add_argument("--latents", help="latent-bank file; default draws two truncated latents")
    p.add_argument("--index-a", type=int, default=0)
    p.add_argument("--index-b", type=int, default=1)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--class-index", type=int, default=0)

    p = sub.add_parser("morph", help="slide from a source class to an adapted domain")
    _common(p)
    p.add_argument("--adapted", help="adapted checkpoint (required)")
    p.add_argument("--source-class", type=int, default=0)
    p.add_argument("--source-stats", help="stats-only file for the start (default: identity)")
    p.add_argument("--latents", help="latent-bank file; default draws two truncated latents")
    p.add_argument("--index-a", type=int, default=0)
    p.add_argument("--index-b", type=int, default=1)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--tau", type=float, default=0.3)

    p = sub.add_parser("evaluate", help="FID and KMMD of samples against a real image folder")
    _common(p)
    p.add_argument("--checkpoint", help="generator or adapted checkpoint (required)")
    p.add_argument("--extractor", help="extractor checkpoint (required)")
    p.add_argument("--real", help="folder of real images (required)")
    p.add_argument("--n-gen", type=int, default=2000)
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--bandwidth", type=float, default=None, help="kernel bandwidth (default: pooled median)")
    p.add_argument("--class-index", type=int, default=None)

    p = sub.add_parser("sweep", help="adapt at several dataset sizes and modes; CSV and plot")
    _common(p)
    p.add_argument("--source", help="generator checkpoint (required)")
    p.add_argument("--extractor", help="extractor checkpoint (required)")
    p.add_argument("--pool", help="folder the subsets are drawn from (required)")
    p.add_argument("--real", help="evaluation folder (default: the pool)")
    p.add_argument("--sizes", type=_csv_ints, default=_csv_ints("10,25,50"))
    p.add_argument("--modes", type=_csv_strs, default=_csv_strs("bsa,update_all"))
    p.add_argument("--iterations", type=int, default=3000)
    p.add_argument("--n-gen", type=int, default=2000)
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--bandwidth", type=float, default=None, help="kernel bandwidth (default: median over the real set)")
    p.add_argument("--base-class", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("analyze", help="activation-rate correlations and class-statistics geometry")
    _common(p)
    p.add_argument("--checkpoint", help="generator or adapted checkpoint (required)")
    p.add_argument("--probe", type=int, default=256, help="probe batch size (>= 64)")
    p.add_argument("--class-index", type=int, default=0)
    p.add_argument("--categories", type=_csv_ints, default=None, help="category per class (default: toy shapes)")
    return parser


REQUIRED = {
    "adapt": ("source", "extractor", "target"),
    "sample": ("checkpoint",),
    "interpolate": ("checkpoint",),
    "morph": ("adapted",),
    "evaluate": ("checkpoint", "extractor", "real"),
    "sweep": ("source", "extractor", "pool"),
    "analyze": ("checkpoint",),
}


def parse_args(argv, parser=None):
    """Parse ``argv`` with config-file values acting as defaults."""
    parser = parser or build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        parser.exit(2, "bsa: error: a command is required\n")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    if args.config:
        try:
            values = read_config_file(args.config)
        except (OSError, UsageError) as exc:
            sub.error(str(exc))
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known - {"command", "config"})
        if unknown:
            sub.error(f"unknown config keys: {', '.join(unknown)}")
        values.pop("command", None)
        values.pop("config", None)
        sub.set_defaults(**{k: (None if v == "" else v) for k, v in values.items()})
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED.get(args.command, ()) if getattr(args, k, None) in (None, "")]
    if missing:
        sub.error("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return args


def resolved_config(args) -> dict:
    out = {}
    for k, v in vars(args).items():
        if k in ("config", "func"):
            continue
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        out[k] = v
    return out


def make_run_dir(args) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(args.output_dir) / f"{args.command}-{stamp}-{args.seed}"
    run, n = base, 1
    while run.exists():
        run = base.with_name(f"{base.name}.{n}")
        n += 1
    run.mkdir(parents=True)
    write_config_file(run / "config.txt", resolved_config(args))
    return run


# -- helpers -----------------------------------------------------------------


def _load(path, expected_kind=None):
    obj = ckpt.load_checkpoint(path)
    if expected_kind is not None:
        kind = ckpt.read_meta(path)["kind"]
        allowed = (expected_kind,) if isinstance(expected_kind, str) else expected_kind
        if kind not in allowed:
            raise BSAError(f"{path} holds a {kind!r} checkpoint, expected {' or '.join(allowed)}")
    return obj


def _generator_call(model, class_index):
    """Class argument for ``sampling.generate``: adapted generators carry their own."""
    from .adaptation import AdaptedGenerator

    return None if isinstance(model, AdaptedGenerator) else (class_index or 0)


def _two_latents(args, dim):
    from .sampling import SamplerConfig, sample_truncated

    if args.latents:
        z = _load(args.latents, "latents").latents()
        for i in (args.index_a, args.index_b):
            if not 0 <= i < len(z):
                raise BSAError(f"latent index {i} out of range for {len(z)} stored latents")
        return z[args.index_a], z[args.index_b]
    z = sample_truncated(SamplerConfig(args.tau, args.seed), 2, dim)
    return z[0], z[1]


def _loss_config(args):
    from .objective import LossConfig

    return LossConfig(
        lambda_c=args.lambda_c,
        adaptive_lambda_c=args.adaptive_lambda,
        lambda_z=args.lambda_z,
        lambda_gb=args.lambda_gb,
        anchor_count=args.anchors,
        noise_sigma=args.noise_sigma,
        perceptual_norm=args.perceptual_norm,
    )


def _grid_cols(n: int) -> int:
    return max(1, math.ceil(math.sqrt(n)))


# -- commands ----------------------------------------------------------------


def cmd_corpus(args, run: Path):
    from .datasets import ToyCorpusSpec, generate_toy_corpus, save_image_folder

    seed = args.seed if args.corpus_seed is None else args.corpus_seed
    images = generate_toy_corpus(ToyCorpusSpec(args.classes, args.per_class, args.image_size, seed, args.style))
    save_image_folder(images, run / "images")
    logger.info("wrote %d images to %s", len(images), run / "images")


def cmd_pretrain(args, run: Path):
    from .datasets import ToyCorpusSpec, generate_toy_corpus
    from .nets import (
        GeneratorSpec,
        build_extractor,
        build_generator,
        calibrate_running_stats,
        pretrain_extractor,
        pretrain_source,
    )
    from .objective import LossConfig
    from .sampling import SamplerConfig, sample_truncated
    from .trainer import TrainConfig

    seed = args.seed if args.corpus_seed is None else args.corpus_seed
    source = generate_toy_corpus(ToyCorpusSpec(args.classes, args.per_class, args.image_size, seed, args.style))
    num_blocks = int(round(math.log2(args.image_size // 4)))
    spec = GeneratorSpec(
        latent_dim=args.latent_dim,
        num_classes=args.num_classes or args.classes,
        base_channels=args.base_channels,
        num_blocks=num_blocks,
        image_size=args.image_size,
    )
    if args.extractor:
        extractor = _load(args.extractor, "extractor")
    else:
        extractor = build_extractor(args.classes, image_size=args.image_size, init_seed=args.seed)
        pretrain_extractor(
            extractor,
            source,
            TrainConfig(iterations=args.extractor_iterations, batch_size=64, lr_stats=args.extractor_lr, seed=args.seed, log_every=0),
        )
    for p in extractor.parameters():
        p.requires_grad_(False)
    model = build_generator(spec, args.seed)
    log = []
    if args.random_init:
        z = sample_truncated(SamplerConfig(1.0, args.seed), max(len(source), 100), spec.latent_dim)
        y = torch.from_numpy(np.resize(source.labels, len(z)))
        calibrate_running_stats(model, torch.from_numpy(z), y)
        model.diversity = 0
    else:
        cfg = TrainConfig(
            iterations=args.iterations,
            batch_size=args.batch_size,
            lr_stats=args.lr,
            lr_latents=args.lr_latents,
            seed=args.seed,
            log_every=args.log_every,
        )
        loss = LossConfig(lambda_c=args.lambda_c, lambda_z=args.lambda_z, lambda_gb=0.0, noise_sigma=args.noise_sigma)
        pretrain_source(model, extractor, source, cfg, loss, log)
    ckpt.save_checkpoint(model, run / "generator.npz")
    ckpt.save_checkpoint(extractor, run / "extractor.npz")
    with open(run / "train_log.jsonl", "w") as fh:
        for rec in log:
            if args.log_every and rec["iteration"] % args.log_every == 0:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest = {
        "generator": "generator.npz",
        "extractor": "extractor.npz",
        "diversity": int(model.diversity),
        "classes": args.classes,
        "images": len(source),
        "style": args.style,
        "extractor_heldout_accuracy": extractor.heldout_accuracy,
        "random_init": bool(args.random_init),
    }
    (run / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_adapt(args, run: Path):
    from .adaptation import export_stat_params
    from .datasets import load_image_folder
    from .imaging import save_grid
    from .sampling import generate
    from .trainer import TrainConfig, adapt, default_config

    model = _load(args.source, "generator")
    extractor = _load(args.extractor, "extractor")
    target = load_image_folder(args.target, model.spec.image_size)
    n = len(target)
    base = default_config(n, args.mode)
    cfg = TrainConfig(
        iterations=args.iterations,
        batch_size=args.batch_size or base.batch_size,
        lr_stats=base.lr_stats if args.lr is None else args.lr,
        lr_latents=(args.lr if args.lr is not None else base.lr_latents) if args.lr_latents is None else args.lr_latents,
        lr_first_linear=args.lr_first_linear,
        lr_kernels=args.lr_kernels,
        dataset_size_hint=n,
        seed=args.seed,
        log_every=args.log_every,
        checkpoint_every=args.checkpoint_every,
        schedule=args.schedule,
    )
    result = adapt(
        model,
        extractor,
        target,
        args.mode,
        _loss_config(args),
        cfg,
        base_class=args.base_class,
        adapt_projection=args.adapt_projection,
        log_path=run / "train_log.jsonl",
        checkpoint_dir=run if args.checkpoint_every or args.resume else None,
        resume_from=args.resume,
    )
    ckpt.save_checkpoint(result.adapted, run / "adapted.npz", source=str(args.source))
    ckpt.save_checkpoint(export_stat_params(result.adapted), run / "stats.npz", source=str(args.source))
    ckpt.save_latents(result.bank, run / "latents.npz")
    shown = min(n, 8)
    recon = generate(result.adapted, result.bank.latents()[:shown])
    save_grid(np.concatenate([target.to_signed()[:shown], recon]), run / "reconstruction.png", ncol=shown)


def cmd_sample(args, run: Path):
    from .imaging import save_grid
    from .sampling import SamplerConfig, generate, sample_truncated

    model = _load(args.checkpoint, ("generator", "adapted"))
    z = sample_truncated(SamplerConfig(args.tau, args.seed), args.n, model.spec.latent_dim)
    images = generate(model, z, _generator_call(model, args.class_index))
    save_grid(images, run / f"samples_tau{args.tau:g}_seed{args.seed}.png", ncol=_grid_cols(args.n))


def cmd_interpolate(args, run: Path):
    from .imaging import save_frames, save_grid
    from .sampling import generate, interpolate_latents

    model = _load(args.checkpoint, ("generator", "adapted"))
    za, zb = _two_latents(args, model.spec.latent_dim)
    path = interpolate_latents(za, zb, args.steps)
    frames = generate(model, path, _generator_call(model, args.class_index))
    save_grid(frames, run / "interpolation.png", ncol=args.steps)
    save_frames(frames, run / "frames")


def cmd_morph(args, run: Path):
    from .adaptation import StatParamSet, export_stat_params
    from .imaging import save_frames, save_grid
    from .sampling import morph

    adapted = _load(args.adapted, "adapted")
    target = export_stat_params(adapted)
    start = _load(args.source_stats, "stats") if args.source_stats else StatParamSet.identity(adapted.layers)
    za, zb = _two_latents(args, adapted.spec.latent_dim)
    frames = morph(adapted, start, target, args.source_class, za, zb, args.steps)
    save_grid(frames, run / "morph.png", ncol=args.steps)
    save_frames(frames, run / "frames")


def cmd_evaluate(args, run: Path):
    from .datasets import load_image_folder
    from .metrics import evaluate
    from .sampling import SamplerConfig

    model = _load(args.checkpoint, ("generator", "adapted"))
    extractor = _load(args.extractor, "extractor")
    real = load_image_folder(args.real, model.spec.image_size)
    report = evaluate(model, real, SamplerConfig(args.tau, args.seed), args.n_gen, extractor, args.bandwidth, args.class_index)
    report.extractor_id = ckpt.file_digest(args.extractor)
    (run / "eval_report.json").write_text(report.to_json() + "\n")
    print(report.to_json())


def plot_sweep(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for mode in sorted({r.mode for r in rows}):
        sel = sorted((r for r in rows if r.mode == mode), key=lambda r: r.size)
        for ax, key in zip(axes, ("fid", "kmmd")):
            ax.plot([r.size for r in sel], [getattr(r, key) for r in sel], marker="o", label=mode)
    for ax, key in zip(axes, ("FID", "KMMD")):
        ax.set_xlabel("training images")
        ax.set_ylabel(key)
        ax.set_xscale("log")
    axes[1].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_sweep(args, run: Path):
    from .datasets import load_image_folder
    from .metrics import embed_images, median_bandwidth
    from .sampling import SamplerConfig
    from .trainer import run_size_sweep

    model = _load(args.source, "generator")
    extractor = _load(args.extractor, "extractor")
    pool = load_image_folder(args.pool, model.spec.image_size)
    real = load_image_folder(args.real, model.spec.image_size) if args.real else None
    bandwidth = args.bandwidth
    if bandwidth is None:
        # one kernel for every row, so the KMMD column is comparable across sizes and modes
        bandwidth = median_bandwidth(embed_images(extractor, (real or pool).to_signed()))
    rows = run_size_sweep(
        pool,
        args.sizes,
        model,
        extractor,
        modes=tuple(args.modes),
        iterations=args.iterations,
        seed=args.seed,
        real_set=real,
        sampler=SamplerConfig(args.tau, args.seed),
        n_gen=args.n_gen,
        bandwidth=bandwidth,
        csv_path=run / "sweep.csv",
        jobs=args.jobs,
        base_class=args.base_class,
    )
    details = {"bandwidth": bandwidth, "rows": [r.__dict__ for r in rows]}
    (run / "sweep_details.json").write_text(json.dumps(details, indent=2) + "\n")
    plot_sweep(rows, run / "sweep.png")


def cmd_analyze(args, run: Path):
    import csv

    from .analysis import (
        activation_correlation,
        embed_class_stats,
        export_class_stats,
        nearest_neighbor_purity,
        stack_class_stats,
    )
    from .datasets import shape_categories
    from .sampling import SamplerConfig, sample_truncated

    if args.probe < 64:
        raise UsageError("--probe must be at least 64")
    model = _load(args.checkpoint, ("generator", "adapted"))
    z = sample_truncated(SamplerConfig(1.0, args.seed), args.probe, model.spec.latent_dim)
    corr = activation_correlation(model, z, args.class_index)
    (run / "correlation.json").write_text(json.dumps(corr, indent=2, sort_keys=True) + "\n")
    stats = export_class_stats(model)
    matrix = stack_class_stats(stats)
    n_classes = matrix.shape[0]
    cats = np.asarray(args.categories) if args.categories else shape_categories(n_classes)
    if len(cats) != n_classes:
        raise UsageError(f"--categories needs {n_classes} entries")
    purity = nearest_neighbor_purity(matrix, cats)
    summary = {
        "purity": purity,
        "chance": 1.0 / len(np.unique(cats)),
        "num_classes": n_classes,
        "positive_rate_gamma_layers": sum(1 for r in corr.values() if (r["corr_rate_gamma"] or 0) > 0),
        "layers": len(corr),
    }
    (run / "purity.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with open(run / "class_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["class", "category"]
        for name, m in stats.items():
            c = m.shape[1] // 2
            header += [f"{name}.gamma{i}" for i in range(c)] + [f"{name}.beta{i}" for i in range(c)]
        w.writerow(header)
        for i in range(n_classes):
            w.writerow([i, int(cats[i])] + [repr(float(v)) for v in matrix[i]])
    coords = embed_class_stats(matrix)
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(coords[:, 0], coords[:, 1], c=cats, cmap="tab10")
    for i, (x, y) in enumerate(coords):
        ax.annotate(str(i), (x, y), fontsize=7)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    fig.tight_layout()
    fig.savefig(run / "class_stats_pca.png", dpi=100)
    plt.close(fig)


COMMANDS = {
    "corpus": cmd_corpus,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "sample": cmd_sample,
    "interpolate": cmd_interpolate,
    "morph": cmd_morph,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parse_args(argv, parser)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        run = make_run_dir(args)
        COMMANDS[args.command](args, run)
    except UsageError as exc:
        print(f"bsa {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (BSAError, OSError, ValueError) as exc:
        print(f"bsa {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(run)
    return 0


if __name__ == "__main__":
    sys.exit(main())
