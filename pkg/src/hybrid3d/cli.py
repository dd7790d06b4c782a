"""Command-line entry point: ``hybrid3d <subcommand> [flags]``.

Exit codes: 0 ok, 2 configuration, 3 data or I/O, 4 checkpoint,
5 verification failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from . import __version__
from .augment import preview_slices
from .config import ConfigError, RunConfig, config_from_dict, load_config
from .data import (DataError, Dataset, balance_targets, generate_synthetic, load_image_dir,
                   oversample_minority, read_pnm, replicate_channels, resize_bilinear,
                   save_image_dir, split, write_pnm)
from .gradcheck import run_battery
from .model import HybridModel, ManifestMismatch, build_three_d, build_two_d
from .robustness import sweep, trend_summary
from .training import ConfigurationError, carve_validation, evaluate, fit
from .weights import WeightFormatError, read_weights

logger = logging.getLogger("hybrid3d")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_VERIFY = 0, 2, 3, 4, 5
LOCK_NAME = ".hybrid3d.lock"
THREADS_ENV = "ALZHINET_THREADS"


class CheckpointError(RuntimeError):
    pass


# -- shared plumbing ------------------------------------------------------------------

def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    raw = cfg.to_dict()
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.output is not None:
        raw["output_dir"] = args.output
    if getattr(args, "families", None):
        raw["sweep"]["families"] = [f.strip() for f in args.families.split(",") if f.strip()]
    return config_from_dict(raw)


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data.source == "synthetic":
        return generate_synthetic(cfg.synthetic_spec())
    size = cfg.data.image_size
    return load_image_dir(cfg.data.path, None if size is None else (size, size))


def prepare_splits(cfg: RunConfig) -> dict[str, Dataset]:
    """``train`` (full train split), ``fit`` and ``val`` (its carve) and ``test``.

    Oversampling, when enabled, only grows ``fit`` so validation and test
    never see synthetic duplicates.
    """
    ds = load_dataset(cfg)
    train, test = split(ds, cfg.split_spec())
    fit_set, val_set = carve_validation(train, cfg.train_config())
    if cfg.data.oversample:
        fit_set = oversample_minority(fit_set, balance_targets(fit_set), cfg.roster(), cfg.seed)
    return {"train": train, "fit": fit_set, "val": val_set, "test": test}


def build_model(cfg: RunConfig, num_classes: int, with_3d: bool = True) -> HybridModel:
    two_d = build_two_d(cfg.two_d_config(num_classes), cfg.seed)
    three_d = build_three_d(cfg.three_d_config(num_classes), cfg.seed) if with_3d else None
    return HybridModel(two_d, three_d, cfg.model.alpha, cfg.model.beta)


def load_checkpoint(path: str, cfg: RunConfig, num_classes: int, head: str) -> HybridModel:
    """Load a 2D-only or whole-hybrid AZWT file into a freshly built model."""
    try:
        state = read_weights(path)
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint {path} not found") from exc
    is_hybrid = any(k.startswith("two_d.") for k in state)
    if head == "hybrid" and not is_hybrid:
        raise CheckpointError(f"{path} holds only 2D weights; the hybrid head needs a hybrid "
                              "checkpoint (train with train.save_hybrid)")
    model = build_model(cfg, num_classes, with_3d=is_hybrid)
    target = model if is_hybrid else model.two_d
    target.load_state_dict(state)
    return model


@contextlib.contextmanager
def output_dir(cfg: RunConfig, command: str):
    """Create and lock the output directory and echo the resolved config into it."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise DataError(f"{out} is locked by another run (remove {lock} if stale)") from exc
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        echo = {"command": command, "version": __version__, "config": cfg.to_dict()}
        (out / "effective_config.json").write_text(json.dumps(echo, indent=2, sort_keys=True))
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    logger.info("wrote %s", path)


# -- subcommands ------------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    splits = prepare_splits(cfg)
    model = build_model(cfg, splits["train"].num_classes,
                        with_3d=cfg.train.objective == "hybrid")
    with output_dir(cfg, "train") as out:
        report = fit(model, splits["fit"], cfg.train_config(), val_set=splits["val"],
                     checkpoint_dir=out, save_hybrid=cfg.train.save_hybrid)
        _write(out / "fit_report.json", report.to_json())
        _write(out / "fit_report.csv", report.to_csv())
    print(f"best epoch {report.best_epoch} val_acc {report.best_val_acc:.4f} "
          f"(stopped at {report.stopped_epoch})")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if not args.checkpoint or len(args.checkpoint) != 1:
        raise ConfigError("checkpoint", "eval takes exactly one --checkpoint")
    splits = prepare_splits(cfg)
    data = splits[args.split]
    model = load_checkpoint(args.checkpoint[0], cfg, data.num_classes, args.head)
    with output_dir(cfg, "eval") as out:
        report = evaluate(model, data, args.head, cfg.roster(), cfg.seed)
        _write(out / "metrics.json", json.dumps(report.to_dict(), indent=2, sort_keys=True))
        _write(out / "metrics.csv", report.to_csv(f"{args.split}:{args.head}"))
        _write(out / "confusion.csv", report.confusion_csv())
    print(f"{args.split} accuracy {report.accuracy:.4f} f1 {report.f1:.4f}")
    return EXIT_OK


def _model_names(paths: Sequence[str]) -> list[str]:
    stems = [Path(p).stem for p in paths]
    names = [f"{Path(p).parent.name}/{Path(p).stem}" if stems.count(s) > 1 else s
             for p, s in zip(paths, stems)]
    if len(set(names)) != len(names):
        names = [f"{n}#{i}" for i, n in enumerate(names)]
    return names


def cmd_perturb(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if not args.checkpoint:
        raise ConfigError("checkpoint", "perturb needs at least one --checkpoint")
    head = args.head or cfg.sweep.head
    splits = prepare_splits(cfg)
    data = splits[args.split]
    models = {name: load_checkpoint(p, cfg, data.num_classes, head)
              for name, p in zip(_model_names(args.checkpoint), args.checkpoint)}
    with output_dir(cfg, "perturb") as out:
        report = sweep(models, data, cfg.grids(), cfg.seed, head, cfg.roster(), cfg.seed)
        _write(out / "sweep.csv", report.to_csv())
        _write(out / "sweep.json", report.to_json())
        _write(out / "trend.json", json.dumps(trend_summary(report), indent=2, sort_keys=True))
    print(f"{len(report.rows)} sweep rows for {len(models)} model(s)")
    return EXIT_OK


def cmd_augment_preview(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    img = read_pnm(args.image)
    gray = img.shape[0] == 1
    if cfg.data.image_size is not None:
        img = resize_bilinear(img, cfg.data.image_size, cfg.data.image_size)
    vol = preview_slices(replicate_channels(img), cfg.roster(), cfg.seed)
    with output_dir(cfg, "augment-preview") as out:
        ext = ".pgm" if gray else ".ppm"
        for i, sl in enumerate(vol):
            write_pnm(out / f"slice_{i:02d}{ext}", sl[:1] if gray else sl)
    print(f"wrote {len(vol)} slices")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    kw = {} if args.threshold is None else {"threshold": args.threshold,
                                           "e2e_threshold": args.threshold}
    with output_dir(cfg, "gradcheck") as out:
        results = run_battery(trials=args.trials, seed=cfg.seed, **kw)
        _write(out / "gradcheck.json", json.dumps(results, indent=2))
    for r in results:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['check']:<26} "
              f"max_rel_error={r['max_rel_error']:.3e} threshold={r['threshold']:.0e}")
    failing = [r["check"] for r in results if not r["passed"]]
    if failing:
        print("failing checks: " + ", ".join(failing), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    ds = generate_synthetic(cfg.synthetic_spec())
    with output_dir(cfg, "synth") as out:
        save_image_dir(ds, out / "data")
    print(f"wrote {len(ds)} images in {ds.num_classes} class directories under {out / 'data'}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybrid3d",
                                     description="Hybrid 2D/3D classifier toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--output", help="override output_dir")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    add("train", cmd_train, "fit the hybrid model and save the best 2D weights")
    p = add("eval", cmd_eval, "metrics for a checkpoint on one split")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--head", choices=("2d", "hybrid"), default="2d")
    p.add_argument("--split", choices=("train", "fit", "val", "test"), default="test")
    p = add("perturb", cmd_perturb, "corruption sweep over one or more checkpoints")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--head", choices=("2d", "hybrid"))
    p.add_argument("--families", help="comma-separated subset of corruption families")
    p.add_argument("--split", choices=("train", "fit", "val", "test"), default="test")
    p = add("augment-preview", cmd_augment_preview, "write the augmented slices of one image")
    p.add_argument("image", help="PGM or PPM file")
    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient battery")
    p.add_argument("--threshold", type=float, help="max relative error (default 1e-6, "
                                                   "1e-4 for the end-to-end check)")
    p.add_argument("--trials", type=int, default=100)
    add("synth", cmd_synth, "materialise the synthetic dataset as a PGM tree")
    return parser


def _thread_limit() -> Optional[int]:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(THREADS_ENV, f"expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(THREADS_ENV, f"expected a positive integer, got {raw!r}")
    return n


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limit = _thread_limit()
        with threadpool_limits(limits=limit):
            return args.func(args)
    except (ConfigError, ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, ManifestMismatch, WeightFormatError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
