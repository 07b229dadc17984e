"""Command-line entry point: ``ssat train|eval|probe|surface|co-check``.

Failures print one line to stderr of the form

    ssat: error: <ErrorClass>: <message>

and exit nonzero (2 for configuration problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as ds
from .config import ExperimentSpec, parse_config, write_spec
from .errors import ConfigurationError, SSATError
from .models import load_checkpoint, preset, save_checkpoint
from .telemetry import (IterationProbe, detect_co, evaluate, grid_coefficients, loss_surface_grid,
                        read_metrics, surface_directions, write_grid, write_metrics)
from .trainer import train

log = logging.getLogger("ssatlab")

# flag -> ExperimentSpec field
FLAG_FIELDS = {
    "method": "method", "aaer": "aaer", "mode": "mode", "eps": "eps", "alpha_mult": "alpha_mult",
    "lambda1": "lambda1", "lambda2": "lambda2", "lambda3": "lambda3", "epochs": "epochs",
    "batch": "batch", "seed": "seed", "out": "out", "pgd_steps": "pgd_steps",
    "pgd_restarts": "pgd_restarts", "probe_every": "probe_every",
    "detach_nae_reference": "detach_nae_reference", "aae_unit_delta": "unit_delta",
    "warmup_epochs": "warmup_epochs", "data_dir": "data_dir", "dataset": "dataset", "arch": "arch",
    "pgd_track_intermediate": "track_intermediate", "ckpt_every": "ckpt_every",
}


def load_datasets(spec: ExperimentSpec) -> tuple[ds.Dataset, ds.Dataset]:
    """(train, test) for the experiment's dataset selector."""
    root = spec.data_path()
    if spec.dataset in ("mnist", "mnist-5k"):
        def pick(stem):
            for suffix in (".gz", ""):
                if (root / (stem + suffix)).exists():
                    return root / (stem + suffix)
            raise ConfigurationError(f"missing {stem}[.gz] under {root}")
        train_set = ds.load_idx(pick("train-images-idx3-ubyte"), pick("train-labels-idx1-ubyte"), spec.dataset)
        test_set = ds.load_idx(pick("t10k-images-idx3-ubyte"), pick("t10k-labels-idx1-ubyte"), spec.dataset)
    elif spec.dataset == "cifar10":
        train_set = ds.load_cifar_binary([root / f"data_batch_{i}.bin" for i in range(1, 6)])
        test_set = ds.load_cifar_binary(root / "test_batch.bin")
    else:
        full = ds.synthetic_gaussians(4, 250, 2, 0.25, spec.seed)
        train_set, test_set = ds.stratified_split(full, 50, spec.seed)
    return train_set, test_set


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment file ([section] key = value)")
    p.add_argument("--method", choices=["vanilla", "rs", "n", "pgd-at"])
    p.add_argument("--aaer", choices=["on", "off"])
    p.add_argument("--mode", choices=["aaer", "plain", "drop-aae"])
    p.add_argument("--eps", help="k/255 or a real number")
    p.add_argument("--alpha-mult")
    for i in (1, 2, 3):
        p.add_argument(f"--lambda{i}")
    p.add_argument("--epochs")
    p.add_argument("--batch")
    p.add_argument("--seed")
    p.add_argument("--out")
    p.add_argument("--pgd-steps")
    p.add_argument("--pgd-restarts")
    p.add_argument("--probe-every")
    p.add_argument("--detach-nae-reference", action="store_const", const="on")
    p.add_argument("--aae-unit-delta", action="store_const", const="on")
    p.add_argument("--warmup-epochs")
    p.add_argument("--data-dir")
    p.add_argument("--dataset", choices=["mnist", "mnist-5k", "cifar10", "gaussians"])
    p.add_argument("--arch", help="architecture preset, e.g. cnn-small")
    p.add_argument("--pgd-track-intermediate", action="store_const", const="on")
    p.add_argument("--ckpt-every", help="also checkpoint every k epochs (0: final only)")


def spec_from_args(args) -> ExperimentSpec:
    overrides = {field: getattr(args, flag) for flag, field in FLAG_FIELDS.items()
                 if getattr(args, flag, None) is not None}
    return parse_config(args.config, overrides)


def _cmd_train(args, probe: bool = False) -> int:
    spec = spec_from_args(args)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    write_spec(spec, out / "spec.cfg")
    train_set, test_set = load_datasets(spec)
    arch = preset(spec.arch)
    hooks = []
    if probe:
        hooks.append(IterationProbe(arch, test_set, spec.eval_attack(), size=spec.probe_size,
                                    every=spec.probe_every, seed=spec.seed))

    def snapshot(record, params):
        if spec.ckpt_every and (record.epoch + 1) % spec.ckpt_every == 0:
            save_checkpoint(out / f"epoch{record.epoch + 1:03d}.ckpt", params, arch)

    result = train(spec.train_config(), train_set, arch, eval_set=test_set, hooks=hooks, epoch_callback=snapshot)
    write_metrics(result.records, out / "metrics.csv", out / "metrics.jsonl")
    save_checkpoint(out / "model.ckpt", result.params, arch)
    if probe:
        hooks[0].write(out / "probe.csv")
    last = result.records[-1] if result.records else None
    if last is not None:
        print(f"epoch {last.epoch}: nat_acc {last.nat_acc:.4f} rob_acc {last.rob_acc:.4f} -> {out}")
    return 0


def _cmd_eval(args) -> int:
    spec = spec_from_args(args)
    arch = preset(spec.arch)
    params = load_checkpoint(args.checkpoint, arch)
    _, test_set = load_datasets(spec)
    if args.limit:
        test_set = test_set.subset(np.arange(min(args.limit, len(test_set))))
    nat = evaluate(params, arch, test_set)
    attack = spec.eval_attack()
    rob = evaluate(params, arch, test_set, attack)
    print(f"nat_acc {nat:.6f}")
    print(f"rob_acc {rob:.6f} ({attack.name}, eps {spec.eps})")
    return 0


def _cmd_surface(args) -> int:
    spec = spec_from_args(args)
    arch = preset(spec.arch)
    params = load_checkpoint(args.checkpoint, arch)
    _, test_set = load_datasets(spec)
    if not 0 <= args.index < len(test_set):
        raise ConfigurationError(f"--index {args.index} outside test set of {len(test_set)}")
    x, y = test_set.images[args.index], test_set.labels[args.index]
    dir_a, dir_b = surface_directions(params, arch, x, y, spec.eps_value, seed=spec.seed)
    grid = loss_surface_grid(params, arch, x, y, dir_a, dir_b, args.radius, args.resolution)
    write_grid(grid, grid_coefficients(args.radius, args.resolution), args.output)
    print(f"wrote {args.resolution}x{args.resolution} grid to {args.output}")
    return 0


def _cmd_co_check(args) -> int:
    records = read_metrics(args.metrics)
    acc = [r.rob_acc for r in records]
    verdict = detect_co(acc, args.window, args.floor, args.drop)
    state = "detected" if verdict.detected else "not-detected"
    print(f"co {state} onset {verdict.onset_epoch} peak {verdict.peak:.6f} trough {verdict.trough:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssat", description="Single-step adversarial training lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("train", "train and write spec, metrics and checkpoint"),
                           ("probe", "train with per-iteration robust-accuracy telemetry")):
        _add_experiment_flags(sub.add_parser(name, help=helptext))
    p = sub.add_parser("eval", help="natural and PGD accuracy of a checkpoint")
    _add_experiment_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--limit", type=int, default=0, help="evaluate only the first N test samples")
    p = sub.add_parser("surface", help="loss surface around one test sample")
    _add_experiment_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--resolution", type=int, default=41)
    p.add_argument("--output", default="surface.csv")
    p = sub.add_parser("co-check", help="run the collapse detector on a metrics CSV")
    p.add_argument("metrics")
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--floor", type=float, default=0.05)
    p.add_argument("--drop", type=float, default=0.20)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    handlers = {"train": _cmd_train, "probe": lambda a: _cmd_train(a, probe=True), "eval": _cmd_eval,
                "surface": _cmd_surface, "co-check": _cmd_co_check}
    try:
        return handlers[args.command](args)
    except SSATError as exc:
        print(f"ssat: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigurationError) else 1


if __name__ == "__main__":
    sys.exit(main())
