"""Command-line entry point: ``mixsup {synth|train|eval|ablate|loss-check}``.

Exit codes: 0 success, 1 runtime failure (bad files, failed checks), 2 invalid
arguments or configuration.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .errors import ConfigError, MixSupError

log = logging.getLogger("mixsup")

WEAK_KINDS = ("box", "polygon", "scribble", "point")


class UsageError(Exception):
    """Bad arguments detected after argparse; maps to exit code 2."""


# ----------------------------------------------------------------------------
# config files
# ----------------------------------------------------------------------------

def read_key_values(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _coerce(name: str, value: str, default):
    if isinstance(default, bool):
        return _parse_bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value


def parse_run_config(entries: dict[str, str]):
    """Split config entries into a TrainConfig, dataset specs and extra options.

    Recognised keys: every TrainConfig field, ``train.<name> = <kind>:<dir>``,
    ``test.<name> = <dir>`` and ``out = <dir>``.  Anything else is an error.
    """
    from .trainer import TrainConfig

    defaults = TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    kwargs, train_sets, test_sets, extra = {}, [], [], {}
    for key, value in entries.items():
        if key in known:
            try:
                kwargs[key] = _coerce(key, value, getattr(defaults, key))
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        elif key.startswith("train."):
            kind, sep, root = value.partition(":")
            if not sep or not root:
                raise ConfigError(f"{key} must be <kind>:<dir>, got {value!r}")
            train_sets.append((key[6:], kind.strip(), root.strip()))
        elif key.startswith("test."):
            test_sets.append((key[5:], value))
        elif key == "out":
            extra["out"] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return TrainConfig(**kwargs), train_sets, test_sets, extra


def _load_train_sets(specs):
    from .data import load_folder_dataset
    from .losses import KINDS

    merged: dict[str, list] = {}
    for name, kind, root in specs:
        if kind not in KINDS:
            raise ConfigError(f"dataset {name}: unknown kind {kind!r}")
        merged.setdefault(kind, []).extend(load_folder_dataset(root, kind, name))
    return list(merged.items())


def _load_test_sets(specs):
    from .data import load_folder_dataset

    return [(name, load_folder_dataset(root, "pixel", name)) for name, root in specs]


def _parse_test_arg(arg: str) -> tuple[str, str]:
    name, sep, root = arg.partition("=")
    if sep:
        return name, root
    return Path(arg).name, arg


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data import derive_weak_dataset, load_folder_dataset, save_folder_dataset, synth_blob_dataset

    out = Path(args.out)
    if args.blobs:
        if args.kind != "pixel":
            raise UsageError("--blobs generates a dense corpus; use --kind pixel")
        if args.size % 16:
            raise UsageError(f"--size must be a multiple of 16, got {args.size}")
        samples = synth_blob_dataset(args.blobs, args.size, args.size, args.seed, name=out.name)
        save_folder_dataset(samples, out)
        print(f"wrote {len(samples)} synthetic samples to {out}")
        return 0
    if args.inp is None:
        raise UsageError("--in is required unless --blobs is given")
    dense = load_folder_dataset(args.inp, "pixel")
    weak = dense if args.kind == "pixel" else derive_weak_dataset(dense, args.kind, seed=args.seed)
    save_folder_dataset(weak, out)
    print(f"wrote {len(weak)} {args.kind} samples to {out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import train

    config, train_specs, test_specs, extra = parse_run_config(read_key_values(args.config))
    out = args.out or extra.get("out")
    if out is None:
        raise ConfigError("no output directory: pass --out or set out = <dir> in the config")
    if not train_specs:
        raise ConfigError("config names no training dataset (train.<name> = <kind>:<dir>)")
    datasets = _load_train_sets(train_specs)
    val_sets = _load_test_sets(test_specs)
    res = train(config, datasets, val_sets=val_sets or None, out_dir=out, resume=args.resume,
                progress=True)
    msg = f"trained {config.iterations} steps; checkpoint {res.checkpoint_path}"
    if res.final_val_dice is not None:
        msg += f"; validation Dice {res.final_val_dice:.4f}"
    print(msg)
    return 0


def cmd_eval(args) -> int:
    from .metrics import emit_report, evaluate
    from .trainer import TrainHistory, load_model

    if not 0.0 < args.threshold < 1.0:
        raise UsageError(f"--threshold must lie in (0, 1), got {args.threshold}")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model = load_model(ckpt)
    test_sets = _load_test_sets([_parse_test_arg(t) for t in args.test])
    report = evaluate(model, test_sets, threshold=args.threshold)
    history = None
    hist_path = Path(args.history) if args.history else ckpt.parent / "history.csv"
    if hist_path.is_file():
        history = TrainHistory.from_csv(hist_path)
    emit_report(report, args.out, history)
    for r in report.datasets:
        print(f"{r.name:<24} n={r.count:<5} dice={r.dice:.4f} iou={r.iou:.4f}")
    print(f"{'wAVG':<24} n={sum(r.count for r in report.datasets):<5} "
          f"dice={report.wavg_dice:.4f} iou={report.wavg_iou:.4f}")
    return 0


def cmd_ablate(args) -> int:
    from dataclasses import replace

    from .experiments import Benchmark, run_ablation, summarize, synthetic_benchmark
    from .trainer import TrainConfig

    seeds = [int(s) for s in args.seeds.replace(",", " ").split()]
    if not seeds:
        raise UsageError("--seeds must name at least one seed")
    if args.config:
        base, train_specs, test_specs, _ = parse_run_config(read_key_values(args.config))
    else:
        base, train_specs, test_specs = TrainConfig(), [], []
    if args.iterations is not None:
        base = replace(base, iterations=args.iterations)
        base.validate()
    if train_specs:
        if not test_specs:
            raise ConfigError("ablation on folder datasets needs test.<name> entries")
        bench = Benchmark(_load_train_sets(train_specs), _load_test_sets(test_specs), [])
    else:
        bench = synthetic_benchmark(data_seed=args.data_seed, n_train=args.n_train,
                                    n_test=args.n_test, size=args.size)
    runs = run_ablation(bench, seeds, base, out_dir=args.out)
    print(f"{'BCE':>4} {'Uncertain':>9} {'Consistency':>11} {'Dice':>7} {'IoU':>7} {'Dice sd':>8}")
    for r in summarize(runs):
        print(f"{r['BCE']:>4} {r['Uncertain']:>9} {r['Consistency']:>11} "
              f"{r['Dice']:>7.2f} {r['IoU']:>7.2f} {r['Dice_std']:>8.2f}")
    print(f"{len(runs)} runs; summary in {Path(args.out) / 'ablation.csv'}")
    return 0


def cmd_loss_check(args) -> int:
    from .gradcheck import LOSS_NAMES, check_loss_gradients, check_m2b_properties, format_table

    faults = set(args.inject_fault or ())
    unknown = faults - set(LOSS_NAMES)
    if unknown:
        raise UsageError(f"--inject-fault: unknown loss {sorted(unknown)}; choose from {LOSS_NAMES}")
    results = check_loss_gradients(seed=args.seed, trials=args.trials, faults=faults)
    results += check_m2b_properties(seed=args.seed)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixsup", description="Mixed-supervision segmentation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="derive weak labels from a dense folder dataset, or generate blobs")
    p.add_argument("--kind", required=True, choices=("pixel",) + WEAK_KINDS)
    p.add_argument("--in", dest="inp", help="dense dataset root (images/ + masks/)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blobs", type=int, default=0, metavar="N",
                   help="generate N synthetic blob images instead of reading --in")
    p.add_argument("--size", type=int, default=64, help="side length for --blobs")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a key=value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides 'out' in the config)")
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.mixsup")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on pixel-labelled folders")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", action="append", required=True, metavar="[NAME=]DIR")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--history", help="history CSV for the training curve "
                                     "(default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the loss ablation (base / +uncertainty / +consistency)")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--config", help="optional key=value file with TrainConfig overrides and datasets")
    p.add_argument("--iterations", type=int)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("loss-check", help="finite-difference gradient and M2B property checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--inject-fault", action="append", metavar="LOSS",
                   help="corrupt one loss's analytic gradient (self-test)")
    p.set_defaults(func=cmd_loss_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"mixsup {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (MixSupError, OSError, ValueError) as exc:
        print(f"mixsup {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
