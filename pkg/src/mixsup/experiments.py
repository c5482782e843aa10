"""Desk-scale synthetic benchmark and the loss-ablation harness."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import derive_weak_dataset, synth_blob_dataset
from .losses import KINDS
from .metrics import evaluate
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

TEST_SEED_OFFSET = 10_000


@dataclass
class Benchmark:
    train_sets: list            # [(kind, samples)]
    test_sets: list             # [(name, samples)]
    dense_train: list           # the pixel-kind source of every training sample


def synthetic_benchmark(data_seed: int = 0, n_train: int = 500, n_test: int = 100,
                        size: int = 64, kinds: Sequence[str] = KINDS) -> Benchmark:
    """Blob corpus split evenly across ``kinds``, weak labels derived per chunk."""
    dense = synth_blob_dataset(n_train, size, size, data_seed, name="synthetic_train")
    test = synth_blob_dataset(n_test, size, size, data_seed + TEST_SEED_OFFSET,
                              name="synthetic_test")
    chunks = np.array_split(np.arange(n_train), len(kinds))
    train_sets = []
    for kind, idx in zip(kinds, chunks):
        part = [dense[i] for i in idx]
        train_sets.append((kind, derive_weak_dataset(part, kind, seed=data_seed)))
    return Benchmark(train_sets, [("synthetic_test", test)], dense)


def box_only(bench: Benchmark, data_seed: int = 0) -> list:
    """Every training image annotated with a box instead."""
    return [("box", derive_weak_dataset(bench.dense_train, "box", seed=data_seed))]


# (BCE, Uncertain, Consistency) switches of the loss ablation
ABLATION_CONFIGS = (
    ("base", True, False, False),
    ("uncertain", True, True, False),
    ("full", True, True, True),
)


def ablation_config(name: str, base: TrainConfig) -> TrainConfig:
    for cname, _, unc, cons in ABLATION_CONFIGS:
        if cname == name:
            return replace(base, lambda_u=1.0 if unc else 0.0, lambda_c=1.0 if cons else 0.0)
    raise KeyError(name)


@dataclass
class RunSummary:
    config: str
    seed: int
    dice: float
    iou: float


def run_ablation(bench: Benchmark, seeds: Sequence[int], base: TrainConfig,
                 out_dir=None, runner=None) -> list[RunSummary]:
    """Train every ablation configuration for every seed and evaluate on the test sets.

    ``runner(config_name, train_config)`` may be supplied to reuse cached runs;
    it must return a trained model.
    """
    runs = []
    for name, *_ in ABLATION_CONFIGS:
        for seed in seeds:
            cfg = ablation_config(name, replace(base, seed=seed))
            if runner is not None:
                model = runner(name, cfg)
            else:
                run_dir = None if out_dir is None else Path(out_dir) / f"{name}_seed{seed}"
                model = train(cfg, bench.train_sets, out_dir=run_dir).model
            rep = evaluate(model, bench.test_sets)
            log.info("ablation %s seed=%d dice=%.4f iou=%.4f", name, seed, rep.wavg_dice, rep.wavg_iou)
            runs.append(RunSummary(name, seed, rep.wavg_dice, rep.wavg_iou))
    if out_dir is not None:
        write_ablation_csv(runs, Path(out_dir) / "ablation.csv")
        write_runs_csv(runs, Path(out_dir) / "ablation_runs.csv")
    return runs


def summarize(runs: Sequence[RunSummary]) -> list[dict]:
    rows = []
    for name, bce, unc, cons in ABLATION_CONFIGS:
        sel = [r for r in runs if r.config == name]
        if not sel:
            continue
        d = np.array([r.dice for r in sel])
        j = np.array([r.iou for r in sel])
        rows.append({"BCE": int(bce), "Uncertain": int(unc), "Consistency": int(cons),
                     "Dice": 100 * d.mean(), "IoU": 100 * j.mean(),
                     "Dice_std": 100 * d.std(ddof=1) if len(d) > 1 else 0.0,
                     "IoU_std": 100 * j.std(ddof=1) if len(j) > 1 else 0.0,
                     "runs": len(sel)})
    return rows


def write_ablation_csv(runs, path) -> None:
    rows = summarize(runs)
    cols = ["BCE", "Uncertain", "Consistency", "Dice", "IoU", "Dice_std", "IoU_std", "runs"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], int) else f"{r[c]:.2f}" for c in cols])


def write_runs_csv(runs, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config", "seed", "dice", "iou"])
        for r in runs:
            w.writerow([r.config, r.seed, f"{r.dice:.6f}", f"{r.iou:.6f}"])
