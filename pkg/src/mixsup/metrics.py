"""Dice / IoU evaluation and count-weighted aggregation across datasets."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import EmptyInput, ShapeMismatch
from .losses import PredictionMap, sigmoid

# dataset order used by the common five-benchmark polyp comparison table
DATASET_ORDER = ("ColonDB", "Kvasir", "ClinicDB", "EndoScene", "ETIS")


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    probs = pred.probs if isinstance(pred, PredictionMap) else np.asarray(pred)
    return (probs > threshold).astype(np.uint8)


def _pair(pred, gt):
    p = np.asarray(pred) != 0
    g = np.asarray(gt) != 0
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    return p, g


def dice_coeff(pred, gt) -> float:
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def iou(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def weighted_average(per_dataset: Iterable[tuple[float, float]]) -> float:
    """Count-weighted mean of ``(count, value)`` pairs."""
    pairs = list(per_dataset)
    if not pairs:
        raise EmptyInput("no datasets to average")
    counts = np.array([c for c, _ in pairs], dtype=np.float64)
    if (counts <= 0).any():
        raise ValueError("counts must be positive")
    values = np.array([v for _, v in pairs], dtype=np.float64)
    return float((counts * values).sum() / counts.sum())


@dataclass
class DatasetMetrics:
    name: str
    count: int
    dice: float
    iou: float


@dataclass
class MetricsReport:
    datasets: list[DatasetMetrics] = field(default_factory=list)
    wavg_dice: float = 0.0
    wavg_iou: float = 0.0
    threshold: float = 0.5

    @classmethod
    def from_rows(cls, rows: Sequence[DatasetMetrics], threshold: float = 0.5) -> "MetricsReport":
        rows = list(rows)
        return cls(rows,
                   weighted_average((r.count, r.dice) for r in rows),
                   weighted_average((r.count, r.iou) for r in rows),
                   threshold)

    def to_dict(self) -> dict:
        return {"datasets": [asdict(d) for d in self.datasets],
                "wavg": {"dice": self.wavg_dice, "iou": self.wavg_iou},
                "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls([DatasetMetrics(**row) for row in d["datasets"]],
                   d["wavg"]["dice"], d["wavg"]["iou"], d["threshold"])


# ----------------------------------------------------------------------------
# prediction
# ----------------------------------------------------------------------------

def _round16(n: int) -> int:
    return max(16, int(round(n / 16)) * 16)


def predict_probs(model, images: Sequence[np.ndarray], batch_size: int = 16) -> list[np.ndarray]:
    """Probability maps at each image's native size.

    Images whose sides are not multiples of 16 are bilinearly resized to the
    nearest valid size for the forward pass; logits are resized back before
    squashing.
    """
    from .model import image_to_batch

    out: list[np.ndarray | None] = [None] * len(images)
    groups: dict[tuple[int, int], list[int]] = {}
    for i, im in enumerate(images):
        groups.setdefault(tuple(im.shape[:2]), []).append(i)
    for (h, w), idx in groups.items():
        mh, mw = _round16(h), _round16(w)
        for start in range(0, len(idx), batch_size):
            chunk = idx[start:start + batch_size]
            x = image_to_batch([images[i] for i in chunk], model.config.in_channels)
            if (mh, mw) != (h, w):
                x = kernels.resize_bilinear(x, mh, mw)
            logits = model.forward(x)
            if (mh, mw) != (h, w):
                logits = kernels.resize_bilinear(logits, h, w)
            for i, lg in zip(chunk, logits):
                out[i] = sigmoid(lg.astype(np.float64))
    return out


def _as_predict_fn(predictor) -> Callable[[Sequence[np.ndarray]], list]:
    if isinstance(predictor, (str, Path)):
        from .trainer import load_model

        predictor = load_model(predictor)
    if hasattr(predictor, "forward") and hasattr(predictor, "config"):
        model = predictor
        return lambda images: predict_probs(model, images)
    if callable(predictor):
        def run(images):
            res = []
            for im in images:
                p = predictor(im)
                res.append(p.probs if isinstance(p, PredictionMap) else np.asarray(p))
            return res
        return run
    raise TypeError(f"cannot evaluate with {type(predictor).__name__}")


def evaluate(predictor, test_datasets, threshold: float = 0.5) -> MetricsReport:
    """Per-image Dice/IoU at native resolution, dataset means and their wAVG.

    ``predictor`` is a model, a checkpoint path, or a callable mapping one
    image to a probability map.  ``test_datasets`` is a mapping or a sequence
    of ``(name, samples)`` with pixel-kind samples.
    """
    predict = _as_predict_fn(predictor)
    items = test_datasets.items() if isinstance(test_datasets, Mapping) else test_datasets
    rows = []
    for name, samples in items:
        if not samples:
            raise EmptyInput(f"test dataset {name!r} is empty")
        if any(s.kind != "pixel" for s in samples):
            raise ValueError(f"test dataset {name!r} must be pixel-kind")
        probs = predict([s.image for s in samples])
        dices, ious = [], []
        for s, p in zip(samples, probs):
            b = binarize(p, threshold)
            dices.append(dice_coeff(b, s.payload))
            ious.append(iou(b, s.payload))
        rows.append(DatasetMetrics(name, len(samples), float(np.mean(dices)), float(np.mean(ious))))
    return MetricsReport.from_rows(rows, threshold)


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------

def _table_order(rows):
    rank = {n: i for i, n in enumerate(DATASET_ORDER)}
    return sorted(rows, key=lambda r: (rank.get(r.name, len(rank)),))


def report_json(report: MetricsReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def emit_report(report: MetricsReport, out_dir, history=None) -> list[Path]:
    """Write report.json, report.csv and plots into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    path = out / "report.json"
    path.write_text(report_json(report))
    written.append(path)

    path = out / "report.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "count", "dice", "iou"])
        for r in _table_order(report.datasets):
            w.writerow([r.name, r.count, f"{r.dice:.6f}", f"{r.iou:.6f}"])
        w.writerow(["wAVG", sum(r.count for r in report.datasets),
                    f"{report.wavg_dice:.6f}", f"{report.wavg_iou:.6f}"])
    written.append(path)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = _table_order(report.datasets)
    names = [f"{r.name}\n({r.count})" for r in rows] + [f"wAVG\n({sum(r.count for r in rows)})"]
    dice = [r.dice for r in rows] + [report.wavg_dice]
    ious = [r.iou for r in rows] + [report.wavg_iou]
    xs = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(4, 1.4 * len(names)), 3.5))
    ax.bar(xs - 0.2, dice, 0.4, label="Dice")
    ax.bar(xs + 0.2, ious, 0.4, label="IoU")
    ax.set_xticks(xs, names)
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    path = out / "metrics.png"
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    written.append(path)

    if history is not None and len(history):
        from .trainer import smooth_curve

        fig, ax = plt.subplots(figsize=(6, 3.5))
        steps = np.array([r.step for r in history])
        total = np.array([r.losses.l_total for r in history])
        ax.plot(steps, total, lw=0.5, alpha=0.4, label="l_total")
        ax.plot(steps, smooth_curve(total, 50), lw=1.5, label="l_total (50-step mean)")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        path = out / "training_curve.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written
