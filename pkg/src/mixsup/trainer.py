"""Mixed-supervision training loop.

Each step draws a single-kind batch, routes it to that kind's loss and applies
one SGD-with-momentum update.  Point batches get a second forward pass on the
quarter-turned images; the rotated-back prediction feeds the consistency term.
Across ``len(kinds)`` consecutive steps every kind contributes once, so the
optimisation follows the unweighted sum of per-kind losses.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses as L
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DESK_SIZE_SET, MixedSampler, resize_sample
from .errors import ConfigError, NonFiniteLoss
from .losses import KINDS, LossBreakdown, PredictionMap
from .model import ModelConfig, PyramidSegNet, image_to_batch, rotate90

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "kind", "l_pixel", "l_polygon", "l_box", "l_scribble",
                   "l_points", "l_total", "val_dice")
CHECKPOINT_NAME = "checkpoint.mixsup"
HISTORY_NAME = "history.csv"


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 4
    iterations: int = 2000
    size_set: tuple[int, ...] = DESK_SIZE_SET
    seed: int = 0
    lambda_u: float = 1.0          # uncertainty term on unlabeled scribble pixels
    lambda_p: float = 1.0          # BCE at annotated points
    point_bce: bool = True
    lambda_c: float = 1.0          # rotation-consistency term for point batches
    lr_schedule: str = "constant"  # or "poly" (power 0.9)
    grad_clip: float = 0.0         # global-norm clip, 0 disables
    kind_schedule: str = "round_robin"
    checkpoint_every: int = 0      # 0: only at the end
    val_every: int = 0             # 0: only at the end
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    fusion_channels: int = 32
    norm_groups: int = 4
    input_norm: str = "image"
    dtype: str = "float32"

    def __post_init__(self):
        self.size_set = tuple(int(s) for s in self.size_set)
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.validate()

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.iterations <= 0:
            raise ConfigError(f"iterations must be > 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.size_set or any(s <= 0 or s % 16 for s in self.size_set):
            raise ConfigError(f"size_set entries must be positive multiples of 16: {self.size_set}")
        if self.lr_schedule not in ("constant", "poly"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.kind_schedule not in ("round_robin", "proportional"):
            raise ConfigError(f"unknown kind_schedule {self.kind_schedule!r}")
        if min(self.lambda_u, self.lambda_p, self.lambda_c, self.grad_clip) < 0:
            raise ConfigError("loss weights and grad_clip must be >= 0")
        if self.checkpoint_every < 0 or self.val_every < 0:
            raise ConfigError("checkpoint_every and val_every must be >= 0")
        self.model_config()

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(stage_channels=self.stage_channels,
                               fusion_channels=self.fusion_channels, norm_groups=self.norm_groups,
                               input_norm=self.input_norm, dtype=self.dtype, seed=self.seed)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size_set"] = list(self.size_set)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class HistoryRow:
    step: int
    kind: str
    losses: LossBreakdown
    val_dice: float | None = None


class TrainHistory(list):
    """List of :class:`HistoryRow`, one per completed step."""

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self:
                b = r.losses
                w.writerow([r.step, r.kind] + [repr(float(v)) for v in
                           (b.l_pixel, b.l_polygon, b.l_box, b.l_scribble, b.l_points, b.l_total)]
                           + ["" if r.val_dice is None else repr(float(r.val_dice))])

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                b = LossBreakdown(*(float(row[c]) for c in HISTORY_COLUMNS[2:8]))
                vd = float(row["val_dice"]) if row["val_dice"] else None
                out.append(HistoryRow(int(row["step"]), row["kind"], b, vd))
        return out

    def val_dice(self) -> list[tuple[int, float]]:
        return [(r.step, r.val_dice) for r in self if r.val_dice is not None]


class SGD:
    """SGD with heavy-ball momentum: v <- mu v + g; p <- p - lr v."""

    def __init__(self, momentum: float = 0.9, buffers: dict | None = None):
        self.momentum = momentum
        self.buffers = {} if buffers is None else buffers

    def step(self, params: dict, grads: dict, lr: float) -> None:
        for name, g in grads.items():
            if self.momentum:
                buf = self.buffers.get(name)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buffers[name] = buf
            else:
                buf = g
            params[name] -= lr * buf


def learning_rate_at(config: TrainConfig, step: int) -> float:
    if config.lr_schedule == "poly":
        return config.learning_rate * (1.0 - step / config.iterations) ** 0.9
    return config.learning_rate


def _add_grads(a: dict | None, b: dict) -> dict:
    if a is None:
        return b
    return {k: a[k] + b[k] for k in a}


def clip_grads(grads: dict, max_norm: float) -> dict:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def point_predictions(model, x):
    """Forward ``x`` and its quarter-turned copy; undo the turn on the second output.

    Returns ``(logits, cache, logits_back, cache_rot)`` where ``logits_back`` is
    aligned with ``logits``.
    """
    logits, cache = model.forward(x, return_cache=True)
    logits_rot, cache_rot = model.forward(rotate90(x, 1, axes=(-2, -1)), return_cache=True)
    return logits, cache, rotate90(logits_rot, 3, axes=(-2, -1)), cache_rot


def batch_loss_and_grad(kind: str, logits, payloads, config: TrainConfig, logits_back=None):
    """Batch-mean loss for one kind plus d(loss)/d(logits) (and for the rotated pass)."""
    n = len(payloads)
    total = 0.0
    grad = np.zeros_like(logits)
    grad_back = None if logits_back is None else np.zeros_like(logits_back)
    for i, payload in enumerate(payloads):
        pred = PredictionMap.from_logits(logits[i])
        if kind in ("pixel", "polygon"):
            v, g = L.dense_loss_and_grad(pred, payload)
        elif kind == "box":
            v, g = L.box_loss_and_grad(pred, payload)
        elif kind == "scribble":
            v, g = L.scribble_loss_and_grad(pred, payload, config.lambda_u)
        elif kind == "point":
            back = PredictionMap.from_logits(logits_back[i])
            lam_p = config.lambda_p if config.point_bce else 0.0
            v, g, gb = L.point_loss_and_grad(pred, back, payload, lam_p, config.lambda_c)
            grad_back[i] = gb / n
        else:
            raise ValueError(f"unknown supervision kind {kind!r}")
        total += v
        grad[i] = g / n
    return total / n, grad, grad_back


def train_step(model, batch, kind: str, optimizer: SGD, config: TrainConfig,
               step: int = 0, lr: float | None = None) -> LossBreakdown:
    """One SGD update on a single-kind batch; returns the loss breakdown."""
    x = image_to_batch([s.image for s in batch], model.config.in_channels)
    payloads = [s.payload for s in batch]
    if kind == "point" and config.lambda_c > 0:
        logits, cache, logits_back, cache_rot = point_predictions(model, x)
    else:
        # with the consistency weight at zero the rotated pass carries no gradient
        logits, cache = model.forward(x, return_cache=True)
        logits_back = logits if kind == "point" else None
        cache_rot = None
    # losses are evaluated in float64 whatever the model precision
    value, g, g_back = batch_loss_and_grad(
        kind, logits.astype(np.float64), payloads, config,
        None if logits_back is None else logits_back.astype(np.float64))
    if not math.isfinite(value):
        raise NonFiniteLoss(step, value)

    grads = model.backward(cache, g)
    if cache_rot is not None:
        grads = _add_grads(grads, model.backward(cache_rot, rotate90(g_back, 1, axes=(-2, -1))))
    if config.grad_clip:
        grads = clip_grads(grads, config.grad_clip)
    optimizer.step(model.params, grads, config.learning_rate if lr is None else lr)
    return L.total_loss({kind: value})


def size_at(config: TrainConfig, step: int) -> int:
    rng = np.random.default_rng([config.seed, 3, step])
    return int(config.size_set[rng.integers(len(config.size_set))])


def smooth_curve(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class TrainResult:
    model: PyramidSegNet
    history: TrainHistory
    checkpoint: Checkpoint
    checkpoint_path: Path | None = None
    final_val_dice: float | None = None
    extras: dict = field(default_factory=dict)


def load_model(path) -> PyramidSegNet:
    ckpt = load_checkpoint(path)
    return PyramidSegNet(ModelConfig.from_dict(ckpt.config["model"]), ckpt.params)


def _validate(model, val_sets) -> float:
    from .metrics import evaluate

    return evaluate(model, val_sets).wavg_dice


def train(config: TrainConfig, datasets: Sequence, val_sets=None, out_dir=None,
          resume: bool = False, progress: bool = False) -> TrainResult:
    """Run (or resume) training until ``config.iterations`` steps are done.

    ``datasets`` is a sequence of ``(kind, samples)``; ``val_sets`` a sequence
    of ``(name, pixel samples)`` used for periodic and final validation Dice.
    With ``out_dir`` set, ``checkpoint.mixsup`` and ``history.csv`` are written
    there at the checkpoint cadence and at the end; ``resume=True`` picks both
    up again.
    """
    config.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for kind, _ in datasets:
        if kind not in KINDS:
            raise ConfigError(f"unknown supervision kind {kind!r}")

    model_cfg = config.model_config()
    history = TrainHistory()
    start = 0
    if resume:
        if out is None or not (out / CHECKPOINT_NAME).exists():
            raise FileNotFoundError(f"no checkpoint to resume from in {out}")
        ckpt = load_checkpoint(out / CHECKPOINT_NAME)
        model_cfg = ModelConfig.from_dict(ckpt.config["model"])
        model = PyramidSegNet(model_cfg, ckpt.params)
        dt = model_cfg.np_dtype
        optimizer = SGD(config.momentum, {k: v.astype(dt) for k, v in ckpt.momentum.items()})
        start = ckpt.iteration
        if (out / HISTORY_NAME).exists():
            history = TrainHistory(r for r in TrainHistory.from_csv(out / HISTORY_NAME) if r.step < start)
        log.info("resuming at step %d", start)
    else:
        model = PyramidSegNet(model_cfg)
        optimizer = SGD(config.momentum)

    sampler = MixedSampler(datasets, config.batch_size, config.seed, config.kind_schedule)

    def snapshot(step):
        return Checkpoint({"model": model_cfg.to_dict(), "train": config.to_dict()},
                          model.params, step, optimizer.buffers)

    def persist(step):
        if out is None:
            return None
        path = save_checkpoint(out / CHECKPOINT_NAME, snapshot(step))
        history.to_csv(out / HISTORY_NAME)
        return path

    for step in range(start, config.iterations):
        kind, batch = sampler.batch_at(step)
        size = size_at(config, step)
        batch = [resize_sample(s, size, size) for s in batch]
        losses = train_step(model, batch, kind, optimizer, config, step,
                            learning_rate_at(config, step))
        history.append(HistoryRow(step, kind, losses))
        done = step + 1
        last = done == config.iterations
        if val_sets and ((config.val_every and done % config.val_every == 0) or last):
            history[-1].val_dice = _validate(model, val_sets)
        if progress and (done % 100 == 0 or last):
            log.info("step %d/%d kind=%s l_total=%.4f", done, config.iterations, kind, losses.l_total)
        if config.checkpoint_every and done % config.checkpoint_every == 0 and not last:
            persist(done)

    path = persist(config.iterations)
    final_dice = history[-1].val_dice if history else None
    return TrainResult(model, history, snapshot(config.iterations), path, final_dice)
