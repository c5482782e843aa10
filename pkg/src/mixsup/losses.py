"""Supervision losses for the five annotation kinds.

Each loss comes in two flavours: ``<name>(...)`` returns the scalar value and
``<name>_and_grad(...)`` additionally returns the gradient with respect to the
logits of the prediction map(s).  Gradients are derived by hand; the
finite-difference suite in :mod:`mixsup.gradcheck` keeps them honest.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

from . import kernels
from .annotations import BoxLabel, PointLabel, ScribbleLabel, rasterize_box
from .errors import NoLabeledPixels, ShapeMismatch

EPS = 1e-7
DICE_SMOOTH = 1.0

KINDS = ("pixel", "polygon", "box", "scribble", "point")


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True, eq=False)
class PredictionMap:
    """Foreground probabilities together with the logits they came from."""

    logits: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_logits(cls, logits) -> "PredictionMap":
        z = np.asarray(logits, dtype=np.float64)
        return cls(z, sigmoid(z))

    @classmethod
    def from_probs(cls, probs) -> "PredictionMap":
        p = np.asarray(probs, dtype=np.float64)
        return cls(logit(p), p)

    @property
    def shape(self):
        return self.probs.shape


@dataclass
class LossBreakdown:
    l_pixel: float = 0.0
    l_polygon: float = 0.0
    l_box: float = 0.0
    l_scribble: float = 0.0
    l_points: float = 0.0
    l_total: float = 0.0

    def components(self) -> tuple[float, ...]:
        return (self.l_pixel, self.l_polygon, self.l_box, self.l_scribble, self.l_points)

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_FIELD_FOR_KIND = {"pixel": "l_pixel", "polygon": "l_polygon", "box": "l_box",
                   "scribble": "l_scribble", "point": "l_points"}


def total_loss(terms: Mapping[str, float]) -> LossBreakdown:
    """Unweighted sum of per-kind losses; kinds absent from ``terms`` count as 0."""
    out = LossBreakdown()
    for kind, value in terms.items():
        if kind not in _FIELD_FOR_KIND:
            raise KeyError(f"unknown supervision kind {kind!r}")
        setattr(out, _FIELD_FOR_KIND[kind], float(value))
    p = out.components()
    out.l_total = p[0] + p[1] + p[2] + p[3] + p[4]
    return out


def loss_field(kind: str) -> str:
    return _FIELD_FOR_KIND[kind]


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------

def _probs(pred) -> np.ndarray:
    if isinstance(pred, PredictionMap):
        return pred.probs
    return np.asarray(pred, dtype=np.float64)


def _check_shape(a, b, what="target"):
    if a.shape != b.shape:
        raise ShapeMismatch(f"prediction shape {a.shape} != {what} shape {b.shape}")


def _to_logit_grad(p, gp):
    # sigmoid'(z) = p (1 - p)
    return gp * p * (1.0 - p)


def _bce_terms(p, t):
    """Per-pixel BCE value and d/dp with clamping (zero slope where clamped)."""
    pc = np.clip(p, EPS, 1.0 - EPS)
    val = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    inside = (p >= EPS) & (p <= 1.0 - EPS)
    grad = np.where(inside, -t / pc + (1.0 - t) / (1.0 - pc), 0.0)
    return val, grad


def _bce_p(p, t):
    val, grad = _bce_terms(p, t)
    n = p.size
    return float(val.sum() / n), grad / n


def _dice_p(p, t):
    inter = float((p * t).sum())
    denom = float(p.sum() + t.sum()) + DICE_SMOOTH
    num = 2.0 * inter + DICE_SMOOTH
    grad = -(2.0 * t * denom - num) / denom ** 2
    return 1.0 - num / denom, grad


def _dense_p(p, t):
    vb, gb = _bce_p(p, t)
    vd, gd = _dice_p(p, t)
    return vb + vd, gb + gd


def _uncertainty_terms(p):
    pc = np.clip(p, EPS, 1.0 - EPS)
    a = -np.log(pc)
    b = -np.log1p(-pc)
    val = np.minimum(a, b)
    inside = (p >= EPS) & (p <= 1.0 - EPS)
    grad = np.where(a <= b, -1.0 / pc, 1.0 / (1.0 - pc))
    return val, np.where(inside, grad, 0.0)


# ----------------------------------------------------------------------------
# dense supervision
# ----------------------------------------------------------------------------

def bce_loss(pred, target) -> float:
    return bce_loss_and_grad(pred, target)[0]


def bce_loss_and_grad(pred, target):
    p = _probs(pred)
    t = np.asarray(target, dtype=np.float64)
    _check_shape(p, t)
    v, gp = _bce_p(p, t)
    return v, _to_logit_grad(p, gp)


def dice_loss(pred, target) -> float:
    return dice_loss_and_grad(pred, target)[0]


def dice_loss_and_grad(pred, target):
    p = _probs(pred)
    t = np.asarray(target, dtype=np.float64)
    _check_shape(p, t)
    v, gp = _dice_p(p, t)
    return v, _to_logit_grad(p, gp)


def dense_loss(pred, target) -> float:
    return dense_loss_and_grad(pred, target)[0]


def dense_loss_and_grad(pred, target):
    """BCE + Dice; shared by pixel-level and polygon-level samples."""
    p = _probs(pred)
    t = np.asarray(target, dtype=np.float64)
    _check_shape(p, t)
    v, gp = _dense_p(p, t)
    return v, _to_logit_grad(p, gp)


# ----------------------------------------------------------------------------
# box supervision
# ----------------------------------------------------------------------------

def m2b(pred) -> PredictionMap:
    """Box-shaped map min(row_max[i], col_max[j]) of a probability map."""
    b = kernels.m2b_forward(_probs(pred))[0]
    return PredictionMap.from_probs(b)


def box_loss(pred, box: BoxLabel) -> float:
    return box_loss_and_grad(pred, box)[0]


def box_loss_and_grad(pred, box: BoxLabel):
    p = _probs(pred)
    target = rasterize_box(box, *p.shape).astype(np.float64)
    b, row_arg, col_arg, take_row = kernels.m2b_forward(p)
    v, gb = _dense_p(b, target)
    gp = kernels.m2b_backward(gb, row_arg, col_arg, take_row)
    return v, _to_logit_grad(p, gp)


# ----------------------------------------------------------------------------
# scribble supervision
# ----------------------------------------------------------------------------

def uncertainty_loss(p):
    """min(-log p, -log(1-p)), elementwise; returns a float for scalar input."""
    val, _ = _uncertainty_terms(np.asarray(p, dtype=np.float64))
    return float(val) if val.ndim == 0 else val


def scribble_loss(pred, scribble: ScribbleLabel, lambda_u: float = 1.0) -> float:
    return scribble_loss_and_grad(pred, scribble, lambda_u)[0]


def scribble_loss_and_grad(pred, scribble: ScribbleLabel, lambda_u: float = 1.0):
    """Mean BCE on labeled pixels + lambda_u * mean uncertainty on the rest."""
    p = _probs(pred)
    _check_shape(p, scribble.grid, "scribble")
    labeled = scribble.labeled
    n_lab = int(labeled.sum())
    if n_lab == 0:
        raise NoLabeledPixels("scribble has no labeled pixel")
    t = scribble.fg.astype(np.float64)

    bval, bgrad = _bce_terms(p, t)
    value = float(bval[labeled].sum() / n_lab)
    gp = np.where(labeled, bgrad / n_lab, 0.0)

    unlabeled = ~labeled
    n_unl = int(unlabeled.sum())
    if n_unl and lambda_u:
        uval, ugrad = _uncertainty_terms(p)
        value += lambda_u * float(uval[unlabeled].sum() / n_unl)
        gp = gp + np.where(unlabeled, lambda_u * ugrad / n_unl, 0.0)
    return value, _to_logit_grad(p, gp)


# ----------------------------------------------------------------------------
# point supervision
# ----------------------------------------------------------------------------

def consistency_loss(pred_a, pred_b) -> float:
    return consistency_loss_and_grad(pred_a, pred_b)[0]


def consistency_loss_and_grad(pred_a, pred_b):
    a = _probs(pred_a)
    b = _probs(pred_b)
    _check_shape(a, b, "second prediction")
    d = a - b
    n = d.size
    ga = 2.0 * d / n
    return float((d * d).sum() / n), _to_logit_grad(a, ga), _to_logit_grad(b, -ga)


def point_loss(pred, pred_rot_back, points: PointLabel, lambda_p: float = 1.0,
               lambda_c: float = 1.0) -> float:
    return point_loss_and_grad(pred, pred_rot_back, points, lambda_p, lambda_c)[0]


def point_loss_and_grad(pred, pred_rot_back, points: PointLabel, lambda_p: float = 1.0,
                        lambda_c: float = 1.0):
    """Rotation consistency + lambda_p * mean BCE at the annotated points.

    Returns ``(value, grad_pred, grad_pred_rot_back)``.  ``lambda_p = 0`` gives
    the pure consistency form; ``lambda_c`` scales the consistency term.
    """
    p = _probs(pred)
    q = _probs(pred_rot_back)
    _check_shape(p, q, "rotated-back prediction")
    points.check(*p.shape)

    cval, ga, gb = consistency_loss_and_grad(p, q)
    value = lambda_c * cval
    ga = lambda_c * ga
    gb = lambda_c * gb

    coords = points.fg + points.bg
    if lambda_p and coords:
        rows = np.array([r for r, _ in coords], dtype=np.int64)
        cols = np.array([c for _, c in coords], dtype=np.int64)
        t = np.array([1.0] * len(points.fg) + [0.0] * len(points.bg))
        pv = p[rows, cols]
        val, grad = _bce_terms(pv, t)
        n = len(coords)
        value += lambda_p * float(val.sum() / n)
        gp = np.zeros_like(p)
        np.add.at(gp, (rows, cols), lambda_p * grad / n)
        ga = ga + _to_logit_grad(p, gp)
    return value, ga, gb
