"""Finite-difference verification of the hand-derived loss gradients.

Used by ``mixsup loss-check`` and by the test-suite.  Inputs are random 8x8
logit maps, resampled until no probability sits within ``margin`` of a
max/min switching point (row/column maxima, the M2B min, the 0.5 kink of the
uncertainty loss), so central differences never straddle a kink.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import kernels
from . import losses as L
from .annotations import (SCRIBBLE_BG, SCRIBBLE_FG, SCRIBBLE_UNLABELED, BoxLabel, PointLabel,
                          ScribbleLabel, rasterize_box)

STEP = 1e-4
TOLERANCE = 1e-3
GRID = (8, 8)


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    trials: int
    detail: str = ""


def central_difference(f: Callable[[np.ndarray], float], z: np.ndarray, h: float = STEP):
    g = np.zeros_like(z)
    flat = z.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f(z)
        flat[k] = old - h
        fm = f(z)
        flat[k] = old
        gf[k] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def _kink_free(p, margin):
    if np.abs(p - 0.5).min() <= margin:
        return False
    b, row_arg, col_arg, _ = kernels.m2b_forward(p)
    srt_r = np.sort(p, axis=1)
    srt_c = np.sort(p, axis=0)
    if (srt_r[:, -1] - srt_r[:, -2]).min() <= margin or (srt_c[-1] - srt_c[-2]).min() <= margin:
        return False
    r = p.max(axis=1)
    c = p.max(axis=0)
    h, w = p.shape
    same = (row_arg[:, None] == np.arange(w)[None, :]) & (col_arg[None, :] == np.arange(h)[:, None])
    gap = np.abs(r[:, None] - c[None, :])
    return bool((gap[~same] > margin).all())


def tie_broken_logits(rng, shape=GRID, scale: float = 1.5, margin: float = 1e-4):
    while True:
        z = rng.normal(0.0, scale, size=shape)
        if _kink_free(L.sigmoid(z), margin):
            return z


def _random_box(rng, h, w):
    r0, r1 = np.sort(rng.integers(0, h, 2))
    c0, c1 = np.sort(rng.integers(0, w, 2))
    return BoxLabel(int(r0), int(c0), int(r1), int(c1))


def _random_scribble(rng, h, w):
    while True:
        grid = rng.choice([SCRIBBLE_FG, SCRIBBLE_BG, SCRIBBLE_UNLABELED], size=(h, w),
                          p=[0.15, 0.15, 0.7]).astype(np.int8)
        if (grid == SCRIBBLE_FG).any() and (grid == SCRIBBLE_BG).any() \
                and (grid == SCRIBBLE_UNLABELED).any():
            return ScribbleLabel(grid)


def _random_points(rng, h, w, k=5):
    flat = rng.choice(h * w, size=2 * k, replace=False)
    pts = [(int(i // w), int(i % w)) for i in flat]
    return PointLabel(tuple(pts[:k]), tuple(pts[k:]))


def _case(name, rng):
    """Return (logits, f) where f(logits) -> (value, grad wrt logits)."""
    h, w = GRID
    if name == "point":
        z = np.stack([tie_broken_logits(rng), tie_broken_logits(rng)])
        pts = _random_points(rng, h, w)

        def f(zz):
            v, ga, gb = L.point_loss_and_grad(L.PredictionMap.from_logits(zz[0]),
                                              L.PredictionMap.from_logits(zz[1]), pts)
            return v, np.stack([ga, gb])
        return z, f

    z = tie_broken_logits(rng)
    target = (rng.random(GRID) < 0.4).astype(np.float64)
    if name == "bce":
        return z, lambda zz: L.bce_loss_and_grad(L.PredictionMap.from_logits(zz), target)
    if name == "dice":
        return z, lambda zz: L.dice_loss_and_grad(L.PredictionMap.from_logits(zz), target)
    if name == "dense":
        return z, lambda zz: L.dense_loss_and_grad(L.PredictionMap.from_logits(zz), target)
    if name == "box":
        box = _random_box(rng, h, w)
        return z, lambda zz: L.box_loss_and_grad(L.PredictionMap.from_logits(zz), box)
    if name == "scribble":
        scr = _random_scribble(rng, h, w)
        return z, lambda zz: L.scribble_loss_and_grad(L.PredictionMap.from_logits(zz), scr)
    if name == "consistency":
        z = np.stack([tie_broken_logits(rng), tie_broken_logits(rng)])

        def f(zz):
            v, ga, gb = L.consistency_loss_and_grad(L.PredictionMap.from_logits(zz[0]),
                                                    L.PredictionMap.from_logits(zz[1]))
            return v, np.stack([ga, gb])
        return z, f
    raise KeyError(name)


LOSS_NAMES = ("bce", "dice", "dense", "box", "scribble", "consistency", "point")


def check_loss_gradients(seed: int = 0, trials: int = 100, names: Iterable[str] = LOSS_NAMES,
                         h: float = STEP, tol: float = TOLERANCE,
                         faults: Iterable[str] = ()) -> list[CheckResult]:
    """Compare analytic and central-difference gradients for each loss.

    ``faults`` names losses whose analytic gradient is deliberately corrupted
    (a self-test that the check can fail).
    """
    faults = set(faults)
    results = []
    for name in names:
        rng = np.random.default_rng([seed, LOSS_NAMES.index(name)])
        worst = 0.0
        for _ in range(trials):
            z, f = _case(name, rng)
            _, g = f(z)
            if name in faults:
                g = g * 1.05 + 1e-3
            fd = central_difference(lambda zz: f(zz)[0], z.copy(), h)
            worst = max(worst, relative_error(g, fd))
        results.append(CheckResult(f"grad:{name}", worst <= tol, worst, trials,
                                   f"max rel err {worst:.2e} (tol {tol:g})"))
    return results


def _random_rect_mask(rng, h, w):
    return rasterize_box(_random_box(rng, h, w), h, w).astype(np.float64)


def check_m2b_properties(seed: int = 0, trials: int = 1000) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 99])
    idem = dom = rect = perm = 0.0
    for _ in range(trials):
        h, w = rng.integers(2, 17, size=2)
        p = rng.random((h, w))
        b = L.m2b(p).probs
        bb = L.m2b(b).probs
        idem = max(idem, float(np.abs(bb - b).max()))
        dom = max(dom, float((p - b).max()))
        m = _random_rect_mask(rng, h, w)
        rect = max(rect, float(np.abs(L.m2b(m).probs - m).max()))
        pr = rng.permutation(h)
        pc = rng.permutation(w)
        perm = max(perm, float(np.abs(L.m2b(p[pr][:, pc]).probs - b[pr][:, pc]).max()))
    soft = L.m2b(np.array([[0.2, 0.8], [0.6, 0.1]])).probs
    soft_err = float(np.abs(soft - np.array([[0.6, 0.8], [0.6, 0.6]])).max())
    return [
        CheckResult("m2b:idempotent", idem <= 1e-12, idem, trials, f"max |m2b(m2b(P)) - m2b(P)| = {idem:.1e}"),
        CheckResult("m2b:dominance", dom <= 0.0, dom, trials, f"max (P - m2b(P)) = {dom:.1e}"),
        CheckResult("m2b:rectangles", rect == 0.0, rect, trials, f"max deviation on box masks = {rect:.1e}"),
        CheckResult("m2b:permutation", perm == 0.0, perm, trials, f"max deviation = {perm:.1e}"),
        CheckResult("m2b:2x2-example", soft_err <= 1e-12, soft_err, 1, f"max deviation = {soft_err:.1e}"),
    ]


def format_table(results: Iterable[CheckResult]) -> str:
    lines = [f"{'check':<22}{'trials':>8}  {'result':<6}  detail"]
    for r in results:
        lines.append(f"{r.name:<22}{r.trials:>8}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    return "\n".join(lines)
