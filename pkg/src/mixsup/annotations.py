"""Weak annotation synthesis from dense binary masks.

Every supervision regime can be exercised from a dense corpus: boxes are
tight bounding boxes, polygons are simplified outer contours, scribbles are
skeletons of the object and of a background ring, points are uniform draws.
All functions are pure given their ``rng_seed``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.morphology import skeletonize

from .errors import (CorruptImage, DegenerateContour, EmptyBackground, EmptyMask,
                     OutOfBounds)

log = logging.getLogger(__name__)

SCRIBBLE_BG = 0
SCRIBBLE_FG = 1
SCRIBBLE_UNLABELED = -1

_SCRIBBLE_PNG = {SCRIBBLE_BG: 0, SCRIBBLE_FG: 255, SCRIBBLE_UNLABELED: 128}


@dataclass(frozen=True)
class BoxLabel:
    """Inclusive pixel box."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    def as_list(self) -> list[int]:
        return [self.row_min, self.col_min, self.row_max, self.col_max]

    def check(self, height: int, width: int) -> None:
        if not (0 <= self.row_min <= self.row_max < height
                and 0 <= self.col_min <= self.col_max < width):
            raise OutOfBounds(f"box {self.as_list()} does not fit a {height}x{width} canvas")

    def contains(self, other: "BoxLabel") -> bool:
        return (self.row_min <= other.row_min and self.col_min <= other.col_min
                and self.row_max >= other.row_max and self.col_max >= other.col_max)


@dataclass(frozen=True, eq=False)
class ScribbleLabel:
    grid: np.ndarray  # int8, SCRIBBLE_* codes

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.int8)
        bad = ~np.isin(g, (SCRIBBLE_BG, SCRIBBLE_FG, SCRIBBLE_UNLABELED))
        if bad.any():
            raise ValueError("scribble grid holds values outside {FG, BG, UNLABELED}")
        object.__setattr__(self, "grid", g)

    @property
    def shape(self):
        return self.grid.shape

    @property
    def fg(self) -> np.ndarray:
        return self.grid == SCRIBBLE_FG

    @property
    def bg(self) -> np.ndarray:
        return self.grid == SCRIBBLE_BG

    @property
    def labeled(self) -> np.ndarray:
        return self.grid != SCRIBBLE_UNLABELED

    def __eq__(self, other):
        return isinstance(other, ScribbleLabel) and np.array_equal(self.grid, other.grid)


@dataclass(frozen=True)
class PointLabel:
    fg: tuple[tuple[int, int], ...]
    bg: tuple[tuple[int, int], ...]

    def check(self, height: int, width: int) -> None:
        for r, c in self.fg + self.bg:
            if not (0 <= r < height and 0 <= c < width):
                raise OutOfBounds(f"point ({r}, {c}) outside a {height}x{width} canvas")

    def to_json(self) -> dict:
        return {"fg": [list(p) for p in self.fg], "bg": [list(p) for p in self.bg]}


def as_mask(mask) -> np.ndarray:
    """Coerce to a uint8 {0,1} grid (anything nonzero is foreground)."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    return (m != 0).astype(np.uint8)


def _require_fg(m):
    if not m.any():
        raise EmptyMask("mask has no foreground pixel")


def _require_bg(m):
    if m.all():
        raise EmptyBackground("mask has no background pixel")


# ----------------------------------------------------------------------------
# boxes
# ----------------------------------------------------------------------------

def mask_to_box(mask) -> BoxLabel:
    m = as_mask(mask)
    _require_fg(m)
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    return BoxLabel(int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


def rasterize_box(box: BoxLabel, height: int, width: int) -> np.ndarray:
    box.check(height, width)
    out = np.zeros((height, width), dtype=np.uint8)
    out[box.row_min:box.row_max + 1, box.col_min:box.col_max + 1] = 1
    return out


# ----------------------------------------------------------------------------
# polygons
# ----------------------------------------------------------------------------

def largest_component(mask) -> np.ndarray:
    m = as_mask(mask)
    labels, n = ndimage.label(m, structure=np.ones((3, 3), dtype=int))
    if n <= 1:
        return m
    sizes = np.bincount(labels.ravel())[1:]
    return (labels == int(np.argmax(sizes)) + 1).astype(np.uint8)


def _segment_distances(pts, a, b):
    d = b - a
    denom = float(d @ d)
    if denom == 0.0:
        return np.linalg.norm(pts - a, axis=1)
    t = np.clip((pts - a) @ d / denom, 0.0, 1.0)
    return np.linalg.norm(pts - (a + t[:, None] * d), axis=1)


def simplify_closed_contour(pts: np.ndarray, max_vertices: int) -> np.ndarray:
    """Farthest-point insertion on a closed contour.

    Seeds with the point farthest from the centroid and the point farthest from
    that one, then repeatedly inserts the contour point with the largest
    distance to its current polygon edge.  Stops at ``max_vertices`` or once
    the polygon passes through every contour point exactly.
    """
    pts = np.asarray(pts, dtype=np.float64)
    n = len(pts)
    if n <= 2:
        return pts.copy()
    a = int(np.argmax(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
    b = int(np.argmax(np.linalg.norm(pts - pts[a], axis=1)))
    keep = sorted({a, b})
    while len(keep) < max_vertices:
        best_d, best_i = 0.0, -1
        for k, i in enumerate(keep):
            j = keep[(k + 1) % len(keep)]
            span = np.arange(i + 1, j if j > i else j + n) % n
            if len(span) == 0:
                continue
            d = _segment_distances(pts[span], pts[i], pts[j])
            m = int(np.argmax(d))
            if d[m] > best_d:
                best_d, best_i = float(d[m]), int(span[m])
        if best_i < 0 or best_d < 1e-9:
            break
        keep = sorted(keep + [best_i])
    return pts[keep]


def _polygon_area(v):
    x, y = v[:, 1], v[:, 0]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def rasterize_polygon(vertices: np.ndarray, height: int, width: int) -> np.ndarray:
    """Fill a polygon given as (row, col) vertices; edges are included."""
    out = np.zeros((height, width), dtype=np.uint8)
    xy = np.round(np.asarray(vertices)[:, ::-1]).astype(np.int32)
    cv2.fillPoly(out, [xy.reshape(-1, 1, 2)], 1)
    return out


def polygon_vertices(mask, max_vertices: int = 16) -> np.ndarray:
    """Simplified (row, col) outer contour of the largest foreground component.

    Raises DegenerateContour when the component has no area (point or line).
    """
    if max_vertices < 3:
        raise ValueError("max_vertices must be >= 3")
    comp = largest_component(mask)
    _require_fg(comp)
    contours, _ = cv2.findContours(comp, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    contour = max(contours, key=len).reshape(-1, 2)[:, ::-1]
    verts = simplify_closed_contour(contour, max_vertices)
    if len(verts) < 3 or _polygon_area(verts) == 0.0:
        raise DegenerateContour("foreground component has no interior")
    return verts


def mask_to_polygon(mask, max_vertices: int = 16, strict: bool = False) -> np.ndarray:
    m = as_mask(mask)
    _require_fg(m)
    try:
        verts = polygon_vertices(m, max_vertices)
    except DegenerateContour:
        if strict:
            raise
        comp = largest_component(m)
        return rasterize_box(mask_to_box(comp), *m.shape)
    return rasterize_polygon(verts, *m.shape)


# ----------------------------------------------------------------------------
# scribbles
# ----------------------------------------------------------------------------

def mask_to_scribble(mask, rng_seed: int = 0, max_fraction: float = 0.2) -> ScribbleLabel:
    m = as_mask(mask).astype(bool)
    _require_fg(m)
    _require_bg(m)
    rng = np.random.default_rng(rng_seed)

    fg = skeletonize(m)
    gap = int(rng.integers(2, 5))
    inner = ndimage.binary_dilation(m, iterations=gap)
    ring = ndimage.binary_dilation(m, iterations=gap + 3) & ~inner
    bg = skeletonize(ring) if ring.any() else np.zeros_like(m)
    if not bg.any():
        bg = skeletonize(~m)
    fg &= m
    bg &= ~m

    budget = max(2, int(max_fraction * m.size))
    if fg.sum() + bg.sum() > budget:
        fg, bg = _thin_labels(fg, bg, budget, rng)

    grid = np.full(m.shape, SCRIBBLE_UNLABELED, dtype=np.int8)
    grid[bg] = SCRIBBLE_BG
    grid[fg] = SCRIBBLE_FG
    return ScribbleLabel(grid)


def _thin_labels(fg, bg, budget, rng):
    nf, nb = int(fg.sum()), int(bg.sum())
    keep_f = max(1, round(budget * nf / (nf + nb)))
    keep_b = max(1, budget - keep_f)
    out = []
    for sel, k in ((fg, keep_f), (bg, keep_b)):
        idx = np.flatnonzero(sel)
        chosen = rng.choice(idx, size=min(k, len(idx)), replace=False)
        thin = np.zeros(sel.size, dtype=bool)
        thin[chosen] = True
        out.append(thin.reshape(sel.shape))
    return out[0], out[1]


# ----------------------------------------------------------------------------
# points
# ----------------------------------------------------------------------------

def mask_to_points(mask, k_fg: int = 5, k_bg: int = 5, rng_seed: int = 0) -> PointLabel:
    m = as_mask(mask)
    _require_fg(m)
    _require_bg(m)
    rng = np.random.default_rng(rng_seed)
    w = m.shape[1]

    def draw(flat_idx, k):
        picked = rng.choice(flat_idx, size=min(k, len(flat_idx)), replace=False)
        return tuple((int(i // w), int(i % w)) for i in picked)

    fg = draw(np.flatnonzero(m.ravel()), k_fg)
    bg = draw(np.flatnonzero(m.ravel() == 0), k_bg)
    return PointLabel(fg, bg)


# ----------------------------------------------------------------------------
# file formats
# ----------------------------------------------------------------------------

def load_mask_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise CorruptImage(f"cannot read mask {path}: {exc}") from exc
    return (arr > 127).astype(np.uint8)


def save_mask_png(mask, path) -> None:
    Image.fromarray(as_mask(mask) * np.uint8(255)).save(path)


def save_scribble_png(scribble: ScribbleLabel, path) -> None:
    out = np.zeros(scribble.shape, dtype=np.uint8)
    for code, value in _SCRIBBLE_PNG.items():
        out[scribble.grid == code] = value
    Image.fromarray(out).save(path)


def load_scribble_png(path) -> ScribbleLabel:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L")).astype(np.int16)
    except (OSError, ValueError) as exc:
        raise CorruptImage(f"cannot read scribble {path}: {exc}") from exc
    grid = np.full(arr.shape, SCRIBBLE_UNLABELED, dtype=np.int8)
    grid[arr < 64] = SCRIBBLE_BG
    grid[arr > 191] = SCRIBBLE_FG
    return ScribbleLabel(grid)


def save_box_json(box: BoxLabel, path) -> None:
    Path(path).write_text(json.dumps({"box": box.as_list()}) + "\n")


def load_box_json(path) -> BoxLabel:
    data = json.loads(Path(path).read_text())
    return BoxLabel(*(int(v) for v in data["box"]))


def save_points_json(points: PointLabel, path) -> None:
    Path(path).write_text(json.dumps(points.to_json()) + "\n")


def load_points_json(path) -> PointLabel:
    data = json.loads(Path(path).read_text())
    return PointLabel(tuple((int(r), int(c)) for r, c in data["fg"]),
                      tuple((int(r), int(c)) for r, c in data["bg"]))
