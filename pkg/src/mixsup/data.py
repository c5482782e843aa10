"""Datasets, weak-label derivation, mixed-kind batch sampling and resizing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from . import annotations as ann
from . import kernels
from .annotations import BoxLabel, PointLabel, ScribbleLabel
from .errors import (CorruptImage, EmptyDataset, MissingAnnotation, OutOfBounds,
                     SizeMismatch)
from .losses import KINDS

log = logging.getLogger(__name__)

Payload = Union[np.ndarray, BoxLabel, ScribbleLabel, PointLabel]

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
ANNOTATION_DIRS = {
    "pixel": ("masks", ".png"),
    "polygon": ("masks", ".png"),
    "box": ("boxes", ".json"),
    "scribble": ("scribbles", ".png"),
    "point": ("points", ".json"),
}

DESK_SIZE_SET = (64, 80, 96)
FULL_SIZE_SET = (256, 288, 320, 352)


@dataclass(frozen=True, eq=False)
class LabeledSample:
    image: np.ndarray          # H x W x 3, float64 in [0, 1]
    kind: str
    payload: Payload
    source_dataset: str = ""
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown supervision kind {self.kind!r}")
        check_payload(self.kind, self.payload, *self.image.shape[:2])

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    root: str
    kind: str
    count: int
    role: str = "train"

    def __post_init__(self):
        if self.count <= 0:
            raise EmptyDataset(f"dataset {self.name!r} is empty")
        if self.role not in ("train", "test"):
            raise ValueError(f"role must be train or test, got {self.role!r}")
        if self.role == "test" and self.kind != "pixel":
            raise ValueError("test datasets need dense (pixel) ground truth")


def check_payload(kind: str, payload, height: int, width: int) -> None:
    if kind in ("pixel", "polygon"):
        if not isinstance(payload, np.ndarray) or payload.shape != (height, width):
            raise SizeMismatch(f"{kind} mask must be a {height}x{width} array")
    elif kind == "box":
        if not isinstance(payload, BoxLabel):
            raise TypeError("box payload must be a BoxLabel")
        payload.check(height, width)
    elif kind == "scribble":
        if not isinstance(payload, ScribbleLabel) or payload.shape != (height, width):
            raise SizeMismatch(f"scribble must be a {height}x{width} ScribbleLabel")
    elif kind == "point":
        if not isinstance(payload, PointLabel):
            raise TypeError("point payload must be a PointLabel")
        payload.check(height, width)


# ----------------------------------------------------------------------------
# folder datasets
# ----------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise CorruptImage(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def save_image(image, path) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _load_payload(kind, path):
    if kind in ("pixel", "polygon"):
        return ann.load_mask_png(path)
    if kind == "scribble":
        return ann.load_scribble_png(path)
    try:
        return ann.load_box_json(path) if kind == "box" else ann.load_points_json(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptImage(f"cannot parse annotation {path}: {exc}") from exc


def load_folder_dataset(root, kind: str, name: str | None = None) -> list[LabeledSample]:
    """Pair ``<root>/images/*`` with the kind's annotation files by stem."""
    if kind not in KINDS:
        raise ValueError(f"unknown supervision kind {kind!r}")
    root = Path(root)
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise MissingAnnotation(f"no images/ directory under {root}")
    sub, suffix = ANNOTATION_DIRS[kind]
    name = name or root.name
    samples = []
    for path in sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        ann_path = root / sub / f"{path.stem}{suffix}"
        if not ann_path.is_file():
            raise MissingAnnotation(f"missing annotation {ann_path} for image {path.name}")
        image = load_image(path)
        payload = _load_payload(kind, ann_path)
        try:
            check_payload(kind, payload, *image.shape[:2])
        except OutOfBounds as exc:
            raise SizeMismatch(f"{ann_path}: {exc}") from exc
        except SizeMismatch as exc:
            raise SizeMismatch(f"{ann_path} does not match {path.name}: {exc}") from exc
        samples.append(LabeledSample(image, kind, payload, name, path.stem))
    if not samples:
        raise EmptyDataset(f"no images found in {image_dir}")
    return samples


def save_folder_dataset(samples: Sequence[LabeledSample], root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = s.name or f"{i:05d}"
        save_image(s.image, root / "images" / f"{stem}.png")
        sub, suffix = ANNOTATION_DIRS[s.kind]
        (root / sub).mkdir(exist_ok=True)
        out = root / sub / f"{stem}{suffix}"
        if s.kind in ("pixel", "polygon"):
            ann.save_mask_png(s.payload, out)
        elif s.kind == "scribble":
            ann.save_scribble_png(s.payload, out)
        elif s.kind == "box":
            ann.save_box_json(s.payload, out)
        else:
            ann.save_points_json(s.payload, out)


# ----------------------------------------------------------------------------
# synthetic blobs
# ----------------------------------------------------------------------------

def _smooth_field(rng, h, w, sigma):
    f = ndimage.gaussian_filter(rng.normal(size=(h, w)), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _blob_mask(rng, h, w):
    short = min(h, w)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    while True:
        r = rng.uniform(0.08, 0.40) * short
        aspect = rng.uniform(0.65, 1.0)
        theta = rng.uniform(0.0, np.pi)
        amps = rng.uniform(0.0, 0.06, size=3)
        phases = rng.uniform(0.0, 2 * np.pi, size=3)
        cy = rng.uniform(min(r, h / 2), max(h - r, h / 2))
        cx = rng.uniform(min(r, w / 2), max(w - r, w / 2))
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / aspect
        phi = np.arctan2(v, u)
        boundary = r * (1.0 + sum(a * np.cos(k * phi + ph)
                                  for k, a, ph in zip((2, 3, 4), amps, phases)))
        mask = np.hypot(u, v) <= boundary
        labels, n = ndimage.label(mask)
        if n > 1:
            mask = labels == (np.argmax(np.bincount(labels.ravel())[1:]) + 1)
        frac = mask.mean()
        if 0.005 <= frac <= 0.6:
            return mask.astype(np.uint8)


def synth_blob_image(rng, height: int, width: int):
    mask = _blob_mask(rng, height, width)
    base = np.array([0.55, 0.32, 0.28]) + rng.uniform(-0.08, 0.08, size=3)
    tint = np.array([0.20, 0.12, 0.08]) * rng.uniform(0.8, 1.3)
    background = 0.07 * _smooth_field(rng, height, width, rng.uniform(3.0, 8.0))
    texture = 0.04 * _smooth_field(rng, height, width, 1.5)
    soft = ndimage.gaussian_filter(mask.astype(np.float64), 0.7)
    image = (base[None, None, :] + background[..., None]
             + soft[..., None] * (tint[None, None, :] + texture[..., None]))
    image += rng.normal(0.0, 0.015, size=image.shape)
    return np.clip(image, 0.0, 1.0), mask


def synth_blob_dataset(n: int, height: int, width: int, seed: int,
                       name: str = "synthetic") -> list[LabeledSample]:
    """``n`` textured images with one perturbed-ellipse blob each (pixel kind)."""
    if n <= 0:
        raise EmptyDataset("n must be positive")
    if height % 16 or width % 16:
        raise ValueError("height and width must be divisible by 16")
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        image, mask = synth_blob_image(rng, height, width)
        out.append(LabeledSample(image, "pixel", mask, name, f"{name}_{i:05d}"))
    return out


# ----------------------------------------------------------------------------
# weak labels
# ----------------------------------------------------------------------------

def _sample_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def weak_payload(mask, kind: str, seed: int, max_vertices: int = 16, k_fg: int = 5,
                 k_bg: int = 5):
    if kind == "pixel":
        return ann.as_mask(mask)
    if kind == "polygon":
        return ann.mask_to_polygon(mask, max_vertices)
    if kind == "box":
        return ann.mask_to_box(mask)
    if kind == "scribble":
        return ann.mask_to_scribble(mask, seed)
    if kind == "point":
        return ann.mask_to_points(mask, k_fg, k_bg, seed)
    raise ValueError(f"unknown supervision kind {kind!r}")


def derive_weak_dataset(dense: Sequence[LabeledSample], kind: str, seed: int = 0,
                        **kwargs) -> list[LabeledSample]:
    out = []
    for i, s in enumerate(dense):
        if s.kind != "pixel":
            raise ValueError(f"sample {s.name or i} is {s.kind}-kind, expected pixel")
        payload = weak_payload(s.payload, kind, _sample_seed(seed, i), **kwargs)
        out.append(replace(s, kind=kind, payload=payload))
    return out


# ----------------------------------------------------------------------------
# resizing
# ----------------------------------------------------------------------------

def _nearest_index(n_in, n_out):
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def resize_nearest(grid, out_h: int, out_w: int):
    g = np.asarray(grid)
    return g[_nearest_index(g.shape[0], out_h)][:, _nearest_index(g.shape[1], out_w)]


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def resize_box(box: BoxLabel, in_hw, out_hw) -> BoxLabel:
    sy = out_hw[0] / in_hw[0]
    sx = out_hw[1] / in_hw[1]
    r0 = min(_round_half_up(box.row_min * sy), out_hw[0] - 1)
    c0 = min(_round_half_up(box.col_min * sx), out_hw[1] - 1)
    r1 = min(max(_round_half_up((box.row_max + 1) * sy) - 1, r0), out_hw[0] - 1)
    c1 = min(max(_round_half_up((box.col_max + 1) * sx) - 1, c0), out_hw[1] - 1)
    return BoxLabel(r0, c0, r1, c1)


def resize_points(points: PointLabel, in_hw, out_hw) -> PointLabel:
    sy = out_hw[0] / in_hw[0]
    sx = out_hw[1] / in_hw[1]

    def move(pts):
        return tuple((min(_round_half_up(r * sy), out_hw[0] - 1),
                      min(_round_half_up(c * sx), out_hw[1] - 1)) for r, c in pts)

    return PointLabel(move(points.fg), move(points.bg))


def resize_sample(sample: LabeledSample, out_h: int, out_w: int | None = None) -> LabeledSample:
    out_w = out_h if out_w is None else out_w
    in_hw = sample.size
    if in_hw == (out_h, out_w):
        return sample
    image = kernels.resize_bilinear(sample.image.transpose(2, 0, 1), out_h, out_w).transpose(1, 2, 0)
    image = np.clip(image, 0.0, 1.0)
    p = sample.payload
    if sample.kind in ("pixel", "polygon"):
        payload = resize_nearest(p, out_h, out_w)
    elif sample.kind == "scribble":
        payload = ScribbleLabel(resize_nearest(p.grid, out_h, out_w))
    elif sample.kind == "box":
        payload = resize_box(p, in_hw, (out_h, out_w))
    else:
        payload = resize_points(p, in_hw, (out_h, out_w))
    return replace(sample, image=image, payload=payload)


def random_resize(sample: LabeledSample, size_set: Sequence[int], rng) -> LabeledSample:
    """Square resize to a side drawn uniformly from ``size_set``."""
    if any(s % 16 for s in size_set):
        raise ValueError("all sizes must be divisible by 16")
    s = int(rng.choice(np.asarray(size_set)))
    return resize_sample(sample, s, s)


# ----------------------------------------------------------------------------
# mixed-kind sampling
# ----------------------------------------------------------------------------

class MixedSampler:
    """Single-kind batches with kinds visited round-robin.

    The batch at step ``t`` is a pure function of ``(seed, t)``, so a sampler
    can be restarted at any step (checkpoint resume) and reproduce the same
    stream.  Within a kind, samples are drawn in shuffled epochs without
    replacement; epochs are concatenated, so a batch may straddle two epochs.
    ``schedule="proportional"`` draws the kind of each step with probability
    proportional to its pool size instead.
    """

    def __init__(self, datasets, batch_size: int, seed: int = 0,
                 schedule: str = "round_robin"):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if schedule not in ("round_robin", "proportional"):
            raise ValueError(f"unknown schedule {schedule!r}")
        pools: dict[str, list] = {}
        for kind, samples in datasets:
            pools.setdefault(kind, []).extend(samples)
        if not pools:
            raise EmptyDataset("no datasets given")
        for kind, pool in pools.items():
            if not pool:
                raise EmptyDataset(f"dataset of kind {kind!r} is empty")
        self.kinds = tuple(pools)
        self.pools = {k: tuple(v) for k, v in pools.items()}
        self.batch_size = batch_size
        self.seed = seed
        self.schedule = schedule
        self._kind_log: list[tuple[int, int]] = []
        self._perms: dict[tuple[int, int], np.ndarray] = {}

    def _kind_index(self, step: int) -> tuple[int, int]:
        """(kind index, number of earlier batches of that kind)."""
        n = len(self.kinds)
        if self.schedule == "round_robin":
            return step % n, step // n
        sizes = np.array([len(self.pools[k]) for k in self.kinds], dtype=np.float64)
        counts = [0] * n
        for k, _ in self._kind_log:
            counts[k] += 1
        while len(self._kind_log) <= step:
            t = len(self._kind_log)
            rng = np.random.default_rng([self.seed, 2, t])
            k = int(rng.choice(n, p=sizes / sizes.sum()))
            self._kind_log.append((k, counts[k]))
            counts[k] += 1
        return self._kind_log[step]

    def _permutation(self, kind_index: int, epoch: int) -> np.ndarray:
        key = (kind_index, epoch)
        if key not in self._perms:
            if len(self._perms) > 64:
                self._perms.clear()
            n = len(self.pools[self.kinds[kind_index]])
            rng = np.random.default_rng([self.seed, 1, kind_index, epoch])
            self._perms[key] = rng.permutation(n)
        return self._perms[key]

    def batch_at(self, step: int) -> tuple[str, list[LabeledSample]]:
        k, j = self._kind_index(step)
        pool = self.pools[self.kinds[k]]
        n = len(pool)
        batch = []
        for q in range(j * self.batch_size, (j + 1) * self.batch_size):
            batch.append(pool[self._permutation(k, q // n)[q % n]])
        return self.kinds[k], batch

    def iterate(self, start: int = 0) -> Iterator[tuple[str, list[LabeledSample]]]:
        step = start
        while True:
            yield self.batch_at(step)
            step += 1

    def __iter__(self):
        return self.iterate(0)


def mixed_sampler(datasets, batch_size: int, seed: int = 0,
                  schedule: str = "round_robin") -> MixedSampler:
    return MixedSampler(datasets, batch_size, seed, schedule)
