"""Toy pyramid encoder-decoder with hand-written backprop.

Four strided stages (3x3 conv, group norm, ReLU, twice) produce features at
1/2, 1/4, 1/8 and 1/16 of the input.  The three coarser maps are projected to a common width with 1x1
convs, bilinearly brought to 1/4 resolution, summed, and a final 1x1 conv
gives one logit per pixel, which is upsampled to the input size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import BadSize
from .losses import PredictionMap

_INPUT_MEAN = 0.5
_INPUT_STD = 0.25
_STD_FLOOR = 1e-2
_GN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    fusion_channels: int = 32
    in_channels: int = 3
    input_size_divisor: int = 16
    input_norm: str = "image"   # "image": per-image channel standardisation; "fixed"
    norm_groups: int = 4        # group norm after every 3x3 conv; 0 turns it off
    dtype: str = "float32"      # parameter and activation precision
    seed: int = 0

    def __post_init__(self):
        sc = tuple(int(c) for c in self.stage_channels)
        if len(sc) != 4 or min(sc) <= 0:
            raise ValueError(f"stage_channels must be 4 positive ints, got {self.stage_channels}")
        if self.fusion_channels <= 0 or self.in_channels <= 0:
            raise ValueError("channel counts must be positive")
        if self.input_norm not in ("image", "fixed"):
            raise ValueError(f"unknown input_norm {self.input_norm!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.norm_groups < 0 or (self.norm_groups and any(c % self.norm_groups for c in sc)):
            raise ValueError(f"norm_groups={self.norm_groups} must divide every stage width")
        object.__setattr__(self, "stage_channels", sc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stage_channels"] = tuple(d["stage_channels"])
        return cls(**d)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    prev = config.in_channels
    for i, c in enumerate(config.stage_channels):
        for layer, cin in (("down", prev), ("conv", c)):
            shapes[f"stage{i}.{layer}.w"] = (c, cin, 3, 3)
            if config.norm_groups:
                shapes[f"stage{i}.{layer}.g"] = (c,)
            shapes[f"stage{i}.{layer}.b"] = (c,)
        prev = c
    f = config.fusion_channels
    for i in (1, 2, 3):
        shapes[f"proj{i}.w"] = (f, config.stage_channels[i])
        shapes[f"proj{i}.b"] = (f,)
    shapes["head.w"] = (1, f)
    shapes["head.b"] = (1,)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            p = np.zeros(shape)
        elif name.endswith(".g"):
            p = np.ones(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            # ReLU follows the encoder convs; the projections and head are linear
            gain = 2.0 if name.startswith("stage") else 1.0
            p = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
        params[name] = p.astype(config.np_dtype)
    return params


def rotate90(x, quarter_turns: int, axes=(0, 1)):
    """Counterclockwise rotation by ``quarter_turns`` * 90 degrees.

    ``axes`` selects the spatial axes; the default suits H x W (x C) grids, use
    ``(-2, -1)`` for NCHW batches.
    """
    if quarter_turns not in (0, 1, 2, 3):
        raise ValueError(f"quarter_turns must be in 0..3, got {quarter_turns}")
    if isinstance(x, PredictionMap):
        return PredictionMap(rotate90(x.logits, quarter_turns, axes),
                             rotate90(x.probs, quarter_turns, axes))
    return np.ascontiguousarray(np.rot90(x, quarter_turns, axes=axes))


# ----------------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------------

def _conv_forward(x, w, b, stride):
    """3x3 conv; ``b`` may be None (the following norm supplies the shift)."""
    k = w.shape[-1]
    pad = k // 2
    n, _, h, wd = x.shape
    ho = kernels.conv_out_size(h, k, stride, pad)
    wo = kernels.conv_out_size(wd, k, stride, pad)
    cols = kernels.im2col(x, k, stride, pad)
    out = np.matmul(w.reshape(w.shape[0], -1), cols)
    if b is not None:
        out += b[None, :, None]
    return out.reshape(n, w.shape[0], ho, wo), cols


def _conv_backward(g, x_shape, cols, w, stride, need_dx=True):
    k = w.shape[-1]
    n, cout = g.shape[:2]
    g2 = g.reshape(n, cout, -1)
    dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = g2.sum(axis=(0, 2))
    if not need_dx:
        return None, dw, db
    dcols = np.matmul(w.reshape(cout, -1).T, g2)
    dx = kernels.col2im(dcols, x_shape, k, stride, k // 2)
    return dx, dw, db


def _group_norm_forward(x, gamma, beta, groups):
    n, c, h, w = x.shape
    xg = x.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=2, keepdims=True) + _GN_EPS)
    xhat = (xc * inv).reshape(x.shape)
    return xhat * gamma[None, :, None, None] + beta[None, :, None, None], (xhat, inv)


def _group_norm_backward(g, saved, gamma, groups):
    xhat, inv = saved
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    n = g.shape[0]
    dxh = (g * gamma[None, :, None, None]).reshape(n, groups, -1)
    xh = xhat.reshape(n, groups, -1)
    dx = inv * (dxh - dxh.mean(axis=2, keepdims=True) - xh * (dxh * xh).mean(axis=2, keepdims=True))
    return dx.reshape(g.shape), dgamma, dbeta


def _pointwise_forward(x, w, b):
    n, c, h, wd = x.shape
    out = np.matmul(w, x.reshape(n, c, h * wd)) + b[None, :, None]
    return out.reshape(n, w.shape[0], h, wd)


def _pointwise_backward(g, x, w):
    n, c, h, wd = x.shape
    g2 = g.reshape(n, w.shape[0], h * wd)
    x2 = x.reshape(n, c, h * wd)
    dw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0)
    db = g2.sum(axis=(0, 2))
    dx = np.matmul(w.T, g2).reshape(x.shape)
    return dx, dw, db


# ----------------------------------------------------------------------------
# network
# ----------------------------------------------------------------------------

@dataclass
class ForwardCache:
    input_shape: tuple
    stage_inputs: list = field(default_factory=list)
    stage_cols: list = field(default_factory=list)
    stage_mids: list = field(default_factory=list)
    stage_norms: list = field(default_factory=list)
    features: list = field(default_factory=list)
    projected: list = field(default_factory=list)
    fused: np.ndarray | None = None
    quarter_logits_shape: tuple = ()


class PyramidSegNet:
    """Single-channel segmentation network; parameters live in ``self.params``."""

    def __init__(self, config: ModelConfig | None = None, params: dict | None = None):
        self.config = config or ModelConfig()
        if params is None:
            params = init_params(self.config)
        dt = self.config.np_dtype
        self.params = {k: v if v.dtype == dt else v.astype(dt) for k, v in params.items()}
        expected = param_shapes(self.config)
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, "
                                 f"expected {shape}")

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (N, {self.config.in_channels}, H, W) input, got {x.shape}")
        d = self.config.input_size_divisor
        if x.shape[2] % d or x.shape[3] % d:
            raise BadSize(f"input size {x.shape[2]}x{x.shape[3]} is not divisible by {d}")

    def _normalize(self, x):
        if self.config.input_norm == "fixed":
            return (x - _INPUT_MEAN) / _INPUT_STD
        mean = x.mean(axis=(2, 3), keepdims=True)
        std = x.std(axis=(2, 3), keepdims=True)
        return (x - mean) / (std + _STD_FLOOR)

    def _block(self, x, name, stride):
        """conv -> (group norm) -> ReLU"""
        p, groups = self.params, self.config.norm_groups
        if not groups:
            a, cols = _conv_forward(x, p[f"{name}.w"], p[f"{name}.b"], stride)
            return np.maximum(a, 0.0), cols, None
        a, cols = _conv_forward(x, p[f"{name}.w"], None, stride)
        a, saved = _group_norm_forward(a, p[f"{name}.g"], p[f"{name}.b"], groups)
        return np.maximum(a, 0.0), cols, saved

    def _block_backward(self, g, out, x_shape, cols, saved, name, stride, grads, need_dx=True):
        p, groups = self.params, self.config.norm_groups
        g = g * (out > 0)
        if saved is not None:
            g, grads[f"{name}.g"], grads[f"{name}.b"] = _group_norm_backward(
                g, saved, p[f"{name}.g"], groups)
        dx, grads[f"{name}.w"], db = _conv_backward(g, x_shape, cols, p[f"{name}.w"], stride, need_dx)
        if saved is None:
            grads[f"{name}.b"] = db
        return dx

    def forward(self, x, return_cache: bool = False):
        """Logits of shape (N, H, W) for an (N, C, H, W) batch in [0, 1]."""
        x = np.asarray(x, dtype=self.config.np_dtype)
        self._check_input(x)
        p = self.params
        cache = ForwardCache(input_shape=x.shape)
        h = self._normalize(x)
        for i in range(4):
            cache.stage_inputs.append(h)
            a, cols_down, n_down = self._block(h, f"stage{i}.down", 2)
            cache.stage_mids.append(a)
            h, cols_conv, n_conv = self._block(a, f"stage{i}.conv", 1)
            cache.stage_cols.append((cols_down, cols_conv))
            cache.stage_norms.append((n_down, n_conv))
            cache.features.append(h)

        qh, qw = cache.features[1].shape[-2:]
        fused = 0.0
        for i in (1, 2, 3):
            proj = _pointwise_forward(cache.features[i], p[f"proj{i}.w"], p[f"proj{i}.b"])
            cache.projected.append(proj)
            fused = fused + kernels.resize_bilinear(proj, qh, qw)
        cache.fused = fused
        quarter = _pointwise_forward(fused, p["head.w"], p["head.b"])[:, 0]
        cache.quarter_logits_shape = quarter.shape
        logits = kernels.resize_bilinear(quarter, x.shape[2], x.shape[3])
        return (logits, cache) if return_cache else logits

    def backward(self, cache: ForwardCache, dlogits) -> dict[str, np.ndarray]:
        p = self.params
        grads = {}
        dlogits = np.asarray(dlogits, dtype=self.config.np_dtype)
        qh, qw = cache.quarter_logits_shape[-2:]
        dq = kernels.resize_bilinear_backward(dlogits, qh, qw)[:, None]
        dfused, grads["head.w"], grads["head.b"] = _pointwise_backward(dq, cache.fused, p["head.w"])

        dfeat = [None, None, None, None]
        for i, proj in zip((1, 2, 3), cache.projected):
            dproj = kernels.resize_bilinear_backward(dfused, *proj.shape[-2:])
            dfeat[i], grads[f"proj{i}.w"], grads[f"proj{i}.b"] = _pointwise_backward(
                dproj, cache.features[i], p[f"proj{i}.w"])

        dh = None
        for i in (3, 2, 1, 0):
            g = dfeat[i] if dh is None else (dh if dfeat[i] is None else dh + dfeat[i])
            cols_down, cols_conv = cache.stage_cols[i]
            n_down, n_conv = cache.stage_norms[i]
            mid = cache.stage_mids[i]
            da = self._block_backward(g, cache.features[i], mid.shape, cols_conv, n_conv,
                                      f"stage{i}.conv", 1, grads)
            dh = self._block_backward(da, mid, cache.stage_inputs[i].shape, cols_down, n_down,
                                      f"stage{i}.down", 2, grads, need_dx=i > 0)
        return grads

    def stage_shapes(self, height: int, width: int) -> list[tuple[int, int]]:
        x = np.zeros((1, self.config.in_channels, height, width))
        _, cache = self.forward(x, return_cache=True)
        return [f.shape[-2:] for f in cache.features]

    def predict(self, image) -> PredictionMap:
        """Probability map for one H x W (x C) image."""
        logits = self.forward(image_to_batch([image], self.config.in_channels))[0]
        return PredictionMap.from_logits(logits.astype(np.float64))


def as_hwc(image, channels: int = 3) -> np.ndarray:
    im = np.asarray(image, dtype=np.float64)
    if im.ndim == 2:
        im = im[:, :, None]
    if im.shape[-1] == 1 and channels != 1:
        im = np.repeat(im, channels, axis=-1)
    return im[:, :, :channels]


def image_to_batch(images, in_channels: int = 3) -> np.ndarray:
    """Stack H x W (x C) images into an (N, C, H, W) array."""
    arr = np.stack([as_hwc(im, in_channels) for im in images])
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))
