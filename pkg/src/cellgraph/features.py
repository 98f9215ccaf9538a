"""Convolutional feature extractor and the samplers that turn its stride-4
feature map into per-node and per-edge embeddings.

The extractor is a small encoder-decoder: four conv stages (strides
2, 2, 1, 1, so the map ends up at 1/4 resolution) and three decoder stages
with additive skips.  The next-to-last decoder output is the feature map
used for graph embeddings; the last layer predicts coarse semantic
segmentation logits for the auxiliary pixel losses.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError
from .tensor import Tensor


def init_backbone(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fan-in uniform init for all conv weights and biases."""
    c, s, b = cfg.width, cfg.stem_width, cfg.num_classes

    def conv(name, cout, cin, kh, kw):
        bound = 1.0 / np.sqrt(cin * kh * kw)
        params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (cout, cin, kh, kw)), requires_grad=True)
        params[f"{name}.b"] = Tensor(rng.uniform(-bound, bound, (cout, 1, 1)), requires_grad=True)

    params: dict[str, Tensor] = {}
    conv("backbone.enc1", s, 3, 3, 3)
    conv("backbone.enc2", c, s, 3, 3)
    conv("backbone.enc3", c, c, 3, 3)
    conv("backbone.enc4", c, c, 3, 3)
    conv("backbone.dec1", c, c, 3, 3)
    conv("backbone.dec2", c, c, 3, 3)
    conv("backbone.seg", b + 1, c, 1, 1)
    return params


def extract(image: Tensor, params: dict[str, Tensor], cfg: ModelConfig):
    """Run the extractor; returns (feature map C x H/4 x W/4, segmentation
    logits (B+1) x H/4 x W/4).  H and W must be divisible by 4."""
    _, h, w = image.data.shape
    if h % 4 or w % 4:
        raise ConfigError(f"input spatial dims must be divisible by 4, got {h}x{w}")

    def block(x, name, stride):
        y = T.conv2d(x, params[f"{name}.w"], stride=stride, pad=1)
        return T.relu(T.add(y, params[f"{name}.b"]))

    e1 = block(image, "backbone.enc1", 2)
    e2 = block(e1, "backbone.enc2", 2)
    e3 = block(e2, "backbone.enc3", 1)
    e4 = block(e3, "backbone.enc4", 1)

    d1 = T.conv2d(e4, params["backbone.dec1.w"], stride=1, pad=1)
    d1 = T.relu(T.add(T.add(d1, params["backbone.dec1.b"]), e3))
    d2 = T.conv2d(d1, params["backbone.dec2.w"], stride=1, pad=1)
    f = T.relu(T.add(T.add(d2, params["backbone.dec2.b"]), e2))

    seg = T.add(T.conv2d(f, params["backbone.seg.w"], stride=1, pad=0), params["backbone.seg.b"])
    return f, seg


def bilinear_sample(fmap: Tensor, points: np.ndarray) -> Tensor:
    """Sample feature vectors at input-pixel coordinates, one row per point.

    Coordinates are divided by 4 to land on the feature grid and clamped
    to its bounds; each sample blends the four surrounding grid vectors
    with the usual bilinear weights.  Differentiable w.r.t. the map, not
    the coordinates.
    """
    _, gh, gw = fmap.data.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    gx = np.clip(pts[:, 0] / 4.0, 0.0, gw - 1)
    gy = np.clip(pts[:, 1] / 4.0, 0.0, gh - 1)
    x0 = np.floor(gx).astype(np.intp)
    y0 = np.floor(gy).astype(np.intp)
    x1 = np.minimum(x0 + 1, gw - 1)
    y1 = np.minimum(y0 + 1, gh - 1)
    wx = (gx - x0)[:, None]
    wy = (gy - y0)[:, None]

    g00 = T.gather_pixels(fmap, y0, x0)
    g10 = T.gather_pixels(fmap, y0, x1)
    g01 = T.gather_pixels(fmap, y1, x0)
    g11 = T.gather_pixels(fmap, y1, x1)
    top = T.add(T.mul(g00, (1 - wx)), T.mul(g10, wx))
    bot = T.add(T.mul(g01, (1 - wx)), T.mul(g11, wx))
    return T.add(T.mul(top, (1 - wy)), T.mul(bot, wy))


def sinusoidal_position_codes(points: np.ndarray, width: int) -> np.ndarray:
    """Per-point positional code: a width/2 sinusoidal code for x followed
    by one for y, frequencies 10000^(-2t / (width/2))."""
    if width % 4:
        raise ConfigError(f"positional code width must be divisible by 4, got {width}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    half = width // 2
    t = np.arange(half // 2, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * t / half)

    out = np.empty((pts.shape[0], width), dtype=np.float64)
    for axis in (0, 1):
        phase = pts[:, axis : axis + 1] * freqs[None, :]
        out[:, axis * half + 0 : (axis + 1) * half : 2] = np.sin(phase)
        out[:, axis * half + 1 : (axis + 1) * half : 2] = np.cos(phase)
    return out


def edge_midpoints(centroids: np.ndarray, edge_list: np.ndarray) -> np.ndarray:
    """Arithmetic midpoint of each edge's endpoint centroids."""
    pts = np.asarray(centroids, dtype=np.float64)
    if edge_list.shape[0] == 0:
        return np.zeros((0, 2), dtype=np.float64)
    return 0.5 * (pts[edge_list[:, 0]] + pts[edge_list[:, 1]])
