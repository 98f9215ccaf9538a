"""Synthetic histology-like corpus: soft-edged nucleus blobs on a tissue-
colored background, with class-informative appearance and neighborhood.

Each nucleus gets a class either by copying its nearest already-placed
neighbor (probability ``cluster_strength``) or uniformly at random, so
graph context carries real signal whenever clustering is on.  Images are
quantized to the 8-bit grid at generation time, which makes PNG storage
lossless and the write/read round trip exact.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, CorpusError

CORPUS_FORMAT_VERSION = 1

# Two centroids can share a stride-4 mask cell only if they are closer than
# 4*sqrt(2); keeping the minimum spacing above that guarantees every
# nucleus owns at least its own mask cell.
_MIN_SPACING_FLOOR = 4.0 * math.sqrt(2.0)

_DEFAULT_COLORS = (
    (0.36, 0.22, 0.47),  # violet
    (0.20, 0.45, 0.30),  # green
    (0.55, 0.33, 0.18),  # brown
    (0.18, 0.30, 0.55),  # blue
    (0.55, 0.20, 0.30),  # red
    (0.45, 0.45, 0.18),  # olive
)


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float64 in [0, 1], on the 1/255 grid
    centroids: np.ndarray  # (n, 2) float64 pixel coords (x, y)
    labels: np.ndarray  # (n,) intp in 0..num_classes-1
    mask: np.ndarray  # (H/4, W/4) intp semantic map; background == num_classes
    seed: int

    @property
    def n(self) -> int:
        return self.centroids.shape[0]


@dataclass
class CorpusConfig:
    image_size: int = 64
    nuclei_range: tuple[int, int] = (20, 60)
    num_classes: int = 3
    radius_range: tuple[float, float] = (2.5, 4.5)
    class_colors: tuple[tuple[float, float, float], ...] | None = None
    color_jitter: float = 0.05
    pixel_noise: float = 0.02
    background: tuple[float, float, float] = (0.86, 0.80, 0.84)
    cluster_strength: float = 0.6
    label_noise: float = 0.0
    min_distance: float = 6.0
    margin: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size % 4:
            raise ConfigError(f"image_size must be divisible by 4, got {self.image_size}")
        if self.num_classes < 2 or self.num_classes > len(_DEFAULT_COLORS):
            raise ConfigError(f"num_classes must be in 2..{len(_DEFAULT_COLORS)}")
        if not (0.0 <= self.cluster_strength <= 1.0):
            raise ConfigError("cluster_strength must be in [0, 1]")
        if not (0.0 <= self.label_noise <= 1.0):
            raise ConfigError("label_noise must be in [0, 1]")
        if self.min_distance < _MIN_SPACING_FLOOR:
            raise ConfigError(
                f"min_distance must be >= {_MIN_SPACING_FLOOR:.3f} so every "
                "centroid keeps its own stride-4 mask cell"
            )
        if self.nuclei_range[0] < 1 or self.nuclei_range[0] > self.nuclei_range[1]:
            raise ConfigError(f"bad nuclei_range {self.nuclei_range}")

    def colors(self) -> np.ndarray:
        pal = self.class_colors or _DEFAULT_COLORS[: self.num_classes]
        return np.asarray(pal, dtype=np.float64)

    def to_dict(self) -> dict:
        d = {
            "image_size": self.image_size,
            "nuclei_range": list(self.nuclei_range),
            "num_classes": self.num_classes,
            "radius_range": list(self.radius_range),
            "class_colors": None if self.class_colors is None else [list(c) for c in self.class_colors],
            "color_jitter": self.color_jitter,
            "pixel_noise": self.pixel_noise,
            "background": list(self.background),
            "cluster_strength": self.cluster_strength,
            "label_noise": self.label_noise,
            "min_distance": self.min_distance,
            "margin": self.margin,
            "seed": self.seed,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        for key in ("nuclei_range", "radius_range", "background"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("class_colors") is not None:
            d["class_colors"] = tuple(tuple(c) for c in d["class_colors"])
        return cls(**d)


def _place_centroids(cfg: CorpusConfig, rng: np.random.Generator, n: int, seed: int) -> np.ndarray:
    lo, hi = cfg.margin, cfg.image_size - cfg.margin
    placed = np.empty((n, 2), dtype=np.float64)
    for i in range(n):
        for _ in range(500):
            p = rng.uniform(lo, hi, size=2)
            if i == 0 or np.min(np.hypot(*(placed[:i] - p).T)) >= cfg.min_distance:
                placed[i] = p
                break
        else:
            raise CorpusError(
                f"could not place nucleus {i + 1}/{n} at spacing "
                f"{cfg.min_distance} (seed {seed}); lower nuclei_range or min_distance"
            )
    return placed


def generate_sample(cfg: CorpusConfig, seed: int) -> Sample:
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    n = int(rng.integers(cfg.nuclei_range[0], cfg.nuclei_range[1] + 1))
    centroids = _place_centroids(cfg, rng, n, seed)

    labels = np.empty(n, dtype=np.intp)
    for i in range(n):
        if i > 0 and rng.random() < cfg.cluster_strength:
            nearest = int(np.argmin(np.hypot(*(centroids[:i] - centroids[i]).T)))
            labels[i] = labels[nearest]
        else:
            labels[i] = rng.integers(cfg.num_classes)
    if cfg.label_noise > 0:
        flip = rng.random(n) < cfg.label_noise
        labels[flip] = rng.integers(cfg.num_classes, size=int(flip.sum()))

    radii = rng.uniform(*cfg.radius_range, size=n)
    palette = cfg.colors()
    colors = np.clip(palette[labels] + rng.normal(0.0, cfg.color_jitter, (n, 3)), 0.05, 0.95)

    img = np.empty((3, size, size), dtype=np.float64)
    img[:] = np.asarray(cfg.background)[:, None, None]
    img += rng.normal(0.0, cfg.pixel_noise, img.shape)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    for i in range(n):
        cx, cy = centroids[i]
        r = radii[i]
        x0, x1 = max(0, int(cx - r) - 1), min(size, int(cx + r) + 2)
        y0, y1 = max(0, int(cy - r) - 1), min(size, int(cy + r) + 2)
        d2 = (xs[y0:y1, x0:x1] - cx) ** 2 + (ys[y0:y1, x0:x1] - cy) ** 2
        alpha = np.clip(1.0 - d2 / (r * r), 0.0, 1.0)
        patch = img[:, y0:y1, x0:x1]
        img[:, y0:y1, x0:x1] = patch * (1.0 - alpha) + colors[i][:, None, None] * alpha
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0

    # Stride-4 semantic mask: each cell takes the class of the strongest
    # blob at its center, background otherwise; centroid cells are then
    # pinned to their own class so every nucleus has mask support.
    h4 = size // 4
    cell_x = np.arange(h4) * 4.0 + 1.5
    cell_y = np.arange(h4) * 4.0 + 1.5
    gx, gy = np.meshgrid(cell_x, cell_y)
    best = np.zeros((h4, h4), dtype=np.float64)
    mask = np.full((h4, h4), cfg.num_classes, dtype=np.intp)
    for i in range(n):
        d2 = (gx - centroids[i, 0]) ** 2 + (gy - centroids[i, 1]) ** 2
        alpha = np.clip(1.0 - d2 / (radii[i] * radii[i]), 0.0, 1.0)
        stronger = alpha > best
        best[stronger] = alpha[stronger]
        mask[stronger & (alpha > 0.25)] = labels[i]
    cells = (centroids / 4.0).astype(np.intp)
    mask[cells[:, 1], cells[:, 0]] = labels

    return Sample(image=img, centroids=centroids, labels=labels, mask=mask, seed=seed)


def generate_corpus(cfg: CorpusConfig, count: int) -> list[Sample]:
    """Generate ``count`` samples with per-sample seeds derived from the
    config seed; CGT_THREADS > 1 parallelizes generation."""
    seeds = np.random.default_rng(cfg.seed).integers(0, 2**63 - 1, size=count)
    workers = int(os.environ.get("CGT_THREADS", "1"))
    if workers > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda s: generate_sample(cfg, int(s)), seeds))
    return [generate_sample(cfg, int(s)) for s in seeds]


def split(samples: list[Sample], fractions, seed: int):
    """Deterministic shuffled partition into (train, val, test)."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError(f"fractions must be 3 non-negative values summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n = len(samples)
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * (fractions[0] + fractions[1]))) - n_train
    parts = (
        [samples[i] for i in order[:n_train]],
        [samples[i] for i in order[n_train : n_train + n_val]],
        [samples[i] for i in order[n_train + n_val :]],
    )
    for name, frac, part in zip(("train", "val", "test"), fractions, parts):
        if frac > 0 and not part:
            warnings.warn(f"{name} split is empty ({frac} of {n} samples)")
    return parts


def class_counts(samples: list[Sample], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.labels, minlength=num_classes)
    return counts


# ---------------------------------------------------------------------------
# on-disk format: one directory per split, PNG image + JSON metadata per
# sample, plus an index.json with ids and class counts


def write_corpus(samples: list[Sample], directory, num_classes: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = []
    for i, s in enumerate(samples):
        sid = f"{i:05d}"
        ids.append(sid)
        rgb = (s.image * 255.0).round().astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(rgb, mode="RGB").save(directory / f"{sid}.png")
        meta = {
            "version": CORPUS_FORMAT_VERSION,
            "seed": s.seed,
            "centroids": s.centroids.tolist(),
            "labels": s.labels.tolist(),
            "mask": s.mask.tolist(),
        }
        with open(directory / f"{sid}.json", "w") as f:
            json.dump(meta, f)
            f.write("\n")
    index = {
        "version": CORPUS_FORMAT_VERSION,
        "ids": ids,
        "num_classes": num_classes,
        "class_counts": class_counts(samples, num_classes).tolist(),
    }
    with open(directory / "index.json", "w") as f:
        json.dump(index, f, indent=1)
        f.write("\n")


def read_corpus(directory) -> list[Sample]:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.exists():
        raise CorpusError(f"{directory}: missing index.json")
    with open(index_path) as f:
        index = json.load(f)
    if index.get("version") != CORPUS_FORMAT_VERSION:
        raise CorpusError(f"{index_path}: unsupported version {index.get('version')}")

    samples = []
    for sid in index["ids"]:
        meta_path = directory / f"{sid}.json"
        png_path = directory / f"{sid}.png"
        for p in (meta_path, png_path):
            if not p.exists():
                raise CorpusError(f"sample {sid}: missing file {p.name}")
        with open(meta_path) as f:
            try:
                meta = json.load(f)
            except json.JSONDecodeError as e:
                raise CorpusError(f"sample {sid}: bad metadata ({e})") from e
        for fieldname in ("version", "seed", "centroids", "labels", "mask"):
            if fieldname not in meta:
                raise CorpusError(f"sample {sid}: metadata missing field '{fieldname}'")
        img = np.asarray(Image.open(png_path).convert("RGB"), dtype=np.float64) / 255.0
        samples.append(
            Sample(
                image=img.transpose(2, 0, 1),
                centroids=np.asarray(meta["centroids"], dtype=np.float64).reshape(-1, 2),
                labels=np.asarray(meta["labels"], dtype=np.intp),
                mask=np.asarray(meta["mask"], dtype=np.intp),
                seed=int(meta["seed"]),
            )
        )
    return samples
