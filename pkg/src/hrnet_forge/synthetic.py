"""Deterministic synthetic datasets for the three toy tasks.

* segmentation: bright axis-aligned rectangles and disks on a dark
  background, mask labels exact by construction;
* landmarks: additive color blobs at known pixel coordinates (integer px,
  chosen so quarter-resolution cell fractions avoid .5 ties);
* classification: one dominant shape per image — disk / rectangle / cross.

Every sample is produced from an independent RNG stream derived from
(seed, stream tag, index), so datasets are reproducible element-wise and
regeneration does not depend on iteration order.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import imageio
from .tensor import ConfigError

_STREAM_DATA = 101

# fixed hue families so landmark identity k -> color is stable across images
_PALETTE = np.array([
    (255, 70, 70), (70, 255, 70), (80, 110, 255),
    (255, 255, 70), (255, 70, 255), (70, 255, 255),
    (255, 160, 40), (160, 255, 120),
], dtype=np.float64)


@dataclass
class Dataset:
    task: str
    images: np.ndarray                    # (n, h, w, 3) uint8
    masks: np.ndarray | None = None       # (n, h, w) uint8, segmentation
    coords: np.ndarray | None = None      # (n, L, 2) float64 (x, y), landmarks
    labels: np.ndarray | None = None      # (n,) int64, classification

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> tuple:
        return self.images.shape[1:3]


def _paint_disk(img, mask, cy, cx, radius, color, label):
    h, w = img.shape[:2]
    yy, xx = np.ogrid[:h, :w]
    hit = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    img[hit] = color
    if mask is not None:
        mask[hit] = label


def _paint_rect(img, mask, y0, x0, rh, rw, color, label):
    img[y0:y0 + rh, x0:x0 + rw] = color
    if mask is not None:
        mask[y0:y0 + rh, x0:x0 + rw] = label


def _finish(img, rng, noise):
    if noise > 0:
        img = img + rng.normal(0.0, noise * 255.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def seg_sample(rng, size, num_classes=2, noise=0.0):
    """One (image, mask) pair; 0 is background, shapes are labeled by kind
    (rectangles 1, disks 2 when there are three classes), so with K > 2 the
    class is determined by geometry rather than appearance."""
    h, w = size
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = rng.integers(0, 80, 3)
    mask = np.zeros((h, w), dtype=np.uint8)
    for _ in range(int(rng.integers(2, 5))):
        color = rng.integers(140, 256, 3)
        if rng.random() < 0.5:
            label = 1
            rh = int(rng.integers(h // 6, h // 2))
            rw = int(rng.integers(w // 6, w // 2))
            y0 = int(rng.integers(0, h - rh))
            x0 = int(rng.integers(0, w - rw))
            _paint_rect(img, mask, y0, x0, rh, rw, color, label)
        else:
            label = 1 + 1 % (num_classes - 1)
            radius = int(rng.integers(h // 8, h // 3))
            cy = int(rng.integers(radius, h - radius))
            cx = int(rng.integers(radius, w - radius))
            _paint_disk(img, mask, cy, cx, radius, color, label)
    return _finish(img, rng, noise), mask


def _landmark_coord(rng, extent):
    """Integer pixel coordinate with margin >= 8 whose quarter-res cell
    fraction lands in {0, .25, .75} (keeps nearest-cell rounding and decode
    tie-breaks away from the .5 boundary)."""
    cell = int(rng.integers(2, extent // 4 - 2))
    return 4 * cell + int(rng.choice((0, 1, 3)))


def landmark_sample(rng, size, num_landmarks, noise=0.0, min_dist=12.0):
    """One (image, coords) pair; coords are (x, y) pixels, blob k always
    drawn in palette family k so the heatmap channels are identifiable."""
    h, w = size
    if h < 32 or w < 32:
        raise ConfigError(f"landmark images need at least 32x32, got {h}x{w}")
    coords = np.zeros((num_landmarks, 2))
    for k in range(num_landmarks):
        for _ in range(1000):
            x, y = _landmark_coord(rng, w), _landmark_coord(rng, h)
            if k == 0 or np.sqrt(((coords[:k] - (x, y)) ** 2).sum(axis=1)).min() >= min_dist:
                coords[k] = (x, y)
                break
        else:
            raise ConfigError(
                f"could not place {num_landmarks} landmarks {min_dist:g}px apart "
                f"on a {h}x{w} image")
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = rng.integers(0, 40, 3)
    yy, xx = np.ogrid[:h, :w]
    for k, (x, y) in enumerate(coords):
        color = np.clip(_PALETTE[k % len(_PALETTE)] + rng.integers(-25, 26, 3), 60, 255)
        d2 = (yy - y) ** 2 + (xx - x) ** 2
        blob = np.exp(-d2 / (2.0 * 2.5**2))
        img += blob[..., None] * color[None, None, :]
    return _finish(img, rng, noise), coords


def cls_sample(rng, size, num_classes=3, noise=0.0):
    """One (image, label) pair; class 0 = disk, 1 = rectangle, 2 = cross."""
    if num_classes > 3:
        raise ConfigError(f"synthetic classification supports up to 3 classes, got {num_classes}")
    h, w = size
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = rng.integers(0, 80, 3)
    label = int(rng.integers(0, num_classes))
    color = rng.integers(140, 256, 3)
    cy = int(rng.integers(h // 3, 2 * h // 3))
    cx = int(rng.integers(w // 3, 2 * w // 3))
    ext = int(rng.integers(h // 5, h // 3))
    if label == 0:
        _paint_disk(img, None, cy, cx, ext, color, 0)
    elif label == 1:
        _paint_rect(img, None, cy - ext, cx - ext, 2 * ext, 2 * ext, color, 0)
    else:
        bar = max(2, ext // 3)
        _paint_rect(img, None, cy - ext, cx - bar // 2, 2 * ext, bar, color, 0)
        _paint_rect(img, None, cy - bar // 2, cx - ext, bar, 2 * ext, color, 0)
    return _finish(img, rng, noise), label


def make_dataset(task: str, count: int, size, seed: int, *, num_classes=2,
                 num_landmarks=5, noise=0.0) -> Dataset:
    h, w = size
    images = np.zeros((count, h, w, 3), dtype=np.uint8)
    masks = coords = labels = None
    if task == "segmentation":
        masks = np.zeros((count, h, w), dtype=np.uint8)
    elif task == "landmarks":
        coords = np.zeros((count, num_landmarks, 2))
    elif task == "classification":
        labels = np.zeros(count, dtype=np.int64)
    else:
        raise ConfigError(f"no synthetic generator for task {task!r}")
    for i in range(count):
        rng = np.random.default_rng([seed, _STREAM_DATA, i])
        if task == "segmentation":
            images[i], masks[i] = seg_sample(rng, size, num_classes, noise)
        elif task == "landmarks":
            images[i], coords[i] = landmark_sample(rng, size, num_landmarks, noise)
        else:
            images[i], labels[i] = cls_sample(rng, size, num_classes, noise)
    return Dataset(task, images, masks, coords, labels)


def dataset_from_config(cfg) -> Dataset:
    if cfg.data_kind == "dir":
        return load_dataset(cfg.data_dir, cfg.task)
    return make_dataset(cfg.task, cfg.data_count, cfg.net_input_size, cfg.seed,
                        num_classes=cfg.data_classes,
                        num_landmarks=cfg.data_landmarks, noise=cfg.data_noise)


# ---------------------------------------------------------------------------
# on-disk layout: img_00000.ppm [+ msk_00000.pgm | landmarks.txt | labels.txt]


def save_dataset(ds: Dataset, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    names = [f"img_{i:05d}.ppm" for i in range(len(ds))]
    for i, name in enumerate(names):
        imageio.write_ppm(os.path.join(out_dir, name), ds.images[i])
    if ds.task == "segmentation":
        for i in range(len(ds)):
            imageio.write_pgm(os.path.join(out_dir, f"msk_{i:05d}.pgm"), ds.masks[i])
    elif ds.task == "landmarks":
        with open(os.path.join(out_dir, "landmarks.txt"), "w") as f:
            for i, name in enumerate(names):
                flat = " ".join(repr(float(v)) for v in ds.coords[i].reshape(-1))
                f.write(f"{name} {flat}\n")
    elif ds.task == "classification":
        with open(os.path.join(out_dir, "labels.txt"), "w") as f:
            for i, name in enumerate(names):
                f.write(f"{name} {int(ds.labels[i])}\n")


def load_dataset(dir_path: str, task: str) -> Dataset:
    if not os.path.isdir(dir_path):
        raise ConfigError(f"data.dir: {dir_path!r} is not a directory")
    names = sorted(n for n in os.listdir(dir_path) if n.startswith("img_") and n.endswith(".ppm"))
    if not names:
        raise ConfigError(f"data.dir: no img_*.ppm files in {dir_path!r}")
    images = np.stack([imageio.read_ppm(os.path.join(dir_path, n)) for n in names])
    masks = coords = labels = None
    if task == "segmentation":
        masks = np.stack([
            imageio.read_pgm(os.path.join(dir_path, n.replace("img_", "msk_").replace(".ppm", ".pgm")))
            for n in names])
    elif task == "landmarks":
        table = _read_table(os.path.join(dir_path, "landmarks.txt"))
        coords = np.stack([np.array([float(v) for v in table[n]]).reshape(-1, 2) for n in names])
    elif task == "classification":
        table = _read_table(os.path.join(dir_path, "labels.txt"))
        labels = np.array([int(table[n][0]) for n in names], dtype=np.int64)
    else:
        raise ConfigError(f"no directory loader for task {task!r}")
    return Dataset(task, images, masks, coords, labels)


def _read_table(path):
    if not os.path.exists(path):
        raise ConfigError(f"missing annotation file {path!r}")
    table = {}
    with open(path, "r") as f:
        for line in f:
            parts = line.split()
            if parts:
                table[parts[0]] = parts[1:]
    return table
