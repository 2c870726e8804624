"""Segmentation and landmark evaluation: confusion/mIoU, quarter-offset
heatmap decoding, NME/AUC/FR, and Gaussian regression targets.

Coordinate convention: landmark coordinates are (x, y) pairs, x = column,
y = row.  Heatmaps live at 1/4 of the input resolution; ``decode_heatmap``
maps peak locations back to image pixels as ``image = 4 * map_coord + offset``
with a configurable alignment constant (default 0).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigError, ShapeError


# ---------------------------------------------------------------------------
# segmentation


def accumulate_confusion(pred, gt, num_classes: int, ignore_index: int = -1) -> np.ndarray:
    """K×K confusion counts (rows = ground truth, cols = prediction).

    Additive across calls: sum the returned matrices to pool batches.
    """
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred/gt length mismatch: {pred.shape} vs {gt.shape}")
    valid = gt != ignore_index
    pred = pred[valid].astype(np.int64)
    gt = gt[valid].astype(np.int64)
    for name, arr in (("gt", gt), ("pred", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ConfigError(f"{name} labels outside [0, {num_classes})")
    counts = np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def miou(cm: np.ndarray):
    """(mIoU, per-class IoU, pixel accuracy, mean class accuracy).

    Zero-support classes (no TP, FP, or FN) get IoU = NaN and are excluded
    from the mean; same for the recall mean.
    """
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ShapeError(f"confusion matrix must be square, got {cm.shape}")
    total = cm.sum()
    if total == 0:
        raise ConfigError("confusion matrix is empty (all pixels ignored?)")
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = np.full(cm.shape[0], np.nan)
    seen = union > 0
    iou[seen] = tp[seen] / union[seen]
    gt_count = cm.sum(axis=1)
    recall = np.full(cm.shape[0], np.nan)
    recall[gt_count > 0] = tp[gt_count > 0] / gt_count[gt_count > 0]
    return (
        float(np.mean(iou[seen])),
        iou,
        float(tp.sum() / total),
        float(np.nanmean(recall)),
    )


# ---------------------------------------------------------------------------
# landmark decoding

# 4-neighborhood scan order used for tie-breaks: up, down, left, right.
_NEIGHBORS = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass
class DecodedKeypoints:
    """Peak locations recovered from heatmaps.

    coords are (x, y) image pixels; map_coords the same points in heatmap
    cells.  ambiguous[i] is set when the max heatvalue occurs in more than
    one cell (decoding then keeps the first cell in row-major order).
    """

    coords: np.ndarray
    map_coords: np.ndarray
    heatmap_size: tuple
    ambiguous: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return self.coords.shape[0]


def decode_heatmap(heatmaps, scale: float = 4.0, offset: float = 0.0) -> DecodedKeypoints:
    """Quarter-offset decoding of (L, h, w) heatmaps.

    Per map: take the argmax cell, then shift 0.25 cells toward the largest
    of its 4-neighbors, then map to image space as ``scale * coord + offset``.
    Neighbor ties keep the first in up/down/left/right order; argmax ties
    keep the row-major first cell and set the ambiguous flag.
    """
    hm = np.asarray(heatmaps, dtype=np.float64)
    if hm.ndim != 3:
        raise ShapeError(f"heatmaps must be (L, h, w), got {hm.shape}")
    n_land, h, w = hm.shape
    if h < 2 or w < 2:
        raise ShapeError(f"heatmap too small to decode: {h}x{w}")
    map_coords = np.zeros((n_land, 2))
    ambiguous = np.zeros(n_land, dtype=bool)
    for i in range(n_land):
        m = hm[i]
        flat = int(np.argmax(m))
        py, px = divmod(flat, w)
        peak = m[py, px]
        ambiguous[i] = int((m == peak).sum()) > 1
        best = None
        best_val = -np.inf
        for dy, dx in _NEIGHBORS:
            ny, nx = py + dy, px + dx
            if 0 <= ny < h and 0 <= nx < w and m[ny, nx] > best_val:
                best_val = m[ny, nx]
                best = (dy, dx)
        map_coords[i] = (px + 0.25 * best[1], py + 0.25 * best[0])
    coords = scale * map_coords + offset
    return DecodedKeypoints(coords=coords, map_coords=map_coords,
                            heatmap_size=(h, w), ambiguous=ambiguous)


def nme(pred_coords, gt_coords, normalizer: float) -> float:
    """Mean landmark Euclidean distance divided by the normalizer."""
    pred = np.asarray(pred_coords, dtype=np.float64)
    gt = np.asarray(gt_coords, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred/gt coords mismatch: {pred.shape} vs {gt.shape}")
    if normalizer <= 0:
        raise ConfigError(f"normalizer must be > 0, got {normalizer}")
    dist = np.sqrt(((pred - gt) ** 2).sum(axis=-1))
    return float(dist.mean() / normalizer)


def auc_fr(nmes, alpha: float):
    """(AUC, failure rate) at threshold alpha.

    AUC integrates the empirical cumulative error distribution over
    [0, alpha] with the trapezoidal rule and normalizes by alpha; FR is the
    fraction of samples with error above alpha.
    """
    errs = np.sort(np.asarray(nmes, dtype=np.float64))
    if errs.size == 0:
        raise ConfigError("auc_fr needs at least one error value")
    if alpha <= 0:
        raise ConfigError(f"alpha must be > 0, got {alpha}")
    n = errs.size
    inside = errs[errs <= alpha]
    xs = np.concatenate(([0.0], inside, [alpha]))
    # empirical CDF evaluated at each x: fraction of samples <= x
    ys = np.searchsorted(errs, xs, side="right") / n
    auc = float(np.trapezoid(ys, xs) / alpha)
    fr = float((errs > alpha).sum() / n)
    return auc, fr


# ---------------------------------------------------------------------------
# regression targets


def gaussian_target(coords, size: tuple, sigma: float = 1.5):
    """(L, h, w) Gaussian heatmaps peaked at continuous map coordinates.

    Each map is scaled so the cell nearest the landmark is exactly 1.0 and
    truncated to zero beyond 3 sigma.  Landmarks outside the map produce an
    all-zero map; the returned mask is False for those.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"coords must be (L, 2), got {coords.shape}")
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    h, w = size
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    maps = np.zeros((coords.shape[0], h, w))
    valid = np.ones(coords.shape[0], dtype=bool)
    for i, (cx, cy) in enumerate(coords):
        if not (0 <= cx <= w - 1 and 0 <= cy <= h - 1):
            valid[i] = False
            continue
        d2 = (ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2
        g = np.exp(-0.5 * d2 / sigma**2)
        g[d2 > (3.0 * sigma) ** 2] = 0.0
        nearest = g[int(round(cy)), int(round(cx))]
        maps[i] = g / nearest
    return maps, valid
