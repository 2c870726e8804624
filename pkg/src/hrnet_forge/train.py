"""Training loop, augmentation, and evaluation drivers.

Determinism contract: iteration ``i`` of a run with seed ``s`` draws all of
its randomness (batch indices, augmentation parameters) from a fresh
generator seeded by ``(s, stream, i)``.  Resuming from a checkpoint saved at
iteration ``i`` therefore reproduces the original trajectory bit-exactly —
no generator state needs to be serialized.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels as K
from . import metrics as M
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_digest
from .optim import SGD, Schedule
from .synthetic import Dataset, dataset_from_config
from .tensor import ConfigError, NumericalError, dtype_for
from .topology import Network

_STREAM_BATCH = 202
IGNORE_LABEL = 255


def batch_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAM_BATCH, iteration])


# ---------------------------------------------------------------------------
# augmentation (operates on float (3, h, w) images in [0, 1])


def _rotate_sample(rng, cfg, img, coords):
    theta = float(rng.uniform(-cfg.aug_rotate, cfg.aug_rotate))
    img = ndimage.rotate(img, theta, axes=(1, 2), reshape=False, order=1,
                         mode="constant", cval=0.0)
    h, w = img.shape[1:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(theta)
    x, y = coords[:, 0] - cx, coords[:, 1] - cy
    coords = np.stack([cx + math.cos(t) * x + math.sin(t) * y,
                       cy - math.sin(t) * x + math.cos(t) * y], axis=1)
    return img, coords


def _scale_sample(rng, cfg, img, mask, coords):
    s = float(rng.uniform(cfg.aug_scale_min, cfg.aug_scale_max))
    if s == 1.0:
        return img, mask, coords
    h, w = img.shape[1:]
    nh, nw = max(8, round(h * s)), max(8, round(w * s))
    img = K.resize_bilinear(img[None], nh, nw)[0]
    if mask is not None:
        mask = K.resize_nearest(mask[None, None].astype(np.float64), nh, nw)[0, 0] \
            .astype(mask.dtype)
    if coords is not None:
        # same grid convention as the resize kernels
        coords = np.stack([(coords[:, 0] + 0.5) * nw / w - 0.5,
                           (coords[:, 1] + 0.5) * nh / h - 0.5], axis=1)
    return img, mask, coords


def _crop_sample(rng, target, img, mask, coords):
    th, tw = target
    h, w = img.shape[1:]
    pad_h, pad_w = max(0, th - h), max(0, tw - w)
    if pad_h or pad_w:
        img = np.pad(img, ((0, 0), (0, pad_h), (0, pad_w)))
        if mask is not None:
            mask = np.pad(mask, ((0, pad_h), (0, pad_w)), constant_values=IGNORE_LABEL)
        h, w = img.shape[1:]
    y0 = int(rng.integers(0, h - th + 1))
    x0 = int(rng.integers(0, w - tw + 1))
    img = img[:, y0:y0 + th, x0:x0 + tw]
    if mask is not None:
        mask = mask[y0:y0 + th, x0:x0 + tw]
    if coords is not None:
        coords = coords - (x0, y0)
    return img, mask, coords


def _flip_sample(img, mask, coords):
    img = img[:, :, ::-1]
    if mask is not None:
        mask = mask[:, ::-1]
    if coords is not None:
        w = img.shape[2]
        coords = coords.copy()
        coords[:, 0] = (w - 1) - coords[:, 0]
    return img, mask, coords


def augment(rng, cfg: RunConfig, img, mask=None, coords=None):
    """Rotation (landmarks) -> scale -> crop/pad to network size -> flip."""
    if coords is not None and cfg.aug_rotate > 0:
        img, coords = _rotate_sample(rng, cfg, img, coords)
    if cfg.aug_scale_min != 1.0 or cfg.aug_scale_max != 1.0:
        img, mask, coords = _scale_sample(rng, cfg, img, mask, coords)
    target = cfg.aug_crop or cfg.net_input_size
    if img.shape[1:] != tuple(target):
        img, mask, coords = _crop_sample(rng, target, img, mask, coords)
    if rng.random() < cfg.aug_flip:
        img, mask, coords = _flip_sample(img, mask, coords)
    return np.ascontiguousarray(img), mask, coords


# ---------------------------------------------------------------------------
# batches and losses


def _to_float(img_u8):
    return img_u8.astype(np.float64).transpose(2, 0, 1) / 255.0


def sample_batch(cfg: RunConfig, ds: Dataset, rng):
    """Returns (inputs (b,3,h,w), task-specific target batch)."""
    idx = rng.integers(0, len(ds), cfg.opt_batch_size)
    imgs, masks, coords, labels = [], [], [], []
    for i in idx:
        img = _to_float(ds.images[i])
        mask = ds.masks[i].copy() if ds.masks is not None else None
        cds = ds.coords[i].copy() if ds.coords is not None else None
        img, mask, cds = augment(rng, cfg, img, mask, cds)
        imgs.append(img)
        if mask is not None:
            masks.append(mask)
        if cds is not None:
            coords.append(cds)
        if ds.labels is not None:
            labels.append(ds.labels[i])
    x = np.stack(imgs).astype(dtype_for(cfg.precision))
    if cfg.task == "segmentation":
        return x, np.stack(masks).astype(np.int64)
    if cfg.task == "landmarks":
        h, w = x.shape[2] // 4, x.shape[3] // 4
        targets = np.zeros((len(coords), cfg.data_landmarks, h, w))
        for j, cds in enumerate(coords):
            targets[j], _ = M.gaussian_target(cds / 4.0, (h, w), cfg.data_sigma)
        return x, targets.astype(x.dtype)
    return x, np.asarray(labels, dtype=np.int64)


def task_loss(cfg: RunConfig, head_out, targets):
    """Returns (scalar loss, gradient w.r.t. the head output)."""
    if cfg.task == "segmentation":
        up = K.upsample(head_out, 4, "bilinear")
        loss, g_up = K.softmax_cross_entropy(up, targets, ignore_index=IGNORE_LABEL)
        return loss, K.upsample_backward(g_up, head_out.shape, 4, "bilinear")
    if cfg.task == "landmarks":
        return K.mse_loss(head_out, targets)
    if cfg.task == "classification":
        return K.softmax_cross_entropy(head_out, targets)
    raise ConfigError(f"task {cfg.task!r} has no training objective")


# ---------------------------------------------------------------------------
# evaluation


def _forward_task(net: Network, cfg: RunConfig, x, flip_average=False):
    out = net.forward(x, train=False)["head"]
    if flip_average:
        flipped = net.forward(np.ascontiguousarray(x[:, :, :, ::-1]), train=False)["head"]
        out = 0.5 * (out + flipped[:, :, :, ::-1])
    return out


def evaluate(net: Network, ds: Dataset, cfg: RunConfig, flip_average=False) -> dict:
    """Task metrics over a dataset; deterministic, no augmentation."""
    dtype = dtype_for(cfg.precision)
    batch = cfg.opt_batch_size
    cm = np.zeros((cfg.data_classes, cfg.data_classes), dtype=np.int64)
    px_errors, nmes, correct = [], [], 0
    for lo in range(0, len(ds), batch):
        sel = slice(lo, min(lo + batch, len(ds)))
        x = np.stack([_to_float(im) for im in ds.images[sel]]).astype(dtype)
        out = _forward_task(net, cfg, x, flip_average)
        if cfg.task == "segmentation":
            up = K.upsample(out, 4, "bilinear")
            pred = up.argmax(axis=1)
            cm += accumulate_batch(pred, ds.masks[sel], cfg.data_classes)
        elif cfg.task == "landmarks":
            w_img = ds.images.shape[2]
            for j in range(out.shape[0]):
                dec = M.decode_heatmap(out[j], scale=4.0, offset=cfg.eval_decode_offset)
                gt = ds.coords[lo + j]
                dist = np.sqrt(((dec.coords - gt) ** 2).sum(axis=1))
                px_errors.append(float(dist.mean()))
                nmes.append(float(dist.mean() / w_img))
        elif cfg.task == "classification":
            correct += int((out.argmax(axis=1) == ds.labels[sel]).sum())
        else:
            raise ConfigError(f"task {cfg.task!r} has no evaluation metric")
    if cfg.task == "segmentation":
        miou_val, _, pixel_acc, mean_acc = M.miou(cm)
        return {"miou": miou_val, "pixel_acc": pixel_acc, "mean_acc": mean_acc}
    if cfg.task == "landmarks":
        auc, fr = M.auc_fr(nmes, cfg.eval_alpha)
        return {"mean_px_error": float(np.mean(px_errors)),
                "nme": float(np.mean(nmes)), "auc": auc, "fr": fr}
    return {"accuracy": correct / len(ds)}


def accumulate_batch(pred, masks, num_classes):
    return M.accumulate_confusion(pred, masks.astype(np.int64), num_classes,
                                  ignore_index=IGNORE_LABEL)


def primary_metric(task: str) -> str:
    return {"segmentation": "miou", "landmarks": "mean_px_error",
            "classification": "accuracy"}[task]


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    iterations: int
    losses: np.ndarray              # loss at every iteration
    metrics: dict                   # final training-set metrics
    checkpoint_path: str | None = None
    log_lines: list = field(default_factory=list)


def run_training(cfg: RunConfig, out_dir: str | None = None, resume: str | None = None,
                 dataset: Dataset | None = None, quiet: bool = False) -> TrainResult:
    cfg.validate()
    ds = dataset if dataset is not None else dataset_from_config(cfg)
    net = Network(cfg.network(), cfg.precision, cfg.seed)
    opt = SGD(net.params(), momentum=cfg.opt_momentum, weight_decay=cfg.opt_weight_decay,
              nesterov=cfg.opt_nesterov, check_finite=cfg.precision == "verify")
    epoch_iters = cfg.opt_epoch_iters or max(1, math.ceil(len(ds) / cfg.opt_batch_size))
    sched = Schedule(cfg.opt_schedule, cfg.opt_lr, max_iter=cfg.opt_iters,
                     power=cfg.opt_power, milestones=cfg.opt_milestones,
                     factor=cfg.opt_factor, iters_per_epoch=epoch_iters)
    digest = config_digest(cfg)

    start = 0
    if resume is not None:
        ck_digest, start, tensors = load_checkpoint(resume)
        if ck_digest != digest:
            raise ConfigError(
                f"checkpoint digest {ck_digest:#018x} does not match config {digest:#018x}")
        net.load_state_arrays(tensors)
        opt.load_state_tensors(tensors)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    losses = np.zeros(cfg.opt_iters)
    log_lines = []

    def checkpoint_to(path, iteration):
        tensors = dict(net.state_arrays())
        tensors.update(opt.state_tensors())
        save_checkpoint(path, digest, iteration, tensors)

    for it in range(start, cfg.opt_iters):
        rng = batch_rng(cfg.seed, it)
        x, targets = sample_batch(cfg, ds, rng)
        out = net.forward(x, train=True)
        loss, head_grad = task_loss(cfg, out["head"], targets)
        if cfg.precision == "verify" and not np.isfinite(loss):
            raise NumericalError(f"non-finite loss at iteration {it}")
        losses[it] = loss
        opt.zero_grad()
        net.backward(head_grad)
        lr = sched.lr(it)
        opt.step(lr)
        if (it + 1) % cfg.train_log_every == 0 or it + 1 == cfg.opt_iters:
            line = f"iter {it + 1} loss {loss:.6f} lr {lr:.6g}"
            log_lines.append(line)
            if not quiet:
                print(line)
        if out_dir and cfg.train_checkpoint_every and (it + 1) % cfg.train_checkpoint_every == 0 \
                and it + 1 < cfg.opt_iters:
            checkpoint_to(os.path.join(out_dir, f"ckpt_{it + 1:06d}.hrfk"), it + 1)

    results = evaluate(net, ds, cfg)
    ckpt_path = None
    if out_dir:
        ckpt_path = os.path.join(out_dir, "ckpt_final.hrfk")
        checkpoint_to(ckpt_path, cfg.opt_iters)
        with open(os.path.join(out_dir, "loss.txt"), "w") as f:
            f.write("\n".join(log_lines) + "\n")
        write_metrics(os.path.join(out_dir, "metrics.txt"), results)
    return TrainResult(cfg.opt_iters, losses, results, ckpt_path, log_lines)


def write_metrics(path: str, results: dict) -> None:
    with open(path, "w") as f:
        for key in sorted(results):
            f.write(f"{key} = {repr(float(results[key]))}\n")


def read_metrics(path: str) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            if "=" in line:
                key, _, val = line.partition("=")
                out[key.strip()] = float(val)
    return out


def run_eval(cfg: RunConfig, ckpt_path: str, out_dir: str | None = None,
             flip_average: bool = False, dataset: Dataset | None = None) -> dict:
    cfg.validate()
    digest, _, tensors = load_checkpoint(ckpt_path)
    if digest != config_digest(cfg):
        raise ConfigError(
            f"checkpoint digest {digest:#018x} does not match config "
            f"{config_digest(cfg):#018x}")
    ds = dataset if dataset is not None else dataset_from_config(cfg)
    net = Network(cfg.network(), cfg.precision, cfg.seed)
    net.load_state_arrays(tensors)
    results = evaluate(net, ds, cfg, flip_average)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics(os.path.join(out_dir, "metrics.txt"), results)
    return results
