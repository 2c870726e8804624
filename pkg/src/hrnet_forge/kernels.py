"""Reference CPU kernels: forward and backward pairs on plain ndarrays.

All kernels are pure functions of their inputs and deterministic: reductions
run in a fixed order (GEMM via numpy, scatter via ``np.add.at``), so identical
inputs give bit-identical outputs within one precision mode.  Convolution has
two independent routes: the im2col + GEMM fast path used by the layers, and
``conv2d_reference`` (six nested loops) kept as the test oracle.
"""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError


# ---------------------------------------------------------------------------
# convolution


def conv_out_size(size: int, k: int, s: int, p: int) -> int:
    out = (size + 2 * p - k) // s + 1
    if out < 1:
        raise ShapeError(f"convolution output size {out} < 1 (in={size}, k={k}, s={s}, p={p})")
    return out


def im2col(x: np.ndarray, kernel: tuple, stride: tuple, padding: tuple) -> np.ndarray:
    """Gather sliding windows into a (n, c·kh·kw, oh·ow) column matrix."""
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    oh = conv_out_size(h, kh, sh, ph)
    ow = conv_out_size(w, kw, sw, pw)
    if ph or pw:
        xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        xp[:, :, ph:ph + h, pw:pw + w] = x
    else:
        xp = x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im(cols: np.ndarray, x_shape: tuple, kernel: tuple, stride: tuple, padding: tuple) -> np.ndarray:
    """Transpose of :func:`im2col`: scatter-add columns back onto the image."""
    n, c, h, w = x_shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    oh = conv_out_size(h, kh, sh, ph)
    ow = conv_out_size(w, kw, sw, pw)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += cols[:, :, i, j]
    if ph or pw:
        return xp[:, :, ph:ph + h, pw:pw + w]
    return xp


def conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0)):
    """2-D convolution (cross-correlation), NCHW, no dilation/groups."""
    y, _ = conv2d_forward(x, w, b, stride, padding)
    return y


def conv2d_forward(x, w, b=None, stride=(1, 1), padding=(0, 0)):
    """Returns (output, columns); callers that need backward keep the columns."""
    n, c, h, w_ = x.shape
    cout, cin, kh, kw = w.shape
    if cin != c:
        raise ShapeError(f"conv2d input has {c} channels, weights expect {cin}")
    oh = conv_out_size(h, kh, stride[0], padding[0])
    ow = conv_out_size(w_, kw, stride[1], padding[1])
    cols = im2col(x, (kh, kw), stride, padding)
    y = np.matmul(w.reshape(cout, -1), cols)          # (n, cout, oh*ow)
    y = y.reshape(n, cout, oh, ow)
    if b is not None:
        y += b.reshape(1, cout, 1, 1)
    return y, cols


def conv2d_backward(cols, x_shape, w, gy, stride=(1, 1), padding=(0, 0),
                    has_bias=False, need_x_grad=True):
    """Gradients of conv2d given the forward columns.

    Returns (gx, gw, gb); gx is None when need_x_grad is False, gb is None
    when has_bias is False.
    """
    n, cout, oh, ow = gy.shape
    gy2 = gy.reshape(n, cout, oh * ow)
    # dW: sum over batch of gy @ cols^T
    gw = np.matmul(gy2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    gb = gy2.sum(axis=(0, 2)) if has_bias else None
    gx = None
    if need_x_grad:
        gcols = np.matmul(w.reshape(cout, -1).T, gy2)  # (n, cin*kh*kw, oh*ow)
        gx = col2im(gcols, x_shape, w.shape[2:], stride, padding)
    return gx, gw, gb


def conv2d_reference(x, w, b=None, stride=(1, 1), padding=(0, 0)):
    """Direct six-nested-loop convolution; the independent oracle for tests."""
    n, c, h, w_ = x.shape
    cout, cin, kh, kw = w.shape
    if cin != c:
        raise ShapeError("channel mismatch")
    sh, sw = stride
    ph, pw = padding
    oh = conv_out_size(h, kh, sh, ph)
    ow = conv_out_size(w_, kw, sw, pw)
    y = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for bi in range(n):
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * sh + ky - ph
                                ix = ox * sw + kx - pw
                                if 0 <= iy < h and 0 <= ix < w_:
                                    acc += x[bi, ci, iy, ix] * w[co, ci, ky, kx]
                    y[bi, co, oy, ox] = acc + (b[co] if b is not None else 0.0)
    return y


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm_forward(x, gamma, beta, running_mean, running_var,
                       momentum=0.1, eps=1e-5, training=True):
    """Per-channel batch norm over the (n, h, w) axes.

    Train mode normalizes with biased batch statistics and updates the running
    buffers in place (running = (1-momentum)*running + momentum*batch); eval
    mode uses the running buffers.  Returns (y, cache) where cache feeds
    :func:`batch_norm_backward`.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,):
        raise ShapeError(f"batch_norm expects {c}-channel state, got {gamma.shape}")
    if training:
        count = n * h * w
        if count == 0:
            raise ShapeError("batch_norm train mode with zero elements per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))          # biased
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    y = gamma.reshape(1, c, 1, 1) * xhat + beta.reshape(1, c, 1, 1)
    cache = (xhat, inv_std, gamma, training)
    return y, cache


def batch_norm_backward(cache, gy):
    """Returns (gx, ggamma, gbeta)."""
    xhat, inv_std, gamma, training = cache
    n, c, h, w = gy.shape
    gbeta = gy.sum(axis=(0, 2, 3))
    ggamma = (gy * xhat).sum(axis=(0, 2, 3))
    g = gamma.reshape(1, c, 1, 1)
    if training:
        m = n * h * w
        gx = (g * inv_std.reshape(1, c, 1, 1)) * (
            gy
            - gbeta.reshape(1, c, 1, 1) / m
            - xhat * ggamma.reshape(1, c, 1, 1) / m
        )
    else:
        gx = gy * g * inv_std.reshape(1, c, 1, 1)
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# activations and pooling


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, gy):
    return np.where(x > 0.0, gy, 0.0)


def avg_pool_forward(x, kernel, stride):
    """Unpadded average pooling; windows that do not fit are dropped."""
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    if kh > h or kw > w:
        raise ShapeError(f"pool kernel {kernel} larger than input {(h, w)}")
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    acc = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            acc += x[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]
    return acc / (kh * kw)


def avg_pool_backward(x_shape, kernel, stride, gy):
    n, c, h, w = x_shape
    kh, kw = kernel
    sh, sw = stride
    oh, ow = gy.shape[2:]
    gx = np.zeros(x_shape, dtype=gy.dtype)
    share = gy / (kh * kw)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += share
    return gx


def global_avg_pool(x):
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(x_shape, gy):
    n, c, h, w = x_shape
    return np.broadcast_to(gy / (h * w), x_shape).copy()


# ---------------------------------------------------------------------------
# interpolation


def _interp_indices(in_size: int, out_size: int):
    """Source indices/weights for linear interpolation, half-pixel convention.

    Output center o maps to source coordinate (o + 0.5) * in/out - 0.5,
    clamped to the valid range (so edges replicate).
    """
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, in_size - 1)
    w1 = src - i0
    w0 = 1.0 - w1
    return i0, i1, w0, w1


def _nearest_indices(in_size: int, out_size: int):
    # floor((o + 0.5) * scale): the "nearest, half-down" convention
    src = np.floor((np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size))
    return np.clip(src, 0, in_size - 1).astype(np.intp)


def upsample(x, factor: int, mode: str = "nearest"):
    """Upsample by an integral power-of-two factor."""
    if factor < 2 or factor & (factor - 1):
        raise ShapeError(f"upsample factor must be a power of two >= 2, got {factor}")
    n, c, h, w = x.shape
    return resize_bilinear(x, h * factor, w * factor) if mode == "bilinear" \
        else resize_nearest(x, h * factor, w * factor)


def upsample_backward(gy, x_shape, factor: int, mode: str = "nearest"):
    n, c, h, w = x_shape
    oh, ow = gy.shape[2:]
    gx = np.zeros(x_shape, dtype=gy.dtype)
    if mode == "nearest":
        iy = _nearest_indices(h, oh)
        ix = _nearest_indices(w, ow)
        np.add.at(gx, (slice(None), slice(None), iy[:, None], ix[None, :]), gy)
    elif mode == "bilinear":
        iy0, iy1, wy0, wy1 = _interp_indices(h, oh)
        ix0, ix1, wx0, wx1 = _interp_indices(w, ow)
        wy0 = wy0.astype(gy.dtype); wy1 = wy1.astype(gy.dtype)
        wx0 = wx0.astype(gy.dtype); wx1 = wx1.astype(gy.dtype)
        for iy, wy in ((iy0, wy0), (iy1, wy1)):
            for ix, wx in ((ix0, wx0), (ix1, wx1)):
                np.add.at(gx, (slice(None), slice(None), iy[:, None], ix[None, :]),
                          gy * wy[:, None] * wx[None, :])
    else:
        raise ShapeError(f"unknown upsample mode {mode!r}")
    return gx


def resize_bilinear(x, out_h: int, out_w: int):
    """Bilinear resize to an arbitrary size (also the bilinear-upsample core)."""
    n, c, h, w = x.shape
    iy0, iy1, wy0, wy1 = _interp_indices(h, out_h)
    ix0, ix1, wx0, wx1 = _interp_indices(w, out_w)
    wy0 = wy0.astype(x.dtype); wy1 = wy1.astype(x.dtype)
    wx0 = wx0.astype(x.dtype); wx1 = wx1.astype(x.dtype)
    rows0 = x[:, :, iy0, :]
    rows1 = x[:, :, iy1, :]
    top = rows0[:, :, :, ix0] * wx0 + rows0[:, :, :, ix1] * wx1
    bot = rows1[:, :, :, ix0] * wx0 + rows1[:, :, :, ix1] * wx1
    return top * wy0[None, None, :, None] + bot * wy1[None, None, :, None]


def resize_nearest(x, out_h: int, out_w: int):
    iy = _nearest_indices(x.shape[2], out_h)
    ix = _nearest_indices(x.shape[3], out_w)
    return x[:, :, iy[:, None], ix[None, :]]


# ---------------------------------------------------------------------------
# linear / losses


def linear(x2d, w, b=None):
    if x2d.shape[1] != w.shape[1]:
        raise ShapeError(f"linear input dim {x2d.shape[1]} != weight dim {w.shape[1]}")
    y = x2d @ w.T
    if b is not None:
        y = y + b
    return y


def linear_backward(x2d, w, gy, has_bias=True):
    gx = gy @ w
    gw = gy.T @ x2d
    gb = gy.sum(axis=0) if has_bias else None
    return gx, gw, gb


def softmax_cross_entropy(logits, labels, ignore_index: int = -1):
    """Mean negative log-softmax over non-ignored positions.

    ``logits`` is (n, K) or (n, K, h, w); ``labels`` the matching integer map.
    Returns (loss, dlogits) with the gradient already divided by the count of
    contributing positions (ignored positions get exactly zero gradient).
    """
    squeeze = logits.ndim == 2
    if squeeze:
        logits = logits[:, :, None, None]
        labels = np.asarray(labels).reshape(-1, 1, 1)
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} != {(n, h, w)}")
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ShapeError("softmax_cross_entropy: every position is ignored")
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ShapeError("label outside [0, K) and not equal to ignore_index")
    shifted = logits - logits.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    denom = expv.sum(axis=1, keepdims=True)
    logp = shifted - np.log(denom)
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None, :, :], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count
    grad = expv / denom
    onehot_idx = safe[:, None, :, :]
    np.put_along_axis(grad, onehot_idx, np.take_along_axis(grad, onehot_idx, axis=1) - 1.0, axis=1)
    grad *= valid[:, None, :, :] / count
    if squeeze:
        grad = grad[:, :, 0, 0]
    return float(loss), grad


def mse_loss(pred, target):
    """Mean squared error over all elements; returns (loss, dpred)."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad
