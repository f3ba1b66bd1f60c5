"""Numpy layer primitives, channels-last ``(batch, height, width, channels)``."""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k):
    """``(B, H, W, C)`` -> ``(B*H*W, k*k*C)`` patches with zero 'same' padding."""
    b, h, w, c = x.shape
    p = k // 2
    if k == 1:
        return x.reshape(-1, c)
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (B, H, W, C, k, k)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, k * k * c)


def col2im(dcols, shape, k):
    b, h, w, c = shape
    if k == 1:
        return dcols.reshape(shape)
    p = k // 2
    d = dcols.reshape(b, h, w, k, k, c)
    dxp = np.zeros((b, h + 2 * p, w + 2 * p, c))
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + w, :] += d[:, :, :, i, j, :]
    return dxp[:, p:p + h, p:p + w, :]


def conv_forward(x, weight, bias):
    """'Same' convolution; ``weight`` has shape ``(k, k, C_in, C_out)``."""
    k = weight.shape[0]
    cols = im2col(x, k)
    out = cols @ weight.reshape(-1, weight.shape[-1]) + bias
    return out.reshape(x.shape[:3] + (weight.shape[-1],)), cols


def conv_backward(dout, cols, x_shape, weight, need_dx=True):
    k = weight.shape[0]
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = (cols.T @ d2).reshape(weight.shape)
    db = d2.sum(axis=0)
    dx = col2im(d2 @ weight.reshape(-1, weight.shape[-1]).T, x_shape, k) if need_dx else None
    return dx, dw, db


def channel_dropout_mask(rng, n, channels, p):
    """Per-sample channel keep-mask with inverted-dropout scaling, shape ``(n, channels)``."""
    if p <= 0:
        return np.ones((n, channels))
    keep = rng.random((n, channels)) >= p
    return keep / (1.0 - p)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def masked_cross_entropy(logits, y):
    """Mean CE over pixels with ``y >= 0``; returns ``(loss, dlogits)``."""
    mask = y >= 0
    n = int(mask.sum())
    logp = log_softmax(logits)
    if n == 0:
        return 0.0, np.zeros_like(logits)
    yc = np.where(mask, y, 0)
    picked = np.take_along_axis(logp, yc[..., None], axis=-1)[..., 0]
    # exactly rounded sum: uniform predictions give exactly ln C
    loss = -math.fsum(picked[mask]) / n
    d = np.exp(logp)
    np.put_along_axis(d, yc[..., None], np.take_along_axis(d, yc[..., None], -1) - 1.0, axis=-1)
    d *= mask[..., None] / n
    return float(loss), d
