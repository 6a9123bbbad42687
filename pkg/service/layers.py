"""
Forward/backward primitives for the segmentation networks.

Every ``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
takes the upstream gradient plus that cache. Arrays are batched as
``(N, C, H, W)`` for images and ``(N, F)`` for dense layers.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from service.errors import ValidationError

INSTANCE_NORM_EPS = 1e-5


# --- Convolution (stride 1, zero "same" padding, odd square kernels) ---

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Stack the k*k shifted copies of ``x`` as (N, k*k*C, H*W) columns, tap-major."""
    n, c, h, w = x.shape
    if k == 1:
        return x.reshape(n, c, h * w)
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((n, k, k, c, h, w), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(n, k * k * c, h * w)


def _col2im(dcols: np.ndarray, shape: Tuple[int, int, int, int], k: int) -> np.ndarray:
    n, c, h, w = shape
    if k == 1:
        return dcols.reshape(shape)
    p = (k - 1) // 2
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    taps = dcols.reshape(n, k, k, c, h, w)
    for dy in range(k):
        for dx in range(k):
            dxp[:, :, dy:dy + h, dx:dx + w] += taps[:, dy, dx]
    return np.ascontiguousarray(dxp[:, :, p:p + h, p:p + w])


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    # (C_out, C_in, k, k) -> (C_out, k*k*C_in) matching the tap-major column order
    c_out, c_in, k, _ = w.shape
    return w.transpose(0, 2, 3, 1).reshape(c_out, k * k * c_in)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None) -> Tuple[np.ndarray, tuple]:
    """
    Same-size 2-D cross-correlation as one GEMM per sample over im2col columns.

    Args:
        x: Input (N, C_in, H, W).
        w: Kernels (C_out, C_in, k, k), k odd.
        b: Optional bias (C_out,).

    Returns:
        Output (N, C_out, H, W) and the cache for ``conv2d_backward``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValidationError(f"conv2d expects 4-D input and kernels, got {x.shape} and {w.shape}")
    k = w.shape[2]
    if w.shape[3] != k or k % 2 == 0:
        raise ValidationError(f"kernels must be square with odd size, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValidationError(f"conv2d channel mismatch: input has {x.shape[1]}, kernels expect {w.shape[1]}")
    n, _, h, width = x.shape
    cols = _im2col(x, k)
    out = np.matmul(_kernel_matrix(w), cols).reshape(n, w.shape[0], h, width)
    if b is not None:
        out += b[:, None, None]
    return out, (cols, x.shape, w)


def conv2d_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dw, db)."""
    cols, x_shape, w = cache
    c_out, c_in, k, _ = w.shape
    n = dout.shape[0]
    d = dout.reshape(n, c_out, -1)
    dw = np.matmul(d, cols.transpose(0, 2, 1)).sum(axis=0)
    dw = dw.reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)
    db = dout.sum(axis=(0, 2, 3))
    dx = _col2im(np.matmul(_kernel_matrix(w).T, d), x_shape, k)
    return dx, np.ascontiguousarray(dw), db


# --- Pooling and upsampling ---

def maxpool2_forward(x: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """2x2 max-pool, stride 2. The gradient goes to the first maximum of each window."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValidationError(f"max-pool needs even spatial extents, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(dout: np.ndarray, cache: tuple) -> np.ndarray:
    idx, shape = cache
    n, c, h, w = shape
    blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    return blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


def upsample2_forward(x: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """Nearest-neighbour x2 upsampling."""
    return x.repeat(2, axis=2).repeat(2, axis=3), x.shape


def upsample2_backward(dout: np.ndarray, cache: tuple) -> np.ndarray:
    n, c, h, w = cache
    return dout.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))


def avgpool_forward(x: np.ndarray, factor: int) -> Tuple[np.ndarray, tuple]:
    n, c, h, w = x.shape
    if factor == 1:
        return x, (factor, x.shape)
    if h % factor or w % factor:
        raise ValidationError(f"average pool factor {factor} does not divide {h}x{w}")
    out = x.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    return out, (factor, x.shape)


def avgpool_backward(dout: np.ndarray, cache: tuple) -> np.ndarray:
    factor, shape = cache
    if factor == 1:
        return dout
    return (dout / (factor * factor)).repeat(factor, axis=2).repeat(factor, axis=3).reshape(shape)


# --- Normalization and activations ---

def instance_norm_forward(x: np.ndarray, eps: float = INSTANCE_NORM_EPS) -> Tuple[np.ndarray, tuple]:
    """Per-sample, per-channel standardization over the spatial axes (no affine)."""
    mean = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat, (xhat, inv_std)


def instance_norm_backward(dout: np.ndarray, cache: tuple) -> np.ndarray:
    xhat, inv_std = cache
    mean_d = dout.mean(axis=(2, 3), keepdims=True)
    mean_dx = (dout * xhat).mean(axis=(2, 3), keepdims=True)
    return inv_std * (dout - mean_d - xhat * mean_dx)


def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_backward(dp: np.ndarray, p: np.ndarray, axis: int = 1) -> np.ndarray:
    """Chain a gradient w.r.t. softmax probabilities back to the logits."""
    return p * (dp - (p * dp).sum(axis=axis, keepdims=True))


# --- Dense ---

def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """x (N, F_in) @ w (F_in, F_out) + b."""
    if x.shape[1] != w.shape[0]:
        raise ValidationError(f"dense layer expects {w.shape[0]} features, got {x.shape[1]}")
    return x @ w + b, (x, w)


def dense_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


# --- Composite: conv -> instance norm -> relu ---

def conv_norm_relu_forward(x: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, tuple]:
    z, conv_cache = conv2d_forward(x, w)
    n, norm_cache = instance_norm_forward(z)
    a, relu_cache = relu_forward(n)
    return a, (conv_cache, norm_cache, relu_cache)


def conv_norm_relu_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (dx, dw)."""
    conv_cache, norm_cache, relu_cache = cache
    dz = instance_norm_backward(relu_backward(dout, relu_cache), norm_cache)
    dx, dw, _ = conv2d_backward(dz, conv_cache)
    return dx, dw
