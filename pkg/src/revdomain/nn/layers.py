"""Differentiable layers on NHWC image batches."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Parameter, ShapeError, Tensor, add, leaky_relu


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N, H, W, C) with ``kernel`` (kh, kw, C, F).

    Output spatial size is ``(H + 2 pad - kh) // stride + 1`` per axis.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and (kh, kw, C, F) kernel, got {x.shape} and {kernel.shape}")
    n, h, w, c = x.shape
    kh, kw, kc, f = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input shape {x.shape} does not match kernel shape {kernel.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got kernel shape {kernel.shape}")
    if pad < 0 or stride < 1:
        raise ValueError(f"conv2d: invalid pad={pad} / stride={stride}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: input shape {x.shape} smaller than kernel shape {kernel.shape}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    out_data, cols, wmat = _correlate(xp, kernel.data, stride)
    ho, wo = out_data.shape[1], out_data.shape[2]
    if bias is not None:
        out_data += bias.data

    def backward():
        g = out.grad.reshape(n * ho * wo, f)
        if kernel.requires_grad:
            gw = (cols.T @ g).reshape(kh, kw, c, f)
            kernel.accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=0).reshape(bias.shape))
        if not x.requires_grad:
            return
        if stride == 1 and pad <= min(kh, kw) - 1:
            # full correlation of the output gradient with the flipped kernel
            ph, pw = kh - 1 - pad, kw - 1 - pad
            gpad = np.pad(out.grad, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
            gx, _, _ = _correlate(gpad, kernel.data[::-1, ::-1].transpose(0, 1, 3, 2), 1)
            x.accumulate(gx)
            return
        gcols = (g @ wmat.T).reshape(n, ho, wo, kh, kw, c)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[..., i, j, :]
        x.accumulate(gxp[:, pad:pad + h, pad:pad + w, :] if pad else gxp)

    out = Tensor(out_data, (x, kernel) + ((bias,) if bias is not None else ()), backward)
    return out


def _correlate(xp: np.ndarray, k: np.ndarray, stride: int):
    """Valid cross-correlation via im2col; returns (output, columns, flattened kernel)."""
    n, _, _, c = xp.shape
    kh, kw, _, f = k.shape
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    # the view is (N, Ho, Wo, C, kh, kw); copying it channel-last is much faster
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)
    wmat = k.reshape(kh * kw * c, f)
    return (cols @ wmat).reshape(n, ho, wo, f), cols, wmat


def residual_block(x: Tensor, params, slope: float = 0.01) -> Tensor:
    """``x + conv(act(conv(x)))`` with two 3x3 same-padded convolutions.

    ``params`` is ``(w1, b1, w2, b2)``; biases may be ``None``.
    """
    w1, b1, w2, b2 = params
    if x.shape[-1] != w1.shape[2] or w2.shape[3] != x.shape[-1]:
        raise ShapeError(
            f"residual_block: input channels {x.shape[-1]} do not match block kernels {w1.shape} / {w2.shape}"
        )
    pad1, pad2 = w1.shape[0] // 2, w2.shape[0] // 2
    hidden = leaky_relu(conv2d(x, w1, b1, pad=pad1), slope)
    return add(x, conv2d(hidden, w2, b2, pad=pad2))


def max_pool_2x2(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool_2x2 needs even spatial dims, got {x.shape}")
    blocks = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    out_data = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward():
        g4 = np.zeros(blocks.shape)
        np.put_along_axis(g4, arg[..., None], out.grad[..., None], axis=-1)
        g = g4.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        x.accumulate(g)

    out = Tensor(out_data, (x,), backward)
    return out


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (B, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"fully_connected: input shape {x.shape} does not match weight shape {weight.shape}")
    out_data = x.data @ weight.data
    if bias is not None:
        out_data = out_data + bias.data

    def backward():
        if x.requires_grad:
            x.accumulate(out.grad @ weight.data.T)
        if weight.requires_grad:
            weight.accumulate(x.data.T @ out.grad)
        if bias is not None and bias.requires_grad:
            bias.accumulate(out.grad.sum(axis=0).reshape(bias.shape))

    out = Tensor(out_data, (x, weight) + ((bias,) if bias is not None else ()), backward)
    return out


def log_softmax_2class(logits: Tensor) -> Tensor:
    """Log-probabilities over a trailing axis of size 2."""
    if logits.shape[-1] != 2:
        raise ShapeError(f"log_softmax_2class needs a trailing axis of 2, got {logits.shape}")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    out_data = z - lse
    prob = np.exp(out_data)

    def backward():
        g = out.grad
        logits.accumulate(g - prob * g.sum(axis=-1, keepdims=True))

    out = Tensor(out_data, (logits,), backward)
    return out


def softmax_2class(logits: Tensor) -> Tensor:
    """Probabilities over a trailing axis of size 2; each pair sums to 1."""
    if logits.shape[-1] != 2:
        raise ShapeError(f"softmax_2class needs a trailing axis of 2, got {logits.shape}")
    z = logits.data
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def backward():
        g = out.grad
        logits.accumulate(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    out = Tensor(s, (logits,), backward)
    return out


def pooling_matrix(labels: np.ndarray, n_segments: int | None = None) -> sp.csr_matrix:
    """Sparse (segments x pixels) averaging operator for a flat label vector.

    Negative labels are ignored (the pixel belongs to no segment).
    """
    labels = np.asarray(labels).ravel()
    keep = labels >= 0
    if n_segments is None:
        n_segments = int(labels.max()) + 1
    counts = np.bincount(labels[keep], minlength=n_segments).astype(np.float64)
    if np.any(counts == 0):
        raise ShapeError("pooling_matrix: some segment has no pixels")
    cols = np.nonzero(keep)[0]
    rows = labels[keep]
    return sp.csr_matrix((1.0 / counts[rows], (rows, cols)), shape=(n_segments, labels.size))


def segment_mean(features: Tensor, pool: sp.csr_matrix) -> Tensor:
    """Average ``features`` (N, H, W, C) over segments using a pooling matrix."""
    c = features.shape[-1]
    flat = features.data.reshape(-1, c)
    if pool.shape[1] != flat.shape[0]:
        raise ShapeError(f"segment_mean: pooling matrix {pool.shape} does not match features {features.shape}")
    out_data = pool @ flat

    def backward():
        features.accumulate((pool.T @ out.grad).reshape(features.shape))

    out = Tensor(out_data, (features,), backward)
    return out


def he_uniform(rng: np.random.Generator, shape, fan_in: int, name: str) -> Parameter:
    limit = np.sqrt(6.0 / fan_in)
    return Parameter(rng.uniform(-limit, limit, size=shape), name=name)


def zeros(shape, name: str) -> Parameter:
    return Parameter(np.zeros(shape), name=name)
