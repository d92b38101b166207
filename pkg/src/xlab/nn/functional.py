"""Differentiable layer ops on :class:`~xlab.nn.tensor.Tensor`."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_node


class ConfigError(ValueError):
    """Layer hyperparameters that cannot produce a valid output."""


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# numpy helpers, no graph --------------------------------------------------

def softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_rows(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-row ``-sum(target * log softmax(logits))``."""
    return -(np.asarray(target) * log_softmax_np(np.asarray(logits))).sum(axis=-1)


# graph ops ------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not conform to weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match output width {w.shape[1]}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(y, parents, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over NCHW input with an (out, in, kh, kw) kernel."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not conform to kernel {w.shape}")
    n, c, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: stride={stride} padding={padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ConfigError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{wd + 2 * padding}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(cout, -1)
    y = cols @ wmat.T
    if b is not None:
        y = y + b.data
    out = y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gt = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        gw = (gt @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            # (c, kh, kw, n, ho, wo): each kernel offset is a block of whole output maps
            dcols = (wmat.T @ gt).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        if b is None:
            return gx, gw
        return gx, gw, gt.sum(axis=1)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(np.ascontiguousarray(out), parents, backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ConfigError(f"max_pool2d: window {size} larger than input {h}x{w}")
    hs, ws = ho * size, wo * size

    def running_max(slices):
        # strict comparison: the first maximum in scan order wins ties
        best = slices[0]
        arg = np.zeros(best.shape, dtype=np.int8)
        for k, cand in enumerate(slices[1:], start=1):
            better = cand > best
            best = np.maximum(best, cand)
            arg[better] = k
        return best, arg

    # separable: reduce across columns, then across rows
    colmax, col_arg = running_max([x.data[:, :, :hs, j:ws:size] for j in range(size)])
    out, row_arg = running_max([colmax[:, :, i::size] for i in range(size)])

    def backward(g):
        gcol = np.empty(colmax.shape, dtype=g.dtype)
        for i in range(size):
            gcol[:, :, i::size] = g * (row_arg == i)
        gx = np.zeros(x.shape, dtype=g.dtype)
        for j in range(size):
            gx[:, :, :hs, j:ws:size] = gcol * (col_arg == j)
        return (gx,)

    return make_node(out, (x,), backward)


def softmax(x: Tensor) -> Tensor:
    s = softmax_np(x.data)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_node(s, (x,), backward)


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Batch-mean cross-entropy of ``softmax(logits)`` against soft targets."""
    t = np.asarray(_arr(target), dtype=logits.data.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"softmax_cross_entropy: target {t.shape} vs logits {logits.shape}")
    logp = log_softmax_np(logits.data)
    batch = logits.shape[0]
    loss = -(t * logp).sum() / batch

    def backward(g):
        s = np.exp(logp)
        return (g * (s * t.sum(axis=-1, keepdims=True) - t) / batch,)

    return make_node(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    t = np.asarray(_arr(target), dtype=pred.data.dtype).reshape(pred.shape)
    diff = pred.data - t
    loss = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)
    return make_node(loss, (pred,), lambda g: (g * 2.0 * diff / diff.size,))
