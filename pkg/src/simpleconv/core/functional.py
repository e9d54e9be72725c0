"""Differentiable layers used by the network: conv1d, relu, pooling, linear, loss.

All arrays are laid out (batch, channels, time) for signals and
(batch, features) after pooling.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_node


def _same_pad(kernel_size: int) -> tuple[int, int]:
    # y[t] reads x[t + s - (S-1)//2]; the remaining padding goes on the right
    left = (kernel_size - 1) // 2
    return left, kernel_size - 1 - left


def _check_conv_shapes(x: np.ndarray, w: np.ndarray, b: np.ndarray | None):
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"conv1d expects x[B,Cin,T] and w[Cout,Cin,S], got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv1d: input has {x.shape[1]} channels but kernel expects {w.shape[1]}")
    if x.shape[2] < 1:
        raise ValueError("conv1d: time axis must have at least one sample")
    if w.shape[2] < 1:
        raise ValueError("conv1d: kernel size must be >= 1")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"conv1d: bias shape {b.shape} does not match {w.shape[0]} output channels")


def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_conv_shapes(x, w, b)
    left, right = _same_pad(w.shape[2])
    xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
    windows = sliding_window_view(xp, w.shape[2], axis=2)  # [B, Cin, T, S]
    y = np.tensordot(windows, w, axes=([1, 3], [1, 2]))  # [B, T, Cout]
    y = y.transpose(0, 2, 1) + b[None, :, None]
    return np.ascontiguousarray(y, dtype=x.dtype)


def conv1d_backward(grad_y: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Return ``(grad_x, grad_w, grad_b)`` for :func:`conv1d`."""
    _check_conv_shapes(x, w, None)
    B, _, T = x.shape
    Cout, _, S = w.shape
    if grad_y.shape != (B, Cout, T):
        raise ValueError(f"conv1d_backward: grad_y shape {grad_y.shape} != {(B, Cout, T)}")
    left, right = _same_pad(S)
    xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
    windows = sliding_window_view(xp, S, axis=2)
    grad_w = np.tensordot(grad_y, windows, axes=([0, 2], [0, 2]))  # [Cout, Cin, S]
    grad_b = grad_y.sum(axis=(0, 2))
    # full correlation of grad_y with the flipped kernel, then crop the padding
    gp = np.pad(grad_y, ((0, 0), (0, 0), (S - 1, S - 1)))
    gw = sliding_window_view(gp, S, axis=2)  # [B, Cout, T+S-1, S]
    grad_xp = np.tensordot(gw, w[:, :, ::-1], axes=([1, 3], [0, 2]))  # [B, T+S-1, Cin]
    grad_x = grad_xp.transpose(0, 2, 1)[:, :, left:left + T]
    dt = x.dtype
    return (np.ascontiguousarray(grad_x, dtype=dt), grad_w.astype(dt, copy=False),
            grad_b.astype(dt, copy=False))


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """'Same'-padded 1D convolution (cross-correlation), stride 1."""
    y = conv1d_forward(x.data, w.data, b.data)

    def back(g):
        gx, gw, gb = conv1d_backward(g, x.data, w.data)
        return gx, gw, gb

    return make_node(y, (x, w, b), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))


def maxpool1d(x: Tensor) -> Tensor:
    """Kernel 2, stride 2. An odd trailing sample is dropped."""
    if x.data.ndim != 3:
        raise ValueError(f"maxpool1d expects [B,C,T], got {x.shape}")
    B, C, T = x.shape
    if T < 2:
        raise ValueError(f"maxpool1d needs T >= 2, got T={T}")
    half = T // 2
    pairs = x.data[:, :, : 2 * half].reshape(B, C, half, 2)
    # argmax returns the first index on ties, so the earlier sample wins
    idx = pairs.argmax(axis=-1)
    y = np.take_along_axis(pairs, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gpairs = np.zeros((B, C, half, 2), dtype=x.dtype)
        np.put_along_axis(gpairs, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, : 2 * half] = gpairs.reshape(B, C, 2 * half)
        return (gx,)

    return make_node(np.ascontiguousarray(y), (x,), back)


def global_avg_pool_time(x: Tensor) -> Tensor:
    if x.data.ndim != 3:
        raise ValueError(f"global_avg_pool_time expects [B,C,T], got {x.shape}")
    T = x.shape[2]
    if T < 1:
        raise ValueError("global_avg_pool_time needs T >= 1")
    y = x.data.mean(axis=2)

    def back(g):
        return (np.broadcast_to(g[:, :, None] / T, x.shape).astype(x.dtype),)

    return make_node(y, (x,), back)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ValueError(f"linear expects x[B,F], w[O,F]; got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ValueError(f"linear: dimension mismatch x{x.shape} w{w.shape} b{b.shape}")
    y = x.data @ w.data.T + b.data

    def back(g):
        return g @ w.data, g.T @ x.data, g.sum(axis=0)

    return make_node(y, (x, w, b), back)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of ``-sum(targets * log_softmax(logits))``.

    ``targets`` are soft labels (rows summing to one), so mixup targets work
    without special casing.
    """
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    z = logits.data
    if z.ndim != 2 or t.shape != z.shape:
        raise ValueError(f"softmax_cross_entropy: logits {z.shape} and targets {t.shape} must both be [B,K]")
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("softmax_cross_entropy: non-finite logits")
    B = z.shape[0]
    logp = log_softmax(z)
    loss = np.asarray(-(t * logp).sum() / B, dtype=z.dtype)

    def back(g):
        return ((np.exp(logp) - t) * (g / B),)

    return make_node(loss, (logits,), back)
