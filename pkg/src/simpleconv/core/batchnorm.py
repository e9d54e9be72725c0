"""Batch normalisation over (batch, time) with a statistics-capture mode.

``Mode.CAPTURE`` is what makes test-time adaptation possible: the layer
normalises with the statistics of the batch it is given and stores those
statistics as its running estimate, with no momentum blending.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, make_node


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"
    CAPTURE = "capture"


class UninitializedStatisticsError(RuntimeError):
    pass


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    initialized: bool = False

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if eps <= 0:
            raise ValueError("eps must be positive")
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def snapshot(self) -> tuple[np.ndarray, np.ndarray, bool]:
        return self.running_mean.copy(), self.running_var.copy(), self.initialized

    def restore(self, snap):
        mean, var, init = snap
        self.running_mean = mean.copy()
        self.running_var = var.copy()
        self.initialized = init


def batch_statistics(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over the (batch, time) axes."""
    mean = x.mean(axis=(0, 2))
    var = ((x - mean[None, :, None]) ** 2).mean(axis=(0, 2))
    return mean, var


def batchnorm(x: Tensor, state: BatchNormState, mode: Mode = Mode.TRAIN) -> Tensor:
    if x.data.ndim != 3 or x.shape[1] != state.channels:
        raise ValueError(f"batchnorm expects [B,{state.channels},T], got {x.shape}")
    B, C, T = x.shape
    dt = x.dtype
    gamma = state.gamma.data.astype(dt, copy=False)
    beta = state.beta.data.astype(dt, copy=False)

    if mode is Mode.EVAL:
        if not state.initialized:
            raise UninitializedStatisticsError(
                "uninitialized statistics: run a TRAIN or CAPTURE pass before EVAL")
        mean = state.running_mean.astype(dt, copy=False)
        var = state.running_var.astype(dt, copy=False)
        inv_std = 1.0 / np.sqrt(var + dt.type(state.eps))
        xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
        y = gamma[None, :, None] * xhat + beta[None, :, None]

        def back_eval(g):
            gx = g * (gamma * inv_std)[None, :, None]
            return gx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

        return make_node(y, (x, state.gamma, state.beta), back_eval)

    n = B * T
    if n < 2:
        raise ValueError(f"batchnorm in {mode.value} mode needs at least 2 values per channel, got {n}")
    mean, var = batch_statistics(x.data)
    inv_std = 1.0 / np.sqrt(var + dt.type(state.eps))
    xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
    y = gamma[None, :, None] * xhat + beta[None, :, None]

    rdt = state.running_mean.dtype
    # keeps running_var strictly positive for dead channels; below eps, so no visible effect
    var_store = np.maximum(var, np.finfo(rdt).tiny)
    if mode is Mode.TRAIN:
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(rdt)
        state.running_var = ((1 - m) * state.running_var + m * var_store).astype(rdt)
    else:
        state.running_mean = mean.astype(rdt)
        state.running_var = var_store.astype(rdt)
    state.initialized = True

    def back_train(g):
        gxhat = g * gamma[None, :, None]
        s1 = gxhat.sum(axis=(0, 2))
        s2 = (gxhat * xhat).sum(axis=(0, 2))
        gx = (inv_std[None, :, None] / n) * (n * gxhat - s1[None, :, None] - xhat * s2[None, :, None])
        return gx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    return make_node(y, (x, state.gamma, state.beta), back_train)
