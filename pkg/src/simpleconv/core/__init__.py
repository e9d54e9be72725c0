"""Minimal tensor engine: reverse-mode gradients plus the layers the network needs."""

from .batchnorm import BatchNormState, Mode, UninitializedStatisticsError, batch_statistics, batchnorm
from .functional import (
    conv1d,
    conv1d_backward,
    conv1d_forward,
    global_avg_pool_time,
    linear,
    log_softmax,
    maxpool1d,
    relu,
    softmax,
    softmax_cross_entropy,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor
from .threads import single_threaded

__all__ = [
    "Adam", "AdamState", "BatchNormState", "Mode", "Tensor", "UninitializedStatisticsError",
    "adam_step", "batch_statistics", "batchnorm", "conv1d", "conv1d_backward", "conv1d_forward",
    "global_avg_pool_time", "linear", "log_softmax", "maxpool1d", "relu", "single_threaded",
    "softmax", "softmax_cross_entropy",
]
