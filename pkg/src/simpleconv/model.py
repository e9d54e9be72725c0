"""The network: an embedding convolution, K two-convolution blocks and a linear head.

The architecture is fixed by four numbers: width ``W`` (feature maps after the
embedding convolution), depth ``K`` (number of two-convolution blocks), kernel
size ``S``, and the input channel count. Each block grows the feature maps by
sqrt(2) at its first convolution and halves time with a max pool at its end;
the trunk finishes with an average over time, so any input with at least
``2**K`` samples yields fixed-size logits.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .core import (
    BatchNormState,
    Mode,
    Tensor,
    batchnorm,
    conv1d,
    global_avg_pool_time,
    linear,
    maxpool1d,
    relu,
)


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


@dataclass
class ModelConfig:
    width: int
    depth: int
    kernel_size: int
    in_channels: int
    n_classes: int
    n_subjects: int = 0
    resample_hz: Optional[float] = None

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.n_subjects < 0:
            raise ValueError("n_subjects must be >= 0")

    def channel_schedule(self) -> list[int]:
        return [round_half_away(self.width * 2 ** (i / 2)) for i in range(self.depth + 1)]

    @property
    def n_layers(self) -> int:
        """Convolutions plus the class head."""
        return 2 * self.depth + 2

    @property
    def min_length(self) -> int:
        return 2 ** self.depth

    def replace(self, **changes) -> "ModelConfig":
        d = asdict(self)
        d.update(changes)
        return ModelConfig(**d)


PRESETS = {
    "within": dict(width=104, depth=1, kernel_size=15, resample_hz=80.0),
    "cross": dict(width=104, depth=4, kernel_size=6, resample_hz=70.0),
}


def preset(name: str, in_channels: int, n_classes: int, n_subjects: int = 0) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(in_channels=in_channels, n_classes=n_classes, n_subjects=n_subjects, **PRESETS[name])


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor


@dataclass
class Model:
    config: ModelConfig
    convs: list = field(default_factory=list)
    norms: list = field(default_factory=list)
    head: Optional[Conv] = None
    subject_head: Optional[Conv] = None

    def parameters(self) -> list[Tensor]:
        """Learnable tensors in build order."""
        params = []
        for conv, bn in zip(self.convs, self.norms):
            params += [conv.weight, conv.bias, bn.gamma, bn.beta]
        params += [self.head.weight, self.head.bias]
        if self.subject_head is not None:
            params += [self.subject_head.weight, self.subject_head.bias]
        return params

    @property
    def dtype(self):
        return self.head.weight.dtype

    def copy(self) -> "Model":
        return copy.deepcopy(self)


class ForwardOutput(NamedTuple):
    logits: Tensor
    subject_logits: Optional[Tensor]
    features: Tensor


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _dense(rng, n_in: int, n_out: int, dtype) -> Conv:
    return Conv(_he_uniform(rng, (n_out, n_in), n_in, dtype),
                Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True))


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    rng = np.random.default_rng(seed)
    S = config.kernel_size
    sched = config.channel_schedule()
    # (in, out) for every convolution: the embedding, then two per block
    plan = [(config.in_channels, sched[0])]
    for i in range(1, config.depth + 1):
        plan += [(sched[i - 1], sched[i]), (sched[i], sched[i])]
    model = Model(config=config)
    for cin, cout in plan:
        model.convs.append(Conv(_he_uniform(rng, (cout, cin, S), cin * S, dtype),
                                Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)))
        model.norms.append(BatchNormState.create(cout, dtype=dtype))
    model.head = _dense(rng, sched[-1], config.n_classes, dtype)
    if config.n_subjects > 0:
        model.subject_head = _dense(rng, sched[-1], config.n_subjects, dtype)
    return model


def forward(model: Model, x, mode: Mode = Mode.EVAL) -> ForwardOutput:
    h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=model.dtype))
    cfg = model.config
    if h.data.ndim != 3 or h.shape[1] != cfg.in_channels:
        raise ValueError(f"expected input [B,{cfg.in_channels},T], got {h.shape}")
    if h.shape[2] < cfg.min_length:
        raise ValueError(
            f"input has {h.shape[2]} samples; depth {cfg.depth} needs at least {cfg.min_length}")
    for i, (conv, bn) in enumerate(zip(model.convs, model.norms)):
        h = relu(batchnorm(conv1d(h, conv.weight, conv.bias), bn, mode))
        if i > 0 and i % 2 == 0:
            h = maxpool1d(h)
    feats = global_avg_pool_time(h)
    logits = linear(feats, model.head.weight, model.head.bias)
    subj = None
    if model.subject_head is not None:
        subj = linear(feats, model.subject_head.weight, model.subject_head.bias)
    return ForwardOutput(logits, subj, feats)


def predict(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return np.concatenate([forward(model, x[i:i + batch_size], Mode.EVAL).logits.data.argmax(axis=1)
                           for i in range(0, len(x), batch_size)]) if len(x) else np.zeros(0, int)


def count_params(model: Model) -> int:
    return sum(p.data.size for p in model.parameters())


def recompute_bn_stats(model: Model, batch: np.ndarray) -> Model:
    """Return a copy whose batch-norm statistics come from ``batch``.

    One forward pass in capture mode: each layer stores the statistics of its
    own input, which already reflects the re-normalised layers upstream. The
    original model is left untouched.
    """
    batch = np.asarray(batch)
    if batch.ndim != 3 or batch.shape[0] < 2:
        raise ValueError(f"need a batch of at least 2 trials to estimate variance, got shape {batch.shape}")
    adapted = model.copy()
    forward(adapted, batch.astype(model.dtype, copy=False), Mode.CAPTURE)
    return adapted


def extract_embeddings(model: Model, trials: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Pooled features right before the class head, one row per trial."""
    trials = np.asarray(trials, dtype=model.dtype)
    width = model.head.weight.shape[1]
    if len(trials) == 0:
        return np.zeros((0, width), dtype=model.dtype)
    return np.concatenate([forward(model, trials[i:i + batch_size], Mode.EVAL).features.data
                           for i in range(0, len(trials), batch_size)])


# -- checkpoint file ------------------------------------------------------------
# "ESCM" | u32 version | u32 config length | config JSON (UTF-8) | u8 stats flag |
# float32 LE arrays in build order: per conv (weight, bias, gamma, beta,
# running_mean, running_var), then class head (weight, bias), then subject head.

CHECKPOINT_MAGIC = b"ESCM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _arrays_in_order(model: Model) -> list[np.ndarray]:
    out = []
    for conv, bn in zip(model.convs, model.norms):
        out += [conv.weight.data, conv.bias.data, bn.gamma.data, bn.beta.data,
                bn.running_mean, bn.running_var]
    out += [model.head.weight.data, model.head.bias.data]
    if model.subject_head is not None:
        out += [model.subject_head.weight.data, model.subject_head.bias.data]
    return out


def checkpoint_bytes(model: Model) -> bytes:
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    initialized = all(bn.initialized for bn in model.norms)
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg,
             struct.pack("<B", int(initialized))]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in _arrays_in_order(model)]
    return b"".join(parts)


def model_from_bytes(buf: bytes) -> Model:
    if len(buf) < 12 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not an ESCM checkpoint")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(buf) < 12 + n + 1:
        raise CheckpointError("truncated payload")
    config = ModelConfig(**json.loads(buf[12:12 + n].decode("utf-8")))
    initialized = bool(buf[12 + n])
    model = build(config, seed=0)
    offset = 13 + n
    for target in _arrays_in_order(model):
        nbytes = target.size * 4
        if offset + nbytes > len(buf):
            raise CheckpointError("truncated payload")
        target[...] = np.frombuffer(buf, dtype="<f4", count=target.size, offset=offset).reshape(target.shape)
        offset += nbytes
    if offset != len(buf):
        raise CheckpointError(f"{len(buf) - offset} trailing bytes after payload")
    for bn in model.norms:
        bn.initialized = initialized
    return model


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())
