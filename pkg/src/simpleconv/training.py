"""Training routine: Adam, a single step-decay of the learning rate, mixup and
an auxiliary subject-classification head; plus fine-tuning and one-stage MDL.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core import Adam, Mode, softmax_cross_entropy
from .data import TrialArchive, concat_archives
from .model import Model, ModelConfig, build, forward


@dataclass
class TrainConfig:
    epochs: int = 50
    decay_epoch: int = 40
    decay_factor: float = 0.1
    base_lr: float = 1e-3
    batch_size: int = 64
    mixup_alpha: float = 0.2
    subject_loss_weight: float = 0.1
    seed: int = 0
    finetune_epochs: int = 60

    def __post_init__(self):
        if not 0 <= self.decay_epoch <= self.epochs:
            raise ValueError("decay_epoch must lie in [0, epochs]")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.mixup_alpha < 0 or self.subject_loss_weight < 0:
            raise ValueError("mixup_alpha and subject_loss_weight must be >= 0")
        if self.base_lr <= 0 or self.batch_size < 1:
            raise ValueError("base_lr must be > 0 and batch_size >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.base_lr if epoch < self.decay_epoch else self.base_lr * self.decay_factor

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    task_loss: list = field(default_factory=list)
    subject_loss: list = field(default_factory=list)
    total_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    optimizer: Optional[Adam] = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.total_loss)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("optimizer", None)
        return d


def mixup_batch(x: np.ndarray, y: np.ndarray, s: Optional[np.ndarray], alpha: float,
                rng: np.random.Generator, lam: Optional[float] = None):
    """Convex combination of the batch with a random permutation of itself.

    Returns ``(x_mix, y_mix, s_mix, lam)``; class and subject targets are
    mixed with the same ``lam``. ``lam`` may be forced for testing.
    """
    B = len(x)
    if B < 2:
        return x, y, s, 1.0
    if lam is None:
        if alpha <= 0:
            raise ValueError("mixup needs alpha > 0")
        lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(B)
    lx = x.dtype.type(lam)
    x_mix = lx * x + (x.dtype.type(1) - lx) * x[perm]
    y_mix = lam * y + (1 - lam) * y[perm]
    s_mix = None if s is None else lam * s + (1 - lam) * s[perm]
    return x_mix, y_mix, s_mix, lam


def subject_index(subject_ids: np.ndarray) -> tuple[np.ndarray, list]:
    """Map arbitrary subject ids to a contiguous range [0, P)."""
    order = sorted(set(np.asarray(subject_ids).tolist()))
    lookup = {s: i for i, s in enumerate(order)}
    return np.array([lookup[s] for s in subject_ids.tolist()], dtype=np.int64), order


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a trailing single-trial batch gives degenerate batch statistics
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def _run_epochs(model: Model, trials: TrialArchive, config: TrainConfig, optimizer: Adam,
                epochs: int, lr_for_epoch, use_mixup: bool, subject_weight: float,
                seed, history: TrainHistory, observer=None):
    # shuffling and mixup draw from separate streams, so toggling mixup
    # leaves the batch order untouched
    shuffle_rng = np.random.default_rng([*seed, 0])
    mix_rng = np.random.default_rng([*seed, 1])
    if trials.n_trials == 0:
        raise ValueError("cannot train on an empty trial set")
    K = model.config.n_classes
    Y = np.eye(K, dtype=np.float64)[trials.labels]
    S = None
    if subject_weight > 0:
        if model.subject_head is None:
            raise ValueError("subject regularisation needs a model built with n_subjects > 0")
        idx, order = subject_index(trials.subject_id)
        P = model.config.n_subjects
        if len(order) > P:
            raise ValueError(f"{len(order)} training subjects but the subject head has {P} outputs")
        S = np.eye(P, dtype=np.float64)[idx]
    mix = use_mixup and config.mixup_alpha > 0
    X = trials.data.astype(model.dtype, copy=False)
    for epoch in range(epochs):
        t0 = time.perf_counter()
        optimizer.lr = lr_for_epoch(epoch)
        task_sum = subj_sum = total_sum = 0.0
        correct = seen = 0
        for ids in _batches(len(X), config.batch_size, shuffle_rng):
            xb, yb = X[ids], Y[ids]
            sb = None if S is None else S[ids]
            lam = 1.0
            if mix:
                xb, yb, sb, lam = mixup_batch(xb, yb, sb, config.mixup_alpha, mix_rng)
            if observer is not None:
                observer("batch", epoch=epoch, ids=ids, lam=lam, subject_weight=subject_weight)
            out = forward(model, xb, Mode.TRAIN)
            task = softmax_cross_entropy(out.logits, yb)
            loss = task
            if sb is not None:
                subj = softmax_cross_entropy(out.subject_logits, sb)
                loss = task + subject_weight * subj
                subj_sum += subj.item() * len(ids)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            task_sum += task.item() * len(ids)
            total_sum += loss.item() * len(ids)
            correct += int(np.sum(out.logits.data.argmax(1) == yb.argmax(1)))
            seen += len(ids)
        history.task_loss.append(task_sum / seen)
        history.subject_loss.append(subj_sum / seen)
        history.total_loss.append(total_sum / seen)
        history.lr.append(optimizer.lr)
        history.train_acc.append(100.0 * correct / seen)
        history.wall_clock.append(time.perf_counter() - t0)
    return history


def train(model: Model, trials: TrialArchive, config: TrainConfig, use_mixup: bool = True,
          use_subject_reg: bool = True, observer=None) -> tuple[Model, TrainHistory]:
    """One full training run, in place. The final optimizer is kept on the history
    so that :func:`finetune` can continue from it.

    ``observer(event, **info)`` is called once per mini-batch with the batch
    trial ids and mixup weight.
    """
    optimizer = Adam(model.parameters(), lr=config.base_lr)
    weight = config.subject_loss_weight if use_subject_reg else 0.0
    history = TrainHistory(optimizer=optimizer)
    _run_epochs(model, trials, config, optimizer, config.epochs, config.lr_at, use_mixup, weight,
                (config.seed, 0), history, observer)
    return model, history


def finetune(model: Model, optimizer: Optional[Adam], calibration: TrialArchive, config: TrainConfig,
             use_mixup: bool = True, epochs: Optional[int] = None, observer=None) -> tuple[Model, TrainHistory]:
    """Continue training on one subject's calibration data at the post-decay rate.

    The subject head receives no gradient (the calibration subject was never a
    training class), and Adam skips parameters without gradients.
    """
    epochs = config.finetune_epochs if epochs is None else epochs
    if calibration.n_trials == 0:
        raise ValueError("cannot fine-tune on an empty calibration set")
    if len(set(calibration.subject_id.tolist())) != 1:
        raise ValueError("calibration data must come from exactly one subject")
    if optimizer is None:
        optimizer = Adam(model.parameters(), lr=config.base_lr * config.decay_factor)
    history = TrainHistory(optimizer=optimizer)
    if epochs == 0:
        return model, history
    lr = config.base_lr * config.decay_factor
    _run_epochs(model, calibration, config, optimizer, epochs, lambda e: lr, use_mixup, 0.0,
                (config.seed, 1), history, observer)
    return model, history


def train_mdl(model_config: ModelConfig, train_trials: TrialArchive, calibration: Optional[TrialArchive],
              config: TrainConfig, init_seed: int = 0, use_mixup: bool = True,
              use_subject_reg: bool = True) -> tuple[Model, TrainHistory]:
    """One-stage alternative to fine-tuning: calibration data joins the training pool."""
    pool = train_trials if calibration is None or calibration.n_trials == 0 else \
        concat_archives(train_trials, calibration)
    if use_subject_reg and config.subject_loss_weight > 0:
        model_config = model_config.replace(n_subjects=len(pool.subjects))
    return train(build(model_config, seed=init_seed), pool, config, use_mixup, use_subject_reg)
