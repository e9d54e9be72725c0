"""Single-trial inference latency and model size.

Trials are passed one at a time (batch of 1) in evaluation mode with BLAS
limited to one thread. Only the forward call sits inside the timed region;
input preparation happens beforehand and nothing is written to disk.
"""

from __future__ import annotations

import csv
import io
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import Mode, single_threaded
from .model import Model, ModelConfig, build, count_params, forward


@dataclass
class LatencyReport:
    tag: str
    n_passes: int
    mean_s: float
    median_s: float
    p95_s: float
    warmup: int
    params: int
    hardware: str
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def hardware_descriptor() -> str:
    return (f"{platform.machine()} {platform.processor() or 'cpu'} x{os.cpu_count()} "
            f"python {platform.python_version()} numpy {np.__version__}")


def _eval_forward(model: Model, x: np.ndarray):
    return forward(model, x, Mode.EVAL).logits.data


def measure_latency(model: Model, trials: np.ndarray, repeats: int = 10, warmup: int = 50, tag: str = "",
                    forward_fn: Optional[Callable] = None, clock: Callable = time.perf_counter) -> LatencyReport:
    """Time ``repeats * len(trials)`` single-trial forward passes after ``warmup`` untimed ones."""
    trials = np.asarray(trials)
    if trials.ndim != 3 or len(trials) == 0:
        raise ValueError("need a non-empty [n_trials, channels, samples] array")
    if repeats < 1 or warmup < 1:
        raise ValueError("repeats and warmup must both be >= 1")
    fwd = forward_fn or _eval_forward
    # batch-of-one views prepared up front so the timed region is the forward call alone
    inputs = [np.ascontiguousarray(t[None], dtype=model.dtype) for t in trials]
    times = np.empty(repeats * len(inputs))
    with single_threaded():
        for i in range(warmup):
            fwd(model, inputs[i % len(inputs)])
        k = 0
        for _ in range(repeats):
            for x in inputs:
                t0 = clock()
                fwd(model, x)
                times[k] = clock() - t0
                k += 1
    return LatencyReport(tag or _tag(model.config), len(times), float(times.mean()), float(np.median(times)),
                         float(np.percentile(times, 95)), warmup, count_params(model), hardware_descriptor())


def _tag(cfg: ModelConfig) -> str:
    return f"W{cfg.width}-K{cfg.depth}-S{cfg.kernel_size}"


def flag_instability(first: LatencyReport, second: LatencyReport, tolerance: float = 0.2) -> LatencyReport:
    """Mark ``second`` when its mean differs from ``first`` by more than ``tolerance``; never raises."""
    ref = max(first.mean_s, 1e-12)
    change = abs(second.mean_s - first.mean_s) / ref
    if change >= tolerance:
        second.flags.append(f"mean changed by {100 * change:.1f}% between consecutive measurements")
    return second


def size_latency_sweep(configs: list, trials: np.ndarray, repeats: int = 1, warmup: int = 5,
                       seed: int = 0) -> list[dict]:
    """One row per config: structure, parameter count and latency."""
    rows = []
    for cfg in configs:
        model = build(cfg, seed=seed)
        # fresh models carry no statistics yet; one capture pass makes eval mode usable
        forward(model, np.asarray(trials[:2], dtype=model.dtype), Mode.CAPTURE)
        rep = measure_latency(model, trials, repeats, warmup)
        rows.append({"W": cfg.width, "K": cfg.depth, "S": cfg.kernel_size, "params": rep.params,
                     "mean_s": rep.mean_s, "median_s": rep.median_s, "p95_s": rep.p95_s})
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()
