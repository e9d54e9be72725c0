"""
Single-trial latency
====================

Each trial goes through the network alone, in evaluation mode with one
BLAS thread. Only the forward call is timed.
"""

import numpy as np

from simpleconv.bench import measure_latency, size_latency_sweep, sweep_csv
from simpleconv.core import Mode
from simpleconv.model import ModelConfig, build, forward, preset

rng = np.random.default_rng(0)

for name in ("within", "cross"):
    cfg = preset(name, 22, 4)
    trials = rng.normal(size=(32, 22, int(4 * cfg.resample_hz)))
    m = build(cfg)
    forward(m, trials[:4].astype(m.dtype), Mode.CAPTURE)  # give BN layers statistics
    rep = measure_latency(m, trials, repeats=2, warmup=10)
    print(f"{name}: {rep.params} params, mean {1e3 * rep.mean_s:.2f} ms, p95 {1e3 * rep.p95_s:.2f} ms")

# %%
# Size against latency for a few widths
base = ModelConfig(width=8, depth=1, kernel_size=7, in_channels=22, n_classes=4)
rows = size_latency_sweep([base.replace(width=w) for w in (8, 32, 64)], rng.normal(size=(16, 22, 280)))
print(sweep_csv(rows))
