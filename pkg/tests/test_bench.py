import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from simpleconv.bench import LatencyReport, flag_instability, measure_latency, size_latency_sweep, sweep_csv
from simpleconv.core import Mode
from simpleconv.model import ModelConfig, build, count_params, forward

CFG = ModelConfig(width=4, depth=1, kernel_size=3, in_channels=3, n_classes=2)


def ready_model(cfg=CFG):
    m = build(cfg)
    forward(m, np.random.default_rng(0).normal(size=(4, cfg.in_channels, 32)), Mode.CAPTURE)
    return m


def test_pass_count_and_percentiles(rng):
    trials = rng.normal(size=(12, 3, 32))
    rep = measure_latency(ready_model(), trials, repeats=3, warmup=2)
    assert rep.n_passes == 36 and rep.warmup == 2
    assert 0 <= rep.mean_s and rep.median_s <= rep.p95_s
    assert rep.params == count_params(ready_model())
    assert rep.hardware and rep.tag == "W4-K1-S3"


def test_timed_region_is_exactly_the_forward(rng):
    trials = rng.normal(size=(5, 3, 32))
    events = []

    def clock():
        events.append("tick")
        return float(len(events))

    def fwd(model, x):
        # input already batch-of-one, contiguous and in the model dtype: no prep inside the timer
        assert x.shape == (1, 3, 32) and x.flags.c_contiguous and x.dtype == model.dtype
        events.append("forward")

    rep = measure_latency(ready_model(), trials, repeats=2, warmup=3, forward_fn=fwd, clock=clock)
    assert events[:3] == ["forward"] * 3  # warmup, untimed
    timed = events[3:]
    assert timed == ["tick", "forward", "tick"] * 10
    assert rep.mean_s == 2.0  # each pass spans exactly one forward between two ticks


def test_zero_trials_rejected():
    with pytest.raises(ValueError):
        measure_latency(ready_model(), np.zeros((0, 3, 32)))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=40))
def test_order_statistics_with_scripted_clock(durations):
    ends = list(itertools.accumulate(durations))
    starts = [0.0] + ends[:-1]
    it = iter([t for pair in zip(starts, ends) for t in pair])
    m = ready_model()
    rep = measure_latency(m, np.zeros((len(durations), 3, 32)), repeats=1, warmup=1,
                          forward_fn=lambda *a: None, clock=lambda: next(it))
    assert rep.mean_s >= 0 and rep.median_s <= rep.p95_s + 1e-15
    assert rep.mean_s == pytest.approx(np.mean(durations))


def test_instability_is_flagged_not_raised():
    a = LatencyReport("m", 10, 1.0, 1.0, 1.0, 5, 1, "hw")
    b = LatencyReport("m", 10, 1.5, 1.5, 1.5, 5, 1, "hw")
    c = LatencyReport("m", 10, 1.05, 1.0, 1.1, 5, 1, "hw")
    assert flag_instability(a, b).flags
    assert not flag_instability(a, c).flags


def test_sweep_params_monotone_in_width(rng):
    trials = rng.normal(size=(3, 3, 32))
    cfgs = [CFG.replace(width=w) for w in (4, 8, 16)]
    rows = size_latency_sweep(cfgs, trials, repeats=1, warmup=1)
    assert [r["params"] for r in rows] == [count_params(build(c)) for c in cfgs]
    assert rows[0]["params"] < rows[1]["params"] < rows[2]["params"]
    text = sweep_csv(rows)
    assert text.splitlines()[0] == "W,K,S,params,mean_s,median_s,p95_s" and len(text.splitlines()) == 4
