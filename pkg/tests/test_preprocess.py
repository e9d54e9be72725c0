import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from simpleconv.data import TrialArchive, synth_generate
from simpleconv.preprocess import (
    Preprocessor,
    Recording,
    apply_ea,
    apply_zscore,
    check_order,
    epoch_from_cue,
    fit_ea,
    fit_zscore,
    highpass,
    normalize_archive,
    resample,
)


def amplitude(x):
    return np.sqrt(2 * np.mean(x ** 2))


# -- high-pass ---------------------------------------------------------------------

def test_highpass_removes_dc():
    x = np.full((2, 5000), 3.0)
    y = highpass(x, 250.0)
    assert np.abs(y).max() < 1e-3 * 3.0


def test_highpass_causal_removes_dc_after_transient():
    x = np.full((1, 20000), 3.0)
    y = highpass(x, 250.0, causal=True)
    assert np.abs(y[:, 10000:]).max() < 1e-3 * 3.0


def test_highpass_passes_alpha_band():
    fs = 250.0
    t = np.arange(int(20 * fs)) / fs
    x = np.sin(2 * np.pi * 10 * t)
    y = highpass(x, fs)
    mid = slice(len(t) // 4, 3 * len(t) // 4)
    assert abs(amplitude(y[mid]) / amplitude(x[mid]) - 1) < 0.01


def test_highpass_attenuates_slow_drift():
    fs = 250.0
    t = np.arange(int(200 * fs)) / fs
    x = np.sin(2 * np.pi * 0.05 * t)
    y = highpass(x, fs)
    mid = slice(len(t) // 4, 3 * len(t) // 4)
    assert 20 * np.log10(amplitude(y[mid]) / amplitude(x[mid])) < -20


def test_highpass_rejects_low_fs():
    with pytest.raises(ValueError):
        highpass(np.zeros(10), 1.0, 0.5)


# -- resampling ----------------------------------------------------------------------

def test_resample_identity():
    x = np.random.default_rng(0).normal(size=(3, 100))
    np.testing.assert_allclose(resample(x, 250, 250), x, atol=1e-9)


def test_resample_keeps_in_band_sinusoid():
    t_in = np.arange(1000) / 250.0
    y = resample(np.sin(2 * np.pi * 10 * t_in), 250, 70)
    assert len(y) == round(1000 * 70 / 250)
    t_out = np.arange(len(y)) / 70.0
    ref = np.sin(2 * np.pi * 10 * t_out)
    mid = slice(20, len(y) - 20)
    assert np.corrcoef(y[mid], ref[mid])[0, 1] > 0.99


def test_resample_removes_out_of_band():
    t = np.arange(2500) / 250.0
    x = np.sin(2 * np.pi * 40 * t)
    y = resample(x, 250, 70)
    mid = slice(50, len(y) - 50)
    assert np.mean(y[mid] ** 2) < 0.05 * np.mean(x ** 2)


def test_resample_round_trip_band_limited():
    fs, fs2 = 250.0, 100.0
    t = np.arange(2500) / fs
    x = np.sin(2 * np.pi * 7 * t) + 0.5 * np.sin(2 * np.pi * 21 * t + 1.0)
    back = resample_up(resample(x, fs, fs2), fs2, fs, len(x))
    mid = slice(200, len(x) - 200)
    assert np.corrcoef(back[mid], x[mid])[0, 1] > 0.99


def resample_up(y, fs_from, fs_to, n):
    # scipy's polyphase upsampler as an independent way back
    from scipy.signal import resample_poly
    from fractions import Fraction
    r = Fraction(fs_to / fs_from).limit_denominator(1000)
    return resample_poly(y, r.numerator, r.denominator)[:n]


def test_resample_errors():
    with pytest.raises(ValueError):
        resample(np.zeros(10), 250, 0)


# -- epoching ------------------------------------------------------------------------

def _recording(fs, seconds, C=3):
    data = np.arange(C * int(fs * seconds), dtype=float).reshape(C, -1)
    return Recording(data, fs, np.zeros(C, np.uint8), 2, 1, ["L", "R"])


@pytest.mark.parametrize("fs,dur,n", [(250.0, 4.0, 1000), (512.0, 3.0, 1536)])
def test_epoch_lengths(fs, dur, n):
    arch = epoch_from_cue(_recording(fs, 20), [1.0, 6.5], [0, 1], dur)
    assert arch.data.shape == (2, 3, n)
    start = int(round(6.5 * fs))
    np.testing.assert_array_equal(arch.data[1, 0, :5], np.arange(start, start + 5))


def test_epoch_empty_and_out_of_range():
    rec = _recording(250.0, 10)
    assert epoch_from_cue(rec, [], [], 4.0).n_trials == 0
    with pytest.raises(IndexError, match="trial 1"):
        epoch_from_cue(rec, [0.0, 8.0], [0, 1], 4.0)


# -- Euclidean alignment -------------------------------------------------------------

def test_ea_scalar_covariance():
    X = np.zeros((3, 8))
    X[0, 0] = X[1, 1] = X[2, 2] = 2.0  # X X^T = 4 I
    ref = fit_ea(X[None])
    np.testing.assert_allclose(ref.whitener, 0.5 * np.eye(3), atol=1e-12)


def test_ea_identity_when_already_white(rng):
    # orthonormal rows scaled so that (1/n) sum X X^T = I
    Q, _ = np.linalg.qr(rng.normal(size=(20, 4)))
    X = Q.T[None]
    ref = fit_ea(np.concatenate([X, X]))
    np.testing.assert_allclose(ref.whitener, np.eye(4), atol=1e-6)


def test_ea_whitens_random_trials(rng):
    X = rng.normal(size=(6, 3, 40)) * np.array([1.0, 3.0, 0.2])[None, :, None]
    ref = fit_ea(X)
    np.testing.assert_allclose(ref.whitener @ ref.mean_cov @ ref.whitener, np.eye(3), atol=1e-8)
    Y = apply_ea(X, ref)
    R = np.einsum("nct,ndt->cd", Y, Y) / len(Y)
    np.testing.assert_allclose(R, np.eye(3), atol=1e-6)
    assert np.allclose(ref.whitener, ref.whitener.T)
    assert np.all(np.linalg.eigvalsh(ref.whitener) > 0)


def test_ea_identity_reference_is_noop(rng):
    X = rng.normal(size=(3, 10))
    ref = fit_ea(np.eye(3)[None] * np.sqrt(1.0))
    ref.whitener = np.eye(3)
    np.testing.assert_array_equal(apply_ea(X, ref), X)


def test_ea_scale_equivariance(rng):
    X = rng.normal(size=(5, 4, 30))
    a = apply_ea(X, fit_ea(X))
    b = apply_ea(10 * X, fit_ea(10 * X))
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_ea_rank_deficient_warns_not_raises(rng):
    X = rng.normal(size=(4, 2, 30))
    X = np.concatenate([X, X[:, :1]], axis=1)  # duplicate channel
    ref = fit_ea(X)
    assert ref.warnings and np.all(np.isfinite(ref.whitener))


def test_ea_channel_mismatch(rng):
    ref = fit_ea(rng.normal(size=(2, 3, 10)))
    with pytest.raises(ValueError):
        apply_ea(rng.normal(size=(4, 10)), ref)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 8), C=st.integers(1, 6))
def test_ea_post_condition_property(seed, n, C):
    r = np.random.default_rng(seed)
    T = C + int(r.integers(1, 30))
    X = r.normal(size=(n, C, T)) * r.uniform(0.1, 10, size=(1, C, 1))
    if n * T < C:
        return
    Y = apply_ea(X, fit_ea(X))
    R = np.einsum("nct,ndt->cd", Y, Y) / n
    assert np.linalg.norm(R - np.eye(C)) / np.sqrt(C) < 1e-6


# -- z-score -----------------------------------------------------------------------------

def test_zscore_standardized_unchanged(rng):
    X = rng.normal(size=(50, 3, 40))
    X = (X - X.mean(axis=(0, 2), keepdims=True)) / X.std(axis=(0, 2), keepdims=True)
    np.testing.assert_allclose(apply_zscore(X, fit_zscore(X)), X, atol=1e-6)


def test_zscore_constant_channel(rng):
    X = rng.normal(size=(4, 2, 10))
    X[:, 1] = 7.0
    Y = apply_zscore(X, fit_zscore(X))
    assert np.all(Y[:, 1] == 0)


def test_zscore_pooled_stats(rng):
    X = 5 + 3 * rng.normal(size=(6, 4, 25))
    Y = apply_zscore(X, fit_zscore(X))
    assert np.abs(Y.mean(axis=(0, 2))).max() < 1e-6
    assert np.abs(Y.std(axis=(0, 2)) - 1).max() < 1e-5


# -- scoped archives -------------------------------------------------------------------

def test_session_scope_isolation():
    arch = synth_generate(2, 2, 8, 4, 70.0, 1.0, 2, seed=3)
    out = normalize_archive(arch, True, True, "session")
    sess_b = np.flatnonzero((arch.subject_id == 1) & (arch.session_id == 2))
    perm = np.arange(arch.n_trials)
    perm[sess_b] = np.random.default_rng(0).permutation(sess_b)
    out2 = normalize_archive(arch.take(perm), True, True, "session")
    sess_a = np.flatnonzero((arch.subject_id == 1) & (arch.session_id == 1))
    assert out.data[sess_a].tobytes() == out2.data[sess_a].tobytes()


def test_scope_post_condition():
    arch = synth_generate(3, 2, 10, 5, 70.0, 1.0, 3, seed=1)
    out = normalize_archive(arch, True, False, "session")
    for s in arch.subjects:
        for k in arch.sessions_of(s):
            Y = out.data[(arch.subject_id == s) & (arch.session_id == k)].astype(np.float64)
            R = np.einsum("nct,ndt->cd", Y, Y) / len(Y)
            assert np.linalg.norm(R - np.eye(5)) / np.sqrt(5) < 1e-5  # float32 storage


def test_pipeline_order_is_fixed():
    fs = 250.0
    rec = Recording(np.random.default_rng(0).normal(size=(3, int(60 * fs))), fs, np.zeros(3, np.uint8), 1, 1,
                    ["a", "b"])
    pre = Preprocessor(highpass_hz=0.5, resample_hz=70.0)
    arch = pre.run_recording(rec, [1.0, 10.0, 20.0, 30.0], [0, 1, 0, 1], 4.0)
    assert pre.trace == ["highpass", "resample", "epoch", "ea", "zscore"]
    assert check_order(pre.trace)
    assert arch.fs == 70.0 and arch.n_samples == 280
    pre2 = Preprocessor(highpass_hz=None, resample_hz=None, use_ea=False)
    pre2.run_recording(rec, [1.0], [0], 4.0)
    assert pre2.trace == ["epoch", "zscore"]
    assert not check_order(["zscore", "ea"])
