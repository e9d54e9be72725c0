"""Signal conditioning and statistical normalisation.

The order is fixed: high-pass, resample, epoch, Euclidean alignment, z-score.
Steps can be switched off but never reordered (see :class:`Preprocessor`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy import signal

from .data import TrialArchive

STEP_ORDER = ("highpass", "resample", "epoch", "ea", "zscore")
SCOPES = ("subject", "session", "all")


# -- filtering and resampling ------------------------------------------------------

def highpass(x: np.ndarray, fs: float, fc: float = 0.5, causal: bool = False, order: int = 4) -> np.ndarray:
    """Butterworth high-pass along the last axis.

    Offline use runs the filter forward and backward (zero phase); ``causal``
    runs it once, which is what a streaming decoder can actually do.
    """
    if fs <= 2 * fc:
        raise ValueError(f"fs={fs} Hz must exceed twice the cutoff ({2 * fc} Hz)")
    sos = signal.butter(order, fc, btype="highpass", fs=fs, output="sos")
    x = np.asarray(x, dtype=np.float64)
    y = signal.sosfilt(sos, x, axis=-1) if causal else signal.sosfiltfilt(sos, x, axis=-1)
    return y


def resample_filter(up: int, down: int, beta: float = 5.0) -> np.ndarray:
    """Kaiser-windowed sinc anti-alias filter cutting at 0.9 x the output Nyquist."""
    rate = max(up, down)
    half_len = 10 * rate
    return signal.firwin(2 * half_len + 1, 0.9 / rate, window=("kaiser", beta))


def resample(x: np.ndarray, fs_from: float, fs_to: float) -> np.ndarray:
    """Polyphase resampling along the last axis to ``round(T * fs_to / fs_from)`` samples."""
    if fs_to <= 0 or fs_from <= 0:
        raise ValueError("sampling rates must be positive")
    if fs_to > fs_from:
        raise ValueError(f"upsampling ({fs_from} -> {fs_to} Hz) is not supported")
    x = np.asarray(x, dtype=np.float64)
    n_out = int(round(x.shape[-1] * fs_to / fs_from))
    if fs_to == fs_from:
        return x.copy()
    ratio = Fraction(fs_to / fs_from).limit_denominator(1000)
    up, down = ratio.numerator, ratio.denominator
    y = signal.resample_poly(x, up, down, axis=-1, window=resample_filter(up, down))
    if y.shape[-1] >= n_out:
        return y[..., :n_out]
    pad = [(0, 0)] * (y.ndim - 1) + [(0, n_out - y.shape[-1])]
    return np.pad(y, pad)


# -- epoching -----------------------------------------------------------------------

@dataclass
class Recording:
    """A continuous multichannel recording of one subject session."""

    data: np.ndarray          # [n_channels, n_samples]
    fs: float
    channel_kinds: np.ndarray
    subject_id: int = 1
    session_id: int = 1
    class_names: list = field(default_factory=list)


def epoch_from_cue(recording: Recording, cue_times, labels, duration_s: float) -> TrialArchive:
    """Cut one trial per cue, starting at the cue sample and lasting ``duration_s``."""
    n = int(round(duration_s * recording.fs))
    total = recording.data.shape[1]
    cue_times = np.asarray(cue_times, dtype=float).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != len(cue_times):
        raise ValueError(f"{len(cue_times)} cues but {len(labels)} labels")
    trials = []
    for i, t0 in enumerate(cue_times):
        start = int(round(t0 * recording.fs))
        if start < 0 or start + n > total:
            raise IndexError(f"trial {i}: cue at {t0} s needs samples [{start}, {start + n}) "
                             f"but the recording has {total}")
        trials.append(recording.data[:, start:start + n])
    data = np.stack(trials) if trials else np.zeros((0, recording.data.shape[0], n))
    k = len(trials)
    return TrialArchive(data, labels, np.full(k, recording.subject_id), np.full(k, recording.session_id),
                        recording.channel_kinds, recording.fs, recording.class_names)


# -- Euclidean alignment -----------------------------------------------------------

@dataclass
class EAReference:
    mean_cov: np.ndarray
    whitener: np.ndarray
    scope: object = None
    n_trials: int = 0
    eig_floor: float = 0.0
    warnings: list = field(default_factory=list)


def fit_ea(trials: np.ndarray, scope=None, floor_ratio: float = 1e-10) -> EAReference:
    """Mean spatial covariance of the trials and its inverse square root."""
    X = np.asarray(trials, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or len(X) < 1:
        raise ValueError("fit_ea needs at least one [channels, samples] trial")
    R = np.einsum("nct,ndt->cd", X, X) / len(X)
    R = 0.5 * (R + R.T)
    lam, U = np.linalg.eigh(R)
    top = max(lam.max(), 0.0)
    floor = floor_ratio * top if top > 0 else floor_ratio
    notes = []
    if np.any(lam < floor):
        notes.append(f"{int(np.sum(lam < floor))} eigenvalue(s) below floor {floor:.3g}; covariance is rank deficient")
    W = (U * (1.0 / np.sqrt(np.maximum(lam, floor)))) @ U.T
    return EAReference(R, 0.5 * (W + W.T), scope, len(X), floor, notes)


def apply_ea(trials: np.ndarray, ref: EAReference) -> np.ndarray:
    """Left-multiply each trial by the whitener; accepts one trial or a stack."""
    X = np.asarray(trials)
    if X.shape[-2] != ref.whitener.shape[0]:
        raise ValueError(f"trial has {X.shape[-2]} channels, reference expects {ref.whitener.shape[0]}")
    return np.einsum("cd,...dt->...ct", ref.whitener, X)


# -- standardisation -----------------------------------------------------------------

@dataclass
class ZScoreStats:
    mean: np.ndarray
    std: np.ndarray
    scope: object = None


def fit_zscore(trials: np.ndarray, scope=None, floor: float = 1e-8) -> ZScoreStats:
    X = np.asarray(trials, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    mean = X.mean(axis=(0, 2))
    std = X.std(axis=(0, 2))
    return ZScoreStats(mean, np.maximum(std, floor), scope)


def apply_zscore(trials: np.ndarray, stats: ZScoreStats) -> np.ndarray:
    X = np.asarray(trials)
    return (X - stats.mean[:, None]) / stats.std[:, None]


# -- scoped normalisation of whole archives ----------------------------------------------

def scope_keys(archive: TrialArchive, scope: str) -> np.ndarray:
    if scope == "subject":
        return archive.subject_id.copy()
    if scope == "session":
        return archive.subject_id * 100000 + archive.session_id
    if scope == "all":
        return np.zeros(archive.n_trials, np.int64)
    raise ValueError(f"unknown scope {scope!r}; choose from {SCOPES}")


@dataclass
class Normalizer:
    """Statistics fitted on one scope, applicable to unseen trials of that scope."""

    ea: Optional[EAReference] = None
    zscore: Optional[ZScoreStats] = None

    @classmethod
    def fit(cls, trials: np.ndarray, use_ea: bool, use_zscore: bool, scope=None) -> "Normalizer":
        ea = fit_ea(trials, scope) if use_ea else None
        x = apply_ea(trials, ea) if ea is not None else trials
        z = fit_zscore(x, scope) if use_zscore else None
        return cls(ea, z)

    def __call__(self, trials: np.ndarray) -> np.ndarray:
        x = np.asarray(trials, dtype=np.float64)
        if self.ea is not None:
            x = apply_ea(x, self.ea)
        if self.zscore is not None:
            x = apply_zscore(x, self.zscore)
        return x.astype(np.float32)


def normalize_archive(archive: TrialArchive, use_ea: bool, use_zscore: bool, scope: str = "subject",
                      fitted: Optional[dict] = None) -> TrialArchive:
    """Fit and apply EA then z-score separately inside every scope.

    ``fitted`` (if given) receives the per-scope :class:`Normalizer`.
    Statistics never cross scope boundaries.
    """
    keys = scope_keys(archive, scope)
    out = archive.data.copy()
    for key in np.unique(keys):
        idx = np.flatnonzero(keys == key)
        norm = Normalizer.fit(archive.data[idx], use_ea, use_zscore, int(key))
        out[idx] = norm(archive.data[idx])
        if fitted is not None:
            fitted[int(key)] = norm
    return archive.with_data(out)


# -- the fixed-order pipeline --------------------------------------------------------------

@dataclass
class Preprocessor:
    """Fixed-order preprocessing; ``None``/``False`` skips a step.

    ``trace`` lists the steps actually executed, in order.
    """

    highpass_hz: Optional[float] = 0.5
    resample_hz: Optional[float] = None
    use_ea: bool = True
    use_zscore: bool = True
    scope: str = "subject"
    causal: bool = False
    trace: list = field(default_factory=list)

    def condition(self, x: np.ndarray, fs: float) -> tuple[np.ndarray, float]:
        """High-pass then resample a [..., samples] array."""
        if self.highpass_hz:
            x = highpass(x, fs, self.highpass_hz, causal=self.causal)
            self.trace.append("highpass")
        if self.resample_hz and self.resample_hz != fs:
            x = resample(x, fs, self.resample_hz)
            fs = self.resample_hz
            self.trace.append("resample")
        return x, fs

    def condition_archive(self, archive: TrialArchive) -> TrialArchive:
        x, fs = self.condition(archive.data, archive.fs)
        return archive.with_data(np.asarray(x, dtype=np.float32), fs)

    def normalize(self, archive: TrialArchive) -> TrialArchive:
        if not (self.use_ea or self.use_zscore):
            return archive
        out = normalize_archive(archive, self.use_ea, self.use_zscore, self.scope)
        self.trace += [s for s, on in (("ea", self.use_ea), ("zscore", self.use_zscore)) if on]
        return out

    def run_recording(self, recording: Recording, cue_times, labels, duration_s: float) -> TrialArchive:
        x, fs = self.condition(recording.data, recording.fs)
        rec = Recording(x, fs, recording.channel_kinds, recording.subject_id, recording.session_id,
                        recording.class_names)
        archive = epoch_from_cue(rec, cue_times, labels, duration_s)
        self.trace.append("epoch")
        return self.normalize(archive)

    def run_archive(self, archive: TrialArchive) -> TrialArchive:
        """For data that is already epoched: conditioning runs per trial."""
        return self.normalize(self.condition_archive(archive))


def check_order(trace: list) -> bool:
    positions = [STEP_ORDER.index(s) for s in trace]
    return positions == sorted(positions)

