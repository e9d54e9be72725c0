"""
Filtering, resampling and Euclidean alignment
=============================================

A synthetic archive stands in for real recordings: each subject sees the
sources through its own mixing, and each session adds a per-channel gain.
Alignment whitens every scope so its mean covariance is the identity.
"""

import numpy as np

from simpleconv.data import synth_generate
from simpleconv.preprocess import apply_ea, fit_ea, highpass, normalize_archive, resample

arch = synth_generate(n_subjects=3, n_sessions=2, trials_per_session=20, n_channels=6,
                      fs=250.0, duration_s=2.0, n_classes=4, seed=1)
print(arch.data.shape, arch.fs, arch.subjects)

# %%
# Zero-phase high-pass for offline work, causal for streaming
x = arch.data[:4]
t = np.arange(x.shape[-1]) / arch.fs
drifting = x + 5.0 + 2.0 * t  # electrode offset and slow drift
print("offset before", np.abs(drifting.mean(axis=-1)).mean())
print("offset after ", np.abs(highpass(drifting, arch.fs, 0.5).mean(axis=-1)).mean())

# %%
# Polyphase downsampling from 250 Hz to 80 Hz
print(resample(x, 250.0, 80.0).shape)

# %%
# Mean covariance of one subject-session before and after alignment
mask = (arch.subject_id == 2) & (arch.session_id == 1)
trials = arch.data[mask]
ref = fit_ea(trials)
aligned = apply_ea(trials, ref)
cov = np.einsum("nct,ndt->cd", aligned, aligned) / len(aligned)
print("distance to I before", np.linalg.norm(ref.mean_cov - np.eye(6)))
print("distance to I after ", np.linalg.norm(cov - np.eye(6)))

# %%
# The whole archive, aligned and standardised per session
norm = normalize_archive(arch, use_ea=True, use_zscore=True, scope="session")
print(norm.data.std(axis=(0, 2)).round(3))
