"""
Building and training the network
=================================

The network is one embedding convolution followed by K blocks of two
convolutions; widths grow by sqrt(2) per block and time halves after every
block but the first. Training mixes pairs of trials and adds a small
subject-classification loss.
"""

import numpy as np

from simpleconv.data import synth_generate
from simpleconv.model import ModelConfig, build, count_params, extract_embeddings, predict, preset
from simpleconv.preprocess import normalize_archive
from simpleconv.training import TrainConfig, mixup_batch, train

# %%
# Parameter counts of the two presets for 22 channels and 4 classes
for name in ("within", "cross"):
    cfg = preset(name, 22, 4)
    print(name, cfg.channel_schedule(), count_params(build(cfg)))

# %%
# Mixup blends inputs, labels and subject targets with the same lambda
rng = np.random.default_rng(0)
xs = rng.normal(size=(4, 2, 8))
xm, ym, sm, lam = mixup_batch(xs, np.eye(4)[[0, 1, 2, 3]], np.eye(2)[[0, 0, 1, 1]], 0.2, rng)
print("lambda", lam, "soft labels\n", ym.round(2))

# %%
# Train a small model on a clean archive
arch = synth_generate(4, 1, 50, 6, 70.0, 1.0, 4, seed=0, noise=0.0)
arch = normalize_archive(arch, use_ea=True, use_zscore=True, scope="subject")
cfg = ModelConfig(width=16, depth=1, kernel_size=15, in_channels=6, n_classes=4, n_subjects=4)
model, hist = train(build(cfg, seed=0), arch, TrainConfig(epochs=20, decay_epoch=16))
print("train accuracy per epoch", [round(a, 1) for a in hist.train_acc])
print("lr trace", sorted(set(hist.lr)))
print("fit", np.mean(predict(model, arch.data) == arch.labels))

# %%
# Embeddings are the pooled features feeding the classifier
emb = extract_embeddings(model, arch.data)
print(emb.shape)
