"""
Cross-validation paradigms and ablations
========================================

Within-subject (WS), cross-subject (CS), cross-subject with fine-tuning
(CSFT) and multi-dataset style training with calibration (MDL) all run
through one harness. Reports keep per-subject, per-run records and both
std conventions.
"""

from simpleconv.data import make_splits, synth_generate
from simpleconv.evaluation import PipelineConfig, run_ablation, run_paradigm
from simpleconv.model import ModelConfig
from simpleconv.training import TrainConfig

arch = synth_generate(4, 2, 40, 8, 70.0, 1.0, 4, seed=3)
model = ModelConfig(width=16, depth=1, kernel_size=7, in_channels=8, n_classes=4)
quick = TrainConfig(epochs=10, decay_epoch=8, finetune_epochs=10)

# %%
# Leave-one-subject-out folds
plan = make_splits(arch, "CS", "loso")
for f in plan.folds:
    print(f.name, len(f.train), len(f.test), f.test_subjects)

# %%
# Offline CS, two runs
report = run_paradigm(arch, "CS", model, quick, PipelineConfig(), n_runs=2)
print({k: round(v, 2) for k, v in report.summary().items() if isinstance(v, float)})
print(report.to_csv().splitlines()[:4])

# %%
# Fine-tuning: the report carries the model before and after
ft = run_paradigm(arch, "CSFT", model, quick, PipelineConfig(), n_runs=1)
print("before", ft.summary("before_finetune")["mean"], "after", ft.summary("all")["mean"])

# %%
# Online: one trial at a time, statistics from the calibration set only
online = run_paradigm(arch, "WS", model, quick, PipelineConfig(online_mode=True), n_runs=1)
print("online WS", online.mean_accuracy)

# %%
# Ablation table, gains relative to the full pipeline. With alpha=0.2 most
# mixup weights sit near 0 or 1 and batch order does not depend on the
# toggle, so on a run this short some rows can tie with the full pipeline.
table = run_ablation(arch, "CS", model, quick, PipelineConfig(), n_runs=1)
print(table.to_csv())
