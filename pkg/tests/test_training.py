import numpy as np
import pytest

from simpleconv.core import Mode, single_threaded, softmax_cross_entropy
from simpleconv.data import concat_archives, empty_archive, make_splits, synth_generate
from simpleconv.model import ModelConfig, build, checkpoint_bytes, extract_embeddings, forward, predict
from simpleconv.preprocess import normalize_archive
from simpleconv.training import TrainConfig, finetune, mixup_batch, subject_index, train, train_mdl

SMALL = dict(width=8, depth=1, kernel_size=5)


def archive(seed=0, noise=1.0, subjects=3, sessions=1, trials=24, duration=1.0):
    a = synth_generate(subjects, sessions, trials, 6, 70.0, duration, 4, seed=seed, noise=noise)
    return normalize_archive(a, True, True, "subject")


def config_for(a, **kw):
    return ModelConfig(in_channels=a.n_channels, n_classes=a.n_classes, n_subjects=len(a.subjects),
                       **{**SMALL, **kw})


# -- schedule ------------------------------------------------------------------------

def test_lr_trace_single_decay():
    cfg = TrainConfig()
    lrs = [cfg.lr_at(e) for e in range(cfg.epochs)]
    assert lrs[39] == 1e-3 and lrs[40] == pytest.approx(1e-4, rel=1e-12)
    jumps = [e for e in range(1, len(lrs)) if lrs[e] != lrs[e - 1]]
    assert jumps == [40] and lrs[40] / lrs[39] == pytest.approx(0.1, rel=1e-12)


@pytest.mark.parametrize("kw", [dict(decay_epoch=60), dict(decay_factor=0.0), dict(mixup_alpha=-1),
                                dict(subject_loss_weight=-0.1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_history_lr_trace_from_training():
    a = archive(trials=8)
    _, h = train(build(config_for(a)), a, TrainConfig(epochs=6, decay_epoch=4, batch_size=32))
    assert len(h) == 6
    assert h.lr == [1e-3] * 4 + [pytest.approx(1e-4)] * 2


# -- mixup ---------------------------------------------------------------------------

def test_mixup_hand_example():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.eye(2)
    # with a forced lambda the permutation decides the partner; B=2 gives either identity or swap
    xm, ym, _, lam = mixup_batch(x, y, None, 0.2, np.random.default_rng(3), lam=0.3)
    assert lam == 0.3
    for row, yrow in zip(xm, ym):
        assert np.allclose(row, [1, 0]) or np.allclose(row, [0, 1]) or np.allclose(sorted(row), [0.3, 0.7])
        np.testing.assert_array_equal(row, yrow)  # inputs and labels mix identically here


def test_mixup_exact_convex_combination(rng):
    x = rng.normal(size=(9, 3, 11))
    y = np.eye(4)[rng.integers(0, 4, 9)]
    s = np.eye(3)[rng.integers(0, 3, 9)]
    r = np.random.default_rng(5)
    xm, ym, sm, lam = mixup_batch(x, y, s, 0.2, r)
    perm = np.random.default_rng(5)
    perm.beta(0.2, 0.2)
    p = perm.permutation(9)
    assert np.array_equal(xm - (lam * x + (1 - lam) * x[p]), np.zeros_like(x))
    np.testing.assert_allclose(ym.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ym, lam * y + (1 - lam) * y[p])
    np.testing.assert_allclose(sm, lam * s + (1 - lam) * s[p])


def test_mixup_extremes(rng):
    x = rng.normal(size=(5, 2, 4))
    y = np.eye(2)[[0, 1, 0, 1, 1]]
    for lam in (0.0, 1.0):
        xm, ym, _, _ = mixup_batch(x, y, None, 0.2, np.random.default_rng(0), lam=lam)
        assert all(any(np.array_equal(row, orig) for orig in x) for row in xm)
    one = x[:1]
    assert mixup_batch(one, y[:1], None, 0.2, rng)[3] == 1.0


def test_subject_index_contiguous():
    idx, order = subject_index(np.array([7, 3, 7, 12]))
    assert idx.tolist() == [1, 0, 1, 2] and order == [3, 7, 12]


# -- training behaviour --------------------------------------------------------------

def test_overfits_noiseless_set():
    a = synth_generate(4, 1, 50, 6, 70.0, 1.0, 4, seed=0, noise=0.0)  # 200 trials
    a = normalize_archive(a, True, True, "subject")
    model, h = train(build(config_for(a, width=16), seed=0), a, TrainConfig(seed=0))
    assert h.train_acc[-1] >= 99.0
    assert np.mean(predict(model, a.data) == a.labels) >= 0.99


def test_ablation_identity_total_equals_task_loss():
    a = archive(trials=10)
    cfg = TrainConfig(epochs=3, decay_epoch=2, mixup_alpha=0.0, subject_loss_weight=0.0, batch_size=16)
    _, h = train(build(config_for(a)), a, cfg)
    np.testing.assert_allclose(h.total_loss, h.task_loss, atol=1e-9)
    assert h.subject_loss == [0.0] * 3


def test_bitwise_identical_checkpoints():
    a = archive(trials=10)
    cfg = TrainConfig(epochs=3, decay_epoch=2, batch_size=16, seed=11)
    with single_threaded():
        m1, _ = train(build(config_for(a), seed=4), a, cfg)
        m2, _ = train(build(config_for(a), seed=4), a, cfg)
    assert checkpoint_bytes(m1) == checkpoint_bytes(m2)
    m3, _ = train(build(config_for(a), seed=4), a, TrainConfig(epochs=3, decay_epoch=2, batch_size=16, seed=12))
    assert checkpoint_bytes(m1) != checkpoint_bytes(m3)


def _dataset_loss(model, a):
    # full-batch loss with batch statistics, on a throwaway copy
    probe = model.copy()
    out = forward(probe, a.data, Mode.TRAIN)
    return softmax_cross_entropy(out.logits, np.eye(a.n_classes)[a.labels]).item()


def test_one_epoch_decreases_loss_most_seeds():
    a = archive(seed=1, noise=0.5, trials=16)
    wins = 0
    for seed in range(20):
        model = build(config_for(a), seed=seed)
        before = _dataset_loss(model, a)
        train(model, a, TrainConfig(epochs=1, decay_epoch=1, batch_size=16, seed=seed, subject_loss_weight=0.0))
        wins += _dataset_loss(model, a) < before
    assert wins >= 18


def test_empty_train_set_errors():
    a = archive(trials=4)
    with pytest.raises(ValueError, match="empty"):
        train(build(config_for(a)), a.take(np.array([], dtype=int)), TrainConfig(epochs=1, decay_epoch=1))


def test_subject_reg_needs_head():
    a = archive(trials=4)
    with pytest.raises(ValueError, match="subject"):
        train(build(config_for(a).replace(n_subjects=0)), a, TrainConfig(epochs=1, decay_epoch=1))


def test_toggles_change_only_their_ingredient():
    a = archive(trials=10)

    def run(mixup, reg):
        log = []
        train(build(config_for(a), seed=0), a, TrainConfig(epochs=2, decay_epoch=1, batch_size=16),
              use_mixup=mixup, use_subject_reg=reg,
              observer=lambda ev, **info: log.append((info["ids"].tolist(), info["lam"], info["subject_weight"])))
        return log

    full, no_mix, no_reg = run(True, True), run(False, True), run(True, False)
    assert [b[0] for b in full] == [b[0] for b in no_mix] == [b[0] for b in no_reg]
    assert all(b[1] == 1.0 for b in no_mix) and any(b[1] != 1.0 for b in full)
    assert [b[1] for b in full] == [b[1] for b in no_reg]
    assert all(b[2] == 0.1 for b in full) and all(b[2] == 0.0 for b in no_reg)


def test_embeddings_separate_classes():
    a = synth_generate(3, 1, 40, 6, 70.0, 1.0, 4, seed=2, noise=0.0)
    a = normalize_archive(a, True, True, "subject")
    model, _ = train(build(config_for(a, width=16), seed=0), a, TrainConfig(epochs=20, decay_epoch=16, seed=0))
    E = extract_embeddings(model, a.data).astype(np.float64)
    D = np.linalg.norm(E[:, None] - E[None], axis=2)
    same = a.labels[:, None] == a.labels[None]
    off = ~np.eye(len(E), dtype=bool)
    assert D[~same].mean() > D[same & off].mean()


# -- fine-tuning and MDL --------------------------------------------------------------

def _cs_fold(seed):
    a = synth_generate(4, 2, 20, 6, 70.0, 1.0, 4, seed=seed, noise=1.0)
    a = normalize_archive(a, True, True, "session")
    fold = make_splits(a, "CSFT", "loso").folds[0]
    return a, fold


def test_finetune_zero_epochs_is_noop():
    a, fold = _cs_fold(0)
    tr = a.take(fold.train)
    model, h = train(build(config_for(tr)), tr, TrainConfig(epochs=2, decay_epoch=1, batch_size=32))
    before = checkpoint_bytes(model)
    finetune(model, h.optimizer, a.take(fold.calibration), TrainConfig(finetune_epochs=0))
    assert checkpoint_bytes(model) == before


def test_finetune_freezes_subject_head_and_uses_decayed_lr():
    a, fold = _cs_fold(0)
    tr = a.take(fold.train)
    model, h = train(build(config_for(tr)), tr, TrainConfig(epochs=2, decay_epoch=1, batch_size=32))
    head = model.subject_head.weight.data.copy()
    _, fh = finetune(model, h.optimizer, a.take(fold.calibration), TrainConfig(finetune_epochs=2))
    assert np.array_equal(model.subject_head.weight.data, head)
    assert fh.lr == [pytest.approx(1e-4)] * 2


def test_finetune_rejects_bad_calibration():
    a, fold = _cs_fold(0)
    model = build(config_for(a))
    with pytest.raises(ValueError, match="empty"):
        finetune(model, None, a.take(np.array([], dtype=int)), TrainConfig())
    with pytest.raises(ValueError, match="one subject"):
        finetune(model, None, a, TrainConfig())


def test_finetune_does_not_hurt_calibration_accuracy():
    gains = []
    for seed in range(5):
        a, fold = _cs_fold(seed)
        tr, cal = a.take(fold.train), a.take(fold.calibration)
        model, h = train(build(config_for(tr), seed=seed), tr,
                         TrainConfig(epochs=10, decay_epoch=8, batch_size=32, seed=seed))
        before = np.mean(predict(model, cal.data) == cal.labels) * 100
        finetune(model, h.optimizer, cal, TrainConfig(finetune_epochs=20, batch_size=32, seed=seed))
        gains.append(np.mean(predict(model, cal.data) == cal.labels) * 100 - before)
    assert np.mean(gains) >= -2.0


def test_mdl_empty_calibration_matches_train():
    a = archive(trials=10)
    cfg = TrainConfig(epochs=2, decay_epoch=1, batch_size=16)
    mc = config_for(a)
    empty = empty_archive(a.n_channels, a.n_samples, a.fs, a.class_names)
    with single_threaded():
        m1, _ = train_mdl(mc, a, empty, cfg, init_seed=3)
        m2, _ = train(build(mc, seed=3), a, cfg)
    assert checkpoint_bytes(m1) == checkpoint_bytes(m2)


def test_mdl_pool_size_and_smoke():
    a, _ = _cs_fold(0)
    plan = make_splits(a, "MDL", "loso")
    cs = make_splits(a, "CS", "loso")
    fold = plan.folds[0]
    calib = a.take(fold.merged_calibration)
    train_only = a.take(cs.folds[0].train)
    assert len(fold.train) == train_only.n_trials + calib.n_trials
    assert concat_archives(train_only, calib).n_trials == len(fold.train)
    model, h = train_mdl(config_for(a).replace(n_subjects=0), train_only, calib,
                         TrainConfig(epochs=2, decay_epoch=1, batch_size=32))
    assert model.subject_head is not None and model.config.n_subjects == 4
    assert len(h) == 2
