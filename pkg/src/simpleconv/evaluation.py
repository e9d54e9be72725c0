"""Paradigm execution, offline/online scoring, aggregation and ablations.

Test data is only pulled out of the archive (``archive.take``) once the
model for a fold is final, so a logging archive can prove that nothing about
the test subjects influenced training. Calibration data of a held-out
subject is read earlier only where the paradigm says so (fine-tuning, MDL,
online calibration).
"""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator, Optional

import numpy as np

from .data import PARADIGMS, Fold, SplitPlan, TrialArchive, make_splits, select_channels
from .model import Model, ModelConfig, build, predict, recompute_bn_stats
from .preprocess import Normalizer, Preprocessor, fit_zscore, normalize_archive, scope_keys
from .training import TrainConfig, finetune, train

REPORT_VERSION = 1


class ConfigError(ValueError):
    """A pipeline/paradigm combination that the protocol does not allow."""


@dataclass(frozen=True)
class PipelineConfig:
    use_ea: bool = True
    use_zscore: bool = True
    stats_scope: str = "session"
    use_bn_trick: bool = True
    use_mixup: bool = True
    use_subject_reg: bool = True
    include_eog: bool = False
    online_mode: bool = False
    highpass_hz: Optional[float] = None
    resample_hz: Optional[float] = None

    def __post_init__(self):
        if self.stats_scope not in ("subject", "session"):
            raise ConfigError(f"stats_scope must be 'subject' or 'session', got {self.stats_scope!r}")

    def replace(self, **changes) -> "PipelineConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    def check(self, archive: TrialArchive, paradigm: str):
        if paradigm not in PARADIGMS:
            raise ConfigError(f"unknown paradigm {paradigm!r}; choose from {PARADIGMS}")
        if self.online_mode and paradigm == "CS" and self.use_ea:
            raise ConfigError("cross-subject online evaluation cannot use EA: there is no calibration data "
                              "to fit it on")
        if self.stats_scope == "session" and all(len(archive.sessions_of(s)) < 2 for s in archive.subjects):
            raise ConfigError("session-scoped statistics need multi-session data")


# -- scoring helpers ----------------------------------------------------------------

def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(np.asarray(pred) == np.asarray(labels)) * 100.0)


def evaluate_offline(model: Model, trials: TrialArchive, pipeline: PipelineConfig) -> np.ndarray:
    """Predictions for a conditioned (not yet normalised) test archive.

    Each test scope gets its own EA reference, z-score statistics and
    batch-norm statistics, all computed from that scope's pooled trials.
    """
    if trials.n_trials == 0:
        raise ValueError("empty test scope")
    keys = scope_keys(trials, pipeline.stats_scope)
    pred = np.empty(trials.n_trials, dtype=np.int64)
    for key in np.unique(keys):
        idx = np.flatnonzero(keys == key)
        x = Normalizer.fit(trials.data[idx], pipeline.use_ea, pipeline.use_zscore)(trials.data[idx])
        m = recompute_bn_stats(model, x) if pipeline.use_bn_trick and len(idx) >= 2 else model
        pred[idx] = predict(m, x)
    return pred


class TrialStream:
    """One trial at a time, in order, and nothing else.

    There is no batch accessor, so code that consumes a stream cannot pool
    statistics over the test set. Each trial is pulled from the archive only
    when it is reached.
    """

    def __init__(self, archive: TrialArchive, ids, condition: Optional[Callable] = None):
        self._archive = archive
        self._ids = np.asarray(ids, dtype=np.int64)
        self._condition = condition

    def __len__(self):
        return len(self._ids)

    def __iter__(self) -> Iterator[tuple[np.ndarray, int]]:
        for i in self._ids:
            one = self._archive.take(np.array([i]))
            if self._condition is not None:
                one = self._condition(one)
            yield one.data[0], int(one.labels[0])


def evaluate_online(model: Model, stream: TrialStream, calibration: Optional[TrialArchive],
                    pipeline: PipelineConfig, train_normalizer: Optional[Normalizer] = None):
    """Predict streamed trials one by one; returns ``(predictions, labels)``.

    With calibration data (within-subject, fine-tuned, MDL) the EA reference,
    z-score and batch-norm statistics all come from it. Without (plain
    cross-subject) no EA is applied, z-scoring reuses the training-set
    statistics and batch norm keeps its training statistics.
    """
    if calibration is not None and calibration.n_trials > 0:
        norm = Normalizer.fit(calibration.data, pipeline.use_ea, pipeline.use_zscore)
        if pipeline.use_bn_trick and calibration.n_trials >= 2:
            model = recompute_bn_stats(model, norm(calibration.data))
    else:
        if pipeline.use_ea:
            raise ConfigError("online evaluation without calibration data cannot use EA")
        norm = train_normalizer or Normalizer()
    preds, labels = [], []
    for trial, label in stream:
        preds.append(int(predict(model, norm(trial[None]))[0]))
        labels.append(label)
    return np.array(preds, dtype=np.int64), np.array(labels, dtype=np.int64)


# -- aggregation --------------------------------------------------------------------

def aggregate_subjects(values) -> dict:
    """Mean and spread across subjects; both std conventions are reported."""
    v = np.asarray(list(values), dtype=np.float64)
    if len(v) == 0:
        raise ValueError("nothing to aggregate")
    return {
        "mean": float(v.mean()),
        "std_population": float(v.std(ddof=0)),
        "std_sample": float(v.std(ddof=1)) if len(v) > 1 else 0.0,
        "n": int(len(v)),
    }


@dataclass
class EvalReport:
    paradigm: str
    scheme: str
    config: dict
    # one entry per fold x run: fold, name, run, seeds, test_subjects, records, timings
    folds: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    version: int = REPORT_VERSION

    def records(self, view: str = "all") -> list[dict]:
        return [r for f in self.folds for r in f["records"] if r["view"] == view]

    @property
    def views(self) -> list[str]:
        seen = []
        for f in self.folds:
            for r in f["records"]:
                if r["view"] not in seen:
                    seen.append(r["view"])
        return seen

    def per_subject(self, view: str = "all") -> dict:
        """subject -> list of per-run accuracies (trial-weighted within a run)."""
        by = {}
        for f in self.folds:
            for r in f["records"]:
                if r["view"] != view:
                    continue
                acc = by.setdefault(r["subject"], {}).setdefault(f["run"], [0, 0])
                acc[0] += r["correct"]
                acc[1] += r["n_trials"]
        return {s: [100.0 * c / n for _, (c, n) in sorted(runs.items())] for s, runs in sorted(by.items())}

    def summary(self, view: str = "all") -> dict:
        per = self.per_subject(view)
        if not per:
            raise ValueError(f"no records for view {view!r}")
        means = {s: float(np.mean(v)) for s, v in per.items()}
        out = aggregate_subjects(means.values())
        n_runs = max(len(v) for v in per.values())
        run_avgs = [np.mean([v[r] for v in per.values() if len(v) > r]) for r in range(n_runs)]
        out["std_runs"] = float(np.std(run_avgs))
        out["subjects"] = {str(s): {"mean": means[s], "std_runs": float(np.std(v)), "runs": v}
                           for s, v in per.items()}
        return out

    @property
    def mean_accuracy(self) -> float:
        return self.summary()["mean"]

    def aggregates(self) -> dict:
        return {view: self.summary(view) for view in self.views}

    def to_dict(self) -> dict:
        return {"version": self.version, "paradigm": self.paradigm, "scheme": self.scheme,
                "config": self.config, "folds": self.folds, "notes": self.notes,
                "aggregates": self.aggregates() if self.folds else {}}

    def to_json(self, indent: Optional[int] = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        if d.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('version')!r}")
        return cls(d["paradigm"], d["scheme"], d["config"], d["folds"], d.get("notes", []), d["version"])

    def to_csv(self, view: str = "all") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "run", "subject", "accuracy"])
        for f in self.folds:
            for r in f["records"]:
                if r["view"] == view:
                    w.writerow([f["name"], f["run"], r["subject"], repr(r["accuracy"])])
        return buf.getvalue()


# -- running one fold ---------------------------------------------------------------

def fold_seeds(master_seed: int, fold: int, run: int) -> tuple[int, int]:
    """Independent (init, training) seeds for one fold x run."""
    init, shuffle = np.random.SeedSequence([master_seed, fold, run]).generate_state(2)
    return int(init), int(shuffle)


def _emit(observer, event, **info):
    if observer is not None:
        observer(event, **info)


def condition(sub: TrialArchive, pipeline: PipelineConfig, model_config: ModelConfig,
              causal: bool = False) -> TrialArchive:
    """Channel selection, high-pass and downsampling of an already-taken subset."""
    sub = select_channels(sub, pipeline.include_eog)
    target = pipeline.resample_hz or model_config.resample_hz
    if target is not None and target >= sub.fs:
        target = None  # never upsample
    if pipeline.highpass_hz or target:
        pre = Preprocessor(highpass_hz=pipeline.highpass_hz, resample_hz=target, use_ea=False,
                           use_zscore=False, causal=causal)
        sub = pre.condition_archive(sub)
    return sub


@dataclass
class FoldState:
    """Everything a fold needs at prediction time."""

    model: Model
    base_model: Optional[Model] = None          # CSFT: the cross-subject model before fine-tuning
    finetuned: dict = field(default_factory=dict)  # CSFT: subject -> fine-tuned model
    calibration: dict = field(default_factory=dict)  # subject -> conditioned calibration archive
    train_normalizer: Optional[Normalizer] = None
    history: dict = field(default_factory=dict)
    train_seconds: float = 0.0


def _calibration_ids(archive: TrialArchive, fold: Fold, paradigm: str) -> dict:
    if paradigm == "WS":
        return {fold.test_subjects[0]: fold.train}
    ids = fold.calibration if paradigm == "CSFT" else fold.merged_calibration
    return {s: ids[archive.subject_id[ids] == s] for s in fold.test_subjects}


def fit_fold(archive: TrialArchive, fold: Fold, paradigm: str, model_config: ModelConfig,
             train_config: TrainConfig, pipeline: PipelineConfig, init_seed: int, train_seed: int,
             observer=None) -> FoldState:
    online = pipeline.online_mode
    t0 = time.perf_counter()
    _emit(observer, "train_start", fold=fold.name)
    tr = condition(archive.take(fold.train), pipeline, model_config, causal=online)
    train_norm = None
    if online and paradigm == "CS":
        # no calibration exists: one training-wide z-score, reused on the test stream
        train_norm = Normalizer(None, fit_zscore(tr.data) if pipeline.use_zscore else None)
        tr = tr.with_data(train_norm(tr.data))
    else:
        tr = normalize_archive(tr, pipeline.use_ea, pipeline.use_zscore, pipeline.stats_scope)
    n_train_subjects = len(tr.subjects)
    use_reg = pipeline.use_subject_reg and train_config.subject_loss_weight > 0 and n_train_subjects > 1
    cfg = model_config.replace(in_channels=tr.n_channels, n_classes=tr.n_classes,
                               n_subjects=n_train_subjects if use_reg else 0)
    tc = replace(train_config, seed=train_seed)
    model, hist = train(build(cfg, seed=init_seed), tr, tc, pipeline.use_mixup, use_reg)
    state = FoldState(model, train_normalizer=train_norm, history={"train": hist.to_dict()})

    # kept even for offline runs so one fitted fold can be scored both ways
    if paradigm in ("WS", "CSFT", "MDL"):
        for s, ids in _calibration_ids(archive, fold, paradigm).items():
            state.calibration[s] = condition(archive.take(ids), pipeline, model_config, causal=online)
    if paradigm == "CSFT":
        state.base_model = model
        for s, cal in state.calibration.items():
            cal_n = normalize_archive(cal, pipeline.use_ea, pipeline.use_zscore, pipeline.stats_scope)
            m, fh = finetune(model.copy(), None, cal_n, tc, use_mixup=pipeline.use_mixup)
            state.finetuned[s] = m
            state.history[f"finetune-{s}"] = fh.to_dict()
    state.train_seconds = time.perf_counter() - t0
    return state


def _records(pred, labels, subject_ids, session_ids, view) -> list[dict]:
    out = []
    for s in sorted(set(subject_ids.tolist())):
        m = subject_ids == s
        correct = int(np.sum(pred[m] == labels[m]))
        n = int(m.sum())
        out.append({"view": view, "subject": int(s), "correct": correct, "n_trials": n,
                    "accuracy": 100.0 * correct / n})
    return out


def score_fold(archive: TrialArchive, fold: Fold, paradigm: str, state: FoldState, pipeline: PipelineConfig,
               model_config: ModelConfig, observer=None) -> list[dict]:
    """Predict the fold's test trials; returns per-subject records for every view."""
    _emit(observer, "predict_start", fold=fold.name)
    online = pipeline.online_mode
    records = []
    subj = archive.subject_id[fold.test]
    sess = archive.session_id[fold.test]
    for s in fold.test_subjects:
        ids = fold.test[subj == s]
        if len(ids) == 0:
            continue
        models = [("all", state.finetuned.get(s, state.model))]
        if state.base_model is not None:
            models.append(("before_finetune", state.base_model))
        if online:
            stream_cond = lambda a: condition(a, pipeline, model_config, causal=True)  # noqa: E731
            for view, m in models:
                pred, labels = evaluate_online(m, TrialStream(archive, ids, stream_cond),
                                               state.calibration.get(s), pipeline, state.train_normalizer)
                records += _records(pred, labels, np.full(len(ids), s), sess[subj == s], view)
            continue
        te = condition(archive.take(ids), pipeline, model_config)
        for view, m in models:
            pred = evaluate_offline(m, te, pipeline)
            records += _records(pred, te.labels, te.subject_id, te.session_id, view)
            if paradigm == "CS" and view == "all" and len(np.unique(te.session_id)) > 1:
                later = te.session_id != te.session_id.min()
                records += _records(pred[later], te.labels[later], te.subject_id[later],
                                    te.session_id[later], "session2")
    return records


def _run_task(args) -> dict:
    archive, fold, fold_idx, run, paradigm, model_config, train_config, pipeline, master_seed, observer = args
    init_seed, train_seed = fold_seeds(master_seed, fold_idx, run)
    try:
        state = fit_fold(archive, fold, paradigm, model_config, train_config, pipeline, init_seed, train_seed,
                         observer)
        t0 = time.perf_counter()
        records = score_fold(archive, fold, paradigm, state, pipeline, model_config, observer)
    except Exception as exc:
        raise RuntimeError(f"fold {fold.name} run {run}: {exc}") from exc
    return {"fold": fold_idx, "name": fold.name, "run": run, "seeds": {"init": init_seed, "train": train_seed},
            "test_subjects": [int(s) for s in fold.test_subjects], "records": records,
            "timings": {"train_s": state.train_seconds, "eval_s": time.perf_counter() - t0},
            "final_train_loss": state.history["train"]["total_loss"][-1]}


def run_paradigm(archive: TrialArchive, paradigm: str, model_config: ModelConfig, train_config: TrainConfig,
                 pipeline: PipelineConfig, n_runs: int = 5, scheme: str = "loso", seed: int = 0,
                 jobs: int = 1, observer=None, plan: Optional[SplitPlan] = None) -> EvalReport:
    """Train and score every fold ``n_runs`` times with fresh initialisations."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    pipeline.check(archive, paradigm)
    if plan is None:
        plan = make_splits(archive, paradigm, "session" if paradigm == "WS" else scheme, seed=seed, n_runs=n_runs)
    tasks = [(archive, fold, i, run, paradigm, model_config, train_config, pipeline, seed, observer)
             for i, fold in enumerate(plan.folds) for run in range(n_runs)]
    if jobs > 1:
        if observer is not None:
            raise ValueError("observers are only supported with jobs=1")
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]
    config = {"pipeline": pipeline.to_dict(), "model": asdict(model_config), "train": train_config.to_dict(),
              "n_runs": n_runs, "scheme": plan.scheme, "master_seed": seed}
    return EvalReport(paradigm, plan.scheme, config, results, list(plan.notes))


# -- ablations ---------------------------------------------------------------------------

EVERYTHING_OFF = dict(use_ea=False, use_bn_trick=False, stats_scope="subject", use_mixup=False,
                      use_subject_reg=False)

TABLE_ROWS = {
    "Full": {},
    "- BN": dict(use_bn_trick=False),
    "- EA": dict(use_ea=False),
    "- Session": dict(stats_scope="subject"),
    "Online": dict(online_mode=True),
    "- Mixup": dict(use_mixup=False),
    "- Reg S": dict(use_subject_reg=False),
    "- Everything": EVERYTHING_OFF,
    "+ EOG": dict(include_eog=True),
}


def factorial_rows() -> dict:
    """All 16 combinations of session scope, BN trick, EA and z-score."""
    rows = {}
    for session in (True, False):
        for bn in (True, False):
            for ea in (True, False):
                for z in (True, False):
                    name = f"session={int(session)} bn={int(bn)} ea={int(ea)} z={int(z)}"
                    rows[name] = dict(stats_scope="session" if session else "subject", use_bn_trick=bn,
                                      use_ea=ea, use_zscore=z)
    return rows


@dataclass
class AblationRow:
    name: str
    toggles: dict
    report: Optional[EvalReport] = None
    skipped: Optional[str] = None
    gain: Optional[float] = None
    pipeline: Optional[PipelineConfig] = None

    @property
    def mean(self) -> Optional[float]:
        return None if self.report is None else self.report.mean_accuracy


@dataclass
class AblationTable:
    paradigm: str
    base: dict
    rows: list

    def to_dict(self) -> dict:
        return {"paradigm": self.paradigm, "base": self.base,
                "rows": [{"name": r.name, "toggles": r.toggles, "skipped": r.skipped, "gain": r.gain,
                          "mean": r.mean, "report": None if r.report is None else r.report.to_dict()}
                         for r in self.rows]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "mean", "std_subjects_population", "std_subjects_sample", "gain", "skipped"])
        for r in self.rows:
            if r.report is None:
                w.writerow([r.name, "", "", "", "", r.skipped])
            else:
                s = r.report.summary()
                w.writerow([r.name, repr(s["mean"]), repr(s["std_population"]), repr(s["std_sample"]),
                            repr(r.gain), ""])
        return buf.getvalue()


def _row_skip_reason(archive: TrialArchive, toggles: dict, pipeline: PipelineConfig) -> Optional[str]:
    multi = any(len(archive.sessions_of(s)) > 1 for s in archive.subjects)
    if pipeline.stats_scope == "session" and not multi:
        return "single-session data: session-scoped statistics are undefined"
    if "stats_scope" in toggles and not multi and list(toggles) == ["stats_scope"]:
        return "single-session data: session and subject scope coincide"
    if pipeline.include_eog and not np.any(archive.channel_kinds == 1):
        return "archive has no EOG channels"
    return None


def run_ablation(archive: TrialArchive, paradigm: str, model_config: ModelConfig, train_config: TrainConfig,
                 base: PipelineConfig, rows: Optional[dict] = None, factorial: bool = False, n_runs: int = 5,
                 scheme: str = "loso", seed: int = 0, jobs: int = 1) -> AblationTable:
    """One report per row; ``gain`` is the row mean minus the base ("Full") mean.

    Each row is the base pipeline with only the row's toggles changed. For
    cross-subject online rows EA is switched off, since that protocol has no
    data to fit it on.
    """
    multi = any(len(archive.sessions_of(s)) > 1 for s in archive.subjects)
    if not multi and base.stats_scope == "session":
        base = base.replace(stats_scope="subject")
    rows = factorial_rows() if factorial else (rows or TABLE_ROWS)
    out = []
    for name, toggles in rows.items():
        toggles = dict(toggles)
        if toggles.get("online_mode") and paradigm == "CS":
            toggles["use_ea"] = False
        pipe = base.replace(**toggles)
        reason = _row_skip_reason(archive, toggles, pipe)
        if reason:
            out.append(AblationRow(name, toggles, skipped=reason, pipeline=pipe))
            continue
        report = run_paradigm(archive, paradigm, model_config, train_config, pipe, n_runs, scheme, seed, jobs)
        out.append(AblationRow(name, toggles, report, pipeline=pipe))
    ref = next((r.report for r in out if r.report is not None and r.pipeline == base), None)
    if ref is None:
        ref = run_paradigm(archive, paradigm, model_config, train_config, base, n_runs, scheme, seed, jobs)
    for r in out:
        if r.report is not None:
            r.gain = r.report.mean_accuracy - ref.mean_accuracy
    return AblationTable(paradigm, base.to_dict(), out)
