"""Command-line front end: ``simpleconv <command> [flags]``.

Every command writes ``config.snapshot`` (flat key=value) into ``--out`` so a
run can be repeated with ``--config <out>/config.snapshot``. Failures print a
single JSON line on stderr and exit with a code that identifies the kind of
problem.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .core import Mode, single_threaded
from .data import ArchiveFormatError, SplitError, load_archive, save_archive, select_channels, synth_generate
from .evaluation import ConfigError, PipelineConfig, condition, run_ablation, run_paradigm
from .model import (
    PRESETS,
    CheckpointError,
    ModelConfig,
    build,
    count_params,
    extract_embeddings,
    forward,
    load_checkpoint,
    preset,
    save_checkpoint,
)
from .preprocess import normalize_archive
from .training import TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_CONFIG = 4
EXIT_DATA = 5
EXIT_RUNTIME = 6

PARADIGM_NAMES = {"within": "WS", "cross": "CS", "cross-ft": "CSFT", "mdl": "MDL"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


# -- flags ----------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    p.add_argument("--seed", type=int, help="master seed (falls back to $SIMPLECONV_SEED, then 0)")
    p.add_argument("--out", default="simpleconv-out", help="output directory")


def _model_flags(p):
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--W", type=int, dest="W")
    p.add_argument("--K", type=int, dest="K")
    p.add_argument("--S", type=int, dest="S")
    p.add_argument("--resample-hz", type=float)


def _pipeline_flags(p):
    p.add_argument("--no-ea", action="store_true")
    p.add_argument("--no-zscore", action="store_true")
    p.add_argument("--no-bn-trick", action="store_true")
    p.add_argument("--no-mixup", action="store_true")
    p.add_argument("--no-subject-reg", action="store_true")
    p.add_argument("--scope", choices=["subject", "session"])
    p.add_argument("--eog", action="store_true")
    p.add_argument("--online", action="store_true")
    p.add_argument("--highpass-hz", type=float)


def _train_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--decay-epoch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--finetune-epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="simpleconv", description="Compact 1D CNN for motor-imagery EEG decoding.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic ESC1 archive")
    _common(p)
    p.add_argument("--subjects", type=int, default=4)
    p.add_argument("--sessions", type=int, default=2)
    p.add_argument("--trials", type=int, default=48, help="trials per session")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--fs", type=float, default=70.0)
    p.add_argument("--duration", type=float, default=1.0, help="trial length in seconds")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--n-eog", type=int, default=0)

    p = sub.add_parser("train", help="train one model on a whole archive")
    _common(p)
    p.add_argument("--data", required=False)
    _model_flags(p)
    _pipeline_flags(p)
    _train_flags(p)

    for name, helptext in (("eval", "run an evaluation paradigm"), ("ablate", "run the ablation table")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--data")
        p.add_argument("--paradigm", choices=sorted(PARADIGM_NAMES), default="cross")
        p.add_argument("--scheme", choices=["loso", "lmso"], default="loso")
        p.add_argument("--runs", type=int, default=5)
        p.add_argument("--jobs", type=int, default=1)
        _model_flags(p)
        _pipeline_flags(p)
        _train_flags(p)
        if name == "ablate":
            p.add_argument("--factorial", action="store_true", help="16-row normalisation factorial")

    p = sub.add_parser("bench", help="single-trial latency")
    _common(p)
    _model_flags(p)
    p.add_argument("--model", help="ESCM checkpoint (default: a fresh preset model)")
    p.add_argument("--data", help="ESC1 archive supplying the trials")
    p.add_argument("--n-trials", type=int, default=576)
    p.add_argument("--channels", type=int, default=22)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--duration", type=float, default=4.0)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--warmup", type=int, default=50)

    p = sub.add_parser("params", help="print the parameter count")
    _common(p)
    _model_flags(p)
    p.add_argument("--channels", type=int, default=22)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--subjects", type=int, default=0)

    p = sub.add_parser("embed", help="export pooled features for a 2-D embedding plot")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--eog", action="store_true")
    p.add_argument("--scope", choices=["subject", "session"], default="subject")
    p.add_argument("--no-ea", action="store_true")
    p.add_argument("--no-zscore", action="store_true")
    return parser


# -- config file and seed --------------------------------------------------------------

def read_config_file(path: str) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _coerce(action, text: str):
    if isinstance(action, (argparse._StoreTrueAction,)):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{action.dest}: expected a boolean, got {text!r}")
    if text == "None":
        return None
    value = action.type(text) if action.type else text
    if action.choices and value not in action.choices:
        raise ConfigError(f"{action.dest}: {value!r} is not one of {sorted(action.choices)}")
    return value


def parse(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        if not Path(args.config).is_file():
            raise FileNotFoundError(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        actions = {a.dest: a for a in sub._actions}
        given = {a.dest for a in sub._actions for opt in a.option_strings if opt in argv} | \
            {a.dest for a in sub._actions for opt in a.option_strings
             if any(x.startswith(opt + "=") for x in argv)}
        for key, text in read_config_file(args.config).items():
            if key in ("command", "config"):
                continue
            if key not in actions:
                raise ConfigError(f"unknown config key {key!r} for command {args.command!r}")
            if key not in given:
                setattr(args, key, _coerce(actions[key], text))
    if args.seed is None:
        env = os.environ.get("SIMPLECONV_SEED")
        try:
            args.seed = int(env) if env not in (None, "") else 0
        except ValueError:
            raise ConfigError(f"SIMPLECONV_SEED must be an integer, got {env!r}")
    return args


def write_snapshot(args: argparse.Namespace, extra: dict | None = None) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = {k: v for k, v in sorted(vars(args).items()) if k not in ("config", "out", "command")}
    lines = [f"# command={args.command}"] + [f"# {k}={v}" for k, v in (extra or {}).items()]
    lines += [f"{k}={v}" for k, v in items.items()]
    path = out / "config.snapshot"
    path.write_text("\n".join(lines) + "\n")
    return path


# -- shared builders ------------------------------------------------------------------

def _load(args):
    if not args.data:
        raise ConfigError("--data <archive.esc1> is required")
    if not Path(args.data).is_file():
        raise FileNotFoundError(args.data)
    return load_archive(args.data)


def _model_config(args, in_channels: int, n_classes: int, default_preset: str) -> ModelConfig:
    cfg = preset(args.preset or default_preset, in_channels, n_classes)
    changes = {k: v for k, v in (("width", args.W), ("depth", args.K), ("kernel_size", args.S),
                                 ("resample_hz", args.resample_hz)) if v is not None}
    return cfg.replace(**changes) if changes else cfg


def _train_config(args) -> TrainConfig:
    tc = TrainConfig(seed=args.seed)
    changes = {k: v for k, v in (("epochs", args.epochs), ("decay_epoch", args.decay_epoch),
                                 ("base_lr", args.lr), ("batch_size", args.batch_size),
                                 ("finetune_epochs", args.finetune_epochs)) if v is not None}
    if "epochs" in changes and "decay_epoch" not in changes:
        # keep the decay at the same fraction of the schedule
        changes["decay_epoch"] = int(round(changes["epochs"] * tc.decay_epoch / tc.epochs))
    return replace(tc, **changes)


def _pipeline(args, archive) -> PipelineConfig:
    multi = any(len(archive.sessions_of(s)) > 1 for s in archive.subjects)
    scope = args.scope or ("session" if multi else "subject")
    return PipelineConfig(use_ea=not args.no_ea, use_zscore=not args.no_zscore, stats_scope=scope,
                          use_bn_trick=not args.no_bn_trick, use_mixup=not args.no_mixup,
                          use_subject_reg=not args.no_subject_reg, include_eog=args.eog,
                          online_mode=args.online, highpass_hz=args.highpass_hz, resample_hz=args.resample_hz)


def _in_channels(archive, include_eog: bool) -> int:
    return int(archive.n_channels if include_eog else np.sum(archive.channel_kinds == 0))


# -- commands -------------------------------------------------------------------------

def cmd_synth(args) -> int:
    arch = synth_generate(args.subjects, args.sessions, args.trials, args.channels, args.fs, args.duration,
                          args.classes, seed=args.seed, noise=args.noise, n_eog=args.n_eog)
    write_snapshot(args)
    path = Path(args.out) / "synth.esc1"
    save_archive(arch, path, {"generator": "synth", "seed": args.seed, "subjects": args.subjects,
                              "sessions": args.sessions, "trials_per_session": args.trials,
                              "noise": args.noise})
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    arch = _load(args)
    pipe = _pipeline(args, arch)
    data = select_channels(arch, pipe.include_eog)
    mc = _model_config(args, data.n_channels, data.n_classes, "cross")
    data = normalize_archive(condition(data, pipe, mc), pipe.use_ea, pipe.use_zscore, pipe.stats_scope)
    use_reg = pipe.use_subject_reg and len(data.subjects) > 1
    mc = mc.replace(n_subjects=len(data.subjects) if use_reg else 0)
    tc = _train_config(args)
    write_snapshot(args, {"resolved_scope": pipe.stats_scope})
    with single_threaded():
        model, hist = train(build(mc, seed=args.seed), data, tc, pipe.use_mixup, use_reg)
    out = Path(args.out)
    save_checkpoint(model, out / "model.escm")
    (out / "history.json").write_text(json.dumps(hist.to_dict(), indent=2))
    print(out / "model.escm")
    return EXIT_OK


def _paradigm_inputs(args):
    arch = _load(args)
    pipe = _pipeline(args, arch)
    paradigm = PARADIGM_NAMES[args.paradigm]
    mc = _model_config(args, _in_channels(arch, pipe.include_eog), arch.n_classes,
                       "within" if paradigm == "WS" else "cross")
    return arch, pipe, paradigm, mc, _train_config(args)


def cmd_eval(args) -> int:
    arch, pipe, paradigm, mc, tc = _paradigm_inputs(args)
    write_snapshot(args, {"resolved_scope": pipe.stats_scope})
    with single_threaded():
        report = run_paradigm(arch, paradigm, mc, tc, pipe, n_runs=args.runs, scheme=args.scheme,
                              seed=args.seed, jobs=args.jobs)
    out = Path(args.out)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    s = report.summary()
    print(json.dumps({"paradigm": paradigm, "mean": s["mean"], "std_population": s["std_population"],
                      "std_sample": s["std_sample"], "std_runs": s["std_runs"]}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    arch, pipe, paradigm, mc, tc = _paradigm_inputs(args)
    write_snapshot(args, {"resolved_scope": pipe.stats_scope})
    with single_threaded():
        table = run_ablation(arch, paradigm, mc, tc, pipe, factorial=args.factorial, n_runs=args.runs,
                             scheme=args.scheme, seed=args.seed, jobs=args.jobs)
    out = Path(args.out)
    (out / "ablation.json").write_text(json.dumps(table.to_dict(), indent=2, sort_keys=True))
    (out / "ablation.csv").write_text(table.to_csv())
    print(table.to_csv(), end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.model:
        if not Path(args.model).is_file():
            raise FileNotFoundError(args.model)
        model = load_checkpoint(args.model)
    else:
        cfg = _model_config(args, args.channels, args.classes, "within")
        model = build(cfg, seed=args.seed)
    cfg = model.config
    if args.data:
        arch = _load(args)
        trials = select_channels(arch, include_eog=cfg.in_channels == arch.n_channels).data
    else:
        fs = cfg.resample_hz or 250.0
        n = int(round(args.duration * fs))
        trials = np.random.default_rng(args.seed).normal(size=(args.n_trials, cfg.in_channels, n))
        trials = trials.astype(np.float32)
    if not model.norms[0].initialized:
        forward(model, trials[:min(len(trials), 64)], Mode.CAPTURE)
    write_snapshot(args)
    report = bench_mod.measure_latency(model, trials, repeats=args.repeats, warmup=args.warmup)
    (Path(args.out) / "latency.json").write_text(json.dumps(report.to_dict(), indent=2))
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = _model_config(args, args.channels, args.classes, "within").replace(n_subjects=args.subjects)
    print(count_params(build(cfg)))
    return EXIT_OK


def cmd_embed(args) -> int:
    if not args.model:
        raise ConfigError("--model <checkpoint.escm> is required")
    if not Path(args.model).is_file():
        raise FileNotFoundError(args.model)
    model = load_checkpoint(args.model)
    arch = select_channels(_load(args), args.eog)
    arch = normalize_archive(arch, not args.no_ea, not args.no_zscore, args.scope)
    write_snapshot(args)
    with single_threaded():
        E = extract_embeddings(model, arch.data)
    path = Path(args.out) / "embeddings.csv"
    header = ["label", "subject", "session"] + [f"f{i}" for i in range(E.shape[1])]
    rows = [",".join(header)]
    for i in range(len(E)):
        rows.append(",".join([str(arch.labels[i]), str(arch.subject_id[i]), str(arch.session_id[i])] +
                             [repr(float(v)) for v in E[i]]))
    path.write_text("\n".join(rows) + "\n")
    print(path)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "bench": cmd_bench, "params": cmd_params, "embed": cmd_embed}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except FileNotFoundError as exc:
        return _fail("missing_file", f"no such file: {exc.filename or exc}", EXIT_MISSING_FILE)
    except (ConfigError, SplitError, KeyError) as exc:
        return _fail("invalid_config", str(exc).strip("'\""), EXIT_CONFIG)
    except (ArchiveFormatError, CheckpointError) as exc:
        return _fail("bad_data", str(exc), EXIT_DATA)
    except ValueError as exc:
        return _fail("invalid_config", str(exc), EXIT_CONFIG)
    except Exception as exc:  # noqa: BLE001
        return _fail("runtime", f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
