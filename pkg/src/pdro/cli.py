"""Command line entry point: ``pdro <subcommand> ...``.

Subcommands: gen-data, train, select, evaluate, grid, report. Every command
exits 0 on success and 1 with a one-line diagnostic on stderr otherwise.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from .config import METHODS, TrainConfig
from .data import read_dataset, write_dataset
from .evaluation import evaluate
from .harness import TASKS, ConfigError, ExperimentConfig, load_task, report, run_experiment, train_method
from .history import load_run, parse_config_text, save_run
from .selection import CRITERIA, KL_VALID_THRESHOLD, hyperparam_select, select
from .training import TrainingAborted

SPLITS = ("train", "valid", "test")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _data_dir(path) -> tuple:
    d = Path(path)
    missing = [s for s in SPLITS if not (d / f"{s}.tsv").exists()]
    if missing:
        raise CliError(f"{d} lacks {', '.join(f'{s}.tsv' for s in missing)}")
    return tuple(read_dataset(d / f"{s}.tsv") for s in SPLITS)


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = load_task(args.task, args.seed, args.bias, args.n_train, args.n_valid, args.n_test)
    for name, ds in zip(SPLITS, splits):
        write_dataset(ds, out / f"{name}.tsv")
    return 0


def cmd_train(args) -> int:
    train, valid, _ = _data_dir(args.data)
    base = parse_config_text(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    given = {k: v for k, v in vars(args).items() if k in _TRAIN_FIELDS and v is not None}
    given["seed"] = args.seed
    if args.lambda_ is not None:
        given["adv_lr"] = args.lambda_
    try:
        config = TrainConfig.from_dict({**base, **given})
    except ValueError as err:
        raise CliError(str(err)) from None
    history = train_method(config, train, valid)
    save_run(history, args.out)
    return 0


def _load_runs(paths):
    for p in paths:
        if not Path(p).is_dir():
            raise CliError(f"no run directory at {p}")
    return [load_run(p) for p in paths]


def cmd_select(args) -> int:
    runs = _load_runs(args.runs)
    ri, ci = hyperparam_select(runs, args.criterion, args.kl_threshold, args.statistic)
    print("run\tepoch")
    print(f"{args.runs[ri]}\t{runs[ri].records[ci].epoch}")
    return 0


def cmd_evaluate(args) -> int:
    train, _, test = _data_dir(args.data)
    history = _load_runs([args.run])[0]
    if args.epoch is not None:
        epochs = [r.epoch for r in history.records]
        if args.epoch not in epochs:
            raise CliError(f"run has no checkpoint for epoch {args.epoch}")
        rec = history.records[epochs.index(args.epoch)]
    else:
        rec = history.records[select(history, args.criterion, args.kl_threshold, args.statistic)]
    ev = evaluate(rec.theta, test, train)
    row = {"epoch": rec.epoch, **ev.as_row()}
    print("\t".join(row))
    print("\t".join(str(v) if isinstance(v, int) else repr(float(v)) for v in row.values()))
    return 0


def cmd_grid(args) -> int:
    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    mapping = parse_config_text(text)
    for f in fields(ExperimentConfig):
        v = getattr(args, f"x_{f.name}", None)
        if v is not None:
            mapping[f.name] = v
    for item in args.set or []:
        k, sep, v = item.partition("=")
        if not sep:
            raise CliError(f"--set expects key=value, got {item!r}")
        mapping[k.strip()] = v.strip()
    config = ExperimentConfig.from_mapping(mapping)
    # flags override the file, so echo the merged config unless the file was used as-is
    echoed = text if text and mapping == parse_config_text(text) else config.to_text()
    results = run_experiment(config, echoed)
    sys.stdout.write(results.table())
    return 0


def cmd_report(args) -> int:
    for d in args.dirs:
        if len(args.dirs) > 1:
            print(f"# {d}")
        sys.stdout.write(report(d))
    return 0


_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)} - {"method", "seed"}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pdro", description="Parametric DRO experiments on synthetic tasks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write train/valid/test TSV files for a task")
    g.add_argument("--task", choices=TASKS, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--bias", type=float, default=0.95)
    g.add_argument("--n-train", type=int, default=0)
    g.add_argument("--n-valid", type=int, default=0)
    g.add_argument("--n-test", type=int, default=0)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train one run and save its history")
    t.add_argument("--data", required=True, help="directory written by gen-data")
    t.add_argument("--method", choices=METHODS, required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key=value file of training settings")
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--optimizer", choices=("sgd", "adam"))
    t.add_argument("--tau", type=float)
    t.add_argument("--k", type=int)
    t.add_argument("--lambda", dest="lambda_", type=float, help="adversary learning rate")
    t.add_argument("--kappa", type=float)
    t.add_argument("--eta", type=float)
    t.add_argument("--n-samples", type=int)
    t.add_argument("--clip-weights", type=float)
    t.add_argument("--adv-family", choices=("gaussian", "bigram"))
    t.set_defaults(fn=cmd_train)

    def selection_flags(sp, default):
        sp.add_argument("--criterion", choices=CRITERIA, default=default)
        sp.add_argument("--kl-threshold", type=float, default=KL_VALID_THRESHOLD)
        sp.add_argument("--statistic", choices=("error", "loss"), default="error")

    s = sub.add_parser("select", help="pick the best (run, checkpoint) among runs")
    s.add_argument("runs", nargs="+")
    selection_flags(s, "greedy_minmax")
    s.set_defaults(fn=cmd_select)

    e = sub.add_parser("evaluate", help="test metrics of a selected checkpoint")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--epoch", type=int, help="evaluate this checkpoint instead of selecting one")
    selection_flags(e, "greedy_minmax")
    e.set_defaults(fn=cmd_evaluate)

    gr = sub.add_parser("grid", help="run a full experiment grid")
    gr.add_argument("--config", help="key=value experiment file")
    for f in fields(ExperimentConfig):
        if f.name == "scoped":
            continue
        gr.add_argument(f"--{f.name.replace('_', '-')}", dest=f"x_{f.name}",
                        help="comma-separated list" if f.type == "tuple" else None)
    gr.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="any config line, e.g. pdro_relaxed.taus=0.1,1")
    gr.set_defaults(fn=cmd_grid)

    r = sub.add_parser("report", help="summarize experiment directories")
    r.add_argument("dirs", nargs="+")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except SystemExit as err:  # --help
        return int(err.code or 0)
    except (CliError, ConfigError, FileNotFoundError, ValueError, KeyError, TypeError, TrainingAborted) as err:
        msg = err.args[0] if isinstance(err, KeyError) and err.args else err
        print(f"pdro: error: {' '.join(str(msg).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
