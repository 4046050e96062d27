"""Grid orchestration: train every (method, grid point, seed), select, evaluate, tabulate.

An experiment directory looks like::

    config.txt        the experiment config, echoed verbatim
    runs/<method>/<point>/seed<s>/   one RunHistory per cell
    cells.tsv         one row per (method, point, seed)
    best.tsv          per (method, seed): the hyper-parameter selected run
    summary.tsv       mean and sample std over seeds, per point and for "best"
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .baselines import train_erm, train_groupdro, train_nonparam
from .config import METHODS, TrainConfig
from .data import Dataset, gen_biased_sequences, gen_toy_gaussian
from .evaluation import evaluate
from .history import RunHistory, load_run, parse_config_text, save_run
from .pdro import train_pdro
from .selection import CRITERIA, KL_VALID_THRESHOLD, hyperparam_select, select
from .training import TrainingAborted

TASKS = ("toy", "biased_seq")

# grid field -> TrainConfig field
GRID_FIELDS = {"lambdas": "adv_lr", "taus": "tau", "ks": "k", "kappas": "kappa", "etas": "eta"}
METHOD_GRIDS = {
    "erm": (),
    "pdro_bare": ("lambdas",),
    "pdro_kl": ("lambdas", "kappas"),
    "pdro_relaxed": ("lambdas", "taus", "ks"),
    "nonparam": ("kappas",),
    "groupdro": ("etas",),
    "groupdro_soft": ("etas",),
}
# fields a "<method>.<field>=value" line may not override
GLOBAL_ONLY = ("task", "methods", "seeds", "out_dir", "workers", "scoped")

CELL_COLUMNS = ("method", "point", "seed", "status", "epoch", "robust", "average")
BEST_COLUMNS = ("method", "seed", "point", "epoch", "robust", "average")
SUMMARY_COLUMNS = ("method", "point", "n", "n_aborted", "robust_mean", "robust_std", "average_mean",
                   "average_std")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _floats(v) -> tuple:
    return tuple(float(x) for x in _items(v))


def _ints(v) -> tuple:
    return tuple(int(x) for x in _items(v))


def _strs(v) -> tuple:
    return tuple(str(x) for x in _items(v))


def _items(v):
    if isinstance(v, str):
        return [s.strip() for s in v.split(",") if s.strip()]
    return list(v)


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "toy"
    methods: tuple = ("erm",)
    seeds: tuple = ()
    criterion: str = "greedy_minmax"
    out_dir: str = "results"
    # grids
    lambdas: tuple = (1e-5, 1e-4, 1e-3)
    taus: tuple = (0.1, 0.01, 0.001)
    ks: tuple = (1, 5, 10)
    kappas: tuple = (0.01, 0.1, 1.0, 10.0)
    etas: tuple = (0.01, 0.1, 1.0)
    # shared training settings
    lr: float = 0.1
    epochs: int = 20
    batch_size: int = 64
    optimizer: str = "sgd"
    n_samples: int = 0
    clip_weights: float = 0.0
    # selection
    kl_threshold: float = KL_VALID_THRESHOLD
    statistic: str = "error"
    # data; 0 keeps the generator's default split size
    bias: float = 0.95
    n_train: int = 0
    n_valid: int = 0
    n_test: int = 0
    workers: int = 1
    # (method, field, raw value) overrides from "<method>.<field>=value" lines
    scoped: tuple = field(default=())

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if not self.methods:
            raise ConfigError("methods must not be empty")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods must be distinct")
        if not self.seeds:
            raise ConfigError("seeds must be given explicitly")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.criterion not in CRITERIA:
            raise ConfigError(f"unknown selection criterion {self.criterion!r}")
        for name in GRID_FIELDS:
            if not getattr(self, name):
                raise ConfigError(f"grid {name} must not be empty")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        for method, key, _ in self.scoped:
            if method not in METHODS:
                raise ConfigError(f"override for unknown method {method!r}")
            if key in GLOBAL_ONLY or key not in _FIELD_TYPES:
                raise ConfigError(f"{key!r} cannot be set per method")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExperimentConfig":
        """Build from string values; ``<method>.<field>`` keys become scoped overrides."""
        kw, scoped = {}, []
        for key, raw in mapping.items():
            if "." in key:
                method, _, sub = key.partition(".")
                scoped.append((method, sub, str(raw)))
                continue
            if key not in _FIELD_TYPES or key == "scoped":
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _convert(key, raw)
        try:
            return cls(scoped=tuple(scoped), **kw)
        except (TypeError, ValueError) as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(str(err)) from None

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_mapping(parse_config_text(text))
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "scoped":
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name}={','.join(str(x) for x in v) if isinstance(v, tuple) else v}")
        lines.extend(f"{m}.{k}={v}" for m, k, v in self.scoped)
        return "\n".join(lines) + "\n"

    def for_method(self, method: str) -> "ExperimentConfig":
        """This config with the method's scoped overrides applied."""
        kw = {k: _convert(k, v) for m, k, v in self.scoped if m == method}
        return replace(self, **kw) if kw else self

    def grid_points(self, method: str) -> list[dict]:
        cfg = self.for_method(method)
        axes = METHOD_GRIDS[method]
        values = [getattr(cfg, a) for a in axes]
        return [{GRID_FIELDS[a]: v for a, v in zip(axes, combo)} for combo in itertools.product(*values)]


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_CONVERTERS = {
    "methods": _strs, "seeds": _ints, "lambdas": _floats, "taus": _floats, "ks": _ints, "kappas": _floats,
    "etas": _floats,
}


def _convert(key: str, raw):
    if key in _CONVERTERS:
        return _CONVERTERS[key](raw)
    t = _FIELD_TYPES[key]
    try:
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}={raw!r} is not a valid {t}") from None
    return str(raw)


def point_label(point: dict) -> str:
    if not point:
        return "default"
    return ",".join(f"{k}={v!r}" for k, v in point.items())


def point_dirname(point: dict) -> str:
    return point_label(point).replace(",", "_").replace("=", "-")


# -- data and training ---------------------------------------------------------


@lru_cache(maxsize=16)
def load_task(task: str, seed: int, bias: float = 0.95, n_train: int = 0, n_valid: int = 0,
              n_test: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Train/valid/test splits of ``task`` for ``seed``; 0 sizes mean generator defaults."""
    sizes = {k: v for k, v in (("n_train", n_train), ("n_valid", n_valid), ("n_test", n_test)) if v}
    if task == "toy":
        return gen_toy_gaussian(seed, **sizes)
    if task == "biased_seq":
        return gen_biased_sequences(seed, bias=bias, **sizes)
    raise ConfigError(f"unknown task {task!r}")


def one_hot_posteriors(data: Dataset) -> Dataset:
    """Attach one-hot posteriors over the sorted group ids (stand-in for an external group model)."""
    ids = sorted(set(data.groups.tolist()))
    col = {g: i for i, g in enumerate(ids)}
    post = np.zeros((len(data), len(ids)))
    post[np.arange(len(data)), [col[g] for g in data.groups.tolist()]] = 1.0
    return data.with_posteriors(post)


def train_method(config: TrainConfig, train: Dataset, valid: Dataset) -> RunHistory:
    m = config.method
    if m == "erm":
        return train_erm(config, train, valid)
    if m == "nonparam":
        return train_nonparam(config, train, valid)
    if m in ("groupdro", "groupdro_soft"):
        soft = m == "groupdro_soft"
        if soft and train.posteriors is None:
            train = one_hot_posteriors(train)
        return train_groupdro(config, train, valid, soft=soft)
    return train_pdro(config, train, valid)


def train_config(cfg: ExperimentConfig, method: str, point: dict, seed: int) -> TrainConfig:
    return TrainConfig(method=method, seed=seed, lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size,
                       optimizer=cfg.optimizer, n_samples=cfg.n_samples, clip_weights=cfg.clip_weights,
                       **point)


# -- one cell --------------------------------------------------------------------


@dataclass
class CellResult:
    method: str
    point: str  # point_label of the grid point
    seed: int
    status: str
    epoch: int = -1
    robust: float = float("nan")
    average: float = float("nan")
    history: RunHistory | None = None

    def row(self) -> list:
        return [self.method, self.point, self.seed, self.status, self.epoch,
                _fmt(self.robust), _fmt(self.average)]


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def run_cell(cfg: ExperimentConfig, method: str, point: dict, seed: int, run_dir: Path) -> CellResult:
    mcfg = cfg.for_method(method)
    train, valid, test = load_task(cfg.task, seed, cfg.bias, cfg.n_train, cfg.n_valid, cfg.n_test)
    tc = train_config(mcfg, method, point, seed)
    try:
        history = train_method(tc, train, valid)
    except (TrainingAborted, OverflowError) as err:
        msg = " ".join(str(err).split())
        return CellResult(method, point_label(point), seed, f"aborted: {msg}")
    save_run(history, run_dir)
    idx = select(history, mcfg.criterion, mcfg.kl_threshold, mcfg.statistic)
    rec = history.records[idx]
    ev = evaluate(rec.theta, test, train)
    return CellResult(method, point_label(point), seed, "ok", rec.epoch, ev.robust, ev.average, history)


def _run_job(args):
    cfg, method, point, seed, run_dir = args
    return run_cell(cfg, method, point, seed, Path(run_dir))


# -- the experiment ---------------------------------------------------------------


@dataclass
class Results:
    cells: list
    best: list  # [method, seed, point, epoch, robust, average]
    summary: list  # rows matching SUMMARY_COLUMNS

    def table(self) -> str:
        return format_table(self.summary)


def run_experiment(config: ExperimentConfig, config_text: str | None = None) -> Results:
    """Train, select and evaluate every cell, then pick hyper-parameters per seed.

    Aborted runs are recorded in cells.tsv and left out of selection and
    aggregation; they do not stop the sweep.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_text if config_text is not None else config.to_text(),
                                    encoding="utf-8")
    jobs = []
    for method in config.methods:
        for point in config.grid_points(method):
            for seed in config.seeds:
                run_dir = out / "runs" / method / point_dirname(point) / f"seed{seed}"
                jobs.append((config, method, point, seed, str(run_dir)))
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            cells = list(pool.map(_run_job, jobs))
    else:
        cells = [_run_job(j) for j in jobs]

    best = []
    for method in config.methods:
        mcfg = config.for_method(method)
        for seed in config.seeds:
            done = [c for c in cells if c.method == method and c.seed == seed and c.status == "ok"]
            if not done:
                continue
            # each run stops at the same checkpoint as in run_cell, so only the run index matters
            ri, _ = hyperparam_select([c.history for c in done], mcfg.criterion, mcfg.kl_threshold,
                                      mcfg.statistic)
            chosen = done[ri]
            best.append([method, seed, chosen.point, chosen.epoch, chosen.robust, chosen.average])

    _write_tsv(out / "cells.tsv", CELL_COLUMNS, [c.row() for c in cells])
    _write_tsv(out / "best.tsv", BEST_COLUMNS,
               [[m, s, p, e, _fmt(r), _fmt(a)] for m, s, p, e, r, a in best])
    summary = summarize(cells, best, config.methods)
    _write_tsv(out / "summary.tsv", SUMMARY_COLUMNS, [_summary_strings(r) for r in summary])
    return Results(cells, best, summary)


def _mean_std(xs) -> tuple[float, float]:
    xs = np.asarray(xs, dtype=np.float64)
    if len(xs) == 0:
        return float("nan"), float("nan")
    std = float(np.std(xs, ddof=1)) if len(xs) > 1 else float("nan")
    return float(np.mean(xs)), std


def summarize(cells, best, methods) -> list:
    """Per-point rows followed by the hyper-parameter-selected "best" row, per method."""
    rows = []
    for method in methods:
        points = []
        for c in cells:
            if c.method == method and c.point not in points:
                points.append(c.point)
        for p in points:
            mine = [c for c in cells if c.method == method and c.point == p]
            ok = [c for c in mine if c.status == "ok"]
            rm, rs = _mean_std([c.robust * 100 for c in ok])
            am, as_ = _mean_std([c.average * 100 for c in ok])
            rows.append([method, p, len(ok), len(mine) - len(ok), rm, rs, am, as_])
        chosen = [b for b in best if b[0] == method]
        rm, rs = _mean_std([b[4] * 100 for b in chosen])
        am, as_ = _mean_std([b[5] * 100 for b in chosen])
        rows.append([method, "best", len(chosen), 0, rm, rs, am, as_])
    return rows


def _summary_strings(row) -> list:
    return row[:4] + [f"{x:.2f}" for x in row[4:]]


def _write_tsv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_tsv(path: Path) -> list[dict]:
    if not path.exists():
        raise FileNotFoundError(f"missing {path}")
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


# -- reporting -----------------------------------------------------------------------


def format_table(summary) -> str:
    """Best row per method as "method  Average  Robust" with mean ± std."""
    lines = [f"{'method':<16}{'Average':>18}{'Robust':>18}"]
    for row in summary:
        if row[1] != "best":
            continue
        avg, rob = f"{row[6]:.2f} ± {row[7]:.2f}", f"{row[4]:.2f} ± {row[5]:.2f}"
        lines.append(f"{row[0]:<16}{avg:>18}{rob:>18}")
    return "\n".join(lines) + "\n"


def report(exp_dir) -> str:
    """Rebuild the summary from cells.tsv/best.tsv and write report.tsv; returns the table."""
    exp = Path(exp_dir)
    cells_rows = _read_tsv(exp / "cells.tsv")
    best_rows = _read_tsv(exp / "best.tsv")
    methods = []
    for r in cells_rows:
        if r["method"] not in methods:
            methods.append(r["method"])
    cells = [CellResult(r["method"], r["point"], int(r["seed"]), r["status"], int(r["epoch"]),
                        float(r["robust"]), float(r["average"])) for r in cells_rows]
    best = [[r["method"], int(r["seed"]), r["point"], int(r["epoch"]), float(r["robust"]),
             float(r["average"])] for r in best_rows]
    summary = summarize(cells, best, methods)
    _write_tsv(exp / "report.tsv", SUMMARY_COLUMNS, [_summary_strings(r) for r in summary])
    return format_table(summary)


def load_cell_history(exp_dir, method: str, point: dict, seed: int) -> RunHistory:
    return load_run(Path(exp_dir) / "runs" / method / point_dirname(point) / f"seed{seed}")
