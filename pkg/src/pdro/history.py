"""Per-run records shared by trainers, selection and the harness.

A run directory holds::

    config.txt         key=value echo of the training config
    epochs.tsv         epoch, train loss, valid loss, valid error, adversary valid KL
    valid_stats.tsv    one row per (epoch, validation example): log weight, loss, error
    checkpoints/       model_<epoch>.txt, adversary_<epoch>.txt, adversary_init.txt
    meta.txt           method, validation fingerprint, validation groups
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adversaries import Adversary, load_adversary, save_adversary
from .models import ModelParams, load_params, save_params


@dataclass
class CheckpointRecord:
    """Sufficient statistics of one evaluation checkpoint on the validation set."""

    epoch: int
    log_weights: np.ndarray
    losses: np.ndarray
    errors: np.ndarray
    theta: np.ndarray | None = None
    adversary: Adversary | None = None

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


@dataclass
class RunHistory:
    config: dict
    records: list
    final_params: ModelParams
    psi0: Adversary | None
    valid_groups: np.ndarray
    valid_fingerprint: str
    train_log: list = field(default_factory=list)

    @property
    def method(self) -> str:
        return str(self.config.get("method", "unknown"))

    def __len__(self):
        return len(self.records)


EPOCH_COLUMNS = ("epoch", "train_loss", "valid_loss", "valid_error", "adv_valid_kl")


def format_config(config: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in config.items())


def parse_config_text(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise ValueError(f"config line without '=': {line!r}")
        out[k.strip()] = v.strip()
    return out


def save_run(history: RunHistory, out_dir) -> Path:
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(history.config), encoding="utf-8")
    groups = " ".join(str(int(g)) for g in history.valid_groups)
    (out / "meta.txt").write_text(
        f"method={history.method}\nvalid_fingerprint={history.valid_fingerprint}\nvalid_groups={groups}\n",
        encoding="utf-8")
    with open(out / "epochs.tsv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(EPOCH_COLUMNS)
        for row in history.train_log:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in EPOCH_COLUMNS[1:]])
    with open(out / "valid_stats.tsv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("epoch", "index", "log_weight", "loss", "error"))
        for rec in history.records:
            for i, (lw, l, e) in enumerate(zip(rec.log_weights, rec.losses, rec.errors)):
                w.writerow((rec.epoch, i, repr(float(lw)), repr(float(l)), repr(float(e))))
    ck = out / "checkpoints"
    for rec in history.records:
        if rec.theta is not None:
            save_params(ModelParams(rec.theta, history.final_params.kind), ck / f"model_{rec.epoch}.txt")
        if rec.adversary is not None:
            save_adversary(rec.adversary, ck / f"adversary_{rec.epoch}.txt")
    save_params(history.final_params, ck / "model_final.txt")
    if history.psi0 is not None:
        save_adversary(history.psi0, ck / "adversary_init.txt")
    return out


def load_run(run_dir) -> RunHistory:
    run = Path(run_dir)
    if not (run / "config.txt").exists():
        raise FileNotFoundError(f"{run} is not a run directory (no config.txt)")
    config = parse_config_text((run / "config.txt").read_text(encoding="utf-8"))
    meta = parse_config_text((run / "meta.txt").read_text(encoding="utf-8"))
    valid_groups = np.array([int(g) for g in meta.get("valid_groups", "").split()], dtype=np.int64)
    stats: dict = {}
    with open(run / "valid_stats.tsv", encoding="utf-8") as fh:
        rows = csv.reader(fh, delimiter="\t")
        next(rows)
        for epoch, _, lw, l, e in rows:
            stats.setdefault(int(epoch), []).append((float(lw), float(l), float(e)))
    ck = run / "checkpoints"
    records = []
    for epoch in sorted(stats):
        arr = np.array(stats[epoch])
        mp = ck / f"model_{epoch}.txt"
        ap = ck / f"adversary_{epoch}.txt"
        records.append(CheckpointRecord(
            epoch, arr[:, 0], arr[:, 1], arr[:, 2],
            load_params(mp).theta if mp.exists() else None,
            load_adversary(ap) if ap.exists() else None))
    train_log = []
    with open(run / "epochs.tsv", encoding="utf-8") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            train_log.append({k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()})
    psi0_path = ck / "adversary_init.txt"
    return RunHistory(config, records, load_params(ck / "model_final.txt"),
                      load_adversary(psi0_path) if psi0_path.exists() else None,
                      valid_groups, meta.get("valid_fingerprint", ""), train_log)
