"""Checkpoint stopping and cross-run hyper-parameter selection.

Every criterion works from the cached validation statistics of each
checkpoint record: per-example log weights log(q_psi_t / q_psi0), losses and
0-1 errors. An adversary reweights a checkpoint's per-example statistic;
the robust validation score of a model is the worst such reweighted mean.
Ties always resolve to the earliest checkpoint or first run.
"""

from __future__ import annotations

import math

import numpy as np

from .history import CheckpointRecord, RunHistory

KL_VALID_THRESHOLD = math.log(10.0)
CRITERIA = ("average", "minmax", "minmax_kl", "greedy_minmax", "oracle")


def adversary_valid_kl(record: CheckpointRecord) -> float:
    """Validation estimate of KL(q_psi || p): mean of w log w with w = q_psi / q_psi0."""
    lw = np.asarray(record.log_weights, dtype=np.float64)
    return float(np.mean(np.exp(lw) * lw))


def filter_adversaries(records, kl_threshold: float | None = KL_VALID_THRESHOLD) -> list:
    """Records whose adversary stays within ``kl_threshold``; record 0 is always kept."""
    if kl_threshold is None:
        return list(records)
    return [r for i, r in enumerate(records) if i == 0 or adversary_valid_kl(r) <= kl_threshold]


def _statistic(record: CheckpointRecord, statistic: str) -> np.ndarray:
    if statistic == "error":
        return record.errors
    if statistic == "loss":
        return record.losses
    raise ValueError(f"unknown selection statistic {statistic!r}")


def robust_valid_loss(values, adversary_records, statistic: str | None = None) -> float:
    """max over adversaries of mean_i(w_i * values_i).

    ``values`` is a per-example vector, or a record whose ``statistic``
    vector is used.
    """
    if isinstance(values, CheckpointRecord):
        values = _statistic(values, statistic or "error")
    if not adversary_records:
        raise ValueError("need at least one adversary")
    values = np.asarray(values, dtype=np.float64)
    return max(float(np.mean(a.weights * values)) for a in adversary_records)


def _first_argmin(scores) -> int:
    best = 0
    for i, s in enumerate(scores):
        if s < scores[best]:
            best = i
    return best


def minmax_select(history: RunHistory, kl_threshold: float | None = KL_VALID_THRESHOLD,
                  statistic: str = "error") -> int:
    """Checkpoint minimizing its worst reweighted validation score over all kept adversaries."""
    advs = filter_adversaries(history.records, kl_threshold)
    return _first_argmin([robust_valid_loss(_statistic(r, statistic), advs) for r in history.records])


def greedy_minmax_select(history: RunHistory, kl_threshold: float | None = KL_VALID_THRESHOLD,
                         statistic: str = "error", incumbent_only: bool = False) -> int:
    """Single pass over checkpoints in training order.

    Each arriving adversary (if it passes the KL filter) re-scores the cached
    statistics of every checkpoint seen so far, so the running choice equals
    Minmax over the prefix and the final choice equals :func:`minmax_select`.
    With ``incumbent_only`` only the current best and the newest checkpoint
    are compared at each step, keeping just two models alive.
    """
    if not history.records:
        raise ValueError("empty history")
    advs: list = []
    running: list = []
    incumbent = 0
    for t, rec in enumerate(history.records):
        accepted = t == 0 or kl_threshold is None or adversary_valid_kl(rec) <= kl_threshold
        if accepted:
            advs.append(rec)
        if incumbent_only:
            if t > 0:
                ours = robust_valid_loss(_statistic(history.records[incumbent], statistic), advs)
                theirs = robust_valid_loss(_statistic(rec, statistic), advs)
                if theirs < ours:
                    incumbent = t
            continue
        if accepted and running:
            w = rec.weights
            running = [max(r, float(np.mean(w * _statistic(history.records[s], statistic))))
                       for s, r in enumerate(running)]
        running.append(robust_valid_loss(_statistic(rec, statistic), advs))
        incumbent = _first_argmin(running)
    return incumbent


def average_select(history: RunHistory) -> int:
    return _first_argmin([float(r.errors.mean()) for r in history.records])


def worst_group_error(record: CheckpointRecord, groups) -> float:
    groups = np.asarray(groups)
    return max(float(record.errors[groups == g].mean()) for g in np.unique(groups))


def oracle_select(history: RunHistory, valid_groups=None) -> int:
    groups = history.valid_groups if valid_groups is None else valid_groups
    return _first_argmin([worst_group_error(r, groups) for r in history.records])


def select(history: RunHistory, criterion: str, kl_threshold: float = KL_VALID_THRESHOLD,
           statistic: str = "error") -> int:
    if criterion == "average":
        return average_select(history)
    if criterion == "minmax":
        return minmax_select(history, None, statistic)
    if criterion == "minmax_kl":
        return minmax_select(history, kl_threshold, statistic)
    if criterion == "greedy_minmax":
        return greedy_minmax_select(history, kl_threshold, statistic)
    if criterion == "oracle":
        return oracle_select(history)
    raise ValueError(f"unknown selection criterion {criterion!r}")


def hyperparam_select(runs, criterion: str = "greedy_minmax", kl_threshold: float = KL_VALID_THRESHOLD,
                      statistic: str = "error") -> tuple[int, int]:
    """Pick (run index, checkpoint index) across runs sharing one validation set.

    Each run first stops at its own checkpoint under ``criterion``. For
    adversary-based criteria the stopped models are then compared against
    the pooled (filtered) adversaries of every run; otherwise by the
    criterion's own validation score.
    """
    runs = list(runs)
    if not runs:
        raise ValueError("need at least one run")
    prints = {r.valid_fingerprint for r in runs}
    if len(prints) > 1:
        raise ValueError("runs were validated on different validation sets")
    chosen = [select(r, criterion, kl_threshold, statistic) for r in runs]
    if criterion in ("minmax", "minmax_kl", "greedy_minmax"):
        thr = None if criterion == "minmax" else kl_threshold
        pool = [a for r in runs for a in filter_adversaries(r.records, thr)]
        scores = [robust_valid_loss(_statistic(r.records[c], statistic), pool) for r, c in zip(runs, chosen)]
    elif criterion == "average":
        scores = [float(r.records[c].errors.mean()) for r, c in zip(runs, chosen)]
    else:
        scores = [worst_group_error(r.records[c], r.valid_groups) for r, c in zip(runs, chosen)]
    best = _first_argmin(scores)
    return best, chosen[best]


def pooled_adversary_count(runs, criterion: str, kl_threshold: float = KL_VALID_THRESHOLD) -> int:
    if criterion not in ("minmax", "minmax_kl", "greedy_minmax"):
        return 0
    thr = None if criterion == "minmax" else kl_threshold
    return sum(len(filter_adversaries(r.records, thr)) for r in runs)
