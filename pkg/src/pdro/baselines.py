"""Baselines: ERM, non-parametric KL-DRO and exponentiated-gradient Group-DRO."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .data import Dataset
from .history import RunHistory
from .models import design_matrix, batch_losses, weighted_grad
from .numerics import Rng, ensure_finite, log_softmax
from .training import (SHUFFLE_STREAM, ModelUpdater, ValidView, build_history, epoch_batches, epoch_log,
                       evaluate_checkpoint, guard, initial_theta)

LOG10_TAU_RANGE = (-10.0, 10.0)
BISECTION_STEPS = 100


def train_erm(config: TrainConfig, train: Dataset, valid: Dataset, model_init=None) -> RunHistory:
    """Minibatch descent on the plain average loss."""
    theta = initial_theta(train, model_init)
    X, y = design_matrix(train), train.labels
    view = ValidView(valid)
    rng = Rng(config.seed).spawn(SHUFFLE_STREAM)
    update = ModelUpdater(config, theta.size)
    records = [evaluate_checkpoint(0, theta, view)]
    log = []
    for epoch in range(1, config.epochs + 1):
        seen = []
        for step, idx in enumerate(epoch_batches(rng, len(y), config.batch_size)):
            def one_step():
                Xb, yb = X[idx], y[idx]
                losses = batch_losses(Xb, yb, theta)
                coef = np.ones(len(yb)) / len(yb)
                return update(theta, weighted_grad(Xb, yb, theta, coef)), losses

            theta, losses = guard(one_step, epoch, step)
            seen.extend(losses.tolist())
        records.append(evaluate_checkpoint(epoch, theta, view))
        log.append(epoch_log(epoch, seen, records[-1]))
    return build_history(config, records, theta, None, view, log)


# -- NonParam ----------------------------------------------------------------


def _tilted_log_weights(losses: np.ndarray, log10_tau: float) -> np.ndarray:
    return log_softmax(losses / 10.0 ** log10_tau)


def batch_kl_to_uniform(log_q: np.ndarray) -> float:
    """sum_i q_i log(n q_i) for a batch distribution given in log space."""
    q = np.exp(log_q)
    return float(np.sum(q * (log_q + math.log(len(log_q)))))


@dataclass(frozen=True)
class NonParamSolution:
    weights: np.ndarray
    tau: float
    kl: float
    clipped: str | None  # None, "low" or "high"


def nonparam_inner(batch_losses, kappa: float) -> NonParamSolution:
    """Worst-case batch distribution q_i ∝ exp(l_i / tau*) with KL(q || uniform) = kappa.

    tau* is found by bisection on log10(tau) over [-10, 10]; the achieved KL
    decreases in tau. When no tau in range reaches kappa the search clips to
    the nearer end: "low" if even the sharpest tilt stays below kappa, "high"
    if all losses tie (KL is identically zero).
    """
    losses = ensure_finite(batch_losses, "batch loss")
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    lo, hi = LOG10_TAU_RANGE
    if np.ptp(losses) == 0.0:
        n = len(losses)
        return NonParamSolution(np.full(n, 1.0 / n), 10.0 ** hi, 0.0, "high")

    def kl_at(t):
        return batch_kl_to_uniform(_tilted_log_weights(losses, t))

    if kl_at(lo) < kappa:
        lw = _tilted_log_weights(losses, lo)
        return NonParamSolution(np.exp(lw), 10.0 ** lo, batch_kl_to_uniform(lw), "low")
    if kl_at(hi) > kappa:
        lw = _tilted_log_weights(losses, hi)
        return NonParamSolution(np.exp(lw), 10.0 ** hi, batch_kl_to_uniform(lw), "high")
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if kl_at(mid) > kappa:
            lo = mid
        else:
            hi = mid
    t = 0.5 * (lo + hi)
    lw = _tilted_log_weights(losses, t)
    return NonParamSolution(np.exp(lw), 10.0 ** t, batch_kl_to_uniform(lw), None)


def train_nonparam(config: TrainConfig, train: Dataset, valid: Dataset, model_init=None,
                   kappa: float | None = None) -> RunHistory:
    """Online KL-DRO: each batch is reweighted by its own worst case in the KL ball.

    Weights are scaled by the batch size so that uniform weights reproduce
    the ERM step exactly. Validation records carry the worst-case weights of
    the validation losses, so adversary-based selection applies unchanged.
    """
    kappa = config.kappa if kappa is None else kappa
    theta = initial_theta(train, model_init)
    X, y = design_matrix(train), train.labels
    view = ValidView(valid)
    rng = Rng(config.seed).spawn(SHUFFLE_STREAM)
    update = ModelUpdater(config, theta.size)

    def checkpoint(epoch):
        rec = evaluate_checkpoint(epoch, theta, view)
        sol = nonparam_inner(rec.losses, kappa)
        with np.errstate(divide="ignore"):
            rec.log_weights = np.log(sol.weights * len(sol.weights))
        rec.log_weights = np.maximum(rec.log_weights, -745.0)
        return rec

    records = [checkpoint(0)]
    log = []
    for epoch in range(1, config.epochs + 1):
        seen = []
        for step, idx in enumerate(epoch_batches(rng, len(y), config.batch_size)):
            def one_step():
                Xb, yb = X[idx], y[idx]
                losses = batch_losses(Xb, yb, theta)
                w = nonparam_inner(losses, kappa).weights * len(yb)
                return update(theta, weighted_grad(Xb, yb, theta, w / len(yb))), losses

            theta, losses = guard(one_step, epoch, step)
            seen.extend(losses.tolist())
        records.append(checkpoint(epoch))
        log.append(epoch_log(epoch, seen, records[-1]))
    return build_history(config, records, theta, None, view, log)


# -- Group-DRO ---------------------------------------------------------------


@dataclass
class GroupWeights:
    """Simplex over evaluation groups, in the order of ``groups``."""

    groups: tuple
    weights: np.ndarray
    eta: float

    @classmethod
    def uniform(cls, groups, eta: float) -> "GroupWeights":
        groups = tuple(int(g) for g in groups)
        return cls(groups, np.full(len(groups), 1.0 / len(groups)), float(eta))

    def index(self, batch_groups) -> np.ndarray:
        lookup = {g: i for i, g in enumerate(self.groups)}
        try:
            return np.array([lookup[int(g)] for g in batch_groups], dtype=np.int64)
        except KeyError as err:
            raise KeyError(f"group {err.args[0]} has no weight") from None


def _eg_step(X, y, theta, gw: GroupWeights, posteriors: np.ndarray, update):
    """Shared core: posteriors is (batch, n_groups), rows on the simplex."""
    losses = batch_losses(X, y, theta)
    mass = posteriors.sum(axis=0)
    present = mass > 0
    group_loss = np.zeros(len(gw.groups))
    group_loss[present] = (posteriors.T @ losses)[present] / mass[present]
    w = gw.weights * np.exp(gw.eta * group_loss)
    w = w / w.sum()
    per_group = np.zeros(len(gw.groups))
    per_group[present] = w[present] / mass[present]
    coef = posteriors @ per_group
    new_theta = update(theta, weighted_grad(X, y, theta, coef))
    return new_theta, GroupWeights(gw.groups, w, gw.eta), losses


def _sgd(lr):
    return lambda theta, grad: ensure_finite(theta - lr * grad, "model parameter")


def groupdro_step(X, y, batch_groups, theta, gw: GroupWeights, lr: float, update=None):
    """One exponentiated-gradient step on hard group labels.

    Group weights move first (w_g *= exp(eta * mean loss_g), renormalized),
    then the model descends sum_g w_g * mean loss_g. Groups missing from the
    batch keep their weight.
    """
    idx = gw.index(batch_groups)
    onehot = np.zeros((len(idx), len(gw.groups)))
    onehot[np.arange(len(idx)), idx] = 1.0
    theta, gw, _ = _eg_step(X, y, theta, gw, onehot, update or _sgd(lr))
    return theta, gw


def groupdro_soft_step(X, y, posteriors, theta, gw: GroupWeights, lr: float, update=None):
    """As :func:`groupdro_step` with soft group memberships (rows on the simplex)."""
    post = np.asarray(posteriors, dtype=np.float64)
    if post.ndim != 2 or post.shape != (len(y), len(gw.groups)):
        raise ValueError("posteriors must have one row per example and one column per group")
    if np.any(post < 0) or np.any(np.abs(post.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("posterior rows must lie on the simplex")
    theta, gw, _ = _eg_step(X, y, theta, gw, post, update or _sgd(lr))
    return theta, gw


def train_groupdro(config: TrainConfig, train: Dataset, valid: Dataset, model_init=None,
                   grouping=None, soft: bool = False) -> RunHistory:
    """Online Group-DRO over oracle groups (or soft posteriors when ``soft``)."""
    theta = initial_theta(train, model_init)
    X, y = design_matrix(train), train.labels
    if soft:
        post = train.posteriors
        if post is None:
            raise ValueError("soft Group-DRO needs per-example posteriors")
        gw = GroupWeights.uniform(range(post.shape[1]), config.eta)
    else:
        raw = train.groups if grouping is None else grouping.apply(train.groups)
        gw = GroupWeights.uniform(sorted(set(raw.tolist())), config.eta)
        idx = gw.index(raw)
        post = np.zeros((len(y), len(gw.groups)))
        post[np.arange(len(y)), idx] = 1.0
    view = ValidView(valid)
    rng = Rng(config.seed).spawn(SHUFFLE_STREAM)
    update = ModelUpdater(config, theta.size)
    records = [evaluate_checkpoint(0, theta, view)]
    log = []
    for epoch in range(1, config.epochs + 1):
        seen = []
        for step, bidx in enumerate(epoch_batches(rng, len(y), config.batch_size)):
            theta, gw, losses = guard(lambda: _eg_step(X[bidx], y[bidx], theta, gw, post[bidx], update),
                                      epoch, step)
            seen.extend(losses.tolist())
        records.append(evaluate_checkpoint(epoch, theta, view))
        log.append(epoch_log(epoch, seen, records[-1]))
    history = build_history(config, records, theta, None, view, log)
    history.config["final_group_weights"] = " ".join(repr(float(w)) for w in gw.weights)
    return history
