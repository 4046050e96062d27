"""Parametric DRO: simultaneous gradient game between a classifier and an adversary.

Each minibatch feeds both players. The model descends the importance-weighted
loss with weights q_psi / q_psi0. The adversary moves in one of three ways:

* ``relaxed``: ascent on sum_i v_i log q_psi(x_i, y_i) with
  v_i = exp(loss_i / tau) / Z, Z being a running average of exp(loss / tau)
  over the last ``k`` minibatches;
* ``bare``: score-function ascent on E_{q_psi}[loss] using samples from q_psi;
* ``kl_projected``: the bare step followed by projection onto the KL ball
  of radius ``kappa`` around psi0 (Gaussian family only).
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np

from .adversaries import Adversary, GaussianAdversary, mle_fit, project_onto_kl_ball
from .config import TrainConfig
from .data import Dataset
from .history import RunHistory
from .models import augment, batch_losses, design_matrix, weighted_grad
from .numerics import NumericalError, Rng, ensure_finite, log_sum_exp
from .training import (SAMPLE_STREAM, SHUFFLE_STREAM, ModelUpdater, ValidView, build_history, epoch_batches,
                       epoch_log, evaluate_checkpoint, guard, initial_theta)

EXP_LIMIT = 709.0


class RunningNormalizer:
    """Average of exp(loss / tau) over the last ``k`` minibatches, kept in log space.

    Each slot stores (log sum_i exp(loss_i / tau), batch size). Before ``k``
    batches have been seen the average runs over those available.
    """

    def __init__(self, k: int):
        if k < 1:
            raise ValueError("window must hold at least one batch")
        self.k = k
        self._slots: deque = deque(maxlen=k)

    def push(self, batch_losses, tau: float) -> float:
        z = ensure_finite(batch_losses, "batch loss") / tau
        self._slots.append((log_sum_exp(z), len(z)))
        return self.log_value

    @property
    def log_value(self) -> float:
        if not self._slots:
            raise ValueError("normalizer has not seen any batch")
        total = log_sum_exp([s for s, _ in self._slots])
        return total - math.log(sum(c for _, c in self._slots))

    @property
    def value(self) -> float:
        lv = self.log_value
        if lv > EXP_LIMIT:
            raise OverflowError(
                f"running normalizer exp({lv:.1f}) overflows; raise the temperature tau")
        return math.exp(lv)

    def __len__(self):
        return len(self._slots)


def update_normalizer(norm: RunningNormalizer, batch_losses, tau: float) -> float:
    """Push one batch and return the new normalizer value."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    norm.push(batch_losses, tau)
    return norm.value


def log_importance_weights(F, psi: Adversary, psi0: Adversary) -> np.ndarray:
    if psi.family != psi0.family:
        raise TypeError("adversary and snapshot belong to different families")
    return ensure_finite(psi.log_density_batch(F) - psi0.log_density_batch(F), "log-density ratio")


def importance_weights(F, psi: Adversary, psi0: Adversary) -> np.ndarray:
    """q_psi / q_psi0 for each row of the adversary feature matrix ``F``."""
    lw = log_importance_weights(F, psi, psi0)
    if lw.max() > EXP_LIMIT:
        raise NumericalError("importance weight overflows")
    return np.exp(lw)


def model_step(X, y, theta, weights, lr: float) -> np.ndarray:
    """theta - lr * mean_i(w_i * grad loss_i)."""
    coef = np.asarray(weights, dtype=np.float64) / len(y)
    return ensure_finite(theta - lr * weighted_grad(X, y, theta, coef), "model parameter")


def relaxed_weights(batch_losses, log_norm: float, tau: float) -> np.ndarray:
    return np.exp(np.asarray(batch_losses) / tau - log_norm)


def adversary_step_relaxed(F, batch_losses, psi: Adversary, log_norm: float, tau: float,
                           adv_lr: float) -> Adversary:
    """psi + adv_lr * mean_i(v_i * grad log q_psi(x_i, y_i)), v_i = exp(l_i/tau) / Z."""
    v = relaxed_weights(batch_losses, log_norm, tau)
    step = psi.weighted_score(F, v) / len(v)
    return psi.with_params(psi.params + adv_lr * step)


def sampled_losses(x, y, theta) -> np.ndarray:
    X = np.hstack([x, np.ones((len(x), 1))])
    return batch_losses(X, y, theta)


def adversary_step_bare(label_marginal, theta, psi: Adversary, psi0: Adversary, adv_lr: float,
                        rng: Rng, n_samples: int) -> Adversary:
    """Score-function ascent on E_{q_psi}[loss], treating p / q_psi0 as 1.

    ``psi0`` is unused by the estimator; it is accepted so all adversary
    steps share a signature.
    """
    if not isinstance(psi, GaussianAdversary):
        raise TypeError("the zero-sum adversary step needs a Gaussian adversary")
    x, y = psi.sample(rng, n_samples, label_marginal)
    losses = sampled_losses(x, y, theta)
    step = psi.weighted_score(x, losses) / n_samples
    return psi.with_params(psi.params + adv_lr * step)


def adversary_step_kl_projected(label_marginal, theta, psi, psi0, adv_lr, rng, n_samples,
                                kappa: float) -> Adversary:
    moved = adversary_step_bare(label_marginal, theta, psi, psi0, adv_lr, rng, n_samples)
    return project_onto_kl_ball(moved, psi0, kappa)


def _label_marginal(train: Dataset) -> np.ndarray:
    counts = np.bincount(train.labels, minlength=2).astype(np.float64)
    return counts / counts.sum()


def train_pdro(config: TrainConfig, train: Dataset, valid: Dataset, model_init=None,
               adversary_family: str | None = None) -> RunHistory:
    """Run the P-DRO game; one checkpoint record per epoch plus the initial one."""
    variant = config.variant
    if variant is None:
        raise ValueError(f"{config.method} is not a P-DRO variant")
    family = adversary_family or config.adv_family or None
    psi0 = mle_fit(train, family)
    psi = psi0
    theta = initial_theta(train, model_init)
    X, y = design_matrix(train), train.labels
    F = psi0.features(train)
    view = ValidView(valid)
    Fv = psi0.features(valid)
    root = Rng(config.seed)
    shuffle_rng, sample_rng = root.spawn(SHUFFLE_STREAM), root.spawn(SAMPLE_STREAM)
    update = ModelUpdater(config, theta.size)
    norm = RunningNormalizer(config.k)
    marginal = _label_marginal(train)
    n_samples = config.n_samples or config.batch_size

    def checkpoint(epoch):
        return evaluate_checkpoint(epoch, theta, view, log_importance_weights(Fv, psi, psi0), psi)

    records = [checkpoint(0)]
    log = []
    for epoch in range(1, config.epochs + 1):
        seen = []
        for step, idx in enumerate(epoch_batches(shuffle_rng, len(y), config.batch_size)):
            def one_step():
                Xb, yb = X[idx], y[idx]
                losses = batch_losses(Xb, yb, theta)
                w = importance_weights(F[idx], psi, psi0)
                if config.clip_weights:
                    w = np.minimum(w, config.clip_weights)
                coef = w / len(yb)
                new_theta = update(theta, weighted_grad(Xb, yb, theta, coef))
                if variant == "relaxed":
                    log_z = norm.push(losses, config.tau)
                    new_psi = adversary_step_relaxed(F[idx], losses, psi, log_z, config.tau, config.adv_lr)
                elif variant == "bare":
                    new_psi = adversary_step_bare(marginal, theta, psi, psi0, config.adv_lr, sample_rng, n_samples)
                else:
                    new_psi = adversary_step_kl_projected(marginal, theta, psi, psi0, config.adv_lr,
                                                          sample_rng, n_samples, config.kappa)
                return new_theta, new_psi, losses

            theta, psi, losses = guard(one_step, epoch, step)
            seen.extend(losses.tolist())
        rec = guard(lambda: checkpoint(epoch), epoch, -1)
        records.append(rec)
        log.append(epoch_log(epoch, seen, rec))
    return build_history(config, records, theta, psi0, view, log)


# -- the Lagrangian on a finite support ------------------------------------------


def lagrangian(log_q, log_p, log_q0, losses, tau: float, kappa: float) -> float:
    """E_q[(p / q0) * loss] - tau * (KL(q || p) - kappa) for distributions given as log-prob vectors."""
    log_q, log_p, log_q0, losses = (np.asarray(a, dtype=np.float64) for a in (log_q, log_p, log_q0, losses))
    q = np.exp(log_q)
    g = np.exp(log_p - log_q0) * losses
    return float(q @ g - tau * (q @ (log_q - log_p) - kappa))


def lagrangian_reorganized(log_q, log_p, log_q0, losses, tau: float, kappa: float) -> float:
    """tau * (kappa - KL(q || q*)) + tau * log E_p exp(g / tau), q* ∝ p exp(g / tau), g = (p / q0) * loss."""
    log_q, log_p, log_q0, losses = (np.asarray(a, dtype=np.float64) for a in (log_q, log_p, log_q0, losses))
    g = np.exp(log_p - log_q0) * losses
    log_z = log_sum_exp(log_p + g / tau)
    log_qstar = log_p + g / tau - log_z
    q = np.exp(log_q)
    return float(tau * (kappa - q @ (log_q - log_qstar)) + tau * log_z)
