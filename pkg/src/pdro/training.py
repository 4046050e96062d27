"""Loop plumbing shared by the P-DRO trainer and the baselines."""

from __future__ import annotations

import numpy as np

from .config import TrainConfig
from .data import Dataset
from .history import CheckpointRecord, RunHistory
from .models import Adam, ModelParams, batch_losses, batch_predict, design_matrix, init_params, sgd_update
from .numerics import NumericalError, Rng

SHUFFLE_STREAM = 10
SAMPLE_STREAM = 11


class TrainingAborted(RuntimeError):
    """A run produced NaN/Inf; the message says where."""


class ValidView:
    """Validation arrays computed once per run."""

    def __init__(self, valid: Dataset):
        self.data = valid
        self.X = design_matrix(valid)
        self.y = valid.labels
        self.groups = valid.groups
        self.fingerprint = valid.fingerprint()


def evaluate_checkpoint(epoch: int, theta: np.ndarray, view: ValidView, log_weights=None,
                        adversary=None) -> CheckpointRecord:
    losses = batch_losses(view.X, view.y, theta)
    errors = (batch_predict(view.X, theta) != view.y).astype(np.float64)
    lw = np.zeros(len(view.y)) if log_weights is None else np.asarray(log_weights, dtype=np.float64)
    return CheckpointRecord(epoch, lw, losses, errors, theta.copy(), adversary)


def epoch_batches(rng: Rng, n: int, batch_size: int):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


class ModelUpdater:
    """Applies the configured model optimizer to a gradient."""

    def __init__(self, config: TrainConfig, dim: int):
        self.lr = config.lr
        self.adam = Adam(dim) if config.optimizer == "adam" else None

    def __call__(self, theta, grad):
        if self.adam is not None:
            return self.adam.update(theta, grad, self.lr)
        return sgd_update(theta, grad, self.lr)


def initial_theta(train: Dataset, model_init) -> np.ndarray:
    if model_init is None:
        return init_params(train).theta
    theta = model_init.theta if isinstance(model_init, ModelParams) else model_init
    return np.array(theta, dtype=np.float64)


def epoch_log(epoch: int, train_losses: list, rec: CheckpointRecord) -> dict:
    from .selection import adversary_valid_kl
    return {
        "epoch": epoch,
        "train_loss": float(np.mean(train_losses)) if train_losses else float("nan"),
        "valid_loss": float(rec.losses.mean()),
        "valid_error": float(rec.errors.mean()),
        "adv_valid_kl": adversary_valid_kl(rec),
    }


def build_history(config: TrainConfig, records, theta, psi0, view: ValidView, log) -> RunHistory:
    return RunHistory(config.as_dict(), records, ModelParams(theta.copy()), psi0,
                      view.groups.copy(), view.fingerprint, log)


def guard(fn, epoch: int, step: int):
    """Run ``fn`` and convert numerical failures into TrainingAborted."""
    try:
        with np.errstate(over="raise", invalid="raise"):
            return fn()
    except (NumericalError, FloatingPointError) as err:
        raise TrainingAborted(f"non-finite value at epoch {epoch}, step {step}: {err}") from err
