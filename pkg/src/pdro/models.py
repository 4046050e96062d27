"""Linear logistic classifiers with exact gradients.

Inputs are augmented with a trailing constant 1 so the last coordinate of
``theta`` is the bias. Sequences are represented by bag-of-token counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, Example
from .numerics import ensure_finite, log1pexp, sigmoid


@dataclass
class ModelParams:
    theta: np.ndarray
    kind: str = "logistic"

    def copy(self) -> "ModelParams":
        return ModelParams(self.theta.copy(), self.kind)

    @property
    def dim(self) -> int:
        return self.theta.size


def featurize_sequence(tokens, vocab_size: int) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.size and (toks.min() < 0 or toks.max() >= vocab_size):
        raise ValueError("token id outside the vocabulary")
    return np.bincount(toks, minlength=vocab_size).astype(np.float64)


def augment(x, vocab_size: int | None = None) -> np.ndarray:
    if vocab_size is not None:
        feats = featurize_sequence(x, vocab_size)
    else:
        feats = np.asarray(x, dtype=np.float64)
    return np.append(feats, 1.0)


def design_matrix(data: Dataset) -> np.ndarray:
    """(n, d+1) feature matrix with a trailing bias column."""
    if data.kind == "seq":
        feats = np.zeros((len(data), data.vocab_size))
        for i, ex in enumerate(data.examples):
            np.add.at(feats[i], np.asarray(ex.x, dtype=np.int64), 1.0)
    else:
        feats = data.points
    return np.hstack([feats, np.ones((len(data), 1))])


def init_params(data: Dataset) -> ModelParams:
    dim = (data.vocab_size if data.kind == "seq" else data.points.shape[1]) + 1
    return ModelParams(np.zeros(dim))


def _check_dim(xt: np.ndarray, theta: np.ndarray):
    if xt.shape[-1] != theta.shape[-1]:
        raise ValueError(f"feature dimension {xt.shape[-1]} does not match parameters {theta.shape[-1]}")


# -- single-example API ------------------------------------------------------


def loss(example: Example, theta, vocab_size: int | None = None) -> float:
    """Negative log-likelihood of the true label: log(1 + exp(-s * theta.x))."""
    theta = np.asarray(theta, dtype=np.float64)
    xt = augment(example.x, vocab_size)
    _check_dim(xt, theta)
    sign = 2.0 * example.y - 1.0
    return float(log1pexp(-sign * xt @ theta))


def grad_loss(example: Example, theta, vocab_size: int | None = None) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    xt = augment(example.x, vocab_size)
    _check_dim(xt, theta)
    return (sigmoid(np.array([xt @ theta]))[0] - example.y) * xt


def predict(x, theta, vocab_size: int | None = None) -> int:
    """Most probable label; a zero logit goes to label 0."""
    theta = np.asarray(theta, dtype=np.float64)
    xt = augment(x, vocab_size)
    _check_dim(xt, theta)
    return int(xt @ theta > 0)


# -- batched API used by the trainers ---------------------------------------


def batch_losses(X: np.ndarray, y: np.ndarray, theta: np.ndarray) -> np.ndarray:
    _check_dim(X, theta)
    z = X @ theta
    return log1pexp(np.where(y == 1, -z, z))


def batch_predict(X: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return (X @ theta > 0).astype(np.int64)


def weighted_grad(X: np.ndarray, y: np.ndarray, theta: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """Sum_i coef_i * grad loss_i."""
    residual = sigmoid(X @ theta) - y
    return X.T @ (coef * residual)


def sgd_update(theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    return ensure_finite(theta - lr * grad, "model parameter")


class Adam:
    """Adaptive moment rule, offered as a non-default model optimizer.

    Constants follow the usual defaults: beta1=0.9, beta2=0.999, eps=1e-8.
    """

    def __init__(self, dim: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def update(self, theta, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return ensure_finite(theta - lr * mhat / (np.sqrt(vhat) + self.eps), "model parameter")


# -- checkpoints --------------------------------------------------------------


def save_params(params: ModelParams, path) -> None:
    lines = [f"{params.dim} {params.kind}"] + [repr(float(v)) for v in params.theta]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_params(path) -> ModelParams:
    head, *rest = Path(path).read_text(encoding="utf-8").split("\n")
    dim, kind = head.split()
    theta = np.array([float(v) for v in rest if v.strip()])
    if theta.size != int(dim):
        raise ValueError(f"{path}: header says {dim} values, found {theta.size}")
    return ModelParams(theta, kind)
