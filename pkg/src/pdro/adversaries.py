"""Parametric generative adversaries q_psi.

Adversaries are immutable value objects: every update returns a new
instance, so the MLE snapshot psi_0 can be shared freely. Both families
expose the same batched interface built on a per-dataset feature matrix:

* ``features(data)`` -> matrix F (one row per example)
* ``log_density_batch(F)`` -> log q_psi for each row
* ``weighted_score(F, v)`` -> sum_i v_i * grad_psi log q_psi(row i)
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import Dataset, Example
from .numerics import Rng, ensure_finite, log_softmax, softmax

LOG_2PI = math.log(2.0 * math.pi)


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


class GaussianAdversary:
    """Isotropic Gaussian over inputs only, with fixed scale ``sigma``.

    The label conditional is assumed shared with the data and cancels in
    every density ratio, so only q(x) is modelled.
    """

    family = "gaussian"

    def __init__(self, mu, sigma: float):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.mu = _frozen(ensure_finite(mu, "Gaussian location"))
        self.sigma = float(sigma)

    @property
    def params(self) -> np.ndarray:
        return self.mu

    def with_params(self, psi) -> "GaussianAdversary":
        return GaussianAdversary(psi, self.sigma)

    def constants(self) -> dict:
        return {"sigma": repr(self.sigma), "dim": str(self.mu.size)}

    def features(self, data: Dataset) -> np.ndarray:
        if data.kind != "toy":
            raise TypeError("the Gaussian adversary needs real-valued inputs")
        return data.points

    def example_features(self, example: Example) -> np.ndarray:
        x = np.asarray(example.x, dtype=np.float64)
        if x.shape != self.mu.shape:
            raise TypeError("example is not compatible with this Gaussian")
        return x[None, :]

    def log_density_batch(self, F) -> np.ndarray:
        d = self.mu.size
        sq = ((F - self.mu) ** 2).sum(axis=1)
        return -0.5 * sq / self.sigma ** 2 - d * math.log(self.sigma) - 0.5 * d * LOG_2PI

    def weighted_score(self, F, v) -> np.ndarray:
        return (np.asarray(v) @ (F - self.mu)) / self.sigma ** 2

    def log_density(self, example: Example) -> float:
        return float(self.log_density_batch(self.example_features(example))[0])

    def grad_log_density(self, example: Example) -> np.ndarray:
        return self.weighted_score(self.example_features(example), np.ones(1))

    def sample(self, rng: Rng, n: int, label_marginal) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` inputs from q_psi and labels from ``label_marginal``."""
        x = self.mu + self.sigma * rng.normal(size=(n, self.mu.size))
        y = rng.choice(len(label_marginal), size=n, p=np.asarray(label_marginal, dtype=np.float64))
        return x, y


class BigramAdversary:
    """Bigram language model over label-prefixed token sequences.

    The joint is q(y) * prod_t q(x_t | x_{t-1}) with x_0 a label-specific
    start token and an end-of-sequence token after the last content token.
    Transition rows are the ``vocab_size`` tokens followed by the two label
    start tokens; columns are the tokens followed by end-of-sequence.
    """

    family = "bigram"

    def __init__(self, label_logits, trans_logits, vocab_size: int):
        self.vocab_size = int(vocab_size)
        self.label_logits = _frozen(ensure_finite(label_logits, "label logit"))
        self.trans_logits = _frozen(ensure_finite(trans_logits, "transition logit"))
        if self.label_logits.shape != (2,) or self.trans_logits.shape != (self.n_rows, self.n_cols):
            raise ValueError("bigram parameter shapes do not match the vocabulary")

    @property
    def n_rows(self) -> int:
        return self.vocab_size + 2

    @property
    def n_cols(self) -> int:
        return self.vocab_size + 1

    @property
    def eos(self) -> int:
        return self.vocab_size

    def start_row(self, label: int) -> int:
        return self.vocab_size + int(label)

    @classmethod
    def uniform(cls, vocab_size: int) -> "BigramAdversary":
        return cls(np.zeros(2), np.zeros((vocab_size + 2, vocab_size + 1)), vocab_size)

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.label_logits, self.trans_logits.ravel()])

    def with_params(self, psi) -> "BigramAdversary":
        psi = np.asarray(psi, dtype=np.float64)
        return BigramAdversary(psi[:2], psi[2:].reshape(self.n_rows, self.n_cols), self.vocab_size)

    def constants(self) -> dict:
        return {"vocab_size": str(self.vocab_size)}

    def transitions(self, tokens, label: int):
        prev = [self.start_row(label)] + list(tokens)
        nxt = list(tokens) + [self.eos]
        return prev, nxt

    def _rows_to_matrix(self, rows) -> sp.csr_matrix:
        """rows: iterable of (tokens, label)."""
        indptr, indices = [0], []
        for tokens, label in rows:
            if len(tokens) == 0:
                raise TypeError("sequences must contain at least one token")
            if min(tokens) < 0 or max(tokens) >= self.vocab_size:
                raise TypeError("sequence token outside the adversary's vocabulary")
            prev, nxt = self.transitions(tokens, label)
            indices.append(int(label))
            indices.extend(2 + p * self.n_cols + q for p, q in zip(prev, nxt))
            indptr.append(len(indices))
        data = np.ones(len(indices))
        m = sp.csr_matrix((data, np.array(indices), np.array(indptr)),
                          shape=(len(indptr) - 1, 2 + self.n_rows * self.n_cols))
        m.sum_duplicates()
        return m

    def features(self, data: Dataset) -> sp.csr_matrix:
        if data.kind != "seq":
            raise TypeError("the bigram adversary needs token sequences")
        return self._rows_to_matrix((ex.x, ex.y) for ex in data.examples)

    def example_features(self, example: Example) -> sp.csr_matrix:
        if not isinstance(example.x[0], (int, np.integer)):
            raise TypeError("example is not a token sequence")
        return self._rows_to_matrix([(example.x, example.y)])

    def log_probs(self) -> np.ndarray:
        return np.concatenate([log_softmax(self.label_logits), log_softmax(self.trans_logits, axis=1).ravel()])

    def log_density_batch(self, F) -> np.ndarray:
        return np.asarray(F @ self.log_probs()).ravel()

    def weighted_score(self, F, v) -> np.ndarray:
        counts = np.asarray(F.T @ np.asarray(v, dtype=np.float64)).ravel()
        lab = counts[:2]
        g_lab = lab - lab.sum() * softmax(self.label_logits)
        tr = counts[2:].reshape(self.n_rows, self.n_cols)
        g_tr = tr - tr.sum(axis=1, keepdims=True) * softmax(self.trans_logits, axis=1)
        return np.concatenate([g_lab, g_tr.ravel()])

    def log_density(self, example: Example) -> float:
        return float(self.log_density_batch(self.example_features(example))[0])

    def grad_log_density(self, example: Example) -> np.ndarray:
        return self.weighted_score(self.example_features(example), np.ones(1))

    def sample(self, *args, **kwargs):
        raise TypeError("sampling is only supported for the Gaussian family")


Adversary = GaussianAdversary | BigramAdversary


def mle_fit(data: Dataset, family: str | None = None, alpha: float = 0.1) -> Adversary:
    """Maximum-likelihood adversary psi_0 for ``data``.

    Gaussian: empirical mean, sigma^2 = mean of per-dimension variances.
    Bigram: log of add-``alpha`` smoothed counts.
    """
    if len(data) == 0:
        raise ValueError("cannot fit an adversary to an empty dataset")
    family = family or ("gaussian" if data.kind == "toy" else "bigram")
    if family == "gaussian":
        X = data.points
        return GaussianAdversary(X.mean(axis=0), math.sqrt(X.var(axis=0).mean()))
    if family == "bigram":
        proto = BigramAdversary.uniform(data.vocab_size)
        counts = np.asarray(proto.features(data).sum(axis=0)).ravel()
        lab = np.log(counts[:2] + alpha)
        tr = np.log(counts[2:] + alpha).reshape(proto.n_rows, proto.n_cols)
        return BigramAdversary(lab, tr, data.vocab_size)
    raise ValueError(f"unknown adversary family {family!r}")


def _require_gaussian_pair(a, b):
    if not (isinstance(a, GaussianAdversary) and isinstance(b, GaussianAdversary)):
        raise TypeError("closed-form KL needs two Gaussian adversaries")
    if a.sigma != b.sigma:
        raise ValueError("closed-form KL needs a shared sigma")


def gaussian_kl(a: GaussianAdversary, b: GaussianAdversary) -> float:
    """KL between isotropic Gaussians sharing sigma: |mu_a - mu_b|^2 / (2 sigma^2)."""
    _require_gaussian_pair(a, b)
    diff = a.mu - b.mu
    return float(diff @ diff) / (2.0 * a.sigma ** 2)


def project_onto_kl_ball(psi: GaussianAdversary, psi0: GaussianAdversary, kappa: float) -> GaussianAdversary:
    """Closest point of {KL(q || q_psi0) <= kappa}; interior points are returned as is."""
    _require_gaussian_pair(psi, psi0)
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    if gaussian_kl(psi, psi0) <= kappa:
        return psi
    diff = psi.mu - psi0.mu
    scale = math.sqrt(2.0 * kappa) * psi.sigma / math.sqrt(float(diff @ diff))
    return psi.with_params(psi0.mu + scale * diff)


# -- checkpoints --------------------------------------------------------------


def save_adversary(adv: Adversary, path) -> None:
    consts = " ".join(f"{k}={v}" for k, v in adv.constants().items())
    psi = adv.params
    lines = [f"{psi.size} {adv.family} {consts}"] + [repr(float(v)) for v in psi]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_adversary(path) -> Adversary:
    head, *rest = Path(path).read_text(encoding="utf-8").split("\n")
    dim, family, *consts = head.split()
    kv = dict(c.split("=", 1) for c in consts)
    psi = np.array([float(v) for v in rest if v.strip()])
    if psi.size != int(dim):
        raise ValueError(f"{path}: header says {dim} values, found {psi.size}")
    if family == "gaussian":
        return GaussianAdversary(psi, float(kv["sigma"]))
    if family == "bigram":
        return BigramAdversary.uniform(int(kv["vocab_size"])).with_params(psi)
    raise ValueError(f"{path}: unknown adversary family {family!r}")
