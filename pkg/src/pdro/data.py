"""Synthetic benchmark tasks, group bookkeeping and group-level metrics.

Two tasks are provided:

* ``toy``: 2-D points from two Gaussian domains sampled 1:50, each with its
  own linear labeling rule, so one logistic regression cannot serve both.
* ``biased_seq``: short token sequences whose class is weakly signalled by
  the tokens and strongly (but spuriously) by a distractor token prepended
  to most negatives and few positives.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import Rng

SPLITS = ("train", "valid", "test")
MERGED_GROUP = -1


@dataclass(frozen=True)
class Example:
    x: tuple
    y: int
    group: int
    posterior: tuple | None = None


class Dataset:
    """Immutable list of examples plus cached array views."""

    def __init__(self, examples: Sequence[Example], split: str, vocab_size: int | None = None):
        if not examples:
            raise ValueError("a dataset needs at least one example")
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        self.examples = tuple(examples)
        self.split = split
        self.vocab_size = vocab_size
        self.kind = "seq" if vocab_size is not None else "toy"
        if self.kind == "seq":
            for ex in self.examples:
                if len(ex.x) == 0 or max(ex.x) >= vocab_size or min(ex.x) < 0:
                    raise ValueError("sequence token outside the vocabulary")

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array([ex.y for ex in self.examples], dtype=np.int64)

    @cached_property
    def groups(self) -> np.ndarray:
        return np.array([ex.group for ex in self.examples], dtype=np.int64)

    @cached_property
    def points(self) -> np.ndarray:
        """(n, 2) array of raw features; toy task only."""
        if self.kind != "toy":
            raise TypeError("points are only defined for real-valued datasets")
        return np.array([ex.x for ex in self.examples], dtype=np.float64)

    @cached_property
    def posteriors(self) -> np.ndarray | None:
        if self.examples[0].posterior is None:
            return None
        return np.array([ex.posterior for ex in self.examples], dtype=np.float64)

    def group_frequencies(self) -> dict[int, float]:
        counts = Counter(int(g) for g in self.groups)
        n = len(self)
        return {g: c / n for g, c in sorted(counts.items())}

    def with_posteriors(self, posteriors) -> "Dataset":
        post = np.asarray(posteriors, dtype=np.float64)
        if post.shape[0] != len(self):
            raise ValueError("one posterior row per example is required")
        exs = [Example(ex.x, ex.y, ex.group, tuple(float(p) for p in row))
               for ex, row in zip(self.examples, post)]
        return Dataset(exs, self.split, self.vocab_size)

    def fingerprint(self) -> str:
        """Cheap content hash used to check that runs share a validation set."""
        import hashlib
        h = hashlib.sha256()
        for line in _format_lines(self):
            h.update(line.encode())
        return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# toy task


@dataclass(frozen=True)
class ToyGeometry:
    """Frozen constants of the two-domain toy task.

    Each domain is an isotropic unit-variance Gaussian. A point's clean label
    is the side of the domain's own boundary (a hyperplane through the domain
    mean with the given normal); labels are then flipped with probability
    ``label_noise``. Both boundaries are vertical but offset, so the
    majority-optimal classifier labels nearly all of the minority as one
    class and is at chance there, while a tilted linear rule can do well on
    both domains.
    """

    majority_mean: tuple = (0.0, 0.0)
    minority_mean: tuple = (4.0, 6.0)
    majority_normal: tuple = (1.0, 0.0)
    minority_normal: tuple = (1.0, 0.0)
    label_noise: float = 0.10
    minority_ratio: float = 1.0 / 51.0


TOY_GEOMETRY = ToyGeometry()


def _toy_split(rng: Rng, n: int, split: str, geom: ToyGeometry, min_minority: int = 0) -> Dataset:
    n_min = int(rng.binomial(n, geom.minority_ratio))
    if n_min < min_minority:
        n_min = min_minority
    domains = np.zeros(n, dtype=np.int64)
    domains[rng.permutation(n)[:n_min]] = 1
    means = np.array([geom.majority_mean, geom.minority_mean], dtype=np.float64)
    normals = np.array([geom.majority_normal, geom.minority_normal], dtype=np.float64)
    x = means[domains] + rng.normal(size=(n, 2))
    clean = np.einsum("ij,ij->i", x - means[domains], normals[domains]) > 0
    flip = rng.uniform(size=n) < geom.label_noise
    y = (clean ^ flip).astype(np.int64)
    exs = [Example((float(a), float(b)), int(t), int(d)) for (a, b), t, d in zip(x, y, domains)]
    return Dataset(exs, split)


def gen_toy_gaussian(seed: int, n_train: int = 10_000, n_valid: int = 2_000, n_test: int = 50_000,
                     geometry: ToyGeometry = TOY_GEOMETRY):
    if min(n_train, n_valid, n_test) < 100:
        raise ValueError("each split needs at least 100 examples")
    rng = Rng(seed)
    train = _toy_split(rng.spawn(0), n_train, "train", geometry)
    valid = _toy_split(rng.spawn(1), n_valid, "valid", geometry)
    test = _toy_split(rng.spawn(2), n_test, "test", geometry, min_minority=100)
    return train, valid, test


# --------------------------------------------------------------------------
# biased sequence task


DISTRACTOR = 0


@dataclass(frozen=True)
class SequenceTaskConfig:
    """Token distributions of the biased sequence task.

    Content tokens ``1..vocab_size-1`` are split into a class-0 subset, a
    class-1 subset and a shared remainder. A class-``c`` token comes from
    the own subset with probability ``own_mass``, from the other class's
    subset with ``other_mass``, else from the shared tokens, uniformly
    within each subset. Token ``0`` is the distractor and never occurs as
    content.
    """

    vocab_size: int = 30
    n_class_tokens: int = 7
    own_mass: float = 0.36
    other_mass: float = 0.24
    min_len: int = 5
    max_len: int = 12

    def emission(self, label: int) -> np.ndarray:
        v, m = self.vocab_size, self.n_class_tokens
        n_shared = v - 1 - 2 * m
        if n_shared <= 0:
            raise ValueError("vocabulary too small for the class subsets")
        p = np.zeros(v)
        own = slice(1, 1 + m) if label == 0 else slice(1 + m, 1 + 2 * m)
        other = slice(1 + m, 1 + 2 * m) if label == 0 else slice(1, 1 + m)
        p[own] = self.own_mass / m
        p[other] = self.other_mass / m
        p[1 + 2 * m:] = (1.0 - self.own_mass - self.other_mass) / n_shared
        return p


SEQ_TASK = SequenceTaskConfig()


def _exact_subset(rng: Rng, idx: np.ndarray, frac: float) -> np.ndarray:
    k = int(round(frac * len(idx)))
    return idx[rng.permutation(len(idx))[:k]]


def _seq_split(rng: Rng, n: int, split: str, bias: float, cfg: SequenceTaskConfig) -> Dataset:
    y = rng.integers(0, 2, size=n)
    lengths = rng.integers(cfg.min_len, cfg.max_len + 1, size=n)
    emissions = [cfg.emission(0), cfg.emission(1)]
    has_d = np.zeros(n, dtype=bool)
    neg, pos = np.flatnonzero(y == 0), np.flatnonzero(y == 1)
    if split == "test":
        has_d[_exact_subset(rng, neg, 0.5)] = True
        has_d[_exact_subset(rng, pos, 0.5)] = True
    else:
        has_d[_exact_subset(rng, neg, bias)] = True
        has_d[_exact_subset(rng, pos, 1.0 - bias)] = True
    exs = []
    for i in range(n):
        toks = rng.choice(cfg.vocab_size, size=int(lengths[i]), p=emissions[y[i]])
        seq = ((DISTRACTOR,) if has_d[i] else ()) + tuple(int(t) for t in toks)
        exs.append(Example(seq, int(y[i]), int(2 * y[i] + has_d[i])))
    return Dataset(exs, split, cfg.vocab_size)


def gen_biased_sequences(seed: int, bias: float = 0.95, n_train: int = 10_000, n_valid: int = 2_000,
                         n_test: int = 4_000, task: SequenceTaskConfig = SEQ_TASK):
    """Train/valid carry the biased distractor rate; test is balanced 50/50.

    Groups are ``2*label + distractor_present``.
    """
    if not 0.5 <= bias < 1.0:
        raise ValueError("bias must lie in [0.5, 1)")
    if min(n_train, n_valid, n_test) < 100:
        raise ValueError("each split needs at least 100 examples")
    rng = Rng(seed)
    return (_seq_split(rng.spawn(0), n_train, "train", bias, task),
            _seq_split(rng.spawn(1), n_valid, "valid", bias, task),
            _seq_split(rng.spawn(2), n_test, "test", bias, task))


# --------------------------------------------------------------------------
# groups and metrics


@dataclass(frozen=True)
class GroupingScheme:
    mapping: dict = field(default_factory=dict)
    min_size: int = 100

    def __call__(self, group: int) -> int:
        try:
            return self.mapping[int(group)]
        except KeyError:
            raise KeyError(f"group {group} is not covered by the grouping scheme") from None

    def apply(self, groups: Iterable[int]) -> np.ndarray:
        return np.array([self(g) for g in groups], dtype=np.int64)

    def merge_frequencies(self, freqs: dict) -> dict:
        out: dict = {}
        for g, f in freqs.items():
            out[self(g)] = out.get(self(g), 0.0) + f
        return out


def merge_small_groups(test: Dataset, min_size: int = 100) -> GroupingScheme:
    """Groups with fewer than ``min_size`` test members share one merged id."""
    counts = Counter(int(g) for g in test.groups)
    mapping = {g: (g if c >= min_size else MERGED_GROUP) for g, c in sorted(counts.items())}
    return GroupingScheme(mapping, min_size)


def identity_grouping(*datasets: Dataset) -> GroupingScheme:
    gs = sorted({int(g) for d in datasets for g in d.groups})
    return GroupingScheme({g: g for g in gs}, 0)


def per_group_accuracy(pred, labels, groups) -> dict:
    pred, labels, groups = map(np.asarray, (pred, labels, groups))
    correct = pred == labels
    return {int(g): float(correct[groups == g].mean()) for g in np.unique(groups)}


def robust_accuracy(per_group_acc: dict) -> float:
    if not per_group_acc:
        raise ValueError("no groups to take the worst case over")
    return min(per_group_acc.values())


def reweighted_average_accuracy(per_group_acc: dict, train_group_freqs: dict) -> float:
    if set(per_group_acc) != set(train_group_freqs):
        raise KeyError("accuracy and frequency maps cover different groups")
    total = sum(train_group_freqs.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"group frequencies sum to {total}, not 1")
    return float(sum(train_group_freqs[g] * per_group_acc[g] for g in per_group_acc))


# --------------------------------------------------------------------------
# text format: split \t group \t label \t features [\t posterior]


def _format_features(ex: Example, kind: str) -> str:
    if kind == "seq":
        return " ".join(str(t) for t in ex.x)
    return ",".join(repr(float(v)) for v in ex.x)


def _format_lines(ds: Dataset):
    for ex in ds.examples:
        fields = [ds.split, str(ex.group), str(ex.y), _format_features(ex, ds.kind)]
        if ex.posterior is not None:
            fields.append(",".join(repr(float(p)) for p in ex.posterior))
        yield "\t".join(fields)


def write_dataset(ds: Dataset, path) -> None:
    header = f"# kind={ds.kind}" + (f" vocab_size={ds.vocab_size}" if ds.kind == "seq" else "")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for line in _format_lines(ds):
            fh.write(line + "\n")


def read_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no dataset file at {path}")
    meta: dict = {}
    exs = []
    split = None
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        if raw.startswith("#"):
            for tok in raw[1:].split():
                k, _, v = tok.partition("=")
                meta[k] = v
            continue
        parts = raw.split("\t")
        if len(parts) not in (4, 5):
            raise ValueError(f"{path}:{lineno}: expected 4 or 5 tab-separated fields")
        s, g, y, feats = parts[:4]
        split = split or s
        kind = meta.get("kind") or ("toy" if "," in feats else "seq")
        meta["kind"] = kind
        if kind == "seq":
            x = tuple(int(t) for t in feats.split())
        else:
            x = tuple(float(v) for v in feats.split(","))
        post = tuple(float(p) for p in parts[4].split(",")) if len(parts) == 5 else None
        exs.append(Example(x, int(y), int(g), post))
    if not exs:
        raise ValueError(f"{path}: no examples")
    vocab = None
    if meta.get("kind") == "seq":
        vocab = int(meta["vocab_size"]) if "vocab_size" in meta else 1 + max(max(e.x) for e in exs)
    return Dataset(exs, split, vocab)


def empirical_mutual_information(a, b) -> float:
    """Plug-in mutual information (nats) between two discrete arrays."""
    a, b = np.asarray(a), np.asarray(b)
    n = len(a)
    joint = Counter(zip(a.tolist(), b.tolist()))
    pa, pb = Counter(a.tolist()), Counter(b.tolist())
    return float(sum(c / n * math.log(c * n / (pa[i] * pb[j])) for (i, j), c in joint.items()))
