"""Test-time group metrics for a trained classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, GroupingScheme, merge_small_groups, per_group_accuracy, reweighted_average_accuracy, \
    robust_accuracy
from .models import batch_predict, design_matrix


@dataclass
class Evaluation:
    per_group: dict
    robust: float
    average: float

    def as_row(self) -> dict:
        row = {"robust": self.robust, "average": self.average}
        row.update({f"acc_g{g}": a for g, a in self.per_group.items()})
        return row


def evaluate(theta, test: Dataset, train: Dataset, grouping: GroupingScheme | None = None) -> Evaluation:
    """Worst-group and train-frequency-reweighted accuracy on ``test``."""
    grouping = grouping or merge_small_groups(test)
    pred = batch_predict(design_matrix(test), np.asarray(theta))
    acc = per_group_accuracy(pred, test.labels, grouping.apply(test.groups))
    freqs = grouping.merge_frequencies(train.group_frequencies())
    freqs = {g: freqs.get(g, 0.0) for g in acc}
    total = sum(freqs.values())
    freqs = {g: f / total for g, f in freqs.items()}
    return Evaluation(acc, robust_accuracy(acc), reweighted_average_accuracy(acc, freqs))
