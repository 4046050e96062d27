import math

import numpy as np
import pytest

from pdro.history import CheckpointRecord, RunHistory
from pdro.models import ModelParams
from pdro.selection import (KL_VALID_THRESHOLD, adversary_valid_kl, average_select, filter_adversaries,
                            greedy_minmax_select, hyperparam_select, minmax_select, oracle_select,
                            pooled_adversary_count, robust_valid_loss, select, worst_group_error)

from conftest import random_history


def brute_force_minmax(history, kl_threshold):
    """Oracle written from the definition with plain loops."""
    advs = [r for i, r in enumerate(history.records)
            if i == 0 or kl_threshold is None or adversary_valid_kl(r) <= kl_threshold]
    best, best_score = None, None
    for i, cand in enumerate(history.records):
        score = max(sum(math.exp(lw) * e for lw, e in zip(a.log_weights, cand.errors)) / len(cand.errors)
                    for a in advs)
        if best_score is None or score < best_score - 1e-15:
            best, best_score = i, score
    return best


def history_from(records, groups=(0, 0, 1, 1), fingerprint="f"):
    return RunHistory({"method": "x"}, records, ModelParams(np.zeros(2)), None, np.array(groups), fingerprint)


def rec(t, lw, errors):
    return CheckpointRecord(t, np.array(lw, dtype=float), np.array(errors, dtype=float) + 0.1,
                            np.array(errors, dtype=float))


class TestKL:
    def test_record_zero_is_zero(self):
        assert adversary_valid_kl(rec(0, [0, 0, 0, 0], [0, 1, 0, 1])) == 0.0

    def test_value(self):
        lw = np.log([0.5, 1.5])
        assert adversary_valid_kl(rec(1, lw, [0, 0])) == pytest.approx(np.mean([0.5, 1.5] * lw))

    def test_threshold_constant(self):
        assert KL_VALID_THRESHOLD == pytest.approx(math.log(10))

    def test_filter_keeps_record_zero(self):
        records = [rec(0, [5.0, 5.0], [0, 0]), rec(1, [5.0, 5.0], [0, 0])]
        assert filter_adversaries(records, 0.1) == records[:1]
        assert filter_adversaries(records, None) == records

    def test_filter_monotone(self):
        rng = np.random.default_rng(0)
        h = random_history(rng, n_records=20)
        kept = [len(filter_adversaries(h.records, k)) for k in (0.01, 0.1, 1.0, 10.0, None)]
        assert kept == sorted(kept)


class TestMinmax:
    def test_hand_example(self):
        records = [
            rec(0, [0, 0, 0, 0], [1, 1, 0, 0]),
            rec(1, np.log([0.1, 0.1, 1.9, 1.9]), [0, 0, 1, 0]),
            rec(2, np.log([1.9, 1.9, 0.1, 0.1]), [0, 1, 0, 0]),
        ]
        h = history_from(records)
        # robust scores: rec0 max(0.5, 0.05, 0.95)=0.95; rec1 max(0.25, 0.475, 0.025)=0.475; rec2 0.475
        assert minmax_select(h, None) == 1  # tie with rec2 goes to the earlier checkpoint
        assert robust_valid_loss(records[1], records) == pytest.approx(0.475)

    def test_filter_changes_choice(self):
        records = [
            rec(0, [0, 0, 0, 0], [1, 0, 0, 0]),
            rec(1, np.log([4.0, 0.0 + 1e-300, 0.0 + 1e-300, 0.0 + 1e-300]), [0, 0, 1, 1]),
        ]
        h = history_from(records)
        assert minmax_select(h, None) == 1
        assert adversary_valid_kl(records[1]) > KL_VALID_THRESHOLD - 2
        assert minmax_select(h, 0.5) == 0

    @pytest.mark.parametrize("tie_prone", [False, True])
    def test_matches_brute_force(self, tie_prone):
        rng = np.random.default_rng(11 + tie_prone)
        for _ in range(50):
            h = random_history(rng, tie_prone=tie_prone)
            for thr in (None, 0.3, KL_VALID_THRESHOLD):
                assert minmax_select(h, thr) == brute_force_minmax(h, thr)

    def test_greedy_equals_full(self):
        rng = np.random.default_rng(5)
        for i in range(60):
            h = random_history(rng, tie_prone=i % 2 == 0)
            for thr in (None, 0.5, KL_VALID_THRESHOLD):
                assert greedy_minmax_select(h, thr) == minmax_select(h, thr)

    def test_incumbent_only_variant_valid(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            h = random_history(rng)
            assert 0 <= greedy_minmax_select(h, incumbent_only=True) < len(h.records)
        one = history_from([rec(0, [0, 0, 0, 0], [1, 1, 1, 1]), rec(1, [0, 0, 0, 0], [0, 0, 0, 0])])
        assert greedy_minmax_select(one, incumbent_only=True) == 1

    def test_loss_statistic(self):
        h = history_from([rec(0, [0, 0, 0, 0], [0, 0, 0, 0]), rec(1, [0, 0, 0, 0], [0, 0, 0, 0])])
        h.records[1].losses = np.zeros(4)
        assert minmax_select(h, statistic="loss") == 1
        assert minmax_select(h, statistic="error") == 0
        with pytest.raises(ValueError):
            minmax_select(h, statistic="margin")

    def test_empty(self):
        with pytest.raises(ValueError):
            greedy_minmax_select(history_from([]))
        with pytest.raises(ValueError):
            robust_valid_loss(np.zeros(2), [])


class TestOtherCriteria:
    def test_average_and_oracle(self):
        records = [rec(0, [0] * 4, [1, 0, 0, 0]), rec(1, [0] * 4, [0, 0, 1, 1]), rec(2, [0] * 4, [0, 0, 0, 1])]
        h = history_from(records)
        assert average_select(h) == 2 or average_select(h) == 0
        assert average_select(h) == 0  # 0.25 ties 0.25, earliest wins
        assert worst_group_error(records[1], h.valid_groups) == 1.0
        assert oracle_select(h) == 0
        assert select(h, "oracle") == 0 and select(h, "average") == 0

    def test_unknown_criterion(self):
        with pytest.raises(ValueError):
            select(history_from([rec(0, [0] * 4, [0] * 4)]), "best")


class TestHyperparamSelect:
    def test_pools_adversaries(self):
        strong = np.log([3.9, 0.05, 0.025, 0.025])
        a = history_from([rec(0, [0] * 4, [1, 0, 0, 0]), rec(1, [0] * 4, [1, 0, 0, 0])])
        b = history_from([rec(0, [0] * 4, [0, 1, 1, 0]), rec(1, strong, [0, 1, 1, 0])])
        # alone each run only sees its own adversaries; pooled, run a is hurt by b's adversary
        assert hyperparam_select([a, b], "minmax") == (1, 0)
        assert pooled_adversary_count([a, b], "minmax") == 4
        assert pooled_adversary_count([a, b], "average") == 0

    def test_first_run_wins_ties(self):
        rng = np.random.default_rng(0)
        h = random_history(rng)
        assert hyperparam_select([h, h], "greedy_minmax")[0] == 0

    def test_rejects_mixed_validation_sets(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="validation"):
            hyperparam_select([random_history(rng, fingerprint="a"), random_history(rng, fingerprint="b")])
        with pytest.raises(ValueError):
            hyperparam_select([])

    @pytest.mark.parametrize("criterion", ["average", "oracle", "minmax_kl"])
    def test_returns_valid_indices(self, criterion):
        rng = np.random.default_rng(1)
        runs = [random_history(rng, n_valid=20) for _ in range(4)]
        for r in runs:
            r.valid_groups = runs[0].valid_groups
        ri, ci = hyperparam_select(runs, criterion)
        assert 0 <= ri < 4 and 0 <= ci < len(runs[ri].records)
