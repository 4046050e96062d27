import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdro.adversaries import BigramAdversary, GaussianAdversary, gaussian_kl, mle_fit
from pdro.baselines import train_erm
from pdro.config import TrainConfig
from pdro.models import batch_losses, design_matrix, grad_loss
from pdro.numerics import NumericalError, Rng
from pdro.pdro import (RunningNormalizer, adversary_step_bare, adversary_step_kl_projected,
                       adversary_step_relaxed, importance_weights, lagrangian, lagrangian_reorganized,
                       log_importance_weights, model_step, relaxed_weights, train_pdro, update_normalizer)
from pdro.selection import adversary_valid_kl
from pdro.training import TrainingAborted


class NaiveNormalizer:
    """Oracle: keeps the raw exp(loss / tau) values of the last k batches."""

    def __init__(self, k):
        self.batches = deque(maxlen=k)

    def push(self, losses, tau):
        self.batches.append([math.exp(l / tau) for l in losses])
        flat = [v for b in self.batches for v in b]
        return math.fsum(flat) / len(flat)


class TestRunningNormalizer:
    @settings(max_examples=50)
    @given(st.integers(1, 6), st.lists(st.lists(st.floats(0.0, 5.0), min_size=1, max_size=8), min_size=1,
                                       max_size=15), st.floats(0.5, 5.0))
    def test_matches_naive_window(self, k, batches, tau):
        fast, slow = RunningNormalizer(k), NaiveNormalizer(k)
        for b in batches:
            got = update_normalizer(fast, b, tau)
            assert got == pytest.approx(slow.push(b, tau), rel=1e-12)

    def test_k1_is_batch_mean(self):
        norm = RunningNormalizer(1)
        for losses in ([0.1, 0.2], [3.0, 1.0, 2.0]):
            assert update_normalizer(norm, losses, 0.5) == pytest.approx(np.mean(np.exp(np.array(losses) / 0.5)))

    def test_log_space_handles_huge_exponents(self):
        norm = RunningNormalizer(2)
        lv = norm.push([10.0, 12.0], 0.001)
        assert lv == pytest.approx(12000.0 + math.log((1 + math.exp(-2000)) / 2))
        with pytest.raises(OverflowError, match="temperature"):
            _ = norm.value

    def test_errors(self):
        with pytest.raises(ValueError):
            RunningNormalizer(0)
        with pytest.raises(ValueError):
            _ = RunningNormalizer(2).log_value
        with pytest.raises(ValueError):
            update_normalizer(RunningNormalizer(2), [1.0], 0.0)

    def test_window_length(self):
        norm = RunningNormalizer(3)
        for _ in range(5):
            norm.push([1.0], 1.0)
        assert len(norm) == 3


class TestImportanceWeights:
    def test_identity_at_snapshot(self, toy_small):
        psi0 = mle_fit(toy_small[0])
        np.testing.assert_array_equal(importance_weights(toy_small[0].points, psi0, psi0), 1.0)

    def test_matches_density_ratio(self):
        psi0 = GaussianAdversary([0.0, 0.0], 1.0)
        psi = psi0.with_params([1.0, 0.5])
        x = np.array([[0.3, -0.2], [2.0, 1.0]])
        ratio = [math.exp(-0.5 * np.sum((xi - psi.mu) ** 2) + 0.5 * np.sum(xi ** 2)) for xi in x]
        np.testing.assert_allclose(importance_weights(x, psi, psi0), ratio, rtol=1e-12)

    def test_overflow_raises(self):
        psi0 = GaussianAdversary([0.0, 0.0], 0.1)
        psi = psi0.with_params([100.0, 0.0])
        with pytest.raises(NumericalError):
            importance_weights(np.array([[100.0, 0.0]]), psi, psi0)
        assert log_importance_weights(np.array([[100.0, 0.0]]), psi, psi0)[0] > 709

    def test_family_mismatch(self):
        with pytest.raises(TypeError):
            log_importance_weights(np.zeros((1, 2)), GaussianAdversary([0.0, 0.0], 1.0),
                                   BigramAdversary.uniform(2))


class TestSteps:
    def test_model_step_matches_naive(self, toy_small):
        train = toy_small[0]
        X, y = design_matrix(train)[:16], train.labels[:16]
        theta = np.array([0.2, -0.1, 0.05])
        w = np.linspace(0.5, 2.0, 16)
        naive = theta - 0.3 * sum(wi * grad_loss(ex, theta) for wi, ex in zip(w, train.examples[:16])) / 16
        np.testing.assert_allclose(model_step(X, y, theta, w, 0.3), naive, rtol=1e-12)

    def test_relaxed_step_matches_naive(self):
        rng = np.random.default_rng(0)
        psi = GaussianAdversary(rng.normal(size=2), 0.8)
        F = rng.normal(size=(10, 2))
        losses = rng.uniform(0, 2, size=10)
        tau, log_z = 0.5, 1.3
        v = np.exp(losses / tau - log_z)
        naive = psi.mu + 0.01 * sum(vi * (f - psi.mu) / 0.64 for vi, f in zip(v, F)) / 10
        new = adversary_step_relaxed(F, losses, psi, log_z, tau, 0.01)
        np.testing.assert_allclose(new.mu, naive, rtol=1e-12)
        np.testing.assert_allclose(relaxed_weights(losses, log_z, tau), v)

    def test_bare_step_is_score_function_estimate(self):
        psi = GaussianAdversary([0.5, -0.5], 1.0)
        theta = np.array([1.0, 2.0, 0.0])
        new = adversary_step_bare([0.5, 0.5], theta, psi, psi, 0.1, Rng(4), 32)
        x, y = psi.sample(Rng(4), 32, [0.5, 0.5])
        losses = batch_losses(np.hstack([x, np.ones((32, 1))]), y, theta)
        expected = psi.mu + 0.1 * (losses @ (x - psi.mu)) / 32
        np.testing.assert_allclose(new.mu, expected, rtol=1e-12)

    def test_bare_step_moves_toward_high_loss_on_average(self):
        # logistic loss under random labels grows with |theta . x|, so the adversary drifts outward
        psi = GaussianAdversary([0.0, 0.0], 1.0)
        theta = np.array([3.0, 0.0, 0.0])
        rng = Rng(0)
        steps = [adversary_step_bare([0.5, 0.5], theta, psi.with_params([1.0, 0.0]), psi, 1.0, rng, 64).mu
                 for _ in range(200)]
        assert np.mean(steps, axis=0)[0] > 1.0

    def test_bare_needs_gaussian(self):
        with pytest.raises(TypeError):
            adversary_step_bare([0.5, 0.5], np.zeros(3), BigramAdversary.uniform(2), None, 0.1, Rng(0), 4)

    def test_kl_step_stays_in_ball(self):
        psi0 = GaussianAdversary([0.0, 0.0], 1.0)
        psi, rng = psi0, Rng(1)
        theta = np.array([2.0, -1.0, 0.0])
        for _ in range(50):
            psi = adversary_step_kl_projected([0.5, 0.5], theta, psi, psi0, 5.0, rng, 16, 0.3)
            assert gaussian_kl(psi, psi0) <= 0.3 * (1 + 1e-12)


class TestTrainPdro:
    @pytest.mark.parametrize("method", ["pdro_relaxed", "pdro_bare", "pdro_kl"])
    def test_records_and_determinism(self, toy_small, method):
        train, valid, _ = toy_small
        cfg = TrainConfig(method=method, epochs=3, adv_lr=0.05, tau=0.1, kappa=0.5)
        a, b = train_pdro(cfg, train, valid), train_pdro(cfg, train, valid)
        assert [r.epoch for r in a.records] == [0, 1, 2, 3]
        np.testing.assert_array_equal(a.records[0].log_weights, 0.0)
        assert adversary_valid_kl(a.records[0]) == 0.0
        for ra, rb in zip(a.records, b.records):
            np.testing.assert_array_equal(ra.theta, rb.theta)
            np.testing.assert_array_equal(ra.log_weights, rb.log_weights)
        assert len(a.train_log) == 3

    def test_kl_variant_respects_radius(self, toy_small):
        train, valid, _ = toy_small
        h = train_pdro(TrainConfig(method="pdro_kl", epochs=3, adv_lr=1.0, kappa=0.2), train, valid)
        for r in h.records:
            assert gaussian_kl(r.adversary, h.psi0) <= 0.2 * (1 + 1e-12)

    def test_relaxed_adversary_upweights_minority(self, toy_small):
        train, valid, _ = toy_small
        h = train_pdro(TrainConfig(method="pdro_relaxed", epochs=5, adv_lr=0.01, tau=0.1), train, valid)
        w = h.records[-1].weights
        assert w[valid.groups == 1].mean() > 5 * w[valid.groups == 0].mean()

    def test_zero_adversary_lr_is_erm(self, toy_small):
        train, valid, _ = toy_small
        erm = train_erm(TrainConfig(method="erm", epochs=2, seed=5), train, valid)
        p = train_pdro(TrainConfig(method="pdro_relaxed", epochs=2, seed=5, adv_lr=0.0), train, valid)
        np.testing.assert_array_equal(p.final_params.theta, erm.final_params.theta)

    def test_bigram_family_on_sequences(self, seq_small):
        train, valid, _ = seq_small
        h = train_pdro(TrainConfig(method="pdro_relaxed", epochs=2, adv_lr=0.01, tau=0.1), train, valid)
        assert h.psi0.family == "bigram"
        assert np.all(np.isfinite(h.records[-1].log_weights))

    def test_projection_needs_gaussian(self, seq_small):
        train, valid, _ = seq_small
        with pytest.raises(TypeError):
            train_pdro(TrainConfig(method="pdro_kl", epochs=1), train, valid)

    def test_clip_caps_weights(self, toy_small):
        train, valid, _ = toy_small
        base = TrainConfig(method="pdro_relaxed", epochs=3, adv_lr=0.05, tau=0.1)
        free = train_pdro(base, train, valid)
        clipped = train_pdro(base.with_(clip_weights=1.5), train, valid)
        assert not np.array_equal(free.final_params.theta, clipped.final_params.theta)

    def test_divergence_aborts(self, toy_small):
        train, valid, _ = toy_small
        with pytest.raises(TrainingAborted, match="non-finite"):
            train_pdro(TrainConfig(method="pdro_relaxed", epochs=3, adv_lr=1e7, tau=0.01), train, valid)

    def test_rejects_non_pdro_method(self, toy_small):
        with pytest.raises(ValueError):
            train_pdro(TrainConfig(method="erm"), *toy_small[:2])


class TestLagrangian:
    def test_identity_small_case(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = 6
            lq, lp, lq0 = (np.log(rng.dirichlet(np.ones(n))) for _ in range(3))
            losses = rng.exponential(size=n)
            tau, kappa = rng.uniform(0.2, 3.0), rng.uniform(0.0, 2.0)
            assert lagrangian(lq, lp, lq0, losses, tau, kappa) == pytest.approx(
                lagrangian_reorganized(lq, lp, lq0, losses, tau, kappa), abs=1e-10)

    def test_maximized_at_q_star(self):
        rng = np.random.default_rng(1)
        lp, lq0 = np.log(rng.dirichlet(np.ones(5))), np.log(rng.dirichlet(np.ones(5)))
        losses, tau = rng.exponential(size=5), 0.7
        g = np.exp(lp - lq0) * losses
        lstar = lp + g / tau - np.logaddexp.reduce(lp + g / tau)
        best = lagrangian(lstar, lp, lq0, losses, tau, 0.1)
        for _ in range(20):
            other = np.log(rng.dirichlet(np.ones(5)))
            assert lagrangian(other, lp, lq0, losses, tau, 0.1) < best
