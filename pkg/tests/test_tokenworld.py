"""Tests for the Markov-chain world: models, sampling, fitting and metrics."""

import itertools
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distill_lab import tokenworld
from distill_lab.metrics import combined_se
from distill_lab.tokenworld import (
    LowRankMarkov,
    MarkovModel,
    SequenceDataset,
    TokenFitConfig,
    TokenWorldConfig,
    bigram_counts,
    fit_lowrank_em,
    fit_lowrank_em_trace,
    fit_markov,
    make_ground_truth,
    mean_row_entropy,
    run_token_world,
    sample_sequences,
    score_sequences,
    seq_log_likelihood,
    step_log_probs,
    temper_markov,
    token_precision,
    token_recall,
)


def cycle_chain(v):
    """Deterministic chain 0 -> 1 -> ... -> v-1 -> 0."""
    return MarkovModel(v, np.eye(v)[0], np.roll(np.eye(v), 1, axis=1))


def uniform_chain(v):
    return MarkovModel(v, np.full(v, 1 / v), np.full((v, v), 1 / v))


def planted_rank_two(v=12, seed=0):
    r = np.random.default_rng(seed)
    a = r.dirichlet(np.full(2, 0.5), size=v)
    b = r.dirichlet(np.full(v, 0.3), size=2)
    return LowRankMarkov(v, 2, np.full(v, 1 / v), a, b)


def exact_cross(sampler, scorer, t):
    """Per-token E_sampler[log scorer] by enumerating every sequence."""
    v = sampler.vocab_size
    total = 0.0
    for seq in itertools.product(range(v), repeat=t):
        seq = np.array([seq])
        p = math.exp(step_log_probs(sampler, seq).sum())
        total += p * step_log_probs(scorer, seq).sum()
    return total / t


def row_entropy(p):
    p = p[p > 0]
    return -np.sum(p * np.log(p))


positive_rows = st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6).map(lambda v: np.asarray(v) / np.sum(v))


class TestModels:
    def test_markov_rows_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            MarkovModel(2, [0.5, 0.5], [[0.5, 0.6], [0.5, 0.5]])

    def test_markov_shapes_checked(self):
        with pytest.raises(ValueError):
            MarkovModel(3, [0.5, 0.5], np.eye(2))

    def test_lowrank_implied_matrix_is_stochastic(self):
        m = planted_rank_two()
        np.testing.assert_allclose(m.transitions.sum(axis=1), 1.0, atol=1e-10)
        assert np.linalg.matrix_rank(m.transitions) <= 2

    def test_lowrank_shapes_checked(self):
        with pytest.raises(ValueError):
            LowRankMarkov(3, 2, np.full(3, 1 / 3), np.full((3, 3), 1 / 3), np.full((2, 3), 1 / 3))

    def test_dataset_validation(self):
        with pytest.raises(ValueError):
            SequenceDataset(np.array([[0]]))
        with pytest.raises(ValueError):
            SequenceDataset(np.array([[0, -1]]))
        with pytest.raises(ValueError, match="out of range"):
            SequenceDataset(np.array([[0, 5]])).check_vocab(3)


class TestMakeGroundTruth:
    def test_large_concentration_is_uniform(self):
        m = make_ground_truth(4, 1e6, seed=0)
        np.testing.assert_allclose(m.transitions, 0.25, atol=1e-2)
        np.testing.assert_allclose(m.start, 0.25, atol=1e-2)

    def test_deterministic(self):
        a, b = make_ground_truth(10, 0.3, seed=5), make_ground_truth(10, 0.3, seed=5)
        assert np.array_equal(a.transitions, b.transitions) and np.array_equal(a.start, b.start)

    def test_low_concentration_is_peakier(self):
        assert mean_row_entropy(make_ground_truth(50, 0.1, 1)) < mean_row_entropy(make_ground_truth(50, 10.0, 1))

    @pytest.mark.parametrize("v, c", [(1, 1.0), (5, 0.0)])
    def test_invalid(self, v, c):
        with pytest.raises(ValueError):
            make_ground_truth(v, c, 0)


class TestSampleSequences:
    def test_forced_sequence(self):
        ds = sample_sequences(cycle_chain(3), 5, 7, seed=9)
        assert np.all(ds.sequences == np.array([0, 1, 2, 0, 1, 2, 0]))
        assert ds.max_len == 7

    def test_first_token_frequencies(self):
        m = make_ground_truth(4, 1.0, seed=2)
        first = sample_sequences(m, 100_000, 2, seed=3).sequences[:, 0]
        np.testing.assert_allclose(np.bincount(first, minlength=4) / 100_000, m.start, atol=0.01)

    def test_bigram_frequencies(self):
        m = make_ground_truth(4, 1.0, seed=2)
        ds = sample_sequences(m, 100_000, 2, seed=4)
        freq = bigram_counts(ds, 4) / 100_000
        np.testing.assert_allclose(freq, m.start[:, None] * m.transitions, atol=0.01)

    def test_deterministic(self):
        m = make_ground_truth(5, 0.5, 0)
        assert np.array_equal(sample_sequences(m, 20, 6, 1).sequences, sample_sequences(m, 20, 6, 1).sequences)

    def test_lowrank_sampling(self):
        ds = sample_sequences(planted_rank_two(), 50, 5, seed=0)
        assert ds.sequences.shape == (50, 5)
        assert ds.sequences.max() < 12

    def test_invalid(self):
        with pytest.raises(ValueError):
            sample_sequences(cycle_chain(3), 5, 1, seed=0)


class TestTemperMarkov:
    def test_unit_tau_is_identity(self):
        m = make_ground_truth(5, 0.5, 0)
        assert temper_markov(m, 1.0) is m

    def test_squared_row(self):
        m = MarkovModel(3, [0.5, 0.3, 0.2], np.tile([0.5, 0.3, 0.2], (3, 1)))
        out = temper_markov(m, 0.5)
        np.testing.assert_allclose(out.transitions[0], [0.6579, 0.2368, 0.1053], atol=1e-4)
        np.testing.assert_allclose(out.start, [0.25 / 0.38, 0.09 / 0.38, 0.04 / 0.38], atol=1e-12)

    def test_tiny_tau_is_one_hot(self):
        m = make_ground_truth(6, 1.0, 3)
        out = temper_markov(m, 1e-6)
        np.testing.assert_array_equal(out.transitions, np.eye(6)[np.argmax(m.transitions, axis=1)])

    def test_zero_entries_rejected(self):
        with pytest.raises(ValueError, match="smooth"):
            temper_markov(cycle_chain(3), 0.8)

    @pytest.mark.parametrize("tau", [0.0, 1.5])
    def test_tau_range(self, tau):
        with pytest.raises(ValueError):
            temper_markov(uniform_chain(3), tau)

    @settings(max_examples=100, deadline=None)
    @given(row=positive_rows, t1=st.floats(0.05, 1.0), t2=st.floats(0.05, 1.0))
    def test_entropy_and_order(self, row, t1, t2):
        v = row.size
        m = MarkovModel(v, row, np.tile(row, (v, 1)))
        lo, hi = sorted((t1, t2))
        sharp, soft = temper_markov(m, lo).transitions[0], temper_markov(m, hi).transitions[0]
        assert row_entropy(sharp) <= row_entropy(soft) + 1e-9
        order = np.argsort(row, kind="stable")
        assert np.all(np.diff(sharp[order]) >= 0)
        assert row[np.argmax(sharp)] == pytest.approx(row.max(), rel=1e-12)


class TestFitMarkov:
    def test_unsmoothed_counts(self):
        m = fit_markov(SequenceDataset(np.array([[0, 1, 0, 1]])), 2, 0.0)
        assert m.transitions[0, 1] == 1.0
        assert m.transitions[1, 0] == 1.0

    def test_add_one(self):
        m = fit_markov(SequenceDataset(np.array([[0, 1, 0, 1]])), 2, 1.0)
        assert m.transitions[0, 1] == pytest.approx(0.75, abs=1e-15)

    def test_recovers_known_model(self):
        truth = make_ground_truth(5, 1.0, 6)
        m = fit_markov(sample_sequences(truth, 20_000, 20, 7), 5, 0.01)
        np.testing.assert_allclose(m.transitions, truth.transitions, atol=0.01)

    def test_rows_and_floor(self):
        data = sample_sequences(make_ground_truth(6, 0.3, 1), 50, 4, 2)
        delta = 0.5
        m = fit_markov(data, 6, delta)
        np.testing.assert_allclose(m.transitions.sum(axis=1), 1.0, atol=1e-12)
        rowcount = bigram_counts(data, 6).sum(axis=1)
        assert np.all(m.transitions >= (delta / (rowcount + 6 * delta))[:, None] - 1e-15)

    def test_vocab_too_small(self):
        with pytest.raises(ValueError, match="out of range"):
            fit_markov(SequenceDataset(np.array([[0, 3]])), 2, 0.1)

    def test_unseen_rows_uniform_without_smoothing(self):
        m = fit_markov(SequenceDataset(np.array([[0, 1]])), 3, 0.0)
        np.testing.assert_allclose(m.transitions[2], 1 / 3)


class TestLowRankEM:
    def test_full_rank_identity_start_matches_bigram_fit(self):
        data = sample_sequences(make_ground_truth(10, 0.5, 1), 5000, 16, 2)
        full = fit_markov(data, 10, 0.01)
        lr = fit_lowrank_em(data, 10, TokenFitConfig(rank=10, init="identity", em_max_iter=200))
        gap = score_sequences(full, data.sequences)[0].sum() - score_sequences(lr, data.sequences)[0].sum()
        assert abs(gap) / data.sequences.size <= 1e-3

    def test_rank_one_rows_identical(self):
        data = sample_sequences(make_ground_truth(6, 0.5, 3), 300, 10, 4)
        m = fit_lowrank_em(data, 6, TokenFitConfig(rank=1, em_max_iter=50))
        np.testing.assert_allclose(m.transitions, np.tile(m.transitions[0], (6, 1)), atol=1e-12)

    def test_planted_rank_two_recovery(self):
        planted = planted_rank_two()
        train = sample_sequences(planted, 20_000, 16, 3)
        held = sample_sequences(planted, 5000, 16, 4).sequences
        m = fit_lowrank_em(train, 12, TokenFitConfig(rank=2, n_restarts=4, em_max_iter=2000))
        gap = (score_sequences(planted, held)[0].sum() - score_sequences(m, held)[0].sum()) / held.size
        assert gap <= 0.05

    def test_trace_non_decreasing(self):
        data = sample_sequences(planted_rank_two(), 2000, 16, 5)
        for seed in range(3):
            _, trace = fit_lowrank_em_trace(data, 12, TokenFitConfig(rank=3, seed=seed, em_max_iter=300))
            skip = set(trace.reseeded)
            diffs = np.diff(trace.log_likelihood)
            assert all(d >= -1e-9 for i, d in enumerate(diffs, start=1) if i not in skip)

    def test_factors_row_stochastic(self):
        data = sample_sequences(planted_rank_two(), 500, 8, 5)
        m = fit_lowrank_em(data, 12, TokenFitConfig(rank=3, em_max_iter=100))
        np.testing.assert_allclose(m.transitions.sum(axis=1), 1.0, atol=1e-10)

    def test_degenerate_latent_reseeded(self, monkeypatch, caplog):
        monkeypatch.setattr(tokenworld, "DEGENERATE_USAGE", 0.4)
        data = sample_sequences(planted_rank_two(), 500, 8, 6)
        with caplog.at_level(logging.INFO, logger="distill_lab.tokenworld"):
            _, trace = fit_lowrank_em_trace(data, 12, TokenFitConfig(rank=3, em_max_iter=5))
        assert trace.reseeded
        assert "re-seeded" in caplog.text

    def test_empty_data(self):
        with pytest.raises(ValueError, match="empty"):
            fit_lowrank_em(SequenceDataset(np.empty((0, 4), dtype=np.int64)), 4)

    def test_rank_above_vocab(self):
        with pytest.raises(ValueError, match="rank"):
            fit_lowrank_em(SequenceDataset(np.array([[0, 1]])), 2, TokenFitConfig(rank=3))

    def test_identity_init_needs_full_rank(self):
        with pytest.raises(ValueError, match="identity"):
            fit_lowrank_em(SequenceDataset(np.array([[0, 1]])), 2, TokenFitConfig(rank=1, init="identity"))


class TestSeqLogLikelihood:
    def test_forced_sequence_scores_zero(self):
        assert seq_log_likelihood(cycle_chain(4), [0, 1, 2, 3, 0]) == 0.0

    def test_uniform(self):
        assert seq_log_likelihood(uniform_chain(4), [1, 2, 3]) == pytest.approx(3 * math.log(0.25), abs=1e-12)

    def test_matches_lookup_product(self):
        m = make_ground_truth(7, 0.5, 4)
        seq = [3, 1, 4, 1, 5, 6, 2]
        ref = math.log(m.start[3]) + sum(math.log(m.transitions[a, b]) for a, b in zip(seq, seq[1:]))
        assert seq_log_likelihood(m, seq) == pytest.approx(ref, abs=1e-12)

    def test_impossible_steps_clamped(self, caplog):
        with caplog.at_level(logging.WARNING):
            val = seq_log_likelihood(cycle_chain(3), [0, 2, 1])
        assert val == 2 * -700.0
        assert "clamped" in caplog.text
        assert score_sequences(cycle_chain(3), [[0, 2, 1]])[1] == 2

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            seq_log_likelihood(uniform_chain(3), [0, 3])


class TestTokenMetrics:
    def test_symmetry(self):
        m = make_ground_truth(8, 0.5, 2)
        p = token_precision(m, m, 50_000, 8, seed=1)
        r = token_recall(m, m, 50_000, 8, seed=2)
        assert abs(p.mean - r.mean) <= 3 * combined_se(p, r)

    @pytest.mark.parametrize("which", ["precision", "recall"])
    def test_enumeration_oracle(self, which):
        ground = make_ground_truth(3, 0.7, 11)
        student = temper_markov(fit_markov(sample_sequences(ground, 200, 2, 1), 3, 0.5), 0.8)
        if which == "precision":
            est, exact = token_precision(student, ground, 100_000, 2, 5), exact_cross(student, ground, 2)
        else:
            est, exact = token_recall(student, ground, 100_000, 2, 6), exact_cross(ground, student, 2)
        assert abs(est.mean - exact) <= 3 * est.std_error

    def test_tempered_student_trades_recall_for_precision(self):
        ground = make_ground_truth(8, 0.3, 7)
        # direction first confirmed exactly on length-2 sequences
        sharp = temper_markov(ground, 0.8)
        assert exact_cross(sharp, ground, 2) > exact_cross(ground, ground, 2)
        assert exact_cross(ground, sharp, 2) < exact_cross(ground, ground, 2)
        p8, p1 = token_precision(sharp, ground, 100_000, 2, 1), token_precision(ground, ground, 100_000, 2, 1)
        r8, r1 = token_recall(sharp, ground, 100_000, 2, 2), token_recall(ground, ground, 100_000, 2, 2)
        assert p8.mean - p1.mean >= 3 * combined_se(p8, p1)
        assert r1.mean - r8.mean >= 3 * combined_se(r8, r1)

    def test_clamp_count_reported(self):
        est = token_precision(uniform_chain(3), cycle_chain(3), 100, 4, seed=0)
        assert est.clamp_count > 0

    def test_vocab_mismatch(self):
        with pytest.raises(ValueError):
            token_precision(uniform_chain(3), uniform_chain(4), 10, 4, seed=0)


class TestRunTokenWorld:
    def test_shared_teacher_and_tempering(self):
        cfg = TokenWorldConfig(vocab_size=6, n_train=400, seq_len=8, student_rank=2, em_max_iter=30, em_restarts=1)
        out = run_token_world(cfg, [0.8, 1.0])
        assert out[0].teacher is out[1].teacher
        assert out[1].tempered_teacher is out[1].teacher
        assert mean_row_entropy(out[0].tempered_teacher) < mean_row_entropy(out[1].tempered_teacher)
        again = run_token_world(cfg, [0.8])
        assert np.array_equal(again[0].student.transitions, out[0].student.transitions)
