"""
Tests for InfoNCE, the MI bound, MINE, negative sampling and the exhaustive discrete oracle.
"""
import itertools

import numpy as np
import pytest
from scipy.special import logsumexp as np_logsumexp
from scipy.special import softmax
from scipy.stats import chisquare

from autodiff import Tape, backward
from contrastive import (ContrastiveBatch, FramePool, NegativeSamplingStrategy, draw_negatives,
                         expected_accuracy_exhaustive, expected_infonce_exhaustive, infonce_loss,
                         infonce_loss_batch, infonce_row_losses, mi_lower_bound, mine_estimate, mine_loss,
                         optimal_posterior, oracle_log_scores, prediction_accuracy, prediction_accuracy_batch,
                         sample_candidates, split_scores)
from errors import DomainError, ShapeError, StrategyInfeasibleError
from synthdata import DiscreteJointTask, true_mi

Strategy = NegativeSamplingStrategy


@pytest.fixture
def pool():
    # 6 sequences of 5 frames; sources 0, 0, 1, 1, 2, 2
    return FramePool.from_sources([0, 0, 1, 1, 2, 2], frames_per_sequence=5)


@pytest.fixture
def table_4x4():
    rng = np.random.default_rng(42)
    joint = 0.5 * rng.dirichlet(np.ones(16)).reshape(4, 4) + 0.5 * np.eye(4) / 4
    return DiscreteJointTask(table=(joint / joint.sum()).tolist())


# ===========================================================================
# InfoNCE and the bound
# ===========================================================================

class TestInfoNCE:
    def test_uniform_scores_give_log_n(self):
        assert infonce_loss(np.zeros(8), 3).item() == pytest.approx(np.log(8))

    def test_dominant_positive_gives_zero(self):
        scores = np.zeros(8)
        scores[2] = 1e3
        assert infonce_loss(scores, 2).item() == pytest.approx(0.0, abs=1e-12)

    def test_non_negative(self, rng):
        for _ in range(100):
            assert infonce_loss(5 * rng.standard_normal(6), 0).item() >= 0.0

    def test_single_candidate(self):
        assert infonce_loss(np.array([3.7]), 0).item() == pytest.approx(0.0, abs=1e-15)

    def test_empty_scores(self):
        with pytest.raises(ShapeError):
            infonce_loss(np.zeros(0), 0)

    def test_positive_out_of_range(self):
        with pytest.raises(ShapeError):
            infonce_loss(np.zeros(4), 4)

    def test_worked_example(self):
        # log(1 + 3 e^-5)
        loss = infonce_loss(np.array([5.0, 0.0, 0.0, 0.0]), 0).item()
        assert loss == pytest.approx(np.log1p(3 * np.exp(-5.0)), rel=1e-12)
        assert loss == pytest.approx(0.02001, abs=1e-5)

    @pytest.mark.parametrize("c", [-50.0, 0.3, 1e3])
    def test_invariant_to_constant_shift(self, rng, c):
        scores = 3 * rng.standard_normal(10)
        assert infonce_loss(scores + c, 6).item() == pytest.approx(infonce_loss(scores, 6).item(), abs=1e-10)

    def test_batch_reductions(self, rng):
        scores = rng.standard_normal((5, 6))
        pos = np.array([0, 1, 2, 3, 4])
        rows = infonce_row_losses(scores, pos)
        assert infonce_loss_batch(scores, pos).item() == pytest.approx(rows.mean())
        assert infonce_loss_batch(scores, pos, "sum").item() == pytest.approx(rows.sum())
        for i in range(5):
            assert rows[i] == pytest.approx(infonce_loss(scores[i], int(pos[i])).item())

    def test_unknown_reduction(self):
        with pytest.raises(DomainError):
            infonce_loss_batch(np.zeros((2, 3)), 0, "max")

    def test_gradient_is_softmax_minus_one_hot(self, rng):
        scores = rng.standard_normal(7)
        tape = Tape()
        s = tape.watch(scores)
        grad = backward(infonce_loss(s, 4))[s.node].value
        expected = softmax(scores)
        expected[4] -= 1.0
        np.testing.assert_allclose(grad, expected, atol=1e-12)

    def test_bound(self):
        assert mi_lower_bound(np.log(8) - 0.25, 8) == pytest.approx(0.25)
        assert mi_lower_bound(0.0, 1) == 0.0

    def test_bound_rejects_empty_candidate_set(self):
        with pytest.raises(DomainError):
            mi_lower_bound(0.0, 0)


class TestOptimalPosterior:
    def test_matches_softmax_of_log_ratios(self, rng):
        for _ in range(1000):
            log_ratios = 3 * rng.standard_normal(rng.integers(1, 20))
            np.testing.assert_allclose(optimal_posterior(np.exp(log_ratios)), softmax(log_ratios),
                                       rtol=1e-12, atol=1e-15)

    def test_rejects_non_positive(self):
        with pytest.raises(DomainError):
            optimal_posterior([1.0, 0.0, 2.0])
        with pytest.raises(DomainError):
            optimal_posterior([])


class TestAccuracy:
    def test_strict_win_required(self):
        assert prediction_accuracy([0.0, 2.0, 1.0], 1) == 1.0
        assert prediction_accuracy([0.0, 2.0, 2.0], 1) == 0.0
        assert prediction_accuracy([3.0, 2.0, 1.0], 1) == 0.0

    def test_needs_a_negative(self):
        with pytest.raises(DomainError):
            prediction_accuracy([1.0], 0)

    def test_iid_scores_sit_at_chance(self, rng):
        draws, n = 10_000, 8
        accuracy = prediction_accuracy_batch(rng.standard_normal((draws, n)), 0)
        sigma = np.sqrt((1 / n) * (1 - 1 / n) / draws)
        assert abs(accuracy - 1 / n) <= 3 * sigma

    def test_batch_matches_rows(self, rng):
        scores = np.round(rng.standard_normal((50, 4)), 1)
        pos = rng.integers(4, size=50)
        expected = np.mean([prediction_accuracy(scores[i], int(pos[i])) for i in range(50)])
        assert prediction_accuracy_batch(scores, pos) == pytest.approx(expected)


# ===========================================================================
# MINE
# ===========================================================================

class TestMine:
    def test_split_scores(self):
        scores = np.arange(12.0).reshape(3, 4)
        pos, neg = split_scores(scores, np.array([0, 2, 3]))
        np.testing.assert_array_equal(pos, [0.0, 6.0, 11.0])
        np.testing.assert_array_equal(neg, [[1, 2, 3], [4, 5, 7], [8, 9, 10]])

    def test_independent_scores_give_zero(self):
        assert mine_estimate(np.zeros(4), np.zeros((4, 7))) == pytest.approx(0.0, abs=1e-12)

    def test_infonce_never_exceeds_mine_shifted(self, rng):
        # -L_N <= MINE - log(N - 1) for every batch
        n = 6
        for _ in range(10_000):
            scores = 4 * rng.standard_normal((3, n))
            pos = rng.integers(n, size=3)
            lhs = -infonce_row_losses(scores, pos).mean()
            rhs = mine_estimate(*split_scores(scores, pos)) - np.log(n - 1)
            assert lhs <= rhs + 1e-12

    def test_loss_is_negative_estimate(self, rng):
        scores = rng.standard_normal((4, 5))
        pos = np.array([0, 1, 2, 0])
        assert mine_loss(scores, pos).item() == pytest.approx(-mine_estimate(*split_scores(scores, pos)))

    def test_needs_negatives(self):
        with pytest.raises(DomainError):
            mine_loss(np.zeros((2, 1)), 0)
        with pytest.raises(DomainError):
            mine_estimate(np.zeros(2), np.zeros((3, 4)))


# ===========================================================================
# Negative sampling
# ===========================================================================

class TestStrategies:
    def test_labels(self):
        assert [s.label for s in Strategy] == ["Mixed speaker", "Same speaker", "Mixed speaker (excl.)",
                                               "Same speaker (excl.)", "Current sequence only"]

    @pytest.mark.parametrize("strategy,expected", [
        (Strategy.MIXED_SOURCE, range(30)),
        (Strategy.SAME_SOURCE, range(10)),
        (Strategy.MIXED_SOURCE_EXCLUDING_CURRENT, range(5, 30)),
        (Strategy.SAME_SOURCE_EXCLUDING_CURRENT, range(5, 10)),
        (Strategy.CURRENT_SEQUENCE_ONLY, range(5)),
    ])
    def test_eligible_frames(self, pool, strategy, expected):
        np.testing.assert_array_equal(pool.eligible(strategy, 0, 0), list(expected))

    @pytest.mark.parametrize("strategy", list(Strategy))
    def test_draws_respect_provenance_and_are_uniform(self, pool, strategy):
        rng = np.random.default_rng(7)
        drawn = draw_negatives(pool, strategy, 2, 1, 10_000, rng)
        assert np.all(strategy.admits(pool.sequence_ids[drawn], pool.source_ids[drawn], 2, 1))
        eligible = pool.eligible(strategy, 2, 1)
        counts = np.array([np.sum(drawn == f) for f in eligible])
        assert counts.sum() == 10_000
        assert chisquare(counts).pvalue > 1e-4

    def test_infeasible_strategy(self):
        pool = FramePool.from_sources([0, 1, 1], frames_per_sequence=4)
        with pytest.raises(StrategyInfeasibleError):
            sample_candidates(pool, Strategy.SAME_SOURCE_EXCLUDING_CURRENT, 1, 3, np.random.default_rng(0))

    def test_string_values_accepted(self, pool, rng):
        drawn = draw_negatives(pool, "current_sequence", 4, 2, 50, rng)
        assert np.all(pool.sequence_ids[drawn] == 4)


class TestSampleCandidates:
    @pytest.mark.parametrize("strategy", list(Strategy))
    def test_layout_and_provenance(self, pool, strategy):
        batch = sample_candidates(pool, strategy, horizon=2, num_candidates=5, rng=np.random.default_rng(3))
        assert isinstance(batch, ContrastiveBatch)
        assert len(batch) == 6 * 3 and batch.num_candidates == 5
        np.testing.assert_array_equal(batch.candidates[:, 0], batch.context_index + 2)
        np.testing.assert_array_equal(batch.sequence_ids[:, 0], batch.context_sequence)
        assert batch.check_provenance(strategy)

    def test_positive_index_elsewhere(self, pool, rng):
        batch = sample_candidates(pool, Strategy.MIXED_SOURCE, 1, 4, rng, positive_index=3)
        np.testing.assert_array_equal(batch.candidates[:, 3], batch.context_index + 1)
        np.testing.assert_array_equal(batch.negative_mask(), [True, True, True, False])

    def test_contexts_stay_inside_their_sequence(self, pool, rng):
        batch = sample_candidates(pool, Strategy.MIXED_SOURCE, 4, 2, rng)
        assert len(batch) == 6
        np.testing.assert_array_equal(batch.context_index % 5, 0)

    def test_horizon_beyond_sequence_gives_no_rows(self, pool, rng):
        assert len(sample_candidates(pool, Strategy.MIXED_SOURCE, 5, 3, rng)) == 0

    def test_single_candidate_has_no_negatives(self, pool, rng):
        batch = sample_candidates(pool, Strategy.CURRENT_SEQUENCE_ONLY, 1, 1, rng)
        assert batch.candidates.shape == (24, 1)

    def test_rejects_bad_counts(self, pool, rng):
        with pytest.raises(DomainError):
            sample_candidates(pool, Strategy.MIXED_SOURCE, 1, 0, rng)
        with pytest.raises(ShapeError):
            sample_candidates(pool, Strategy.MIXED_SOURCE, 1, 3, rng, positive_index=3)


# ===========================================================================
# Exhaustive discrete oracle
# ===========================================================================

def _brute_force_infonce(task, log_scores, n):
    joint = task.joint
    px, _ = task.marginals()
    total = 0.0
    for c in range(task.context_alphabet):
        for x in range(task.target_alphabet):
            for negs in itertools.product(range(task.target_alphabet), repeat=n - 1):
                weight = joint[x, c] * np.prod(px[list(negs)])
                row = log_scores[[x, *negs], c]
                total += weight * (np_logsumexp(row) - row[0])
    return total


class TestExhaustiveOracle:
    def test_matches_ordered_enumeration(self, rng):
        task = DiscreteJointTask(table=[[0.3, 0.1], [0.05, 0.25], [0.2, 0.1]])
        log_scores = rng.standard_normal((3, 2))
        for n in (2, 3, 4):
            assert expected_infonce_exhaustive(task, log_scores, n) == pytest.approx(
                _brute_force_infonce(task, log_scores, n), abs=1e-12)

    def test_single_candidate_is_zero(self, table_4x4):
        assert expected_infonce_exhaustive(table_4x4, oracle_log_scores(table_4x4), 1) == 0.0

    def test_shape_mismatch(self, table_4x4):
        with pytest.raises(ShapeError):
            expected_infonce_exhaustive(table_4x4, np.zeros((4, 3)), 3)

    def test_oracle_beats_other_scorers(self, table_4x4):
        oracle = oracle_log_scores(table_4x4)
        best = expected_infonce_exhaustive(table_4x4, oracle, 3)
        permuted = oracle[[1, 2, 3, 0], :]
        assert best < expected_infonce_exhaustive(table_4x4, permuted, 3)
        assert best < expected_infonce_exhaustive(table_4x4, np.zeros((4, 4)), 3)
        assert expected_infonce_exhaustive(table_4x4, np.zeros((4, 4)), 3) == pytest.approx(np.log(3))

    def test_bound_below_mi_and_tightening(self, table_4x4):
        oracle = oracle_log_scores(table_4x4)
        mi = true_mi(table_4x4)
        bounds = [mi_lower_bound(expected_infonce_exhaustive(table_4x4, oracle, n), n) for n in (2, 4, 8, 16)]
        assert all(b <= mi + 1e-12 for b in bounds)
        assert all(later > earlier for earlier, later in zip(bounds, bounds[1:]))

    def test_expected_accuracy(self, table_4x4):
        oracle = oracle_log_scores(table_4x4)
        accuracy = expected_accuracy_exhaustive(table_4x4, oracle, 4)
        assert 0.0 < accuracy < 1.0
        # constant scores always tie
        assert expected_accuracy_exhaustive(table_4x4, np.zeros((4, 4)), 4) == 0.0
        with pytest.raises(DomainError):
            expected_accuracy_exhaustive(table_4x4, oracle, 1)
