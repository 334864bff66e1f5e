"""
Tests for the synthetic tasks and their closed-form ground truth.
"""
import numpy as np
import pytest
from pydantic import ValidationError
from scipy.integrate import quad
from scipy.stats import norm

from errors import ConfigError, UnsupportedTaskError
from synthdata import (DiscreteJointTask, GaussianPairTask, LatentMarkovSequenceTask, grouped_sources,
                       log_density_ratio, sample_pairs, sample_sequences, stationary_distribution,
                       transition_matrix, true_density_ratio, true_mi)


# ===========================================================================
# Pair tasks
# ===========================================================================

class TestGaussianPairs:
    @pytest.mark.parametrize("rho", [0.0, 0.8, -0.5])
    def test_sample_correlation(self, rng, rho):
        x, c = sample_pairs(GaussianPairTask(rho=rho), 100_000, rng)
        assert x.shape == c.shape == (100_000, 1)
        assert np.corrcoef(x[:, 0], c[:, 0])[0, 1] == pytest.approx(rho, abs=0.01)

    def test_true_mi(self):
        assert true_mi(GaussianPairTask(rho=0.8)) == pytest.approx(0.5108256, rel=1e-6)
        assert true_mi(GaussianPairTask(dim=3, rho=0.8)) == pytest.approx(3 * 0.5108256, rel=1e-6)
        assert true_mi(GaussianPairTask(rho=0.0)) == 0.0

    def test_independent_ratio_is_one(self, rng):
        x, c = rng.standard_normal(50), rng.standard_normal(50)
        np.testing.assert_allclose(true_density_ratio(GaussianPairTask(rho=0.0), x, c), 1.0)

    def test_ratio_integrates_to_one(self):
        task = GaussianPairTask(rho=0.8)
        for c in (-1.3, 0.0, 0.7):
            total, _ = quad(lambda x: norm.pdf(x) * float(true_density_ratio(task, x, c)), -np.inf, np.inf)
            assert total == pytest.approx(1.0, abs=1e-6)

    def test_log_ratio_broadcasts(self, rng):
        task = GaussianPairTask(dim=2, rho=0.5)
        x, c = rng.standard_normal((4, 2)), rng.standard_normal((3, 2))
        grid = log_density_ratio(task, x[None, :, :], c[:, None, :])
        assert grid.shape == (3, 4)
        assert grid[2, 1] == pytest.approx(float(log_density_ratio(task, x[1], c[2])))

    def test_rho_must_be_inside_unit_interval(self):
        with pytest.raises(ValidationError):
            GaussianPairTask(rho=1.0)


class TestDiscreteJoint:
    def test_frequencies(self, rng):
        task = DiscreteJointTask()
        n = 100_000
        x, c = sample_pairs(task, n, rng)
        counts = np.zeros((2, 2))
        np.add.at(counts, (x, c), 1)
        p = task.joint
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) < 4 * sigma)

    def test_true_mi(self):
        assert true_mi(DiscreteJointTask()) == pytest.approx(0.1927, abs=1e-4)

    def test_mi_bounded_by_alphabets(self, rng):
        for _ in range(20):
            joint = rng.dirichlet(np.ones(12)).reshape(3, 4) + 1e-6
            task = DiscreteJointTask(table=(joint / joint.sum()).tolist())
            assert 0.0 <= true_mi(task) <= np.log(3) + 1e-12

    def test_independent_table_has_zero_mi(self):
        task = DiscreteJointTask(table=np.outer([0.25, 0.75], [0.5, 0.3, 0.2]).tolist())
        assert true_mi(task) == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(true_density_ratio(task, np.array([0, 1]), np.array([2, 0])), 1.0)

    def test_oracle_ratio(self):
        task = DiscreteJointTask()
        assert float(true_density_ratio(task, 0, 0)) == pytest.approx(0.4 / 0.25)

    @pytest.mark.parametrize("table", [[[0.5, 0.5], [0.0, 0.0]], [[0.5, 0.6]], [[0.5], [0.25, 0.25]], []])
    def test_invalid_tables(self, table):
        with pytest.raises(ValidationError):
            DiscreteJointTask(table=table)

    def test_markov_has_no_closed_form(self):
        with pytest.raises(UnsupportedTaskError):
            true_mi(LatentMarkovSequenceTask())

    def test_sample_count_must_be_positive(self, rng):
        with pytest.raises(ConfigError):
            sample_pairs(DiscreteJointTask(), 0, rng)


# ===========================================================================
# Latent Markov sequences
# ===========================================================================

class TestMarkovSequences:
    def test_transition_matrix(self):
        matrix = transition_matrix(LatentMarkovSequenceTask(num_states=5, p_stay=0.8))
        np.testing.assert_allclose(matrix.sum(axis=1), 1.0)
        np.testing.assert_allclose(np.diag(matrix), 0.8)

    def test_stationary_distribution(self):
        task = LatentMarkovSequenceTask(num_states=6, p_stay=0.7)
        pi = stationary_distribution(task)
        np.testing.assert_allclose(pi @ transition_matrix(task), pi, atol=1e-12)
        np.testing.assert_allclose(pi, np.full(6, 1 / 6), atol=1e-12)

    def test_shapes_and_label_ranges(self, rng):
        task = LatentMarkovSequenceTask(num_states=5, num_sources=3, obs_dim=4, length=50)
        batch = sample_sequences(task, 7, rng)
        assert batch.observations.shape == (7, 50, 4)
        assert batch.states.shape == (7, 50) and batch.sources.shape == (7,)
        assert batch.states.min() >= 0 and batch.states.max() < 5
        np.testing.assert_array_equal(batch.labels("source-id")[:, 0], batch.sources)

    def test_mean_dwell_time(self, rng):
        task = LatentMarkovSequenceTask(num_states=4, p_stay=0.95, obs_dim=2, length=5000)
        states = sample_sequences(task, 20, rng).states
        runs = []
        for row in states:
            boundaries = np.flatnonzero(np.diff(row)) + 1
            # drop the runs cut by the sequence ends
            runs.extend(np.diff(boundaries).tolist())
        assert np.mean(runs) == pytest.approx(task.expected_dwell, rel=0.1)

    def test_occupancy_matches_stationary(self, rng):
        task = LatentMarkovSequenceTask(num_states=8, p_stay=0.9, obs_dim=2, length=500)
        states = sample_sequences(task, 200, rng).states
        occupancy = np.bincount(states.ravel(), minlength=8) / states.size
        lam = task.p_stay - (1 - task.p_stay) / (task.num_states - 1)
        pi = stationary_distribution(task)
        sigma = np.sqrt(pi * (1 - pi) * (1 + lam) / (1 - lam) / states.size)
        assert np.all(np.abs(occupancy - pi) < 4 * sigma)

    def test_noiseless_observations_identify_state(self, rng):
        task = LatentMarkovSequenceTask(num_states=6, num_sources=1, noise=0.0, length=40)
        batch = sample_sequences(task, 5, rng)
        embeddings, offsets = task.embeddings()
        np.testing.assert_allclose(batch.observations, embeddings[batch.states] + offsets[0])

    def test_source_offsets_shift_observations(self, rng):
        task = LatentMarkovSequenceTask(num_states=1, num_sources=2, noise=0.0, length=12)
        batch = sample_sequences(task, 2, rng, sources=np.array([0, 1]))
        _, offsets = task.embeddings()
        shift = batch.observations[1] - batch.observations[0]
        np.testing.assert_allclose(shift, np.tile(offsets[1] - offsets[0], (12, 1)))

    def test_reproducible(self):
        task = LatentMarkovSequenceTask(length=64)
        a = sample_sequences(task, 3, np.random.default_rng(5))
        b = sample_sequences(task, 3, np.random.default_rng(5))
        assert np.array_equal(a.observations, b.observations) and np.array_equal(a.states, b.states)

    def test_bad_sources(self, rng):
        task = LatentMarkovSequenceTask(num_sources=2, length=16)
        with pytest.raises(ConfigError):
            sample_sequences(task, 2, rng, sources=np.array([0, 2]))

    def test_unknown_target(self, rng):
        batch = sample_sequences(LatentMarkovSequenceTask(length=16), 1, rng)
        with pytest.raises(ConfigError):
            batch.labels("speaker")

    def test_grouped_sources(self, rng):
        task = LatentMarkovSequenceTask(num_sources=10)
        sources = grouped_sources(task, 8, 2, rng)
        assert sources.shape == (8,)
        for i in range(0, 8, 2):
            assert sources[i] == sources[i + 1]
        assert len(set(sources[::2].tolist())) == 4
