"""Exact softmax and Plackett-Luce sampling by rejection against a top-K envelope."""

import itertools

import numpy as np
import pytest

from slate_forge import EmbeddingMatrix, LinearParams, RngStream
from slate_forge.mips import ExactIndex, build_approx
from slate_forge.policy import PlackettLuce
from slate_forge.rejection import RejectionStats, rejection_sample_categorical, rejection_sample_pl_slate

import oracles


def _softmax(s):
    p = np.exp(s - s.max())
    return p / p.sum()


def _instance(P, L, seed):
    rng = np.random.default_rng(seed)
    return EmbeddingMatrix.from_items(rng.normal(size=(P, L))), rng.normal(size=L)


class TestCategorical:
    def test_flat_scores_uniform(self):
        beta = EmbeddingMatrix.from_items(np.random.default_rng(0).normal(size=(100, 4)))
        draws, stats = rejection_sample_categorical(beta, np.zeros(4), 10, rng=RngStream(0), n=100_000)
        # every tail proposal is accepted and the head has no mass
        assert stats.accepted == stats.proposed == stats.tail_hits == 100_000
        counts = np.bincount(draws, minlength=100)
        assert oracles.chi2_pvalue(counts, np.full(100, 0.01)) > 1e-3

    @pytest.mark.slow
    def test_total_variation_p1000(self):
        beta, h = _instance(1000, 16, 0)
        draws, _ = rejection_sample_categorical(beta, h, 32, rng=RngStream(1), n=1_000_000)
        freq = np.bincount(draws, minlength=1000) / 1_000_000
        assert 0.5 * np.abs(freq - _softmax(beta.items @ h)).sum() < 0.01

    def test_envelope_of_all_actions(self):
        beta, h = _instance(20, 3, 2)
        draws, _ = rejection_sample_categorical(beta, h, 20, rng=RngStream(2), n=100_000)
        counts = np.bincount(draws, minlength=20)
        assert oracles.chi2_pvalue(counts, _softmax(beta.items @ h)) > 1e-3

    def test_small_envelope_exact(self):
        beta, h = _instance(50, 3, 3)
        draws, _ = rejection_sample_categorical(beta, h, 1, rng=RngStream(3), n=100_000)
        counts = np.bincount(draws, minlength=50)
        assert oracles.chi2_pvalue(counts, _softmax(beta.items @ h)) > 1e-3

    def test_single_draw(self):
        beta, h = _instance(30, 3, 4)
        a, stats = rejection_sample_categorical(beta, h, 5, rng=RngStream(4))
        assert isinstance(a, int) and 0 <= a < 30
        assert stats.accepted == 1

    def test_envelope_larger_than_catalogue(self):
        beta, h = _instance(5, 2, 0)
        with pytest.raises(ValueError):
            rejection_sample_categorical(beta, h, 6)

    def test_efficiency_improves_with_envelope(self):
        beta, h = _instance(2000, 8, 5)
        rates = []
        for K_env in (1, 4, 16, 64, 256):
            _, stats = rejection_sample_categorical(beta, h, K_env, rng=RngStream(6), n=50_000)
            rates.append(stats.proposals_per_accept)
        assert all(a > b for a, b in zip(rates, rates[1:]))

    def test_graph_index_envelope(self):
        beta, h = _instance(800, 8, 7)
        index = build_approx(beta, rng=0)
        draws, _ = rejection_sample_categorical(beta, h, 16, index=index, rng=RngStream(7), n=100_000)
        counts = np.bincount(draws, minlength=800)
        assert oracles.chi2_pvalue(counts, _softmax(beta.items @ h)) > 1e-3


class _WorstIndex:
    """Returns the lowest-scoring actions, so the envelope is wrong."""

    def __init__(self, beta):
        self.beta = beta

    def query(self, h, K):
        return ExactIndex(self.beta).query(-np.asarray(h), K)


class TestStrictFallback:
    def test_violation_restarts_with_exact_index(self):
        beta, h = _instance(40, 3, 8)
        draws, stats = rejection_sample_categorical(beta, h, 4, index=_WorstIndex(beta), rng=RngStream(8),
                                                    n=50_000)
        assert stats.fallbacks == 1
        counts = np.bincount(draws, minlength=40)
        assert oracles.chi2_pvalue(counts, _softmax(beta.items @ h)) > 1e-3

    def test_slate_fallback(self):
        beta, h = _instance(40, 3, 9)
        _, stats = rejection_sample_pl_slate(beta, h, 2, 4, index=_WorstIndex(beta), rng=RngStream(9), n=1000)
        assert stats.fallbacks == 1


class TestSlates:
    def test_chi_square_p5_k2(self):
        beta, h = _instance(5, 2, 10)
        pl = PlackettLuce(beta, LinearParams(np.eye(2)), 2)
        keys = list(itertools.permutations(range(5), 2))
        slates, _ = rejection_sample_pl_slate(beta, h, 2, 2, rng=RngStream(10), n=100_000)
        counts = oracles.slate_counts(slates, keys)
        probs = np.exp(pl.log_prob(h, np.array(keys)))
        assert oracles.chi2_pvalue(counts, probs) > 1e-3

    def test_single_slot_equals_categorical(self):
        beta, h = _instance(60, 4, 11)
        a, _ = rejection_sample_pl_slate(beta, h, 1, 8, rng=RngStream(11), n=5000)
        b, _ = rejection_sample_categorical(beta, h, 8, rng=RngStream(11), n=5000)
        np.testing.assert_array_equal(a[:, 0], b)

    def test_dominant_action_first(self):
        beta = EmbeddingMatrix.from_items(np.array([[0.0], [0.0], [1e6], [0.0], [0.0]]))
        slates, _ = rejection_sample_pl_slate(beta, np.ones(1), 3, 2, rng=RngStream(12), n=20_000)
        assert np.mean(slates[:, 0] == 2) > 0.999
        assert all(len(set(s)) == 3 for s in slates.tolist())

    def test_distinct_actions(self):
        beta, h = _instance(30, 3, 13)
        slates, stats = rejection_sample_pl_slate(beta, h, 6, 4, rng=RngStream(13), n=2000)
        assert all(len(set(s)) == 6 for s in slates.tolist())
        assert stats.accepted == 6 * 2000 <= stats.proposed


class TestStats:
    def test_accepted_bounded_by_proposed(self):
        with pytest.raises(ValueError):
            RejectionStats(accepted=2, proposed=1)

    def test_merge(self):
        a = RejectionStats(1, 3, 1, 0)
        a.merge(RejectionStats(2, 2, 0, 2))
        assert (a.accepted, a.proposed, a.proposals_per_accept) == (3, 5, 5 / 3)
