"""Set-level voting rules, checked against an independent brute-force oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from setdefense.pipeline import McPosterior
from setdefense.voting import (TIE_LOWEST_INDEX, TIE_MEAN_POSTERIOR, VotingConfig,
                               VotingError, exp_weighted_vote, majority_vote,
                               soft_vote, vote)


# ---------------------------------------------------------------------------
# independent brute-force oracle: literal per-element loops, no vectorization


def _oracle_tie_break(candidates, mean_per_image, config):
    if len(candidates) == 1 or config.tie_break == TIE_LOWEST_INDEX:
        return min(candidates)
    best, best_sum = None, None
    for c in sorted(candidates):
        total = sum(mean_per_image[i][c] for i in range(len(mean_per_image)))
        if best_sum is None or total > best_sum:
            best, best_sum = c, total
    return best


def oracle_majority(per_pass, config):
    T, d, C = per_pass.shape
    mean = [[sum(per_pass[t][i][c] for t in range(T)) / T for c in range(C)]
            for i in range(d)]
    counts = [0] * C
    for i in range(d):
        counts[max(range(C), key=lambda c: (mean[i][c], -c))] += 1
    top = max(counts)
    return _oracle_tie_break([c for c in range(C) if counts[c] == top], mean, config)


def oracle_soft(per_pass, config):
    T, d, C = per_pass.shape
    mean = [[sum(per_pass[t][i][c] for t in range(T)) / T for c in range(C)]
            for i in range(d)]
    per_pass_class_mean = [[sum(per_pass[t][i][c] for i in range(d)) / d
                            for c in range(C)] for t in range(T)]
    best = max(per_pass_class_mean[t][c] for t in range(T) for c in range(C))
    winners = {c for t in range(T) for c in range(C)
               if per_pass_class_mean[t][c] == best}
    return _oracle_tie_break(sorted(winners), mean, config)


def oracle_ewv(per_pass, config):
    T, d, C = per_pass.shape
    mean = [[sum(per_pass[t][i][c] for t in range(T)) / T for c in range(C)]
            for i in range(d)]
    weights = [sum(np.exp(-config.beta * mean[i][c]) for i in range(d))
               for c in range(C)]
    top = max(weights)
    return _oracle_tie_break([c for c in range(C) if weights[c] == top], mean, config)


def posterior_from(per_pass):
    per_pass = np.asarray(per_pass, dtype=np.float64)
    return McPosterior(per_pass, per_pass.mean(axis=0))


def random_posterior(rng, T=None, d=None, C=None):
    T = T or int(rng.integers(1, 6))
    d = d or int(rng.integers(1, 8))
    C = C or int(rng.integers(2, 7))
    raw = rng.random((T, d, C))
    return posterior_from(raw / raw.sum(axis=2, keepdims=True))


def single_image_posterior(probs):
    """T=1, d=1 posterior from one probability row."""
    return posterior_from(np.asarray(probs)[None, None, :])


class TestMajorityVote:
    def test_mode_of_argmaxes(self):
        # rows argmax to {0, 0, 1}
        per_pass = np.array([[[0.8, 0.2], [0.6, 0.4], [0.1, 0.9]]])
        assert majority_vote(posterior_from(per_pass)) == 0

    def test_single_image_equals_argmax(self):
        assert majority_vote(single_image_posterior([0.2, 0.7, 0.1])) == 1

    def test_tie_broken_by_summed_mean_posterior(self):
        # argmaxes {0, 1}; summed posteriors 1.7 vs 1.1 are impossible with
        # rows summing to 1 in 2 classes, so use 3 classes carrying the same
        # 1.7-vs-1.1 comparison between the tied classes 0 and 1
        per_pass = np.array([[[0.9, 0.05, 0.05], [0.8, 0.15, 0.05],
                              [0.0, 0.9, 0.1]]])
        post = posterior_from(per_pass)
        summed = post.mean_per_image.sum(axis=0)
        assert summed[0] == pytest.approx(1.7)
        assert summed[1] == pytest.approx(1.1)
        assert majority_vote(post) == 0

    def test_tie_lowest_index(self):
        per_pass = np.array([[[0.9, 0.1], [0.1, 0.9]]])
        config = VotingConfig(tie_break=TIE_LOWEST_INDEX)
        assert majority_vote(posterior_from(per_pass), config) == 0


class TestSoftVote:
    def test_single_pass_single_image(self):
        assert soft_vote(single_image_posterior([0.1, 0.3, 0.6])) == 2

    def test_global_max_over_passes(self):
        # pass1 per-class means (0.8, 0.2), pass2 (0.3, 0.7): max 0.8 at class 0
        per_pass = np.array([[[0.8, 0.2]], [[0.3, 0.7]]])
        assert soft_vote(posterior_from(per_pass)) == 0

    def test_uniform_everywhere_resolves_to_lowest_index(self):
        per_pass = np.full((3, 4, 5), 0.2)
        config = VotingConfig(tie_break=TIE_LOWEST_INDEX)
        assert soft_vote(posterior_from(per_pass), config) == 0

    def test_confidence_dominance(self, rng):
        # one class strictly above every other entry in every pass
        for _ in range(50):
            post = random_posterior(rng)
            T, d, C = post.per_pass.shape
            winner = int(rng.integers(C))
            boosted = post.per_pass * 0.3
            boosted[:, :, winner] += 0.7
            boosted /= boosted.sum(axis=2, keepdims=True)
            assert soft_vote(posterior_from(boosted)) == winner


class TestExpWeightedVote:
    def test_beta_zero_all_weights_equal(self):
        post = single_image_posterior([0.7, 0.3])
        config = VotingConfig(beta=0.0, tie_break=TIE_LOWEST_INDEX)
        assert exp_weighted_vote(post, config) == 0

    def test_beta_minus_one_scalar_example(self):
        post = single_image_posterior([0.7, 0.3])
        outcome = vote(post, VotingConfig(beta=-1.0))
        assert outcome.ewv_scores[0] == pytest.approx(np.exp(0.7), abs=1e-12)
        assert outcome.ewv_scores[1] == pytest.approx(np.exp(0.3), abs=1e-12)
        assert outcome.ewv_scores[0] == pytest.approx(2.0138, abs=1e-4)
        assert outcome.ewv_scores[1] == pytest.approx(1.3499, abs=1e-4)
        assert outcome.ewv == 0

    def test_negative_beta_single_image_matches_argmax(self, rng):
        for _ in range(100):
            raw = rng.random(4)
            post = single_image_posterior(raw / raw.sum())
            assert exp_weighted_vote(post, VotingConfig(beta=-2.5)) == \
                int(np.argmax(post.mean_per_image[0]))

    def test_beta_bound_enforced(self):
        with pytest.raises(VotingError):
            VotingConfig(beta=501.0)
        with pytest.raises(VotingError):
            VotingConfig(beta=float("nan"))

    def test_unknown_tie_break_rejected(self):
        with pytest.raises(VotingError):
            VotingConfig(tie_break="coin-flip")


class TestOracleAgreement:
    @pytest.mark.parametrize("tie_break", [TIE_MEAN_POSTERIOR, TIE_LOWEST_INDEX])
    def test_random_posteriors_match_brute_force(self, tie_break):
        rng = np.random.default_rng(777)
        config = VotingConfig(beta=-1.0, tie_break=tie_break)
        for i in range(300):
            post = random_posterior(rng)
            if i % 5 == 0:  # force exact ties by duplicating class columns
                pp = post.per_pass.copy()
                pp[:, :, 1] = pp[:, :, 0]
                pp /= pp.sum(axis=2, keepdims=True)
                post = posterior_from(pp)
            assert majority_vote(post, config) == oracle_majority(post.per_pass, config)
            assert soft_vote(post, config) == oracle_soft(post.per_pass, config)
            assert exp_weighted_vote(post, config) == oracle_ewv(post.per_pass, config)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    post = random_posterior(rng)
    perm = rng.permutation(post.per_pass.shape[1])
    shuffled = posterior_from(post.per_pass[:, perm, :])
    config = VotingConfig()
    assert majority_vote(post, config) == majority_vote(shuffled, config)
    assert soft_vote(post, config) == soft_vote(shuffled, config)
    assert exp_weighted_vote(post, config) == exp_weighted_vote(shuffled, config)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(2, 4))
def test_duplication_invariance_mv_ewv(seed, k):
    rng = np.random.default_rng(seed)
    post = random_posterior(rng)
    duplicated = posterior_from(np.repeat(post.per_pass, k, axis=1))
    config = VotingConfig()
    assert majority_vote(post, config) == majority_vote(duplicated, config)
    assert exp_weighted_vote(post, config) == exp_weighted_vote(duplicated, config)


def test_vote_outcome_scores_are_consistent(rng):
    post = random_posterior(rng)
    outcome = vote(post)
    assert outcome.mv == majority_vote(post)
    assert outcome.sv == soft_vote(post)
    assert outcome.ewv == exp_weighted_vote(post)
    C = post.per_pass.shape[2]
    assert outcome.mv_scores.shape == (C,)
    assert outcome.sv_scores.shape == (C,)
    assert outcome.ewv_scores.shape == (C,)
    assert outcome.mv_scores.sum() == post.per_pass.shape[1]
